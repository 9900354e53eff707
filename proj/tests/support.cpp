#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "cpd/ops.hpp"

namespace cpd::testing {

namespace {

struct Slot {
  std::string id;
  bool image = false;  // nchw, else ntc
  std::int64_t channels = 0;
  std::int64_t h = 1, w = 1;  // image extent
  std::int64_t t = 1;         // tokens
};

class DagBuilder {
 public:
  DagBuilder(std::mt19937_64& rng, const DagLimits& lim) : rng_(rng), lim_(lim) {}

  std::string build() {
    if (coin(0.5)) {
      add_line("x = input() {layout=nchw,channels=" + std::to_string(pick({2, 4, 6})) + ",h=2,w=2}", {"x", true, 0, 2, 2, 1});
      slots_.back().channels = attr_of(lines_.back(), "channels");
      const int n = 1 + static_cast<int>(rng_() % 6);
      for (int i = 0; i < n; ++i) image_step();
      if (coin(0.25)) {
        const auto s = any(true);
        const auto f = fresh("flat");
        add_line(f + " = flatten(" + s.id + ")", {f, false, s.channels * s.h * s.w, 1, 1, 0});
        use(s.id);
        if (stops_ < lim_.max_stops) {
          const auto l = fresh("fc");
          add_line(l + " = linear(" + f + ") {channels=" + std::to_string(pick({2, 4})) + "}", {l, false, 0, 1, 1, 0});
          slots_.back().channels = attr_of(lines_.back(), "channels");
          use(f);
          ++stops_;
        }
      }
      const auto s = any(true);
      const auto t = fresh("tok");
      add_line(t + " = tokens(" + s.id + ")", {t, false, s.channels, 1, 1, s.h * s.w});
      use(s.id);
    } else {
      add_line("x = input() {layout=ntc,channels=" + std::to_string(pick({2, 4, 6})) + ",t=4}", {"x", false, 0, 1, 1, 4});
      slots_.back().channels = attr_of(lines_.back(), "channels");
    }
    const int n = 2 + static_cast<int>(rng_() % 8);
    for (int i = 0; i < n; ++i) token_step();
    std::ostringstream os;
    for (const auto& l : lines_) os << l << '\n';
    int k = 0;
    for (const auto& s : slots_)
      if (!used_.count(s.id)) os << "out" << k++ << " = output(" << s.id << ")\n";
    return os.str();
  }

 private:
  bool coin(double p) { return std::uniform_real_distribution<double>(0, 1)(rng_) < p; }
  std::int64_t pick(std::vector<std::int64_t> v) { return v[rng_() % v.size()]; }
  std::string fresh(const std::string& stem) { return stem + std::to_string(counter_++); }
  static std::int64_t attr_of(const std::string& line, const std::string& key) {
    const auto p = line.find(key + "=");
    return std::stoll(line.substr(p + key.size() + 1));
  }
  void add_line(std::string line, Slot s) {
    lines_.push_back(std::move(line));
    slots_.push_back(std::move(s));
  }
  void use(const std::string& id) { used_.insert(id); }
  // flatten outputs (t == 0) are kept out of the token stage
  Slot any(bool image) {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (slots_[i].image == image && slots_[i].t > 0) c.push_back(i);
    return slots_[c[rng_() % c.size()]];
  }
  std::optional<Slot> partner(const Slot& a, bool same_channels, bool same_extent) {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      const auto& s = slots_[i];
      if (s.id == a.id || s.image != a.image || s.t == 0) continue;
      if (same_channels && s.channels != a.channels) continue;
      if (same_extent && (s.h != a.h || s.w != a.w || s.t != a.t)) continue;
      c.push_back(i);
    }
    if (c.empty()) return std::nullopt;
    return slots_[c[rng_() % c.size()]];
  }
  bool can_stop(int n = 1) const { return stops_ + n <= lim_.max_stops; }
  bool can_couple(int n = 1) const { return couplings_ + n <= lim_.max_couplings; }

  // conv with matching channels and extent so an add/concat has a partner
  Slot make_partner(const Slot& a) {
    const auto id = fresh(a.image ? "cp" : "lp");
    if (a.image) {
      // a 1x1 conv keeps the extent of its input; find one with a's extent
      const Slot* s = nullptr;
      for (const auto& c : slots_)
        if (c.image && c.h == a.h && c.w == a.w && c.t > 0) s = &c;
      const auto from = s->id;
      add_line(id + " = conv(" + from + ") {channels=" + std::to_string(a.channels) + ",kernel=1}",
               {id, true, a.channels, a.h, a.w, 1});
      use(from);
    } else {
      const Slot* s = nullptr;
      for (const auto& c : slots_)
        if (!c.image && c.t == a.t && c.t > 0) s = &c;
      const auto from = s->id;
      add_line(id + " = linear(" + from + ") {channels=" + std::to_string(a.channels) + "}", {id, false, a.channels, 1, 1, a.t});
      use(from);
    }
    ++stops_;
    return slots_.back();
  }

  void image_step() {
    const Slot a = any(true);
    const int kind = static_cast<int>(rng_() % 7);
    if (kind <= 1 && can_stop()) {
      const auto id = fresh("conv");
      std::int64_t groups = 1;
      auto ch = pick({2, 4, 6});
      if (coin(0.3) && a.channels % 2 == 0) {
        groups = 2;
        ch = pick({2, 4, 6});
      }
      const auto k = pick({1, 3});
      add_line(id + " = conv(" + a.id + ") {channels=" + std::to_string(ch) + ",kernel=" + std::to_string(k) +
                   ",groups=" + std::to_string(groups) + "}",
               {id, true, ch, a.h, a.w, 1});
      use(a.id);
      ++stops_;
    } else if (kind == 2 && can_stop() && a.channels >= 2) {
      const auto id = fresh("dw");
      add_line(id + " = conv(" + a.id + ") {channels=" + std::to_string(a.channels) + ",groups=" +
                   std::to_string(a.channels) + "}",
               {id, true, a.channels, a.h, a.w, 1});
      use(a.id);
      ++stops_;
    } else if (kind == 3 && can_couple()) {
      auto b = partner(a, true, true);
      if (!b && can_stop()) b = make_partner(a);
      if (!b) return;
      const auto id = fresh("add");
      const auto bid = b->id;
      add_line(id + " = add(" + a.id + ", " + bid + ")", {id, true, a.channels, a.h, a.w, 1});
      use(a.id);
      use(bid);
      ++couplings_;
    } else if (kind == 4 && can_couple()) {
      const auto b = partner(a, false, true);
      if (!b) return;
      const auto id = fresh("cat");
      add_line(id + " = concat(" + a.id + ", " + b->id + ")", {id, true, a.channels + b->channels, a.h, a.w, 1});
      use(a.id);
      use(b->id);
      ++couplings_;
    } else if (kind == 5 && can_couple()) {
      // stack along height: channels must agree
      const auto b = partner(a, true, false);
      if (!b || b->w != a.w) return;
      const auto id = fresh("vcat");
      add_line(id + " = concat(" + a.id + ", " + b->id + ") {axis=2}", {id, true, a.channels, a.h + b->h, a.w, 1});
      use(a.id);
      use(b->id);
      ++couplings_;
    } else {
      const auto id = fresh("act");
      const bool norm = coin(0.4);
      add_line(id + (norm ? " = norm(" : " = relu(") + a.id + ")", {id, true, a.channels, a.h, a.w, 1});
      use(a.id);
    }
  }

  void token_step() {
    const Slot a = any(false);
    const int kind = static_cast<int>(rng_() % 8);
    if (kind <= 1 && can_stop()) {
      const auto id = fresh("lin");
      const auto ch = pick({2, 4, 6});
      add_line(id + " = linear(" + a.id + ") {channels=" + std::to_string(ch) + "}", {id, false, ch, 1, 1, a.t});
      use(a.id);
      ++stops_;
    } else if (kind == 2 && can_couple()) {
      auto b = partner(a, true, true);
      if (!b && can_stop()) b = make_partner(a);
      if (!b) return;
      const auto id = fresh("add");
      const auto bid = b->id;
      add_line(id + " = add(" + a.id + ", " + bid + ")", {id, false, a.channels, 1, 1, a.t});
      use(a.id);
      use(bid);
      ++couplings_;
    } else if (kind == 3 && can_couple()) {
      const bool tokens = coin(0.4);
      const auto b = tokens ? partner(a, true, false) : partner(a, false, true);
      if (!b || (!tokens && b->t != a.t)) return;
      const auto id = fresh("cat");
      if (tokens)
        add_line(id + " = concat(" + a.id + ", " + b->id + ") {axis=1}", {id, false, a.channels, 1, 1, a.t + b->t});
      else
        add_line(id + " = concat(" + a.id + ", " + b->id + ")", {id, false, a.channels + b->channels, 1, 1, a.t});
      use(a.id);
      use(b->id);
      ++couplings_;
    } else if (kind == 4 && can_couple(2) && can_stop(3)) {
      // attention: q, k, v projections of `a`, scores, softmax, mix
      const std::int64_t heads = coin(0.5) ? 2 : 1;
      const auto c = 2 * pick({1, 2, 3});
      const auto cv = 2 * pick({1, 2});
      const auto q = fresh("q"), k = fresh("k"), v = fresh("v"), kt = fresh("kt"), sc = fresh("scores"),
                 sm = fresh("attn"), mx = fresh("mix");
      add_line(q + " = linear(" + a.id + ") {channels=" + std::to_string(c) + "}", {q, false, c, 1, 1, a.t});
      add_line(k + " = linear(" + a.id + ") {channels=" + std::to_string(c) + "}", {k, false, c, 1, 1, a.t});
      add_line(v + " = linear(" + a.id + ") {channels=" + std::to_string(cv) + "}", {v, false, cv, 1, 1, a.t});
      add_line(kt + " = transpose(" + k + ")", {kt, false, c, 1, 1, 0});
      add_line(sc + " = matmul(" + q + ", " + kt + ") {heads=" + std::to_string(heads) + "}",
               {sc, false, a.t, 1, 1, 0});
      add_line(sm + " = softmax(" + sc + ")", {sm, false, a.t, 1, 1, 0});
      add_line(mx + " = matmul(" + sm + ", " + v + ") {heads=" + std::to_string(heads) + "}", {mx, false, cv, 1, 1, a.t});
      for (const auto& u : {a.id, q, k, v, kt, sc, sm}) use(u);
      stops_ += 3;
      couplings_ += 2;
    } else if (kind == 5 && coin(0.5)) {
      const auto id = fresh("pos");
      const auto s = fresh("emb");
      add_line(id + " = param() {layout=ntc,channels=" + std::to_string(a.channels) + ",t=" + std::to_string(a.t) + "}",
               {id, false, a.channels, 1, 1, a.t});
      if (can_couple()) {
        add_line(s + " = add(" + a.id + ", " + id + ")", {s, false, a.channels, 1, 1, a.t});
        use(a.id);
        use(id);
        ++couplings_;
      }
    } else {
      const auto id = fresh("act");
      const int which = static_cast<int>(rng_() % 3);
      const char* op = which == 0 ? " = gelu(" : which == 1 ? " = norm(" : " = relu(";
      add_line(id + op + a.id + ")", {id, false, a.channels, 1, 1, a.t});
      use(a.id);
    }
  }

  std::mt19937_64& rng_;
  DagLimits lim_;
  std::vector<std::string> lines_;
  std::vector<Slot> slots_;
  std::set<std::string> used_;
  int stops_ = 0;
  int couplings_ = 0;
  int counter_ = 0;
};

// What a channel entering input `slot` of `n` does there.
enum class Hop { Consume, Link, Couple, Carry, Ride, Freeze, ScoreMatmul, MixValue, End };

Hop hop_of(const Graph& g, const OpNode& n, int slot) {
  const auto& in = g.input_node(n, static_cast<std::size_t>(slot));
  if (n.type == OpType::Linear) return Hop::Consume;
  if (n.type == OpType::Conv) {
    const auto groups = n.attr_int("groups", 1);
    return groups > 1 && groups == in.out_channels && groups == n.out_channels ? Hop::Link : Hop::Consume;
  }
  if (n.type == OpType::Add) return Hop::Couple;
  if (n.type == OpType::Concat) return n.attr_int("axis") == in.channel_axis() ? Hop::Carry : Hop::Couple;
  if (n.type == OpType::MatMul) {
    if (g.input_node(n, 1).layout == Layout::NCT) return Hop::ScoreMatmul;
    return slot == 0 ? Hop::Freeze : Hop::MixValue;
  }
  if (n.type == OpType::Norm || n.type == OpType::Softmax) return Hop::Ride;
  if (n.type == OpType::Output || n.type == OpType::CrossEntropy) return Hop::Freeze;
  if (n.type == OpType::Input || n.type == OpType::Param) return Hop::End;
  return Hop::Carry;
}

struct PathState {
  std::set<std::string> nodes;
  std::set<std::string> elements;  // coupling ops and depthwise links
  std::set<std::tuple<std::string, int, std::int64_t, std::int64_t>> consumers;
  std::set<std::tuple<std::string, std::int64_t, std::int64_t>> riders;
  std::int64_t unit = 1;
  bool frozen = false;
};

// Follows every path (no memoization) from node u carrying a channel slice.
void enumerate(const Graph& g, std::size_t u, std::int64_t offset, std::int64_t block, std::int64_t channels, PathState& st) {
  for (const auto& [v, slot] : g.users(u)) {
    const OpNode& n = g.node(v);
    const auto& in = g.input_node(n, static_cast<std::size_t>(slot));
    st.nodes.insert(n.id);
    auto balanced = [&](std::int64_t k) {
      if (k <= 1) return;
      if (offset != 0 || block != 1 || in.out_channels != channels)
        st.frozen = true;
      else
        st.unit = std::lcm(st.unit, k);
    };
    switch (hop_of(g, n, slot)) {
      case Hop::Consume:
        st.consumers.insert({n.id, slot, offset, block});
        if (n.type == OpType::Conv) balanced(n.attr_int("groups", 1));
        break;
      case Hop::Link:
        st.elements.insert(n.id);
        break;
      case Hop::Couple:
        st.elements.insert(n.id);
        enumerate(g, v, offset, block, channels, st);
        break;
      case Hop::Carry: {
        std::int64_t off = offset, blk = block;
        if (n.type == OpType::Concat)
          for (int s = 0; s < slot; ++s) off += g.input_node(n, static_cast<std::size_t>(s)).out_channels;
        if (n.type == OpType::Flatten) {
          const auto hw = in.out_spatial.h * in.out_spatial.w;
          off *= hw;
          blk *= hw;
        }
        enumerate(g, v, off, blk, channels, st);
        break;
      }
      case Hop::Ride:
        st.riders.insert({n.id, offset, block});
        enumerate(g, v, offset, block, channels, st);
        break;
      case Hop::ScoreMatmul:
        st.elements.insert(n.id);
        balanced(n.attr_int("heads", 1));
        break;
      case Hop::MixValue:
        balanced(n.attr_int("heads", 1));
        enumerate(g, v, offset, block, channels, st);
        break;
      case Hop::Freeze:
        st.frozen = true;
        break;
      case Hop::End:
        break;
    }
  }
}

bool origin_node(const OpNode& n) {
  if (n.type == OpType::Linear || n.type == OpType::Conv || n.type == OpType::Param) return true;
  return n.type == OpType::Input && n.layout != Layout::Index;
}

}  // namespace

std::string random_dag(std::mt19937_64& rng, const DagLimits& limits) { return DagBuilder(rng, limits).build(); }

std::set<std::string> oracle_successors(const Graph& graph, const std::string& origin) {
  PathState st;
  const auto i = graph.index_of(origin);
  enumerate(graph, i, 0, 1, graph.node(i).out_channels, st);
  return st.nodes;
}

std::set<std::string> oracle_couplings(const Graph& graph, const std::string& origin) {
  PathState st;
  const auto i = graph.index_of(origin);
  enumerate(graph, i, 0, 1, graph.node(i).out_channels, st);
  std::set<std::string> out;
  for (const auto& e : st.elements)
    if (graph.node(e).type != OpType::Conv) out.insert(e);
  return out;
}

OracleResult combing_oracle(const Graph& graph) {
  struct Part {
    std::set<std::string> members;
    std::set<std::string> elements;
    std::vector<PathState> walks;
  };
  std::vector<Part> parts;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const auto& n = graph.node(i);
    if (!origin_node(n)) continue;
    Part p;
    p.members.insert(n.id);
    p.walks.emplace_back();
    enumerate(graph, i, 0, 1, n.out_channels, p.walks.back());
    p.elements = p.walks.back().elements;
    p.elements.insert(n.id);
    parts.push_back(std::move(p));
  }
  // merge any two parts sharing an element until a fixed point
  for (bool merged = true; merged;) {
    merged = false;
    for (std::size_t a = 0; a < parts.size() && !merged; ++a)
      for (std::size_t b = a + 1; b < parts.size() && !merged; ++b) {
        std::vector<std::string> common;
        std::set_intersection(parts[a].elements.begin(), parts[a].elements.end(), parts[b].elements.begin(),
                              parts[b].elements.end(), std::back_inserter(common));
        if (common.empty()) continue;
        parts[a].members.insert(parts[b].members.begin(), parts[b].members.end());
        parts[a].elements.insert(parts[b].elements.begin(), parts[b].elements.end());
        parts[a].walks.insert(parts[a].walks.end(), parts[b].walks.begin(), parts[b].walks.end());
        parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(b));
        merged = true;
      }
  }

  OracleResult out;
  for (const auto& p : parts) {
    OracleGroup g;
    bool has_input = false;
    std::set<std::int64_t> counts;
    for (const auto& m : p.members) {
      const auto& n = graph.node(m);
      counts.insert(n.out_channels);
      if (n.type == OpType::Input) {
        has_input = true;
        continue;
      }
      g.producers.push_back(m);
      if (n.type == OpType::Conv) {
        const auto groups = n.attr_int("groups", 1);
        const auto in = graph.input_node(n, 0).out_channels;
        if (!(groups > 1 && groups == in && groups == n.out_channels)) g.unit = std::lcm(g.unit, groups);
      }
    }
    if (g.producers.empty()) continue;
    if (counts.size() > 1) {
      out.conflict = true;
      return out;
    }
    g.channels = *counts.begin();
    std::set<std::string> cpl;
    std::set<std::tuple<std::string, int, std::int64_t, std::int64_t>> cons;
    std::set<std::tuple<std::string, std::int64_t, std::int64_t>> rid;
    bool frozen = has_input;
    for (const auto& w : p.walks) {
      for (const auto& e : w.elements)
        if (graph.node(e).type != OpType::Conv) cpl.insert(e);
      cons.insert(w.consumers.begin(), w.consumers.end());
      rid.insert(w.riders.begin(), w.riders.end());
      g.unit = std::lcm(g.unit, w.unit);
      frozen = frozen || w.frozen;
    }
    g.coupling_ops.assign(cpl.begin(), cpl.end());
    g.consumers.assign(cons.begin(), cons.end());
    g.riders.assign(rid.begin(), rid.end());
    g.prunable = !frozen;
    out.groups.push_back(std::move(g));
  }
  std::sort(out.groups.begin(), out.groups.end(),
            [](const OracleGroup& a, const OracleGroup& b) { return a.producers < b.producers; });
  return out;
}

std::vector<OracleGroup> as_oracle_groups(const PruningScheme& scheme) {
  std::vector<OracleGroup> out;
  for (const auto& g : scheme.groups) {
    OracleGroup o;
    o.producers = g.producers;
    o.coupling_ops = g.coupling_ops;
    for (const auto& c : g.consumers) o.consumers.emplace_back(c.op, c.slot, c.offset, c.block);
    for (const auto& r : g.riders) o.riders.emplace_back(r.op, r.offset, r.block);
    std::sort(o.consumers.begin(), o.consumers.end());
    std::sort(o.riders.begin(), o.riders.end());
    o.channels = g.channel_count;
    o.unit = g.unit;
    o.prunable = g.prunable;
    out.push_back(std::move(o));
  }
  std::sort(out.begin(), out.end(), [](const OracleGroup& a, const OracleGroup& b) { return a.producers < b.producers; });
  return out;
}

std::string describe(const std::vector<OracleGroup>& groups) {
  std::ostringstream os;
  for (const auto& g : groups) {
    os << "{";
    for (const auto& p : g.producers) os << p << ' ';
    os << "| cpl";
    for (const auto& c : g.coupling_ops) os << ' ' << c;
    os << " | cons";
    for (const auto& [op, slot, off, blk] : g.consumers) os << ' ' << op << '[' << slot << "]@" << off << 'x' << blk;
    os << " | riders";
    for (const auto& [op, off, blk] : g.riders) os << ' ' << op << '@' << off << 'x' << blk;
    os << " | C=" << g.channels << " L=" << g.unit << (g.prunable ? "" : " frozen") << "}\n";
  }
  return os.str();
}

MaskSet random_masks(const PruningScheme& scheme, std::mt19937_64& rng, double drop) {
  auto masks = full_masks(scheme);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& g : scheme.groups) {
    if (!g.prunable) continue;
    const auto units = g.unit_count();
    std::vector<bool> gone(static_cast<std::size_t>(units));
    std::int64_t kept = units;
    for (std::int64_t j = 0; j < units; ++j)
      if (u(rng) < drop && kept > 1) {
        gone[static_cast<std::size_t>(j)] = true;
        --kept;
      }
    for (std::int64_t j = 0; j < units; ++j) {
      if (!gone[static_cast<std::size_t>(j)]) continue;
      for (auto c : g.unit_channels(j))
        for (const auto& p : g.producers) masks[p].gates[static_cast<std::size_t>(c)] = 0;
    }
  }
  return masks;
}

TensorMap random_inputs(const Graph& graph, std::int64_t batch, std::mt19937_64& rng) {
  TensorMap out;
  for (const auto& id : graph.named_inputs()) {
    const auto& n = graph.node(id);
    if (n.layout != Layout::Index) {
      out[id] = Tensor::randn(n.out_shape(batch), rng);
      continue;
    }
    std::int64_t classes = 2;
    for (const auto& [v, slot] : graph.users(graph.index_of(id)))
      if (graph.node(v).type == OpType::CrossEntropy) classes = graph.input_node(graph.node(v), 0).out_channels;
    Tensor t(n.out_shape(batch));
    for (auto& x : t.data()) x = static_cast<double>(rng() % static_cast<std::uint64_t>(classes));
    out[id] = t;
  }
  return out;
}

double gradient_error(const ScalarFn& fn, std::vector<Tensor> inputs, double step, double floor) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  fn(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      NoGradGuard guard;
      const double keep = data[i];
      data[i] = keep + step;
      const double up = fn(inputs).item();
      data[i] = keep - step;
      const double down = fn(inputs).item();
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Shape random_shape(std::mt19937_64& rng, int rank, std::int64_t lo, std::int64_t hi) {
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1)));
  return s;
}

namespace {

std::string readout_node(const Graph& graph) { return graph.node(graph.named_outputs().front()).inputs.at(0); }

// psi_c(g) for every channel of `producer`: weights (and bias) scaled per
// channel by g, gradient of the linear readout taken w.r.t. the unscaled
// tensors, multiplied by them and summed over the channel slice.
std::vector<double> psi(const Graph& graph, const ParamStore& params, const TensorMap& batch,
                        const std::string& producer, const std::vector<double>& g, const Tensor& readout) {
  ParamStore p = clone_params(params);
  std::vector<std::pair<std::string, int>> owned;
  for (const auto& spec : param_specs(graph, graph.node(producer))) owned.emplace_back(spec.name, spec.out_axis);
  // scaled[k] = g_c * w[k] built through the tensor engine so the gradient reaches w
  ParamStore scaled = p;
  std::vector<Tensor> base;
  for (const auto& [name, axis] : owned) {
    Tensor w = p.at(name);
    w.set_requires_grad(true);
    w.zero_grad();
    Shape gs(static_cast<std::size_t>(w.rank()), 1);
    gs[static_cast<std::size_t>(axis)] = static_cast<std::int64_t>(g.size());
    const Tensor gate(gs, g);
    scaled[name] = ops::mul(w, gate);
    base.push_back(w);
  }
  ExecOptions opts;
  opts.record_gradients = true;
  const auto res = execute(graph, scaled, batch, opts);
  const auto& out = res.value(graph, readout_node(graph));
  ops::sum(ops::mul(out, readout)).backward();
  std::vector<double> result(g.size(), 0.0);
  for (std::size_t i = 0; i < owned.size(); ++i) {
    const auto& w = base[i];
    const auto axis = owned[i].second;
    const auto& shape = w.shape();
    std::int64_t inner = 1;
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < shape.size(); ++d) inner *= shape[d];
    const auto c = shape[static_cast<std::size_t>(axis)];
    const auto grad = w.grad();
    const auto data = w.data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const auto ch = (static_cast<std::int64_t>(k) / inner) % c;
      result[static_cast<std::size_t>(ch)] += grad[k] * data[k];
    }
  }
  return result;
}

// Acklam's rational approximation of the standard normal quantile.
double normal_quantile(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00};
  const double lo = 0.02425;
  if (p < lo) {
    const double q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > 1 - lo) return -normal_quantile(1 - p);
  const double q = p - 0.5, r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

}  // namespace

ChannelOracle hutchinson_channel_scores(const Graph& graph, const ParamStore& params, const TensorMap& batch,
                                        const std::string& producer, double h, int samples, std::mt19937_64& rng) {
  const auto channels = static_cast<std::size_t>(graph.node(producer).out_channels);
  const auto& out_node = graph.node(readout_node(graph));
  Tensor readout = Tensor::randn(out_node.out_shape(batch.begin()->second.dim(0)), rng);
  const std::vector<double> ones(channels, 1.0);
  const auto base = psi(graph, params, batch, producer, ones, readout);

  // one stratified column per channel: z at the centres of `samples`
  // equiprobable bins, in an independent random order
  std::vector<std::vector<double>> z(channels, std::vector<double>(static_cast<std::size_t>(samples)));
  for (auto& col : z) {
    for (int s = 0; s < samples; ++s) col[static_cast<std::size_t>(s)] = normal_quantile((s + 0.5) / samples);
    std::shuffle(col.begin(), col.end(), rng);
  }
  std::vector<double> acc(channels, 0.0);
  for (int s = 0; s < samples; ++s) {
    std::vector<double> g(channels);
    for (std::size_t c = 0; c < channels; ++c) g[c] = 1.0 + h * z[c][static_cast<std::size_t>(s)];
    const auto moved = psi(graph, params, batch, producer, g, readout);
    for (std::size_t c = 0; c < channels; ++c) {
      const double fd = (moved[c] - base[c]) / h;
      acc[c] += fd * fd;
    }
  }
  for (auto& a : acc) a /= samples;
  ChannelOracle result{acc, {}};
  {
    ParamStore p = clone_params(params);
    for (auto& [name, t] : p) {
      t.set_requires_grad(true);
      t.zero_grad();
    }
    ExecOptions opts;
    opts.record_gradients = true;
    const auto res = execute(graph, p, batch, opts);
    ops::sum(ops::mul(res.value(graph, out_node.id), readout)).backward();
    result.closed = producer_importance(graph, p, producer);
  }
  return result;
}

HutchinsonQuadratic hutchinson_quadratic(std::int64_t n, double h, int samples, std::mt19937_64& rng) {
  // symmetric A
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> a(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j <= i; ++j) a[static_cast<std::size_t>(i * n + j)] = a[static_cast<std::size_t>(j * n + i)] = gauss(rng);
  const Tensor A({n, n}, a);
  auto grad_at = [&](const std::vector<double>& x) {
    Tensor v({n, 1}, x, true);
    const auto ax = ops::matmul(A, v);
    ops::scale(ops::sum(ops::mul(v, ax)), 0.5).backward();
    return std::vector<double>(v.grad().begin(), v.grad().end());
  };
  std::vector<double> x0(static_cast<std::size_t>(n));
  for (auto& v : x0) v = gauss(rng);
  const auto g0 = grad_at(x0);
  std::vector<double> vals;
  for (int s = 0; s < samples; ++s) {
    auto x = x0;
    std::vector<double> z(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = gauss(rng);
      x[i] += h * z[i];
    }
    const auto g1 = grad_at(x);
    double sq = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double hz = (g1[i] - g0[i]) / h;
      sq += hz * hz;
    }
    vals.push_back(sq);
  }
  HutchinsonQuadratic r;
  r.estimate = std::accumulate(vals.begin(), vals.end(), 0.0) / samples;
  double var = 0.0;
  for (double v : vals) var += (v - r.estimate) * (v - r.estimate);
  var /= samples - 1;
  r.stderr_ = std::sqrt(var / samples);
  for (double v : a) r.exact += v * v;
  return r;
}

}  // namespace cpd::testing
