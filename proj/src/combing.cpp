#include "cpd/combing.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace cpd {

std::int64_t GateMask::surviving() const {
  return std::count(gates.begin(), gates.end(), std::uint8_t{1});
}

std::vector<std::int64_t> CouplingGroup::unit_channels(std::int64_t j) const {
  const auto stride = channel_count / unit;
  std::vector<std::int64_t> out;
  for (std::int64_t b = 0; b < unit; ++b) out.push_back(j + b * stride);
  return out;
}

const CouplingGroup* PruningScheme::group_of(const std::string& producer) const {
  for (const auto& g : groups)
    if (std::binary_search(g.producers.begin(), g.producers.end(), producer)) return &g;
  return nullptr;
}

EdgeFlow edge_flow(const Graph& graph, std::size_t consumer, int slot) {
  const OpNode& n = graph.node(consumer);
  const OpNode& in = graph.input_node(n, static_cast<std::size_t>(slot));
  EdgeFlow f;
  switch (n.type) {
    case OpType::Linear:
      f.consumer = true;
      break;
    case OpType::Conv:
      if (n.is_depthwise(in.out_channels)) {
        f.couples = true;
      } else {
        f.consumer = true;
        f.granularity = n.attr_int("groups", 1);
      }
      break;
    case OpType::Add:
      f.passes = f.couples = true;
      break;
    case OpType::Concat: {
      f.passes = true;
      if (n.attr_int("axis") == in.channel_axis()) {
        for (int s = 0; s < slot; ++s) f.offset += graph.input_node(n, static_cast<std::size_t>(s)).out_channels;
      } else {
        f.couples = true;
      }
      break;
    }
    case OpType::MatMul: {
      const bool scores = graph.input_node(n, 1).layout == Layout::NCT;
      const auto heads = n.attr_int("heads", 1);
      if (scores) {
        f.couples = true;
        f.granularity = heads;
      } else if (slot == 0) {
        f.freezes = true;  // contracted against the token axis of the other operand
      } else {
        f.passes = true;
        f.granularity = heads;
      }
      break;
    }
    case OpType::Norm:
    case OpType::Softmax:
      f.passes = f.rider = true;
      break;
    case OpType::Flatten:
      f.passes = true;
      f.block = in.out_spatial.h * in.out_spatial.w;
      break;
    case OpType::Relu:
    case OpType::Gelu:
    case OpType::Tokens:
    case OpType::Untokens:
    case OpType::Transpose:
    case OpType::Pool:
      f.passes = true;
      break;
    case OpType::Output:
    case OpType::CrossEntropy:
      f.freezes = true;
      break;
    case OpType::Input:
    case OpType::Param:
      break;
  }
  return f;
}

namespace {

bool is_origin(const OpNode& n) {
  if (n.category() == OpCategory::Stop) return true;
  if (n.type == OpType::Param) return true;
  return n.type == OpType::Input && n.layout != Layout::Index;
}

struct Reach {
  std::set<std::size_t> successors;
  std::set<std::size_t> couplings;  // includes depthwise links
  std::set<ConsumerRef> consumers;
  std::set<RiderRef> riders;
  std::int64_t granularity = 1;
  std::string frozen;
};

Reach walk(const Graph& graph, std::size_t origin) {
  Reach r;
  const auto channels = graph.node(origin).out_channels;
  using State = std::tuple<std::size_t, std::int64_t, std::int64_t>;
  std::set<State> seen;
  std::vector<State> stack{{origin, 0, 1}};
  auto freeze = [&](const std::string& why) {
    if (r.frozen.empty()) r.frozen = why;
  };
  while (!stack.empty()) {
    const auto [u, offset, block] = stack.back();
    stack.pop_back();
    if (!seen.insert({u, offset, block}).second) continue;
    for (const auto& [v, slot] : graph.users(u)) {
      const OpNode& vn = graph.node(v);
      const EdgeFlow f = edge_flow(graph, v, slot);
      r.successors.insert(v);
      if (f.freezes) freeze("channels reach '" + vn.id + "'");
      if (f.couples) r.couplings.insert(v);
      if (f.consumer) r.consumers.insert(ConsumerRef{vn.id, slot, offset, block});
      if (f.rider) r.riders.insert(RiderRef{vn.id, offset, block});
      if (f.granularity > 1) {
        const auto in_ch = graph.input_node(vn, static_cast<std::size_t>(slot)).out_channels;
        if (offset != 0 || block != 1 || in_ch != channels) {
          freeze("channels reach the grouped op '" + vn.id + "' through a slice");
        } else {
          r.granularity = std::lcm(r.granularity, f.granularity);
        }
      }
      if (f.passes) stack.emplace_back(v, offset * f.block + f.offset, block * f.block);
    }
  }
  return r;
}

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

std::set<std::string> direct_successors(const Graph& graph, const std::string& node) {
  std::set<std::string> out;
  for (auto i : walk(graph, graph.index_of(node)).successors) out.insert(graph.node(i).id);
  return out;
}

std::vector<DirectRelation> direct_relations(const Graph& graph) {
  std::vector<DirectRelation> out;
  for (const auto& n : graph.nodes())
    for (const auto& s : direct_successors(graph, n.id)) out.push_back({n.id, s});
  std::sort(out.begin(), out.end());
  return out;
}

std::set<std::string> following_couplings(const Graph& graph, const std::string& stop_op) {
  const auto idx = graph.index_of(stop_op);
  if (graph.node(idx).category() != OpCategory::Stop) throw GraphError(stop_op, "not a stop operation");
  std::set<std::string> out;
  for (auto i : walk(graph, idx).couplings)
    if (graph.node(i).category() == OpCategory::Coupling) out.insert(graph.node(i).id);
  return out;
}

PruningScheme build_coupling_groups(const Graph& graph) {
  const auto n = graph.size();
  std::vector<Reach> reach(n);
  std::vector<bool> origin(n, false);
  DisjointSet sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_origin(graph.node(i))) continue;
    origin[i] = true;
    reach[i] = walk(graph, i);
    for (auto c : reach[i].couplings) sets.unite(i, c);
  }

  std::map<std::size_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i)
    if (origin[i]) members[sets.find(i)].push_back(i);

  std::vector<CouplingGroup> groups;
  for (const auto& [root, ids] : members) {
    CouplingGroup g;
    std::set<std::string> couplings;
    std::set<ConsumerRef> consumers;
    std::set<RiderRef> riders;
    std::vector<std::string> inputs;
    for (auto i : ids) {
      const OpNode& node = graph.node(i);
      if (node.type == OpType::Input) {
        inputs.push_back(node.id);
      } else {
        g.producers.push_back(node.id);
        const auto groups_attr = node.type == OpType::Conv && !node.is_depthwise(graph.input_node(node, 0).out_channels)
                                     ? node.attr_int("groups", 1)
                                     : 1;
        g.unit = std::lcm(g.unit, groups_attr);
      }
      const Reach& r = reach[i];
      for (auto c : r.couplings)
        if (graph.node(c).category() == OpCategory::Coupling) couplings.insert(graph.node(c).id);
      consumers.insert(r.consumers.begin(), r.consumers.end());
      riders.insert(r.riders.begin(), r.riders.end());
      g.unit = std::lcm(g.unit, r.granularity);
      if (g.frozen_reason.empty() && !r.frozen.empty()) g.frozen_reason = r.frozen;
    }
    if (g.producers.empty()) continue;
    std::sort(g.producers.begin(), g.producers.end());

    std::vector<std::string> all(g.producers);
    all.insert(all.end(), inputs.begin(), inputs.end());
    g.channel_count = graph.node(all.front()).out_channels;
    for (const auto& id : all) {
      if (graph.node(id).out_channels != g.channel_count) {
        std::ostringstream msg;
        msg << "conflicting channel counts in coupled group:";
        for (const auto& m : all) msg << " '" << m << "'=" << graph.node(m).out_channels;
        throw GraphError(id, msg.str());
      }
    }
    if (!inputs.empty()) g.frozen_reason = "coupled to graph input '" + inputs.front() + "'";
    g.prunable = g.frozen_reason.empty();
    g.coupling_ops.assign(couplings.begin(), couplings.end());
    g.consumers.assign(consumers.begin(), consumers.end());
    g.riders.assign(riders.begin(), riders.end());
    groups.push_back(std::move(g));
  }
  std::sort(groups.begin(), groups.end(),
            [](const CouplingGroup& a, const CouplingGroup& b) { return a.producers.front() < b.producers.front(); });
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i].id = static_cast<int>(i);

  PruningScheme scheme;
  scheme.groups = std::move(groups);
  scheme.graph_fingerprint = graph_fingerprint(graph);
  return scheme;
}

MaskSet full_masks(const PruningScheme& scheme) {
  MaskSet out;
  for (const auto& g : scheme.groups)
    for (const auto& p : g.producers)
      out[p] = GateMask{p, std::vector<std::uint8_t>(static_cast<std::size_t>(g.channel_count), 1)};
  return out;
}

std::string MaskReport::describe() const {
  if (ok()) return "ok";
  std::ostringstream os;
  for (const auto& v : violations) {
    os << "group " << v.group << ": " << v.reason;
    if (!v.channels.empty()) {
      os << " (channels";
      for (auto c : v.channels) os << ' ' << c;
      os << ')';
    }
    os << '\n';
  }
  return os.str();
}

MaskReport validate_masks(const PruningScheme& scheme, const MaskSet& masks) {
  MaskReport report;
  auto add = [&](int group, std::vector<std::int64_t> channels, std::string reason) {
    report.violations.push_back(MaskViolation{group, std::move(channels), std::move(reason)});
  };
  for (const auto& [owner, m] : masks) {
    if (!scheme.group_of(owner)) add(-1, {}, "mask for unknown producer '" + owner + "'");
  }
  for (const auto& g : scheme.groups) {
    const auto c = static_cast<std::size_t>(g.channel_count);
    const GateMask* ref = nullptr;
    bool usable = true;
    for (const auto& p : g.producers) {
      auto it = masks.find(p);
      if (it == masks.end()) {
        add(g.id, {}, "no mask for producer '" + p + "'");
        usable = false;
        continue;
      }
      if (it->second.gates.size() != c) {
        add(g.id, {}, "mask for '" + p + "' has " + std::to_string(it->second.gates.size()) + " entries, expected " +
                          std::to_string(c));
        usable = false;
        continue;
      }
      if (!ref) {
        ref = &it->second;
        continue;
      }
      std::vector<std::int64_t> diff;
      for (std::size_t k = 0; k < c; ++k)
        if (it->second.gates[k] != ref->gates[k]) diff.push_back(static_cast<std::int64_t>(k));
      if (!diff.empty()) add(g.id, std::move(diff), "masks of '" + ref->owner + "' and '" + p + "' differ");
    }
    if (!ref || !usable) continue;
    const auto& gates = ref->gates;
    std::vector<std::int64_t> cleared;
    for (std::size_t k = 0; k < c; ++k)
      if (gates[k] == 0) cleared.push_back(static_cast<std::int64_t>(k));
    if (!g.prunable && !cleared.empty()) {
      add(g.id, cleared, "group is not prunable (" + g.frozen_reason + ")");
      continue;
    }
    if (cleared.size() == c) add(g.id, {}, "every channel is pruned");
    for (std::int64_t j = 0; j < g.unit_count(); ++j) {
      const auto unit = g.unit_channels(j);
      const auto first = gates[static_cast<std::size_t>(unit.front())];
      for (auto ch : unit) {
        if (gates[static_cast<std::size_t>(ch)] != first) {
          add(g.id, unit, "unit " + std::to_string(j) + " is partially pruned");
          break;
        }
      }
    }
  }
  return report;
}

namespace {

template <typename Ref>
void mark(std::vector<bool>& keep, const Ref& ref, const std::vector<std::uint8_t>& gates) {
  for (std::size_t c = 0; c < gates.size(); ++c) {
    if (gates[c]) continue;
    const auto start = ref.offset + static_cast<std::int64_t>(c) * ref.block;
    for (std::int64_t e = 0; e < ref.block; ++e) keep.at(static_cast<std::size_t>(start + e)) = false;
  }
}

const std::vector<std::uint8_t>& group_gates(const CouplingGroup& g, const MaskSet& masks) {
  auto it = masks.find(g.producers.front());
  if (it == masks.end()) throw Error("no mask for producer '" + g.producers.front() + "'");
  return it->second.gates;
}

}  // namespace

ChannelGating make_gating(const Graph& graph, const PruningScheme& scheme, const MaskSet& masks) {
  ChannelGating gating;
  for (const auto& g : scheme.groups) {
    const auto& gates = group_gates(g, masks);
    if (std::all_of(gates.begin(), gates.end(), [](std::uint8_t v) { return v != 0; })) continue;
    for (const auto& p : g.producers) {
      const auto& pg = masks.at(p).gates;
      gating.gates[p] = std::vector<double>(pg.begin(), pg.end());
    }
    for (const auto& r : g.riders) {
      auto& m = gating.channel_masks[r.op];
      if (m.empty()) m.assign(static_cast<std::size_t>(graph.node(r.op).out_channels), 1.0);
      for (std::size_t c = 0; c < gates.size(); ++c) {
        if (gates[c]) continue;
        for (std::int64_t e = 0; e < r.block; ++e)
          m.at(static_cast<std::size_t>(r.offset + static_cast<std::int64_t>(c) * r.block + e)) = 0.0;
      }
    }
  }
  return gating;
}

ChannelPlan make_plan(const Graph& graph, const PruningScheme& scheme, const MaskSet& masks) {
  ChannelPlan plan;
  for (const auto& g : scheme.groups) {
    const auto& gates = group_gates(g, masks);
    for (const auto& p : g.producers) {
      const auto& pg = masks.at(p).gates;
      plan.producer_keep[p] = std::vector<bool>(pg.begin(), pg.end());
    }
    for (const auto& c : g.consumers) {
      const auto key = std::make_pair(c.op, c.slot);
      auto& keep = plan.input_keep[key];
      if (keep.empty())
        keep.assign(static_cast<std::size_t>(graph.input_node(graph.node(c.op), static_cast<std::size_t>(c.slot)).out_channels), true);
      mark(keep, c, gates);
    }
    for (const auto& r : g.riders) {
      auto& keep = plan.channel_keep[r.op];
      if (keep.empty()) keep.assign(static_cast<std::size_t>(graph.node(r.op).out_channels), true);
      mark(keep, r, gates);
    }
  }
  return plan;
}

Model compact(const Model& model, const PruningScheme& scheme, const MaskSet& masks) {
  if (scheme.graph_fingerprint != graph_fingerprint(model.graph)) throw Error("pruning scheme was built for a different graph");
  const auto report = validate_masks(scheme, masks);
  if (!report.ok()) throw Error("inconsistent masks:\n" + report.describe());
  return compact(model.graph, model.params, make_plan(model.graph, scheme, masks));
}

std::string scheme_to_json(const PruningScheme& scheme) {
  nlohmann::ordered_json doc;
  doc["fingerprint"] = scheme.graph_fingerprint;
  doc["groups"] = nlohmann::ordered_json::array();
  for (const auto& g : scheme.groups) {
    nlohmann::ordered_json j;
    j["id"] = g.id;
    j["producers"] = g.producers;
    j["coupling_ops"] = g.coupling_ops;
    j["consumers"] = nlohmann::ordered_json::array();
    for (const auto& c : g.consumers)
      j["consumers"].push_back({{"op", c.op}, {"slot", c.slot}, {"slice", {{"offset", c.offset}, {"block", c.block}}}});
    j["riders"] = nlohmann::ordered_json::array();
    for (const auto& r : g.riders) j["riders"].push_back({{"op", r.op}, {"slice", {{"offset", r.offset}, {"block", r.block}}}});
    j["channels"] = g.channel_count;
    j["unit"] = g.unit;
    j["prunable"] = g.prunable;
    if (!g.prunable) j["frozen_reason"] = g.frozen_reason;
    doc["groups"].push_back(std::move(j));
  }
  return doc.dump(2) + "\n";
}

PruningScheme scheme_from_json(const std::string& text) {
  PruningScheme scheme;
  try {
    const auto doc = nlohmann::json::parse(text);
    scheme.graph_fingerprint = doc.at("fingerprint").get<std::string>();
    for (const auto& j : doc.at("groups")) {
      CouplingGroup g;
      g.id = j.at("id").get<int>();
      g.producers = j.at("producers").get<std::vector<std::string>>();
      g.coupling_ops = j.value("coupling_ops", std::vector<std::string>{});
      for (const auto& c : j.value("consumers", nlohmann::json::array())) {
        const auto& s = c.at("slice");
        g.consumers.push_back(ConsumerRef{c.at("op").get<std::string>(), c.at("slot").get<int>(),
                                          s.at("offset").get<std::int64_t>(), s.at("block").get<std::int64_t>()});
      }
      for (const auto& r : j.value("riders", nlohmann::json::array())) {
        const auto& s = r.at("slice");
        g.riders.push_back(RiderRef{r.at("op").get<std::string>(), s.at("offset").get<std::int64_t>(),
                                    s.at("block").get<std::int64_t>()});
      }
      g.channel_count = j.at("channels").get<std::int64_t>();
      g.unit = j.value("unit", std::int64_t{1});
      g.prunable = j.value("prunable", true);
      g.frozen_reason = j.value("frozen_reason", std::string{});
      if (g.producers.empty() || g.channel_count <= 0 || g.unit <= 0 || g.channel_count % g.unit != 0)
        throw Error("malformed group " + std::to_string(g.id));
      scheme.groups.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed pruning scheme: ") + e.what());
  }
  return scheme;
}

void save_scheme(const PruningScheme& scheme, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << scheme_to_json(scheme);
}

PruningScheme load_scheme(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return scheme_from_json(ss.str());
}

}  // namespace cpd
