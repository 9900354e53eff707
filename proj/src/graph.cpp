#include "cpd/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <queue>
#include <sstream>

namespace cpd {

namespace {

struct OpInfo {
  OpType type;
  std::string_view name;
  OpCategory category;
};

constexpr std::array<OpInfo, 18> kOps{{
    {OpType::Input, "input", OpCategory::Source},
    {OpType::Param, "param", OpCategory::Source},
    {OpType::Linear, "linear", OpCategory::Stop},
    {OpType::Conv, "conv", OpCategory::Stop},
    {OpType::Add, "add", OpCategory::Coupling},
    {OpType::MatMul, "matmul", OpCategory::Coupling},
    {OpType::Concat, "concat", OpCategory::Coupling},
    {OpType::Relu, "relu", OpCategory::PassThrough},
    {OpType::Gelu, "gelu", OpCategory::PassThrough},
    {OpType::Norm, "norm", OpCategory::PassThrough},
    {OpType::Flatten, "flatten", OpCategory::PassThrough},
    {OpType::Tokens, "tokens", OpCategory::PassThrough},
    {OpType::Untokens, "untokens", OpCategory::PassThrough},
    {OpType::Transpose, "transpose", OpCategory::PassThrough},
    {OpType::Pool, "pool", OpCategory::PassThrough},
    {OpType::Softmax, "softmax", OpCategory::PassThrough},
    {OpType::Output, "output", OpCategory::Sink},
    {OpType::CrossEntropy, "cross_entropy", OpCategory::Sink},
}};

constexpr std::array<std::pair<Layout, std::string_view>, 6> kLayouts{{
    {Layout::NCHW, "nchw"},
    {Layout::NC, "nc"},
    {Layout::NTC, "ntc"},
    {Layout::NCT, "nct"},
    {Layout::Index, "index"},
    {Layout::Scalar, "scalar"},
}};

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      auto p = trim(s.substr(start, i - start));
      if (!p.empty()) parts.push_back(std::move(p));
      start = i + 1;
    }
  }
  return parts;
}

bool valid_id(const std::string& id) {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

[[noreturn]] void fail(const OpNode& n, const std::string& why) { throw GraphError(n.id, why); }

void require_inputs(const OpNode& n, std::size_t lo, std::size_t hi) {
  if (n.inputs.size() < lo || n.inputs.size() > hi) {
    fail(n, std::string(op_name(n.type)) + " takes " + std::to_string(lo) +
                (hi != lo ? (hi > 100 ? "+" : "-" + std::to_string(hi)) : "") + " input(s), got " +
                std::to_string(n.inputs.size()));
  }
}

void require_layout(const OpNode& n, const OpNode& in, std::initializer_list<Layout> allowed) {
  for (auto l : allowed)
    if (in.layout == l) return;
  fail(n, "input '" + in.id + "' has unsupported layout " + std::string(layout_name(in.layout)));
}

std::int64_t positive_attr(const OpNode& n, const std::string& key) {
  const auto v = n.attr_int(key);
  if (v <= 0) fail(n, "attribute " + key + " must be positive");
  return v;
}

void set_spatial(OpNode& n, std::int64_t h, std::int64_t w) {
  n.out_spatial = Spatial{h, w, false};
}

// Infers layout/channels/spatial for `n` given its (already inferred) inputs
// and canonicalizes the `channels` attribute.
void infer(OpNode& n, const std::vector<const OpNode*>& in) {
  const bool has_declared = n.has_attr("channels");
  const std::int64_t declared = has_declared ? n.attr_int("channels") : 0;
  n.out_spatial = Spatial{};
  switch (n.type) {
    case OpType::Input:
    case OpType::Param: {
      require_inputs(n, 0, 0);
      const Layout l = layout_from_name(n.attr_str("layout", n.type == OpType::Input ? "nchw" : "ntc"));
      n.layout = l;
      if (l == Layout::Scalar || (l == Layout::Index && n.type == OpType::Param)) fail(n, "invalid layout for source");
      if (l == Layout::Index) {
        n.out_channels = 1;
        if (n.has_attr("h") || n.has_attr("w")) set_spatial(n, positive_attr(n, "h"), positive_attr(n, "w"));
        break;
      }
      n.out_channels = positive_attr(n, "channels");
      if (l == Layout::NCHW) set_spatial(n, positive_attr(n, "h"), positive_attr(n, "w"));
      if (l == Layout::NTC || l == Layout::NCT) set_spatial(n, positive_attr(n, "t"), 1);
      break;
    }
    case OpType::Linear: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NC, Layout::NTC});
      n.layout = in[0]->layout;
      n.out_spatial = in[0]->out_spatial;
      n.out_channels = positive_attr(n, "channels");
      break;
    }
    case OpType::Conv: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NCHW});
      n.layout = Layout::NCHW;
      n.out_channels = positive_attr(n, "channels");
      const auto k = n.attr_int("kernel", 3);
      const auto s = n.attr_int("stride", 1);
      const auto p = n.attr_int("pad", k / 2);
      const auto g = n.attr_int("groups", 1);
      if (k <= 0 || s <= 0 || p < 0 || g <= 0) fail(n, "invalid kernel/stride/pad/groups");
      if (in[0]->out_channels % g != 0) fail(n, "input channels " + std::to_string(in[0]->out_channels) + " not divisible by groups " + std::to_string(g));
      if (n.out_channels % g != 0) fail(n, "out_channels " + std::to_string(n.out_channels) + " not divisible by groups " + std::to_string(g));
      const auto ho = (in[0]->out_spatial.h + 2 * p - k) / s + 1;
      const auto wo = (in[0]->out_spatial.w + 2 * p - k) / s + 1;
      if (ho <= 0 || wo <= 0) fail(n, "convolution output is empty");
      set_spatial(n, ho, wo);
      break;
    }
    case OpType::Add: {
      require_inputs(n, 2, 1000);
      const OpNode& first = *in[0];
      for (const OpNode* o : in) {
        if (o->layout != first.layout) fail(n, "layout mismatch between '" + first.id + "' and '" + o->id + "'");
        if (o->out_channels != first.out_channels) {
          fail(n, "channel-dimension mismatch at coupling op: '" + first.id + "' has " +
                      std::to_string(first.out_channels) + " channels, '" + o->id + "' has " +
                      std::to_string(o->out_channels));
        }
        if (o->out_spatial != first.out_spatial) fail(n, "spatial mismatch between '" + first.id + "' and '" + o->id + "'");
      }
      if (first.layout == Layout::Index || first.layout == Layout::Scalar) fail(n, "cannot add index/scalar tensors");
      n.layout = first.layout;
      n.out_channels = first.out_channels;
      n.out_spatial = first.out_spatial;
      break;
    }
    case OpType::MatMul: {
      require_inputs(n, 2, 2);
      const OpNode& a = *in[0];
      const OpNode& b = *in[1];
      require_layout(n, a, {Layout::NTC});
      require_layout(n, b, {Layout::NCT, Layout::NTC});
      const auto heads = n.attr_int("heads", 1);
      if (heads <= 0) fail(n, "heads must be positive");
      n.layout = Layout::NTC;
      if (b.layout == Layout::NCT) {
        // scores: contracts the channel axes of both operands
        if (a.out_channels != b.out_channels) {
          fail(n, "contracted dimensions differ: '" + a.id + "' has " + std::to_string(a.out_channels) + ", '" +
                      b.id + "' has " + std::to_string(b.out_channels));
        }
        if (a.out_channels % heads != 0) fail(n, "channels not divisible by heads");
        n.out_channels = b.tokens();
        set_spatial(n, heads * a.tokens(), 1);
      } else {
        // mixing: contracts a's last axis with b's token axis
        if (a.out_channels != b.tokens()) {
          fail(n, "contracted dimensions differ: '" + a.id + "' has " + std::to_string(a.out_channels) + ", '" +
                      b.id + "' has " + std::to_string(b.tokens()) + " tokens");
        }
        if (a.tokens() % heads != 0 || b.out_channels % heads != 0) fail(n, "operands not divisible by heads");
        n.out_channels = b.out_channels;
        set_spatial(n, a.tokens() / heads, 1);
      }
      break;
    }
    case OpType::Concat: {
      require_inputs(n, 2, 1000);
      const OpNode& first = *in[0];
      if (first.layout == Layout::Index || first.layout == Layout::Scalar) fail(n, "cannot concat index/scalar tensors");
      const int caxis = first.channel_axis();
      const int rank = static_cast<int>(first.out_shape(1).size());
      const auto axis = n.attr_int("axis", caxis);
      if (axis <= 0 || axis >= rank) fail(n, "concat axis out of range");
      n.attrs["axis"] = std::to_string(axis);
      n.layout = first.layout;
      n.out_spatial = first.out_spatial;
      n.out_channels = first.out_channels;
      std::int64_t along = 0;
      for (const OpNode* o : in) {
        if (o->layout != first.layout) fail(n, "layout mismatch between '" + first.id + "' and '" + o->id + "'");
        auto sa = first.out_shape(1);
        auto sb = o->out_shape(1);
        along += sb[static_cast<std::size_t>(axis)];
        sa[static_cast<std::size_t>(axis)] = sb[static_cast<std::size_t>(axis)] = 0;
        if (sa != sb) {
          if (axis != caxis && o->out_channels != first.out_channels) {
            fail(n, "channel-dimension mismatch at coupling op: '" + first.id + "' has " +
                        std::to_string(first.out_channels) + " channels, '" + o->id + "' has " +
                        std::to_string(o->out_channels));
          }
          fail(n, "shape mismatch between '" + first.id + "' and '" + o->id + "'");
        }
      }
      auto shape = first.out_shape(1);
      shape[static_cast<std::size_t>(axis)] = along;
      if (axis == caxis) {
        n.out_channels = along;
      } else if (first.layout == Layout::NCHW) {
        set_spatial(n, shape[2], shape[3]);
      } else {
        set_spatial(n, first.layout == Layout::NTC ? shape[1] : shape[2], 1);
      }
      break;
    }
    case OpType::Relu:
    case OpType::Gelu:
    case OpType::Norm:
    case OpType::Output: {
      require_inputs(n, 1, 1);
      if (n.type != OpType::Output) require_layout(n, *in[0], {Layout::NCHW, Layout::NC, Layout::NTC, Layout::NCT});
      if (n.type == OpType::Norm) {
        const auto t = n.attr_str("type", "layer");
        if (t != "layer" && t != "affine") fail(n, "norm type must be layer or affine");
        n.attrs["type"] = t;
      }
      n.layout = in[0]->layout;
      n.out_channels = in[0]->out_channels;
      n.out_spatial = in[0]->out_spatial;
      break;
    }
    case OpType::Flatten: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NCHW});
      n.layout = Layout::NC;
      n.out_channels = in[0]->out_channels * in[0]->out_spatial.h * in[0]->out_spatial.w;
      break;
    }
    case OpType::Tokens: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NCHW});
      n.layout = Layout::NTC;
      n.out_channels = in[0]->out_channels;
      set_spatial(n, in[0]->out_spatial.h * in[0]->out_spatial.w, 1);
      break;
    }
    case OpType::Untokens: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NTC});
      const auto h = positive_attr(n, "h");
      const auto w = positive_attr(n, "w");
      if (h * w != in[0]->tokens()) fail(n, "h*w does not match token count " + std::to_string(in[0]->tokens()));
      n.layout = Layout::NCHW;
      n.out_channels = in[0]->out_channels;
      set_spatial(n, h, w);
      break;
    }
    case OpType::Transpose: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NTC, Layout::NCT});
      n.layout = in[0]->layout == Layout::NTC ? Layout::NCT : Layout::NTC;
      n.out_channels = in[0]->out_channels;
      n.out_spatial = in[0]->out_spatial;
      break;
    }
    case OpType::Pool: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NCHW});
      const auto t = n.attr_str("type", "avg");
      n.attrs["type"] = t;
      n.out_channels = in[0]->out_channels;
      if (t == "global") {
        n.layout = Layout::NC;
      } else if (t == "avg") {
        const auto k = n.attr_int("kernel", 2);
        const auto s = n.attr_int("stride", k);
        if (k <= 0 || s <= 0) fail(n, "invalid pool kernel/stride");
        const auto ho = (in[0]->out_spatial.h - k) / s + 1;
        const auto wo = (in[0]->out_spatial.w - k) / s + 1;
        if (ho <= 0 || wo <= 0) fail(n, "pool output is empty");
        n.layout = Layout::NCHW;
        set_spatial(n, ho, wo);
      } else {
        fail(n, "pool type must be avg or global");
      }
      break;
    }
    case OpType::Softmax: {
      require_inputs(n, 1, 1);
      require_layout(n, *in[0], {Layout::NC, Layout::NTC});
      if (!(n.attr_double("temp", 1.0) > 0.0)) fail(n, "softmax temperature must be positive");
      n.layout = in[0]->layout;
      n.out_channels = in[0]->out_channels;
      n.out_spatial = in[0]->out_spatial;
      break;
    }
    case OpType::CrossEntropy: {
      require_inputs(n, 2, 2);
      require_layout(n, *in[0], {Layout::NC, Layout::NCHW});
      require_layout(n, *in[1], {Layout::Index});
      const bool dense = in[0]->layout == Layout::NCHW;
      if (dense != !in[1]->out_spatial.scalar ||
          (dense && (in[0]->out_spatial.h != in[1]->out_spatial.h || in[0]->out_spatial.w != in[1]->out_spatial.w))) {
        fail(n, "label shape does not match logits");
      }
      n.layout = Layout::Scalar;
      n.out_channels = 1;
      break;
    }
  }
  if (has_declared && declared != n.out_channels) {
    fail(n, "declared channels=" + std::to_string(declared) + " but inferred " + std::to_string(n.out_channels));
  }
  if (n.layout != Layout::Scalar && n.layout != Layout::Index) n.attrs["channels"] = std::to_string(n.out_channels);
}

}  // namespace

GraphError::GraphError(const std::string& node, const std::string& reason)
    : Error("node '" + node + "': " + reason), node_(node) {}

std::string_view op_name(OpType t) {
  for (const auto& o : kOps)
    if (o.type == t) return o.name;
  return "?";
}

OpType op_from_name(std::string_view name) {
  for (const auto& o : kOps)
    if (o.name == name) return o.type;
  throw Error("unknown op kind '" + std::string(name) + "'");
}

OpCategory category_of(OpType t) {
  for (const auto& o : kOps)
    if (o.type == t) return o.category;
  return OpCategory::PassThrough;
}

std::string_view layout_name(Layout l) {
  for (const auto& [k, v] : kLayouts)
    if (k == l) return v;
  return "?";
}

Layout layout_from_name(std::string_view name) {
  for (const auto& [k, v] : kLayouts)
    if (v == name) return k;
  throw Error("unknown layout '" + std::string(name) + "'");
}

std::int64_t OpNode::attr_int(const std::string& key, std::int64_t fallback) const {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  try {
    std::size_t pos = 0;
    const auto v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw GraphError(id, "attribute " + key + "='" + it->second + "' is not an integer");
  }
}

std::int64_t OpNode::attr_int(const std::string& key) const {
  if (!has_attr(key)) throw GraphError(id, "missing attribute " + key);
  return attr_int(key, 0);
}

double OpNode::attr_double(const std::string& key, double fallback) const {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw GraphError(id, "attribute " + key + "='" + it->second + "' is not a number");
  }
}

std::string OpNode::attr_str(const std::string& key, const std::string& fallback) const {
  auto it = attrs.find(key);
  return it == attrs.end() ? fallback : it->second;
}

int OpNode::channel_axis() const {
  switch (layout) {
    case Layout::NCHW:
    case Layout::NC:
    case Layout::NCT:
      return 1;
    case Layout::NTC:
      return 2;
    default:
      return -1;
  }
}

Shape OpNode::out_shape(std::int64_t batch) const {
  if (type == OpType::Param) batch = 1;
  switch (layout) {
    case Layout::NCHW:
      return {batch, out_channels, out_spatial.h, out_spatial.w};
    case Layout::NC:
      return {batch, out_channels};
    case Layout::NTC:
      return {batch, tokens(), out_channels};
    case Layout::NCT:
      return {batch, out_channels, tokens()};
    case Layout::Index:
      if (out_spatial.scalar) return {batch};
      return {batch, out_spatial.h, out_spatial.w};
    case Layout::Scalar:
      return {};
  }
  return {};
}

bool OpNode::is_depthwise(std::int64_t in_channels) const {
  if (type != OpType::Conv) return false;
  const auto g = attr_int("groups", 1);
  return g > 1 && g == in_channels && g == out_channels;
}

Graph::Graph(std::vector<OpNode> nodes) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!valid_id(nodes[i].id)) throw GraphError(nodes[i].id, "invalid node id");
    if (!pos.emplace(nodes[i].id, i).second) throw GraphError(nodes[i].id, "duplicate node id");
  }
  std::vector<int> indegree(nodes.size(), 0);
  std::vector<std::vector<std::size_t>> succ(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i].inputs) {
      auto it = pos.find(in);
      if (it == pos.end()) throw GraphError(nodes[i].id, "dangling input reference '" + in + "'");
      ++indegree[i];
      succ[it->second].push_back(i);
    }
  }
  // Kahn's algorithm; ties resolved by document order.
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (indegree[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const auto i = ready.top();
    ready.pop();
    order.push_back(i);
    for (auto s : succ[i])
      if (--indegree[s] == 0) ready.push(s);
  }
  if (order.size() != nodes.size()) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (indegree[i] > 0) throw GraphError(nodes[i].id, "cycle detected");
  }

  nodes_.reserve(nodes.size());
  for (auto i : order) nodes_.push_back(std::move(nodes[i]));
  for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id] = i;
  users_.assign(nodes_.size(), {});
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    std::vector<const OpNode*> ins;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const auto j = index_.at(n.inputs[s]);
      ins.push_back(&nodes_[j]);
      users_[j].emplace_back(i, static_cast<int>(s));
      if (nodes_[j].layout == Layout::Scalar) throw GraphError(n.id, "input '" + nodes_[j].id + "' is a loss value");
      if (nodes_[j].layout == Layout::Index && n.type != OpType::CrossEntropy) {
        throw GraphError(n.id, "label input '" + nodes_[j].id + "' can only feed cross_entropy");
      }
    }
    infer(n, ins);
    if (n.type == OpType::Input) inputs_.push_back(n.id);
    if (n.category() == OpCategory::Sink) outputs_.push_back(n.id);
  }
}

std::size_t Graph::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error("unknown node '" + id + "'");
  return it->second;
}

Graph parse_graph(std::string_view text) {
  std::vector<OpNode> nodes;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto where = "line " + std::to_string(line_no);
    const auto eq = line.find('=');
    const auto open = line.find('(');
    const auto close = line.find(')', open == std::string::npos ? 0 : open);
    if (eq == std::string::npos || open == std::string::npos || close == std::string::npos || open < eq) {
      throw Error(where + ": expected '<id> = <opkind>(<args>) {attrs}'");
    }
    OpNode n;
    n.id = trim(std::string_view(line).substr(0, eq));
    const auto kind = trim(std::string_view(line).substr(eq + 1, open - eq - 1));
    try {
      n.type = op_from_name(kind);
    } catch (const Error&) {
      throw GraphError(n.id, "unknown op kind '" + kind + "'");
    }
    n.inputs = split(std::string_view(line).substr(open + 1, close - open - 1), ',');
    const auto rest = trim(std::string_view(line).substr(close + 1));
    if (!rest.empty()) {
      if (rest.front() != '{' || rest.back() != '}') throw GraphError(n.id, "malformed attribute block");
      for (const auto& kv : split(std::string_view(rest).substr(1, rest.size() - 2), ',')) {
        const auto p = kv.find('=');
        if (p == std::string::npos) throw GraphError(n.id, "attribute '" + kv + "' lacks '='");
        auto key = trim(std::string_view(kv).substr(0, p));
        auto value = trim(std::string_view(kv).substr(p + 1));
        if (key.empty() || value.empty()) throw GraphError(n.id, "empty attribute key or value");
        if (!n.attrs.emplace(key, value).second) throw GraphError(n.id, "duplicate attribute " + key);
      }
    }
    nodes.push_back(std::move(n));
  }
  return Graph(std::move(nodes));
}

Graph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open graph file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_graph(ss.str());
}

std::string serialize_graph(const Graph& graph) {
  std::ostringstream os;
  for (const auto& n : graph.nodes()) {
    os << n.id << " = " << op_name(n.type) << '(';
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? ", " : "") << n.inputs[i];
    os << ')';
    if (!n.attrs.empty()) {
      os << " {";
      bool first = true;
      for (const auto& [k, v] : n.attrs) {
        os << (first ? "" : ",") << k << '=' << v;
        first = false;
      }
      os << '}';
    }
    os << '\n';
  }
  return os.str();
}

std::string graph_fingerprint(const Graph& graph) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(serialize_graph(graph))));
  return buf;
}

std::vector<ParamSpec> param_specs(const Graph& graph, const OpNode& n) {
  std::vector<ParamSpec> specs;
  switch (n.type) {
    case OpType::Linear: {
      const auto in = graph.input_node(n, 0).out_channels;
      specs.push_back({n.id + ".weight", {in, n.out_channels}, 1, 0});
      if (n.attr_int("bias", 1)) specs.push_back({n.id + ".bias", {n.out_channels}, 0, -1});
      break;
    }
    case OpType::Conv: {
      const auto in = graph.input_node(n, 0).out_channels;
      const auto g = n.attr_int("groups", 1);
      const auto k = n.attr_int("kernel", 3);
      specs.push_back({n.id + ".weight", {n.out_channels, in / g, k, k}, 0, 1});
      if (n.attr_int("bias", 1)) specs.push_back({n.id + ".bias", {n.out_channels}, 0, -1});
      break;
    }
    case OpType::Param:
      specs.push_back({n.id + ".value", n.out_shape(1), n.channel_axis(), -1});
      break;
    case OpType::Norm:
      specs.push_back({n.id + ".gamma", {n.out_channels}, 0, -1});
      specs.push_back({n.id + ".beta", {n.out_channels}, 0, -1});
      break;
    default:
      break;
  }
  return specs;
}

std::vector<ParamSpec> param_specs(const Graph& graph) {
  std::vector<ParamSpec> all;
  for (const auto& n : graph.nodes()) {
    auto s = param_specs(graph, n);
    all.insert(all.end(), s.begin(), s.end());
  }
  return all;
}

ParamStore init_params(const Graph& graph, std::uint64_t seed) {
  ParamStore params;
  for (const auto& n : graph.nodes()) {
    for (const auto& spec : param_specs(graph, n)) {
      std::mt19937_64 rng(seed ^ fnv1a(spec.name));
      const auto suffix = spec.name.substr(spec.name.rfind('.') + 1);
      Tensor t(spec.shape);
      if (suffix == "weight") {
        std::int64_t fan_in = 1;
        if (n.type == OpType::Linear) {
          fan_in = spec.shape[0];
        } else {
          fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
        }
        t = Tensor::randn(spec.shape, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
      } else if (suffix == "value") {
        t = Tensor::randn(spec.shape, rng, 0.1);
      } else if (suffix == "gamma") {
        t = Tensor(spec.shape, 1.0);
      }
      t.set_requires_grad(true);
      params.emplace(spec.name, std::move(t));
    }
  }
  return params;
}

void check_params(const Graph& graph, const ParamStore& params) {
  const auto specs = param_specs(graph);
  for (const auto& spec : specs) {
    auto it = params.find(spec.name);
    if (it == params.end()) throw Error("missing parameter " + spec.name);
    if (it->second.shape() != spec.shape) {
      throw ShapeError("parameter " + spec.name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(spec.shape));
    }
  }
  if (params.size() != specs.size()) throw Error("parameter store holds entries the graph does not declare");
}

}  // namespace cpd
