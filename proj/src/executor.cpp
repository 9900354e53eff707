#include "cpd/executor.hpp"

#include <cmath>
#include <optional>

#include "cpd/ops.hpp"

namespace cpd {

namespace {

// Shape of all ones except `n` at `axis`, for broadcasting per-channel values.
Shape channel_shape(int rank, int axis, std::int64_t n) {
  Shape s(static_cast<std::size_t>(rank), 1);
  s[static_cast<std::size_t>(axis)] = n;
  return s;
}

const Tensor& param(const ParamStore& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing parameter " + name);
  return it->second;
}

const std::vector<double>* lookup(const std::map<std::string, std::vector<double>>* m, const std::string& id) {
  if (!m) return nullptr;
  auto it = m->find(id);
  return it == m->end() ? nullptr : &it->second;
}

Tensor gated(const Tensor& p, const std::vector<double>* gate, int axis) {
  if (!gate) return p;
  if (static_cast<std::int64_t>(gate->size()) != p.dim(axis)) throw ShapeError("gate length does not match parameter");
  return ops::mul(p, Tensor(channel_shape(p.rank(), axis, p.dim(axis)), *gate));
}

Tensor run_matmul(const OpNode& n, const OpNode& b_node, const Tensor& a, const Tensor& b) {
  const auto heads = n.attr_int("heads", 1);
  if (heads == 1) return ops::matmul(a, b);
  const auto batch = a.dim(0);
  if (b_node.layout == Layout::NCT) {
    const auto t = a.dim(1), c = a.dim(2), s = b.dim(2), d = c / heads;
    auto ah = ops::reshape(ops::permute(ops::reshape(a, {batch, t, heads, d}), {0, 2, 1, 3}), {batch * heads, t, d});
    auto bh = ops::reshape(b, {batch * heads, d, s});
    return ops::reshape(ops::matmul(ah, bh), {batch, heads * t, s});
  }
  const auto s = b.dim(1), c = b.dim(2), d = c / heads, t = a.dim(1) / heads;
  auto ah = ops::reshape(a, {batch * heads, t, s});
  auto bh = ops::reshape(ops::permute(ops::reshape(b, {batch, s, heads, d}), {0, 2, 1, 3}), {batch * heads, s, d});
  auto r = ops::reshape(ops::matmul(ah, bh), {batch, heads, t, d});
  return ops::reshape(ops::permute(r, {0, 2, 1, 3}), {batch, t, c});
}

std::vector<std::int64_t> labels_of(const Tensor& t) {
  std::vector<std::int64_t> out;
  out.reserve(t.data().size());
  for (double v : t.data()) out.push_back(static_cast<std::int64_t>(std::llround(v)));
  return out;
}

}  // namespace

ExecResult execute(const Graph& graph, const ParamStore& params, const TensorMap& inputs, const ExecOptions& options) {
  std::optional<NoGradGuard> guard;
  if (!options.record_gradients) guard.emplace();
  const auto* gates = options.gating ? &options.gating->gates : nullptr;
  const auto* masks = options.gating ? &options.gating->channel_masks : nullptr;

  std::int64_t batch = -1;
  for (const auto& id : graph.named_inputs()) {
    auto it = inputs.find(id);
    if (it == inputs.end()) throw Error("missing graph input '" + id + "'");
    if (it->second.rank() == 0) throw ShapeError("input '" + id + "' must have a batch axis");
    if (batch < 0) batch = it->second.dim(0);
    if (it->second.dim(0) != batch) throw ShapeError("inputs disagree on batch size");
  }
  if (batch < 0) batch = 1;

  ExecResult result;
  result.values.resize(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const OpNode& n = graph.node(i);
    auto in = [&](std::size_t slot) -> const Tensor& { return result.values[graph.index_of(n.inputs[slot])]; };
    const auto* gate = lookup(gates, n.id);
    const auto* mask = lookup(masks, n.id);
    Tensor y;
    switch (n.type) {
      case OpType::Input:
        y = inputs.at(n.id);
        break;
      case OpType::Param:
        y = gated(param(params, n.id + ".value"), gate, n.channel_axis());
        break;
      case OpType::Linear: {
        const auto w = gated(param(params, n.id + ".weight"), gate, 1);
        y = ops::matmul(in(0), w);
        if (n.attr_int("bias", 1)) y = ops::add(y, gated(param(params, n.id + ".bias"), gate, 0));
        break;
      }
      case OpType::Conv: {
        const auto w = gated(param(params, n.id + ".weight"), gate, 0);
        Tensor b;
        if (n.attr_int("bias", 1)) b = gated(param(params, n.id + ".bias"), gate, 0);
        const auto k = n.attr_int("kernel", 3);
        y = ops::conv2d(in(0), w, b, static_cast<int>(n.attr_int("stride", 1)), static_cast<int>(n.attr_int("pad", k / 2)),
                        static_cast<int>(n.attr_int("groups", 1)));
        break;
      }
      case OpType::Add:
        y = in(0);
        for (std::size_t s = 1; s < n.inputs.size(); ++s) y = ops::add(y, in(s));
        break;
      case OpType::MatMul:
        y = run_matmul(n, graph.input_node(n, 1), in(0), in(1));
        break;
      case OpType::Concat: {
        std::vector<Tensor> xs;
        for (std::size_t s = 0; s < n.inputs.size(); ++s) xs.push_back(in(s));
        y = ops::concat(xs, static_cast<int>(n.attr_int("axis")));
        break;
      }
      case OpType::Relu:
        y = ops::relu(in(0));
        break;
      case OpType::Gelu:
        y = ops::gelu(in(0));
        break;
      case OpType::Norm: {
        const int axis = n.channel_axis();
        const int rank = in(0).rank();
        const auto bshape = channel_shape(rank, axis, n.out_channels);
        const auto gamma = ops::reshape(param(params, n.id + ".gamma"), bshape);
        const auto beta = ops::reshape(param(params, n.id + ".beta"), bshape);
        Tensor x = in(0);
        if (n.attr_str("type", "layer") == "layer") {
          x = mask ? ops::layer_norm(x, axis, 1e-5, *mask) : ops::layer_norm(x, axis);
        }
        y = ops::add(ops::mul(x, gamma), beta);
        if (mask) y = ops::mul(y, Tensor(bshape, *mask));
        break;
      }
      case OpType::Flatten:
        y = ops::reshape(in(0), {batch, n.out_channels});
        break;
      case OpType::Tokens: {
        const auto& x = in(0);
        y = ops::permute(ops::reshape(x, {batch, x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
        break;
      }
      case OpType::Untokens:
        y = ops::reshape(ops::permute(in(0), {0, 2, 1}), {batch, n.out_channels, n.out_spatial.h, n.out_spatial.w});
        break;
      case OpType::Transpose:
        y = ops::permute(in(0), {0, 2, 1});
        break;
      case OpType::Pool:
        if (n.attr_str("type", "avg") == "global") {
          y = ops::mean_axes(in(0), {2, 3});
        } else {
          const auto k = n.attr_int("kernel", 2);
          y = ops::avg_pool2d(in(0), static_cast<int>(k), static_cast<int>(n.attr_int("stride", k)));
        }
        break;
      case OpType::Softmax:
        y = mask ? ops::softmax(in(0), -1, n.attr_double("temp", 1.0), *mask)
                 : ops::softmax(in(0), -1, n.attr_double("temp", 1.0));
        break;
      case OpType::Output:
        y = in(0);
        break;
      case OpType::CrossEntropy: {
        const auto labels = labels_of(in(1));
        y = ops::cross_entropy(in(0), labels, 1);
        if (!std::isfinite(y.item())) throw Error("non-finite loss at node '" + n.id + "'");
        break;
      }
    }
    const auto expected = n.out_shape(batch);
    if (y.shape() != expected) {
      throw ShapeError("node '" + n.id + "' produced " + shape_str(y.shape()) + ", declared " + shape_str(expected));
    }
    if (n.category() == OpCategory::Sink) result.outputs[n.id] = y;
    result.values[i] = std::move(y);
  }
  return result;
}

namespace {

std::vector<std::int64_t> kept_indices(const std::vector<bool>* keep, std::int64_t n, const std::string& id) {
  if (keep && static_cast<std::int64_t>(keep->size()) != n) {
    throw GraphError(id, "keep mask has " + std::to_string(keep->size()) + " entries, expected " + std::to_string(n));
  }
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < n; ++i)
    if (!keep || (*keep)[static_cast<std::size_t>(i)]) idx.push_back(i);
  return idx;
}

Tensor select(const Tensor& t, int axis, const std::vector<std::int64_t>& idx) {
  NoGradGuard guard;
  auto r = ops::gather(t, axis, idx).detach();
  r.set_requires_grad(true);
  return r;
}

template <typename Map, typename Key>
const std::vector<bool>* find_keep(const Map& m, const Key& k) {
  auto it = m.find(k);
  return it == m.end() ? nullptr : &it->second;
}

}  // namespace

Model compact(const Graph& graph, const ParamStore& params, const ChannelPlan& plan) {
  std::vector<OpNode> nodes;
  ParamStore out;
  for (const auto& n : graph.nodes()) {
    OpNode m;
    m.id = n.id;
    m.type = n.type;
    m.inputs = n.inputs;
    m.attrs = n.attrs;
    if (n.type != OpType::Input && n.type != OpType::Param && n.category() != OpCategory::Stop) m.attrs.erase("channels");

    const auto* out_keep = find_keep(plan.producer_keep, n.id);
    switch (n.type) {
      case OpType::Linear: {
        const auto in_ch = graph.input_node(n, 0).out_channels;
        const auto rows = kept_indices(find_keep(plan.input_keep, std::make_pair(n.id, 0)), in_ch, n.id);
        const auto cols = kept_indices(out_keep, n.out_channels, n.id);
        if (cols.empty()) throw GraphError(n.id, "compaction would remove every output channel");
        if (rows.empty()) throw GraphError(n.id, "compaction would remove every input feature");
        out[n.id + ".weight"] = select(select(param(params, n.id + ".weight"), 0, rows), 1, cols);
        if (n.attr_int("bias", 1)) out[n.id + ".bias"] = select(param(params, n.id + ".bias"), 0, cols);
        m.attrs["channels"] = std::to_string(cols.size());
        break;
      }
      case OpType::Conv: {
        const auto in_ch = graph.input_node(n, 0).out_channels;
        const auto groups = n.attr_int("groups", 1);
        const auto cols = kept_indices(out_keep, n.out_channels, n.id);
        if (cols.empty()) throw GraphError(n.id, "compaction would remove every output channel");
        const auto& w = param(params, n.id + ".weight");
        Tensor nw;
        if (n.is_depthwise(in_ch)) {
          nw = select(w, 0, cols);
          m.attrs["groups"] = std::to_string(cols.size());
        } else {
          const auto* in_keep = find_keep(plan.input_keep, std::make_pair(n.id, 0));
          const auto keep_in = kept_indices(in_keep, in_ch, n.id);
          const auto cig = in_ch / groups;
          const auto cog = n.out_channels / groups;
          // Local kept input positions per group.
          std::vector<std::vector<std::int64_t>> local(static_cast<std::size_t>(groups));
          for (auto i : keep_in) local[static_cast<std::size_t>(i / cig)].push_back(i % cig);
          for (const auto& l : local) {
            if (l.size() != local[0].size()) throw GraphError(n.id, "grouped convolution would become unbalanced");
            if (l.empty()) throw GraphError(n.id, "compaction would remove every input channel of a group");
          }
          std::vector<std::int64_t> per_group_out(static_cast<std::size_t>(groups), 0);
          for (auto o : cols) ++per_group_out[static_cast<std::size_t>(o / cog)];
          for (auto c : per_group_out)
            if (c != per_group_out[0]) throw GraphError(n.id, "grouped convolution output would become unbalanced");
          const auto k = w.dim(2) * w.dim(3);
          const auto new_cig = static_cast<std::int64_t>(local[0].size());
          std::vector<double> values;
          values.reserve(static_cast<std::size_t>(static_cast<std::int64_t>(cols.size()) * new_cig * k));
          const auto src = w.data();
          for (auto o : cols) {
            const auto& lg = local[static_cast<std::size_t>(o / cog)];
            for (auto c : lg)
              for (std::int64_t e = 0; e < k; ++e) values.push_back(src[static_cast<std::size_t>((o * cig + c) * k + e)]);
          }
          nw = Tensor({static_cast<std::int64_t>(cols.size()), new_cig, w.dim(2), w.dim(3)}, std::move(values), true);
        }
        out[n.id + ".weight"] = nw;
        if (n.attr_int("bias", 1)) out[n.id + ".bias"] = select(param(params, n.id + ".bias"), 0, cols);
        m.attrs["channels"] = std::to_string(cols.size());
        break;
      }
      case OpType::Param: {
        const auto cols = kept_indices(out_keep, n.out_channels, n.id);
        if (cols.empty()) throw GraphError(n.id, "compaction would remove every channel");
        out[n.id + ".value"] = select(param(params, n.id + ".value"), n.channel_axis(), cols);
        m.attrs["channels"] = std::to_string(cols.size());
        break;
      }
      case OpType::Norm: {
        const auto keep = kept_indices(find_keep(plan.channel_keep, n.id), n.out_channels, n.id);
        if (keep.empty()) throw GraphError(n.id, "compaction would remove every channel");
        out[n.id + ".gamma"] = select(param(params, n.id + ".gamma"), 0, keep);
        out[n.id + ".beta"] = select(param(params, n.id + ".beta"), 0, keep);
        break;
      }
      default:
        break;
    }
    nodes.push_back(std::move(m));
  }
  Model model{Graph(std::move(nodes)), std::move(out)};
  check_params(model.graph, model.params);
  return model;
}

}  // namespace cpd
