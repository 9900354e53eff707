#include "cpd/importance.hpp"

#include <algorithm>
#include <cmath>

#include "cpd/ops.hpp"

namespace cpd {

std::vector<double> channel_inner_products(const Tensor& weight, std::span<const double> grad, int channel_axis) {
  const auto axis = ops::normalize_axis(channel_axis, weight.rank());
  if (static_cast<std::int64_t>(grad.size()) != weight.numel()) throw ShapeError("gradient and weight differ in size");
  const auto w = weight.data();
  const auto channels = weight.dim(axis);
  std::int64_t inner = 1;
  for (int a = axis + 1; a < weight.rank(); ++a) inner *= weight.dim(a);
  std::vector<double> out(static_cast<std::size_t>(channels), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i]) || !std::isfinite(grad[i])) throw Error("non-finite weight or gradient");
    const auto c = (static_cast<std::int64_t>(i) / inner) % channels;
    out[static_cast<std::size_t>(c)] += grad[i] * w[i];
  }
  return out;
}

std::vector<double> channel_importance(const Tensor& weight, std::span<const double> grad, int channel_axis) {
  auto s = channel_inner_products(weight, grad, channel_axis);
  for (auto& v : s) v *= v;
  return s;
}

std::vector<double> channel_importance(const Tensor& weight, int channel_axis) {
  if (!weight.has_grad()) throw Error("weight has no gradient");
  return channel_importance(weight, weight.grad(), channel_axis);
}

std::vector<double> producer_importance(const Graph& graph, const ParamStore& params, const std::string& producer) {
  const OpNode& n = graph.node(producer);
  std::vector<double> total(static_cast<std::size_t>(n.out_channels), 0.0);
  for (const auto& spec : param_specs(graph, n)) {
    if (spec.out_axis < 0) continue;
    auto it = params.find(spec.name);
    if (it == params.end()) throw Error("missing parameter " + spec.name);
    if (!it->second.has_grad()) throw Error("missing gradient for " + spec.name);
    const auto ip = channel_inner_products(it->second, it->second.grad(), spec.out_axis);
    for (std::size_t c = 0; c < total.size(); ++c) total[c] += ip[c];
  }
  for (auto& v : total) v *= v;
  return total;
}

std::int64_t memory_single(const OpNode& op, std::int64_t batch) {
  if (op.out_spatial.scalar) return batch;
  return batch * op.out_spatial.h * op.out_spatial.w;
}

std::vector<double> memory_normalize(std::span<const double> scores, const OpNode& op, const GateMask& gates,
                                     std::int64_t batch) {
  const auto alive = gates.surviving();
  if (alive == 0) throw Error("every gate of '" + op.id + "' is zero");
  const double m_total = static_cast<double>(memory_single(op, batch)) * static_cast<double>(alive);
  std::vector<double> out(scores.begin(), scores.end());
  for (auto& v : out) v /= m_total;
  return out;
}

ImportanceLedger::ImportanceLedger(const Graph& graph, const PruningScheme& scheme, std::int64_t batch) {
  for (const auto& g : scheme.groups) {
    if (!g.prunable) continue;
    for (const auto& p : g.producers) {
      producers_.push_back(p);
      raw_[p].assign(static_cast<std::size_t>(g.channel_count), 0.0);
      memory_[p] = memory_single(graph.node(p), batch);
    }
  }
}

void ImportanceLedger::accumulate(const std::map<std::string, std::vector<double>>& step) {
  for (const auto& [p, scores] : step) {
    auto it = raw_.find(p);
    if (it == raw_.end()) throw Error("ledger has no producer '" + p + "'");
    if (scores.size() != it->second.size()) throw ShapeError("score vector length mismatch for '" + p + "'");
    for (std::size_t c = 0; c < scores.size(); ++c) it->second[c] += scores[c];
  }
  ++steps_;
}

std::map<std::string, std::vector<double>> ImportanceLedger::accumulate_gradients(const Graph& graph,
                                                                                   const ParamStore& params) {
  std::map<std::string, std::vector<double>> step;
  for (const auto& p : producers_) step[p] = producer_importance(graph, params, p);
  accumulate(step);
  return step;
}

void ImportanceLedger::reset() {
  for (auto& [p, v] : raw_) std::fill(v.begin(), v.end(), 0.0);
  steps_ = 0;
}

double ImportanceLedger::normalized(const std::string& producer, std::int64_t channel, const MaskSet& masks) const {
  const auto& acc = raw_.at(producer);
  const auto alive = masks.at(producer).surviving();
  if (alive == 0) throw Error("every gate of '" + producer + "' is zero");
  return acc.at(static_cast<std::size_t>(channel)) /
         (static_cast<double>(memory_.at(producer)) * static_cast<double>(alive));
}

double ImportanceLedger::group_score(const PruningScheme& scheme, int group, std::int64_t channel,
                                     const MaskSet& masks) const {
  const auto& g = scheme.groups.at(static_cast<std::size_t>(group));
  double s = 0.0;
  for (const auto& p : g.producers) {
    if (!masks.at(p).gates.at(static_cast<std::size_t>(channel)))
      throw Error("channel " + std::to_string(channel) + " of group " + std::to_string(group) + " is already pruned");
    s += normalized(p, channel, masks);
  }
  return s;
}

double ImportanceLedger::unit_score(const PruningScheme& scheme, int group, std::int64_t unit,
                                    const MaskSet& masks) const {
  const auto& g = scheme.groups.at(static_cast<std::size_t>(group));
  double s = 0.0;
  for (auto c : g.unit_channels(unit)) s += group_score(scheme, group, c, masks);
  return s;
}

std::vector<UnitChoice> ImportanceLedger::ranked_units(const PruningScheme& scheme, const MaskSet& masks) const {
  std::vector<UnitChoice> out;
  for (const auto& g : scheme.groups) {
    if (!g.prunable) continue;
    const auto& gates = masks.at(g.producers.front()).gates;
    for (std::int64_t j = 0; j < g.unit_count(); ++j) {
      if (!gates[static_cast<std::size_t>(j)]) continue;
      out.push_back(UnitChoice{g.id, j, unit_score(scheme, g.id, j, masks)});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const UnitChoice& a, const UnitChoice& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.group != b.group) return a.group < b.group;
    return a.unit < b.unit;
  });
  return out;
}

void ImportanceLedger::write_csv(std::ostream& out, int step, const PruningScheme& scheme, const MaskSet& masks,
                                 const std::map<std::string, std::vector<double>>& last) const {
  out.precision(17);
  for (const auto& g : scheme.groups) {
    if (!g.prunable) continue;
    const auto& gates = masks.at(g.producers.front()).gates;
    for (std::int64_t c = 0; c < g.channel_count; ++c) {
      if (!gates[static_cast<std::size_t>(c)]) continue;
      double r = 0.0, acc = 0.0;
      for (const auto& p : g.producers) {
        auto it = last.find(p);
        if (it != last.end()) r += it->second[static_cast<std::size_t>(c)];
        acc += raw_.at(p)[static_cast<std::size_t>(c)];
      }
      out << step << ',' << g.id << ',' << c << ',' << r << ',' << group_score(scheme, g.id, c, masks) << ',' << acc
          << '\n';
    }
  }
}

}  // namespace cpd
