#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cpd/combing.hpp"

namespace cpd {

/// Channel-wise inner product of gradient and weight: entry c sums grad*weight
/// over every element whose `channel_axis` index is c.
std::vector<double> channel_inner_products(const Tensor& weight, std::span<const double> grad, int channel_axis);

/// (sum over channel c of grad * weight)^2 for each channel.
std::vector<double> channel_importance(const Tensor& weight, std::span<const double> grad, int channel_axis);
std::vector<double> channel_importance(const Tensor& weight, int channel_axis);

/// Raw score per output channel of a producer. The gate multiplies the weight
/// and the bias, so both contribute to the channel's inner product.
std::vector<double> producer_importance(const Graph& graph, const ParamStore& params, const std::string& producer);

/// Activation elements of one output channel: b*h*w (h = w = 1 for vectors,
/// h = tokens for token layouts).
std::int64_t memory_single(const OpNode& op, std::int64_t batch);

/// Divides by m_total = memory_single * surviving gates.
std::vector<double> memory_normalize(std::span<const double> scores, const OpNode& op, const GateMask& gates,
                                     std::int64_t batch);

struct UnitChoice {
  int group = 0;
  std::int64_t unit = 0;
  double score = 0.0;
};

/// Accumulated per-channel raw scores of every producer over one pruning
/// interval.
class ImportanceLedger {
 public:
  ImportanceLedger() = default;
  ImportanceLedger(const Graph& graph, const PruningScheme& scheme, std::int64_t batch);

  /// Adds one step of raw scores (keyed by producer) to the running sums.
  void accumulate(const std::map<std::string, std::vector<double>>& step);
  /// Scores every prunable producer from the gradients of the last backward
  /// pass, then accumulates them. Returns the step's raw scores.
  std::map<std::string, std::vector<double>> accumulate_gradients(const Graph& graph, const ParamStore& params);
  void reset();

  int step_count() const { return steps_; }
  const std::map<std::string, std::vector<double>>& raw() const { return raw_; }
  const std::map<std::string, std::int64_t>& memory_cost() const { return memory_; }

  /// Accumulated score of one producer channel divided by its m_total.
  double normalized(const std::string& producer, std::int64_t channel, const MaskSet& masks) const;
  /// Sum of the normalized scores of the group's producers at `channel`.
  /// Throws if the channel has already been pruned.
  double group_score(const PruningScheme& scheme, int group, std::int64_t channel, const MaskSet& masks) const;
  double unit_score(const PruningScheme& scheme, int group, std::int64_t unit, const MaskSet& masks) const;

  /// Surviving units of prunable groups, lowest score first; ties go to the
  /// lower group id, then the lower unit index.
  std::vector<UnitChoice> ranked_units(const PruningScheme& scheme, const MaskSet& masks) const;

  /// Rows "step,group,channel,raw,normalized,accumulated" for every surviving
  /// channel; `last` holds the most recent step's raw scores.
  void write_csv(std::ostream& out, int step, const PruningScheme& scheme, const MaskSet& masks,
                 const std::map<std::string, std::vector<double>>& last) const;

 private:
  std::map<std::string, std::vector<double>> raw_;
  std::map<std::string, std::int64_t> memory_;
  std::vector<std::string> producers_;
  int steps_ = 0;
};

}  // namespace cpd
