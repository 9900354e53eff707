#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cpd/combing.hpp"
#include "cpd/distill.hpp"
#include "cpd/importance.hpp"

namespace cpd {

struct PruneConfig {
  std::int64_t interval = 64;           ///< training steps between pruning events
  std::int64_t channels_per_event = 1;  ///< pruning units removed per event
  double target_sparsity = 0.5;         ///< fraction of prunable parameters to remove
  KDMethod kd = KDMethod::None;
  KDConfig kd_config;
  std::uint64_t seed = 0;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double finetune_lr_scale = 0.2;    ///< finetune learning rate = learning_rate * this
  std::int64_t pretrain_steps = 0;   ///< dense training before the teacher is frozen
  std::int64_t finetune_steps = -1;  ///< -1: three times the pruning phase
  std::int64_t max_events = 100000;

  void validate() const;
};

/// Supplies mini-batches: a map from graph input id to tensor, including the
/// label input.
using BatchFn = std::function<TensorMap(std::int64_t step, std::mt19937_64& rng)>;

struct PruneEvent {
  std::int64_t step = 0;
  int group = 0;
  std::int64_t unit = 0;
  std::vector<std::int64_t> channels;
  double score = 0.0;
  double sparsity = 0.0;  ///< after the event
};

/// Parameter counts restricted to stop/param nodes tied to prunable groups.
struct SparsityCounter {
  SparsityCounter(const Graph& graph, const PruningScheme& scheme);

  std::int64_t dense_count() const { return dense_; }
  std::int64_t count(const MaskSet& masks) const;
  double sparsity(const MaskSet& masks) const;
  const std::set<std::string>& tracked() const { return tracked_; }

 private:
  Graph graph_;
  PruningScheme scheme_;
  std::set<std::string> tracked_;
  std::int64_t dense_ = 0;
};

/// Parameters a stop or param node keeps under a channel plan.
std::int64_t node_param_count(const Graph& graph, const OpNode& node, const ChannelPlan& plan);
std::int64_t total_param_count(const ParamStore& params);

/// Multiply-accumulates of one forward pass at batch 1, counted per op.
std::int64_t count_macs(const Graph& graph);
inline std::int64_t count_flops(const Graph& graph) { return 2 * count_macs(graph); }

/// Student/teacher state of one pruning run.
struct PruneRunState {
  Model student;
  Model teacher;
  PruningScheme scheme;
  MaskSet masks;
  ImportanceLedger ledger;
  std::vector<PruneEvent> events;
  std::vector<std::string> warnings;
  std::map<std::string, std::vector<double>> last_scores;
  std::map<std::string, std::vector<double>> velocity;
  std::unique_ptr<SparsityCounter> counter;
  std::unique_ptr<MemoryQueue> queue;
  std::mt19937_64 rng;
  std::int64_t step = 0;
  std::int64_t batch_size = 0;
  double current_sparsity = 0.0;
  double last_loss = 0.0;
  double last_kd = 0.0;
  std::uint64_t teacher_hash = 0;
  std::size_t mask_checks = 0;
  std::size_t mask_violations = 0;
};

/// `teacher` defaults to a frozen copy of `model`; a different teacher graph
/// must produce logits of the same shape under the same node id.
PruneRunState start_run(const Model& model, const PruningScheme& scheme, const PruneConfig& config,
                        std::int64_t batch_size, const Model* teacher = nullptr);

/// The logits node (first input of the graph's cross-entropy loss).
std::string logits_node(const Graph& graph);
std::string loss_node(const Graph& graph);

/// Training loss of the gated student on one batch, plus the weighted KD term.
struct StepLoss {
  Tensor total;
  double task = 0.0;
  double kd = 0.0;
};
StepLoss training_loss(PruneRunState& state, const PruneConfig& config, const TensorMap& batch, bool update_queue);

/// One forward/backward/update. Accumulates importance when `score` is set.
void prune_step(PruneRunState& state, const PruneConfig& config, const TensorMap& batch, bool score = true,
                double lr_scale = 1.0);

/// Masks up to channels_per_event lowest-scoring units while that brings
/// sparsity closer to the target. Returns the number of units removed.
int prune_event(PruneRunState& state, const PruneConfig& config);

struct RunReport {
  std::int64_t params_before = 0;
  std::int64_t params_after = 0;
  std::int64_t prunable_before = 0;
  std::int64_t prunable_after = 0;
  double sparsity = 0.0;
  double target_sparsity = 0.0;
  std::int64_t flops_before = 0;
  std::int64_t flops_after = 0;
  double speedup = 1.0;
  double metric_before = 0.0;  ///< teacher (dense) accuracy or mIoU
  double metric_after = 0.0;   ///< compacted student
  std::int64_t pruning_steps = 0;
  std::int64_t finetune_steps = 0;
  std::size_t events = 0;
  std::size_t mask_checks = 0;
  std::size_t mask_violations = 0;
  bool teacher_unchanged = true;
};

struct RunResult {
  Model pruned;  ///< compacted student
  Model teacher;
  MaskSet masks;
  std::vector<PruneEvent> events;
  std::vector<std::string> warnings;
  RunReport report;
};

using EvalFn = std::function<double(const Model&)>;

/// Pretrain (optional), prune with events every `interval` steps until the
/// target is met, finetune, compact and evaluate.
RunResult run_pruning(const Model& model, const PruningScheme& scheme, const PruneConfig& config,
                      std::int64_t batch_size, const BatchFn& batches, const EvalFn& evaluate,
                      const Model* teacher = nullptr);

/// Dense SGD training of a model (teacher pretraining, baselines).
void train_dense(Model& model, const PruneConfig& config, std::int64_t steps, const BatchFn& batches,
                 std::mt19937_64& rng);

void write_events_csv(std::ostream& out, const std::vector<PruneEvent>& events);
std::vector<PruneEvent> read_events_csv(std::istream& in);

std::string masks_to_json(const MaskSet& masks);
MaskSet masks_from_json(const std::string& text);

}  // namespace cpd
