#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpd/pruning.hpp"

namespace cpd {

enum class Task { Classification, Dense };

struct ZooOptions {
  std::int64_t classes = 4;
  std::int64_t width = 1;      ///< channel multiplier
  std::int64_t features = 16;  ///< plain-mlp input size
  std::int64_t image = 8;      ///< square input side for the CNN models
  std::int64_t channels = 3;   ///< image input channels
};

/// plain-mlp, residual, grouped, depthwise, attention.
const std::vector<std::string>& zoo_names();
std::string zoo_source(const std::string& name, const ZooOptions& options = {});
Graph zoo_build(const std::string& name, const ZooOptions& options = {});
Task zoo_task(const std::string& name);

struct DatasetSpec {
  std::string name = "gaussian";  ///< gaussian (vectors), blobs (images), shapes (segmentation)
  std::uint64_t seed = 0;
  std::int64_t classes = 4;
  std::int64_t features = 16;
  std::int64_t image = 8;
  std::int64_t channels = 3;
  std::int64_t train = 512;
  std::int64_t test = 256;
  double noise = 1.0;  ///< within-class spread relative to the class separation
};

struct Dataset {
  DatasetSpec spec;
  Task task = Task::Classification;
  Tensor train_x;
  std::vector<std::int64_t> train_y;
  Tensor test_x;
  std::vector<std::int64_t> test_y;
  Shape label_shape;  ///< per-sample label shape: {} or {h, w}
};

Dataset make_dataset(const DatasetSpec& spec);
/// A dataset matching the zoo model's input.
DatasetSpec dataset_for(const std::string& model, const ZooOptions& options = {});
ZooOptions zoo_options_for(const DatasetSpec& spec);
/// A dataset matching an arbitrary graph's inputs "x"/"y" and logits.
DatasetSpec dataset_for_graph(const Graph& graph);

/// Random mini-batches of the training split, fed as graph inputs "x"/"y".
BatchFn make_batches(const Dataset& data, std::int64_t batch_size);

/// Fraction of correctly classified samples (or pixels); logits [N, K, ...].
double accuracy(const Tensor& logits, std::span<const std::int64_t> labels);
/// Per-class IoU averaged over the classes present in the ground truth.
double mean_iou(const Tensor& logits, std::span<const std::int64_t> labels);

/// Accuracy (classification) or mIoU (dense) of a model on the test split.
double evaluate(const Model& model, const Dataset& data);
EvalFn make_evaluator(const Dataset& data);

struct ExperimentSpec {
  std::string model = "plain-mlp";
  Task task = Task::Classification;
  DatasetSpec dataset;
  ZooOptions zoo;
  std::vector<double> sparsity{0.2, 0.4, 0.6};
  std::vector<KDMethod> kd{KDMethod::None};
  std::int64_t repetitions = 3;
  std::int64_t batch = 32;
  PruneConfig prune;
  /// Teacher arms for the KD ablation: "same" (frozen copy of the student) and
  /// "larger" (a wider zoo model trained separately).
  std::vector<std::string> teachers{"same"};
  std::int64_t teacher_width = 2;
  bool keep_runs = true;
};

/// Reads the JSON experiment description (see README for the schema).
ExperimentSpec parse_experiment(const std::string& json_text);
ExperimentSpec load_experiment(const std::filesystem::path& path);

struct CellResult {
  double sparsity = 0.0;
  KDMethod kd = KDMethod::None;
  std::string teacher = "same";
  std::int64_t repetition = 0;
  bool ok = false;
  std::string error;
  RunReport report;
};

struct Knee {
  bool found = false;
  std::size_t index = 0;
  double sparsity = 0.0;
  double curvature = 0.0;
};

/// Knee of a curve: the strictly interior point with the most negative second
/// divided difference.
Knee find_knee(const std::vector<double>& x, const std::vector<double>& y);

struct SweepResult {
  std::vector<CellResult> cells;
  std::vector<double> grid;
  std::vector<double> mean;  ///< seed-mean metric per grid point (first KD method)
  Knee knee;
};

/// Accuracy per sparsity level and repetition. Writes curve.csv, table.csv,
/// curve.png, curve.svg and run directories under `out`.
SweepResult sparsity_sweep(const ExperimentSpec& spec, const std::filesystem::path& out);

struct AblationRow {
  KDMethod kd = KDMethod::None;
  std::string teacher;
  double mean = 0.0;
  double stddev = 0.0;
  std::int64_t runs = 0;
  std::int64_t at_least_none = 0;  ///< repetitions where the arm matched or beat No-KD
};

struct AblationResult {
  std::vector<CellResult> cells;
  std::vector<AblationRow> rows;
};

/// Mean and standard deviation of the metric per KD method (and teacher arm)
/// at spec.sparsity[0]. Writes table.csv and per-cell run directories.
AblationResult kd_ablation(const ExperimentSpec& spec, const std::filesystem::path& out);

/// One pruning run of a zoo model on its dataset (used by sweep and ablation).
RunResult run_experiment_cell(const ExperimentSpec& spec, double sparsity, KDMethod kd, const std::string& teacher,
                              std::int64_t repetition, const Dataset& data);

/// Persists everything `report_run` needs to recompute the report.
void save_run(const std::filesystem::path& dir, const Model& original, const PruningScheme& scheme,
              const PruneConfig& config, const DatasetSpec& dataset, const RunResult& result);

/// Recomputes the report of a saved run from its files alone.
RunReport report_run(const std::filesystem::path& dir);

/// Worker threads for independent runs: CPD_THREADS if set, else the
/// hardware concurrency.
int worker_threads();

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

void write_plot_png(const std::filesystem::path& path, const std::vector<PlotSeries>& series);
void write_plot_svg(const std::filesystem::path& path, const std::vector<PlotSeries>& series, const std::string& x_label,
                    const std::string& y_label);

}  // namespace cpd
