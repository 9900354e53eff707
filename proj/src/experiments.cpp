#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <png.h>

#include "cpd/harness.hpp"
#include "json.hpp"

namespace cpd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

int worker_threads() {
  if (const char* env = std::getenv("CPD_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw Error("CPD_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

ordered_json dataset_json(const DatasetSpec& d) {
  return {{"name", d.name},   {"seed", d.seed},   {"classes", d.classes}, {"features", d.features}, {"image", d.image},
          {"channels", d.channels}, {"train", d.train}, {"test", d.test},  {"noise", d.noise}};
}

DatasetSpec dataset_from(const json& j, DatasetSpec d) {
  d.name = j.value("name", d.name);
  d.seed = j.value("seed", d.seed);
  d.classes = j.value("classes", d.classes);
  d.features = j.value("features", d.features);
  d.image = j.value("image", d.image);
  d.channels = j.value("channels", d.channels);
  d.train = j.value("train", d.train);
  d.test = j.value("test", d.test);
  d.noise = j.value("noise", d.noise);
  return d;
}

ordered_json config_json(const PruneConfig& c) {
  return {{"interval", c.interval},
          {"channels_per_event", c.channels_per_event},
          {"target_sparsity", c.target_sparsity},
          {"kd", std::string(kd_name(c.kd))},
          {"kd_temperature", c.kd_config.temperature},
          {"kd_alpha", c.kd_config.alpha},
          {"kd_beta", c.kd_config.beta},
          {"kd_gamma", c.kd_config.gamma},
          {"kd_queue", c.kd_config.queue_size},
          {"kd_weight", c.kd_config.weight},
          {"kd_cwd_axis", c.kd_config.cwd_axis == CwdAxis::Spatial ? "spatial" : "channel"},
          {"seed", c.seed},
          {"lr", c.learning_rate},
          {"momentum", c.momentum},
          {"finetune_lr_scale", c.finetune_lr_scale},
          {"pretrain_steps", c.pretrain_steps},
          {"finetune_steps", c.finetune_steps}};
}

PruneConfig config_from(const json& j, PruneConfig c) {
  c.interval = j.value("interval", c.interval);
  c.channels_per_event = j.value("channels_per_event", c.channels_per_event);
  c.target_sparsity = j.value("target_sparsity", c.target_sparsity);
  if (j.contains("kd")) c.kd = kd_from_name(j.at("kd").get<std::string>());
  c.kd_config.temperature = j.value("kd_temperature", c.kd_config.temperature);
  c.kd_config.alpha = j.value("kd_alpha", c.kd_config.alpha);
  c.kd_config.beta = j.value("kd_beta", c.kd_config.beta);
  c.kd_config.gamma = j.value("kd_gamma", c.kd_config.gamma);
  c.kd_config.queue_size = j.value("kd_queue", c.kd_config.queue_size);
  c.kd_config.weight = j.value("kd_weight", c.kd_config.weight);
  if (j.contains("kd_cwd_axis")) {
    const auto axis = j.at("kd_cwd_axis").get<std::string>();
    if (axis != "spatial" && axis != "channel") throw Error("kd_cwd_axis must be spatial or channel");
    c.kd_config.cwd_axis = axis == "spatial" ? CwdAxis::Spatial : CwdAxis::Channel;
  }
  c.seed = j.value("seed", c.seed);
  c.learning_rate = j.value("lr", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.finetune_lr_scale = j.value("finetune_lr_scale", c.finetune_lr_scale);
  c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
  c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
  return c;
}

ordered_json report_json(const RunReport& r) {
  return {{"params_before", r.params_before},   {"params_after", r.params_after},
          {"prunable_before", r.prunable_before}, {"prunable_after", r.prunable_after},
          {"sparsity", r.sparsity},             {"target_sparsity", r.target_sparsity},
          {"flops_before", r.flops_before},     {"flops_after", r.flops_after},
          {"speedup", r.speedup},               {"metric_before", r.metric_before},
          {"metric_after", r.metric_after},     {"pruning_steps", r.pruning_steps},
          {"finetune_steps", r.finetune_steps}, {"events", r.events},
          {"mask_checks", r.mask_checks},       {"mask_violations", r.mask_violations},
          {"teacher_unchanged", r.teacher_unchanged}};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Runs `count` independent jobs on up to worker_threads() threads.
template <typename Fn>
void parallel_for(std::size_t count, Fn fn) {
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

std::string cell_name(const CellResult& c) {
  std::ostringstream os;
  os << kd_name(c.kd) << "_" << c.teacher << "_s" << fmt(c.sparsity) << "_r" << c.repetition;
  return os.str();
}

}  // namespace

ExperimentSpec parse_experiment(const std::string& text) {
  ExperimentSpec spec;
  try {
    const auto j = json::parse(text);
    spec.model = j.value("model", spec.model);
    spec.task = zoo_task(spec.model);
    if (j.contains("task")) {
      const auto t = j.at("task").get<std::string>();
      if (t != "classification" && t != "dense") throw Error("task must be classification or dense");
      if ((t == "dense") != (spec.task == Task::Dense)) throw Error("task does not match zoo model '" + spec.model + "'");
    }
    spec.zoo.width = j.contains("zoo") ? j.at("zoo").value("width", spec.zoo.width) : spec.zoo.width;
    spec.dataset = dataset_for(spec.model, spec.zoo);
    if (j.contains("dataset")) spec.dataset = dataset_from(j.at("dataset"), spec.dataset);
    const auto w = spec.zoo.width;
    spec.zoo = zoo_options_for(spec.dataset);
    spec.zoo.width = w;
    if (j.contains("sparsity")) spec.sparsity = j.at("sparsity").get<std::vector<double>>();
    if (j.contains("kd")) {
      spec.kd.clear();
      for (const auto& k : j.at("kd")) spec.kd.push_back(kd_from_name(k.get<std::string>()));
    }
    spec.repetitions = j.value("repetitions", spec.repetitions);
    spec.batch = j.value("batch", spec.batch);
    if (j.contains("prune")) spec.prune = config_from(j.at("prune"), spec.prune);
    if (j.contains("teachers")) spec.teachers = j.at("teachers").get<std::vector<std::string>>();
    spec.teacher_width = j.value("teacher_width", spec.teacher_width);
    spec.keep_runs = j.value("keep_runs", spec.keep_runs);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed experiment spec: ") + e.what());
  }
  if (spec.sparsity.empty()) throw Error("sparsity grid is empty");
  for (std::size_t i = 0; i < spec.sparsity.size(); ++i) {
    if (!(spec.sparsity[i] >= 0.0 && spec.sparsity[i] < 1.0)) throw Error("sparsity values must lie in [0, 1)");
    if (i && !(spec.sparsity[i] > spec.sparsity[i - 1])) throw Error("sparsity grid must be sorted ascending");
  }
  if (spec.kd.empty()) throw Error("kd grid is empty");
  if (spec.repetitions <= 0) throw Error("repetitions must be positive");
  for (const auto& t : spec.teachers)
    if (t != "same" && t != "larger") throw Error("teacher arms must be 'same' or 'larger'");
  if (spec.teacher_width < 1) throw Error("teacher_width must be positive");
  return spec;
}

ExperimentSpec load_experiment(const fs::path& path) { return parse_experiment(read_text(path)); }

Knee find_knee(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("find_knee: x and y differ in length");
  Knee k;
  for (std::size_t i = 1; i + 1 < x.size(); ++i) {
    const double left = (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
    const double right = (y[i + 1] - y[i]) / (x[i + 1] - x[i]);
    const double half = (x[i + 1] - x[i - 1]) / 2.0;
    const double d2 = (right - left) / half;
    // slope changes at rounding level are not a bend
    if (d2 < -1e-9 * (std::abs(left) + std::abs(right)) / half && (!k.found || d2 < k.curvature)) {
      k.found = true;
      k.index = i;
      k.sparsity = x[i];
      k.curvature = d2;
    }
  }
  return k;
}

namespace {

// Everything a repetition's cells share: the dataset, the pretrained dense
// model (the "same" teacher and every arm's starting point) and, when an arm
// asks for it, the larger teacher.
struct Repetition {
  Dataset data;
  Model dense;
  std::optional<Model> larger;
};

PruneConfig cell_config(const ExperimentSpec& spec, double sparsity, KDMethod kd, std::int64_t repetition) {
  PruneConfig cfg = spec.prune;
  cfg.seed = spec.prune.seed + static_cast<std::uint64_t>(repetition);
  cfg.kd = kd;
  cfg.target_sparsity = sparsity;
  return cfg;
}

Repetition prepare(const ExperimentSpec& spec, std::int64_t repetition, const Dataset& data, bool larger) {
  const auto cfg = cell_config(spec, 0.0, KDMethod::None, repetition);
  const auto graph = zoo_build(spec.model, spec.zoo);
  const auto batches = make_batches(data, spec.batch);
  Repetition rep{data, Model{graph, init_params(graph, cfg.seed)}, std::nullopt};
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  train_dense(rep.dense, cfg, cfg.pretrain_steps, batches, rng);
  if (larger) {
    auto zo = spec.zoo;
    zo.width = spec.zoo.width * spec.teacher_width;
    const auto tg = zoo_build(spec.model, zo);
    rep.larger = Model{tg, init_params(tg, cfg.seed + 7919)};
    std::mt19937_64 trng(cfg.seed ^ 0x51ed270b2f3c9a1dULL);
    train_dense(*rep.larger, cfg, cfg.pretrain_steps, batches, trng);
  }
  return rep;
}

RunResult run_cell(const ExperimentSpec& spec, double sparsity, KDMethod kd, const std::string& teacher,
                   std::int64_t repetition, const Repetition& rep) {
  const auto& graph = rep.dense.graph;
  const auto scheme = build_coupling_groups(graph);
  auto cfg = cell_config(spec, sparsity, kd, repetition);
  const auto eval = make_evaluator(rep.data);

  if (sparsity == 0.0) {
    // dense baseline: no pruning path
    RunResult r;
    r.pruned = Model{graph, clone_params(rep.dense.params)};
    r.teacher = r.pruned;
    r.masks = full_masks(scheme);
    r.report.params_before = r.report.params_after = total_param_count(r.pruned.params);
    const SparsityCounter counter(graph, scheme);
    r.report.prunable_before = r.report.prunable_after = counter.dense_count();
    r.report.flops_before = r.report.flops_after = count_flops(graph);
    r.report.metric_before = r.report.metric_after = eval(r.pruned);
    return r;
  }
  const Model* t = nullptr;
  if (teacher == "larger" && kd != KDMethod::None) {
    if (!rep.larger) throw Error("larger teacher was not prepared");
    t = &*rep.larger;
  }
  cfg.pretrain_steps = 0;  // already pretrained
  return run_pruning(rep.dense, scheme, cfg, spec.batch, make_batches(rep.data, spec.batch), eval, t);
}

std::vector<Repetition> prepare_all(const ExperimentSpec& spec, bool larger) {
  std::vector<Repetition> reps(static_cast<std::size_t>(spec.repetitions));
  std::vector<std::string> errors(reps.size());
  parallel_for(reps.size(), [&](std::size_t r) {
    auto d = spec.dataset;
    d.seed = spec.dataset.seed + r;
    try {
      reps[r] = prepare(spec, static_cast<std::int64_t>(r), make_dataset(d), larger);
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw Error("pretraining failed: " + e);
  return reps;
}

}  // namespace

RunResult run_experiment_cell(const ExperimentSpec& spec, double sparsity, KDMethod kd, const std::string& teacher,
                              std::int64_t repetition, const Dataset& data) {
  const bool larger = teacher == "larger" && kd != KDMethod::None && sparsity > 0.0;
  return run_cell(spec, sparsity, kd, teacher, repetition, prepare(spec, repetition, data, larger));
}

void save_run(const fs::path& dir, const Model& original, const PruningScheme& scheme, const PruneConfig& config,
              const DatasetSpec& dataset, const RunResult& result) {
  fs::create_directories(dir);
  write_text(dir / "original.graph", serialize_graph(original.graph));
  save_scheme(scheme, dir / "scheme.json");
  write_text(dir / "masks.json", masks_to_json(result.masks));
  {
    std::ofstream ev(dir / "events.csv", std::ios::binary);
    write_events_csv(ev, result.events);
  }
  write_text(dir / "pruned.graph", serialize_graph(result.pruned.graph));
  save_checkpoint(result.pruned.params, dir / "pruned.ckpt");
  write_text(dir / "teacher.graph", serialize_graph(result.teacher.graph));
  save_checkpoint(result.teacher.params, dir / "teacher.ckpt");
  ordered_json run;
  run["config"] = config_json(config);
  run["dataset"] = dataset_json(dataset);
  run["teacher_hash"] = std::to_string(params_hash(result.teacher.params));
  run["report"] = report_json(result.report);
  run["warnings"] = result.warnings;
  write_text(dir / "run.json", run.dump(2) + "\n");
}

RunReport report_run(const fs::path& dir) {
  const auto run = json::parse(read_text(dir / "run.json"));
  const auto config = config_from(run.at("config"), PruneConfig{});
  const auto dataset = dataset_from(run.at("dataset"), DatasetSpec{});
  const auto original = parse_graph(read_text(dir / "original.graph"));
  const auto scheme = load_scheme(dir / "scheme.json");
  if (scheme.graph_fingerprint != graph_fingerprint(original)) throw Error("scheme does not match the saved graph");
  const auto masks = masks_from_json(read_text(dir / "masks.json"));
  std::ifstream ev(dir / "events.csv", std::ios::binary);
  const auto events = read_events_csv(ev);
  const Model pruned{parse_graph(read_text(dir / "pruned.graph")), load_checkpoint(dir / "pruned.ckpt")};
  check_params(pruned.graph, pruned.params);
  const Model teacher{parse_graph(read_text(dir / "teacher.graph")), load_checkpoint(dir / "teacher.ckpt")};
  check_params(teacher.graph, teacher.params);

  RunReport r;
  const SparsityCounter counter(original, scheme);
  r.params_before = 0;
  for (const auto& spec : param_specs(original)) r.params_before += numel_of(spec.shape);
  r.params_after = total_param_count(pruned.params);
  r.prunable_before = counter.dense_count();
  r.prunable_after = counter.count(masks);
  r.sparsity = counter.sparsity(masks);
  r.target_sparsity = config.target_sparsity;
  r.flops_before = count_flops(original);
  r.flops_after = count_flops(pruned.graph);
  r.speedup = r.flops_after > 0 ? static_cast<double>(r.flops_before) / static_cast<double>(r.flops_after) : 1.0;
  const auto saved = run.at("report");
  r.pruning_steps = saved.value("pruning_steps", std::int64_t{0});
  r.finetune_steps = saved.value("finetune_steps", std::int64_t{0});
  r.events = events.size();
  if (!events.empty() && std::abs(events.back().sparsity - r.sparsity) > 1e-12)
    throw Error("events log disagrees with the saved masks");
  const auto report = validate_masks(scheme, masks);
  r.mask_checks = 1;
  r.mask_violations = report.violations.size();
  r.teacher_unchanged = run.value("teacher_hash", std::string{}) == std::to_string(params_hash(teacher.params));
  const auto data = make_dataset(dataset);
  // the dense model before pruning is the "same" teacher unless a separate one was used
  if (teacher.graph.size() == original.size() && graph_fingerprint(teacher.graph) == graph_fingerprint(original))
    r.metric_before = evaluate(teacher, data);
  else
    r.metric_before = saved.value("metric_before", 0.0);
  r.metric_after = evaluate(pruned, data);
  return r;
}

SweepResult sparsity_sweep(const ExperimentSpec& spec, const fs::path& out) {
  fs::create_directories(out);
  SweepResult result;
  result.grid = spec.sparsity;
  for (auto kd : spec.kd)
    for (double s : spec.sparsity)
      for (std::int64_t r = 0; r < spec.repetitions; ++r) {
        CellResult c;
        c.sparsity = s;
        c.kd = kd;
        c.repetition = r;
        result.cells.push_back(c);
      }
  const auto reps = prepare_all(spec, false);
  parallel_for(result.cells.size(), [&](std::size_t i) {
    auto& c = result.cells[i];
    const auto& rep = reps[static_cast<std::size_t>(c.repetition)];
    try {
      auto r = run_cell(spec, c.sparsity, c.kd, c.teacher, c.repetition, rep);
      c.report = r.report;
      c.ok = true;
      if (spec.keep_runs && c.sparsity > 0.0) {
        save_run(out / "runs" / cell_name(c), rep.dense, build_coupling_groups(rep.dense.graph),
                 cell_config(spec, c.sparsity, c.kd, c.repetition), rep.data.spec, r);
      }
    } catch (const std::exception& e) {
      c.error = e.what();
    }
  });

  std::ofstream curve(out / "curve.csv", std::ios::binary);
  curve << "model,kd,sparsity,repetition,ok,metric_before,metric_after,achieved_sparsity,params_before,params_after,"
           "flops_before,flops_after,speedup,events,mask_violations,error\n";
  for (const auto& c : result.cells) {
    const auto& r = c.report;
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    curve << spec.model << ',' << kd_name(c.kd) << ',' << fmt(c.sparsity) << ',' << c.repetition << ',' << c.ok << ','
          << fmt(r.metric_before) << ',' << fmt(r.metric_after) << ',' << fmt(r.sparsity) << ',' << r.params_before
          << ',' << r.params_after << ',' << r.flops_before << ',' << r.flops_after << ',' << fmt(r.speedup) << ','
          << r.events << ',' << r.mask_violations << ',' << err << '\n';
  }

  std::ofstream table(out / "table.csv", std::ios::binary);
  table << "kd,sparsity,mean,std,runs,failed,knee\n";
  std::vector<PlotSeries> series;
  for (std::size_t k = 0; k < spec.kd.size(); ++k) {
    PlotSeries ps;
    ps.label = std::string(kd_name(spec.kd[k]));
    std::vector<double> means;
    for (double s : spec.sparsity) {
      std::vector<double> v;
      std::int64_t failed = 0;
      for (const auto& c : result.cells) {
        if (c.kd != spec.kd[k] || c.sparsity != s) continue;
        if (c.ok) v.push_back(c.report.metric_after);
        else ++failed;
      }
      const auto [m, sd] = mean_std(v);
      means.push_back(m);
      ps.x.push_back(s);
      ps.y.push_back(m);
      table << kd_name(spec.kd[k]) << ',' << fmt(s) << ',' << fmt(m) << ',' << fmt(sd) << ',' << v.size() << ','
            << failed << ',';
      table << '\n';
    }
    const auto knee = find_knee(spec.sparsity, means);
    if (k == 0) {
      result.mean = means;
      result.knee = knee;
    }
    table << kd_name(spec.kd[k]) << ",knee," << (knee.found ? fmt(knee.sparsity) : "none") << ','
          << fmt(knee.curvature) << ",,,\n";
    series.push_back(std::move(ps));
  }
  write_plot_png(out / "curve.png", series);
  write_plot_svg(out / "curve.svg", series, "sparsity", reps.front().data.task == Task::Dense ? "mIoU" : "accuracy");
  return result;
}

AblationResult kd_ablation(const ExperimentSpec& spec, const fs::path& out) {
  fs::create_directories(out);
  const double sparsity = spec.sparsity.front();
  AblationResult result;
  std::vector<std::pair<KDMethod, std::string>> arms;
  arms.emplace_back(KDMethod::None, "-");
  for (auto kd : spec.kd) {
    if (kd == KDMethod::None) continue;
    for (const auto& t : spec.teachers) arms.emplace_back(kd, t);
  }
  for (const auto& [kd, t] : arms)
    for (std::int64_t r = 0; r < spec.repetitions; ++r) {
      CellResult c;
      c.sparsity = sparsity;
      c.kd = kd;
      c.teacher = t;
      c.repetition = r;
      result.cells.push_back(c);
    }
  const bool larger = std::any_of(arms.begin(), arms.end(), [](const auto& a) { return a.second == "larger"; });
  const auto reps = prepare_all(spec, larger);
  parallel_for(result.cells.size(), [&](std::size_t i) {
    auto& c = result.cells[i];
    const auto& rep = reps[static_cast<std::size_t>(c.repetition)];
    try {
      auto r = run_cell(spec, c.sparsity, c.kd, c.teacher, c.repetition, rep);
      c.report = r.report;
      c.ok = true;
      if (spec.keep_runs) {
        save_run(out / "runs" / cell_name(c), rep.dense, build_coupling_groups(rep.dense.graph),
                 cell_config(spec, c.sparsity, c.kd, c.repetition), rep.data.spec, r);
      }
    } catch (const std::exception& e) {
      c.error = e.what();
    }
  });

  std::vector<double> none(static_cast<std::size_t>(spec.repetitions), 0.0);
  for (const auto& c : result.cells)
    if (c.kd == KDMethod::None && c.ok) none[static_cast<std::size_t>(c.repetition)] = c.report.metric_after;
  std::ofstream table(out / "table.csv", std::ios::binary);
  table << "kd,teacher,sparsity,mean,std,runs,at_least_no_kd\n";
  for (const auto& [kd, t] : arms) {
    AblationRow row;
    row.kd = kd;
    row.teacher = t;
    std::vector<double> v;
    for (const auto& c : result.cells) {
      if (c.kd != kd || c.teacher != t || !c.ok) continue;
      v.push_back(c.report.metric_after);
      row.at_least_none += c.report.metric_after >= none[static_cast<std::size_t>(c.repetition)];
    }
    std::tie(row.mean, row.stddev) = mean_std(v);
    row.runs = static_cast<std::int64_t>(v.size());
    table << kd_name(kd) << ',' << t << ',' << fmt(sparsity) << ',' << fmt(row.mean) << ',' << fmt(row.stddev) << ','
          << row.runs << ',' << row.at_least_none << '\n';
    result.rows.push_back(row);
  }
  std::ofstream curve(out / "cells.csv", std::ios::binary);
  curve << "kd,teacher,repetition,ok,metric_before,metric_after,achieved_sparsity,events,mask_violations\n";
  for (const auto& c : result.cells)
    curve << kd_name(c.kd) << ',' << c.teacher << ',' << c.repetition << ',' << c.ok << ',' << fmt(c.report.metric_before)
          << ',' << fmt(c.report.metric_after) << ',' << fmt(c.report.sparsity) << ',' << c.report.events << ','
          << c.report.mask_violations << '\n';
  return result;
}

namespace {

struct Canvas {
  int w, h;
  std::vector<unsigned char> rgb;
  Canvas(int width, int height) : w(width), h(height), rgb(static_cast<std::size_t>(width * height * 3), 255) {}
  void dot(int x, int y, const unsigned char* c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    auto* p = &rgb[static_cast<std::size_t>((y * w + x) * 3)];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  void line(int x0, int y0, int x1, int y1, const unsigned char* c, int thick = 1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      for (int a = -thick / 2; a <= thick / 2; ++a)
        for (int b = -thick / 2; b <= thick / 2; ++b) dot(x0 + a, y0 + b, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

const unsigned char kColors[][3] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}};

struct Frame {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
};

Frame frame_of(const std::vector<PlotSeries>& series) {
  Frame f{1e300, -1e300, 1e300, -1e300};
  for (const auto& s : series) {
    for (double x : s.x) f.x0 = std::min(f.x0, x), f.x1 = std::max(f.x1, x);
    for (double y : s.y) f.y0 = std::min(f.y0, y), f.y1 = std::max(f.y1, y);
  }
  if (f.x0 > f.x1) f = Frame{};
  if (f.x1 - f.x0 < 1e-12) f.x1 = f.x0 + 1.0;
  f.y0 = std::min(f.y0, 0.0);
  f.y1 = std::max(f.y1, f.y0 + 1e-12);
  const double pad = 0.05 * (f.y1 - f.y0);
  f.y1 += pad;
  return f;
}

}  // namespace

void write_plot_png(const fs::path& path, const std::vector<PlotSeries>& series) {
  const int W = 640, H = 400, L = 50, R = 20, T = 20, B = 40;
  Canvas cv(W, H);
  const auto f = frame_of(series);
  auto px = [&](double x) { return L + static_cast<int>(std::lround((x - f.x0) / (f.x1 - f.x0) * (W - L - R))); };
  auto py = [&](double y) { return H - B - static_cast<int>(std::lround((y - f.y0) / (f.y1 - f.y0) * (H - T - B))); };
  const unsigned char black[3] = {0, 0, 0}, grey[3] = {210, 210, 210};
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    cv.line(L, py(y), W - R, py(y), grey);
  }
  cv.line(L, H - B, W - R, H - B, black);
  cv.line(L, T, L, H - B, black);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto* c = kColors[k % 5];
    const auto& s = series[k];
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      cv.line(px(s.x[i]), H - B, px(s.x[i]), H - B + 5, black);
      if (i) cv.line(px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), c, 2);
      for (int a = -3; a <= 3; ++a) cv.line(px(s.x[i]) - 3, py(s.y[i]) + a, px(s.x[i]) + 3, py(s.y[i]) + a, c);
    }
  }

  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) png_write_row(png, &cv.rgb[static_cast<std::size_t>(y * W * 3)]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

void write_plot_svg(const fs::path& path, const std::vector<PlotSeries>& series, const std::string& x_label,
                    const std::string& y_label) {
  const int W = 640, H = 400, L = 60, R = 120, T = 20, B = 50;
  const auto f = frame_of(series);
  auto px = [&](double x) { return L + (x - f.x0) / (f.x1 - f.x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - f.y0) / (f.y1 - f.y0) * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<line x1=\"" << L << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y)
       << "\" stroke=\"#ddd\"/>\n<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y)
       << "</text>\n";
  }
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  if (!series.empty())
    for (double x : series.front().x)
      os << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(x) << "</text>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << x_label << "</text>\n"
     << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 14 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto* c = kColors[k % 5];
    char color[8];
    std::snprintf(color, sizeof color, "#%02x%02x%02x", c[0], c[1], c[2]);
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i) os << px(series[k].x[i]) << ',' << py(series[k].y[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      os << "<circle cx=\"" << px(series[k].x[i]) << "\" cy=\"" << py(series[k].y[i]) << "\" r=\"3\" fill=\"" << color
         << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << color << "\">"
       << series[k].label << "</text>\n";
  }
  os << "</svg>\n";
  write_text(path, os.str());
}

}  // namespace cpd
