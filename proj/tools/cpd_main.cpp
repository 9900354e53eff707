#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cpd/harness.hpp"

using namespace cpd;
namespace fs = std::filesystem;

namespace {

void print_scheme(const PruningScheme& scheme) {
  for (const auto& g : scheme.groups) {
    std::cout << "group " << g.id << "  channels=" << g.channel_count << " unit=" << g.unit;
    if (!g.prunable) std::cout << "  frozen: " << g.frozen_reason;
    std::cout << "\n  producers:";
    for (const auto& p : g.producers) std::cout << ' ' << p;
    if (!g.coupling_ops.empty()) {
      std::cout << "\n  coupling:";
      for (const auto& c : g.coupling_ops) std::cout << ' ' << c;
    }
    std::cout << "\n  consumers:";
    for (const auto& c : g.consumers) {
      std::cout << ' ' << c.op << '[' << c.slot << ']';
      if (c.offset || c.block != 1) std::cout << "@" << c.offset << "x" << c.block;
    }
    std::cout << '\n';
  }
}

void print_report(std::ostream& out, const RunReport& r) {
  out << "metric,value\n"
      << "params_before," << r.params_before << "\nparams_after," << r.params_after << "\nprunable_before,"
      << r.prunable_before << "\nprunable_after," << r.prunable_after << "\nsparsity," << r.sparsity
      << "\ntarget_sparsity," << r.target_sparsity << "\nflops_before," << r.flops_before << "\nflops_after,"
      << r.flops_after << "\nspeedup," << r.speedup << "\nmetric_before," << r.metric_before << "\nmetric_after,"
      << r.metric_after << "\npruning_steps," << r.pruning_steps << "\nfinetune_steps," << r.finetune_steps
      << "\nevents," << r.events << "\nmask_checks," << r.mask_checks << "\nmask_violations," << r.mask_violations
      << "\nteacher_unchanged," << (r.teacher_unchanged ? "true" : "false") << '\n';
}

struct KdFlags {
  std::string method = "none";
  KDConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--kd", method, "distillation: none, kl, cwd, cirkd")
        ->check(CLI::IsMember({"none", "kl", "cwd", "cirkd"}));
    app->add_option("--kd-temp", cfg.temperature, "softmax temperature");
    app->add_option("--kd-alpha", cfg.alpha, "CIRKD batch pixel-to-pixel weight");
    app->add_option("--kd-beta", cfg.beta, "CIRKD memory pixel-to-pixel weight");
    app->add_option("--kd-gamma", cfg.gamma, "CIRKD memory pixel-to-region weight");
    app->add_option("--kd-queue", cfg.queue_size, "CIRKD memory queue length per class");
    app->add_option("--kd-weight", cfg.weight, "weight of the distillation term");
    app->add_option("--kd-cwd-axis", cfg.cwd_axis, "channel-wise softmax axis: spatial or channel")
        ->transform(CLI::CheckedTransformer(std::map<std::string, CwdAxis>{{"spatial", CwdAxis::Spatial},
                                                                          {"channel", CwdAxis::Channel}}));
  }
};

void print_ablation(const AblationResult& r) {
  std::printf("%-6s %-7s %9s %9s %5s %s\n", "kd", "teacher", "mean", "std", "runs", ">=none");
  for (const auto& row : r.rows)
    std::printf("%-6s %-7s %9.4f %9.4f %5lld %lld\n", std::string(kd_name(row.kd)).c_str(), row.teacher.c_str(),
                row.mean, row.stddev, static_cast<long long>(row.runs), static_cast<long long>(row.at_least_none));
  for (const auto& c : r.cells)
    if (!c.ok) std::cerr << "cell " << kd_name(c.kd) << '/' << c.teacher << " rep " << c.repetition << ": " << c.error << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpd: coupled-channel pruning with distillation"};
  app.require_subcommand(1);

  auto* comb = app.add_subcommand("comb", "resolve coupled channel groups of a graph");
  std::string comb_graph, comb_out;
  bool comb_quiet = false;
  comb->add_option("graph", comb_graph, "graph file")->required()->check(CLI::ExistingFile);
  comb->add_option("-o,--output", comb_out, "scheme JSON to write");
  comb->add_flag("-q,--quiet", comb_quiet, "do not print the groups");

  auto* prune = app.add_subcommand("prune", "prune a graph on its synthetic dataset");
  std::string pr_graph, pr_scheme, pr_out, pr_ckpt, pr_dataset;
  PruneConfig pc;
  KdFlags pr_kd;
  std::int64_t pr_batch = 32;
  std::uint64_t pr_data_seed = 0;
  double pr_noise = -1.0;
  prune->add_option("graph", pr_graph, "graph file")->required()->check(CLI::ExistingFile);
  prune->add_option("scheme", pr_scheme, "scheme JSON from `cpd comb`")->required()->check(CLI::ExistingFile);
  prune->add_option("-o,--output", pr_out, "run directory")->required();
  prune->add_option("--sparsity", pc.target_sparsity, "target fraction of prunable parameters");
  prune->add_option("--interval", pc.interval, "training steps between pruning events");
  prune->add_option("--channels-per-event", pc.channels_per_event, "pruning units removed per event");
  prune->add_option("--seed", pc.seed, "seed for weights, batches and sampling");
  prune->add_option("--lr", pc.learning_rate, "SGD learning rate");
  prune->add_option("--momentum", pc.momentum, "SGD momentum");
  prune->add_option("--pretrain", pc.pretrain_steps, "dense training steps before pruning");
  prune->add_option("--finetune", pc.finetune_steps, "finetune steps after pruning (-1: 3x pruning phase)");
  prune->add_option("--finetune-lr-scale", pc.finetune_lr_scale, "finetune learning-rate factor");
  prune->add_option("--batch", pr_batch, "mini-batch size");
  prune->add_option("--checkpoint", pr_ckpt, "initial weights (default: seeded init)")->check(CLI::ExistingFile);
  prune->add_option("--dataset", pr_dataset, "gaussian, blobs or shapes (default: from the graph inputs)");
  prune->add_option("--data-seed", pr_data_seed, "dataset seed");
  prune->add_option("--noise", pr_noise, "dataset noise level");
  pr_kd.add(prune);

  auto* report = app.add_subcommand("report", "recompute the report of a run directory");
  std::string rep_dir;
  report->add_option("run", rep_dir, "run directory from `cpd prune`")->required()->check(CLI::ExistingDirectory);

  auto* distill = app.add_subcommand("distill-eval", "KD ablation at one sparsity level");
  std::string de_spec, de_out;
  distill->add_option("spec", de_spec, "experiment JSON")->required()->check(CLI::ExistingFile);
  distill->add_option("-o,--output", de_out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "accuracy over a sparsity grid");
  std::string sw_spec, sw_out;
  sweep->add_option("spec", sw_spec, "experiment JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("-o,--output", sw_out, "output directory")->required();

  auto* zoo = app.add_subcommand("zoo", "print a zoo graph");
  std::string zoo_name;
  ZooOptions zo;
  zoo->add_option("name", zoo_name, "zoo model")->required()->check(CLI::IsMember(zoo_names()));
  zoo->add_option("--width", zo.width, "channel multiplier");
  zoo->add_option("--classes", zo.classes, "number of classes");
  zoo->add_option("--image", zo.image, "image side");
  zoo->add_option("--features", zo.features, "input features (plain-mlp)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*comb) {
      const auto graph = load_graph(comb_graph);
      const auto scheme = build_coupling_groups(graph);
      if (!comb_quiet) print_scheme(scheme);
      if (!comb_out.empty()) save_scheme(scheme, comb_out);
    } else if (*prune) {
      const auto graph = load_graph(pr_graph);
      const auto scheme = load_scheme(pr_scheme);
      if (scheme.graph_fingerprint != graph_fingerprint(graph)) throw Error("scheme was built for a different graph");
      pc.kd = kd_from_name(pr_kd.method);
      pc.kd_config = pr_kd.cfg;
      auto ds = dataset_for_graph(graph);
      if (!pr_dataset.empty()) ds.name = pr_dataset;
      ds.seed = pr_data_seed;
      if (pr_noise >= 0.0) ds.noise = pr_noise;
      const auto data = make_dataset(ds);
      Model model{graph, pr_ckpt.empty() ? init_params(graph, pc.seed) : load_checkpoint(pr_ckpt)};
      check_params(graph, model.params);
      auto result = run_pruning(model, scheme, pc, pr_batch, make_batches(data, pr_batch), make_evaluator(data));
      save_run(pr_out, model, scheme, pc, ds, result);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
      print_report(std::cout, result.report);
    } else if (*report) {
      const auto r = report_run(rep_dir);
      std::ofstream csv(fs::path(rep_dir) / "metrics.csv", std::ios::binary);
      print_report(csv, r);
      print_report(std::cout, r);
      std::ifstream ev(fs::path(rep_dir) / "events.csv", std::ios::binary);
      std::cout << "\nevents\n" << ev.rdbuf();
    } else if (*distill) {
      print_ablation(kd_ablation(load_experiment(de_spec), de_out));
    } else if (*sweep) {
      const auto r = sparsity_sweep(load_experiment(sw_spec), sw_out);
      std::printf("%-9s %s\n", "sparsity", "mean");
      for (std::size_t i = 0; i < r.grid.size(); ++i) std::printf("%-9g %.4f\n", r.grid[i], r.mean[i]);
      if (r.knee.found) std::printf("knee at %g\n", r.knee.sparsity);
      for (const auto& c : r.cells)
        if (!c.ok) std::cerr << "cell " << kd_name(c.kd) << " s=" << c.sparsity << " rep " << c.repetition << ": " << c.error << '\n';
    } else if (*zoo) {
      std::cout << zoo_source(zoo_name, zo);
    }
  } catch (const std::exception& e) {
    std::cerr << "cpd: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
