#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cpd/ops.hpp"
#include "support.hpp"

using namespace cpd;
using namespace cpd::testing;

namespace {

struct Fixture {
  Graph graph;
  PruningScheme scheme;
  Dataset data;
  Model model;
};

Fixture fixture(const std::string& name, std::uint64_t seed = 0) {
  Fixture f;
  f.graph = zoo_build(name);
  f.scheme = build_coupling_groups(f.graph);
  auto ds = dataset_for(name);
  ds.seed = seed;
  ds.train = 128;
  ds.test = 64;
  f.data = make_dataset(ds);
  f.model = Model{f.graph, init_params(f.graph, seed)};
  return f;
}

std::vector<TensorMap> fixed_batches(const Dataset& data, int n, std::int64_t size, std::uint64_t seed) {
  const auto fn = make_batches(data, size);
  std::mt19937_64 rng(seed);
  std::vector<TensorMap> out;
  for (int i = 0; i < n; ++i) out.push_back(fn(i, rng));
  return out;
}

// Largest prunable parameter drop caused by removing one unit of any group.
std::int64_t event_granularity(const Graph& g, const PruningScheme& scheme, std::int64_t channels_per_event) {
  const SparsityCounter counter(g, scheme);
  std::int64_t worst = 0;
  for (const auto& grp : scheme.groups) {
    if (!grp.prunable) continue;
    auto masks = full_masks(scheme);
    for (const auto& p : grp.producers)
      for (auto c : grp.unit_channels(0)) masks.at(p).gates[static_cast<std::size_t>(c)] = 0;
    worst = std::max(worst, counter.dense_count() - counter.count(masks));
  }
  return worst * channels_per_event;
}

std::string events_text(const std::vector<PruneEvent>& events) {
  std::ostringstream out;
  write_events_csv(out, events);
  return out.str();
}

}  // namespace

TEST(PruneConfig, Validation) {
  PruneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.target_sparsity = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.channels_per_event = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.interval = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TrainingLoss, NoKdIsTaskLoss) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  auto state = start_run(f.model, f.scheme, cfg, 16);
  const auto batch = fixed_batches(f.data, 1, 16, 1).front();
  const auto loss = training_loss(state, cfg, batch, false);
  EXPECT_EQ(loss.kd, 0.0);
  EXPECT_EQ(loss.total.item(), loss.task);
  const auto direct = execute(f.graph, f.model.params, batch).outputs.at("loss").item();
  EXPECT_NEAR(loss.task, direct, 1e-12);
}

TEST(TrainingLoss, KlAtStartIsZero) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.kd = KDMethod::KL;
  auto state = start_run(f.model, f.scheme, cfg, 16);
  const auto loss = training_loss(state, cfg, fixed_batches(f.data, 1, 16, 1).front(), false);
  EXPECT_NEAR(loss.kd, 0.0, 1e-12);
  EXPECT_NEAR(loss.total.item(), loss.task, 1e-12);
}

TEST(TrainingLoss, DenseKdNeedsDenseLogits) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.kd = KDMethod::CWD;
  EXPECT_THROW(start_run(f.model, f.scheme, cfg, 16), Error);
}

TEST(TrainingLoss, CwdAndCirkdAtStartAreZero) {
  auto f = fixture("attention");
  for (auto kd : {KDMethod::CWD, KDMethod::CIRKD}) {
    PruneConfig cfg;
    cfg.kd = kd;
    auto state = start_run(f.model, f.scheme, cfg, 4);
    const auto loss = training_loss(state, cfg, fixed_batches(f.data, 1, 4, 1).front(), true);
    EXPECT_NEAR(loss.kd, 0.0, 1e-9) << kd_name(kd);
  }
}

TEST(PruneStep, LedgerMatchesReplay) {
  auto f = fixture("residual");
  PruneConfig cfg;
  cfg.learning_rate = 0.02;
  const std::int64_t batch = 8;
  const auto batches = fixed_batches(f.data, 10, batch, 2);
  auto state = start_run(f.model, f.scheme, cfg, batch);
  for (const auto& b : batches) prune_step(state, cfg, b);
  EXPECT_EQ(state.ledger.step_count(), 10);

  // replay: plain gradient passes and a hand-written momentum update
  auto params = clone_params(f.model.params);
  std::map<std::string, std::vector<double>> velocity, offline;
  for (const auto& b : batches) {
    for (auto& [_, t] : params) {
      t.set_requires_grad(true);
      t.zero_grad();
    }
    execute(f.graph, params, b, {.record_gradients = true}).outputs.at("loss").backward();
    for (const auto& [p, _] : state.ledger.raw()) {
      const auto s = producer_importance(f.graph, params, p);
      auto& acc = offline[p];
      acc.resize(s.size(), 0.0);
      for (std::size_t c = 0; c < s.size(); ++c) acc[c] += s[c];
    }
    for (auto& [name, t] : params) {
      auto& v = velocity[name];
      v.resize(static_cast<std::size_t>(t.numel()), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = cfg.momentum * v[i] + t.grad()[i];
        t.data()[i] -= cfg.learning_rate * v[i];
      }
    }
  }
  for (const auto& [p, v] : state.ledger.raw())
    for (std::size_t c = 0; c < v.size(); ++c) EXPECT_NEAR(v[c], offline.at(p)[c], 1e-12 * (1.0 + offline.at(p)[c]));
  for (const auto& [name, t] : params)
    for (std::size_t i = 0; i < t.data().size(); ++i) ASSERT_EQ(state.student.params.at(name).data()[i], t.data()[i]);
}

TEST(PruneStep, TeacherNeverChanges) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.kd = KDMethod::KL;
  auto state = start_run(f.model, f.scheme, cfg, 16);
  const auto before = params_hash(state.teacher.params);
  for (const auto& b : fixed_batches(f.data, 5, 16, 3)) prune_step(state, cfg, b);
  EXPECT_EQ(params_hash(state.teacher.params), before);
  EXPECT_NE(params_hash(state.student.params), before);
}

TEST(PruneEvent, PicksLowestScore) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  auto state = start_run(f.model, f.scheme, cfg, 1);
  std::vector<double> high(32, 0.9), low(32, 0.9);
  low[5] = 0.1;
  state.ledger.accumulate({{"fc1", high}, {"fc2", low}});
  ASSERT_EQ(prune_event(state, cfg), 1);
  ASSERT_EQ(state.events.size(), 1u);
  EXPECT_EQ(state.events[0].group, f.scheme.group_of("fc2")->id);
  EXPECT_EQ(state.events[0].unit, 5);
  EXPECT_EQ(state.masks.at("fc2").gates[5], 0);
  EXPECT_EQ(state.masks.at("fc2").surviving(), 31);
  EXPECT_EQ(state.ledger.step_count(), 0);
  EXPECT_GT(state.current_sparsity, 0.0);
}

TEST(PruneEvent, TiesGoToLowerGroupAndChannel) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.channels_per_event = 2;
  auto state = start_run(f.model, f.scheme, cfg, 1);
  ASSERT_EQ(prune_event(state, cfg), 2);
  const int first = std::min(f.scheme.group_of("fc1")->id, f.scheme.group_of("fc2")->id);
  EXPECT_EQ(state.events[0].group, first);
  EXPECT_EQ(state.events[0].unit, 0);
  EXPECT_EQ(state.events[1].group, first);
  EXPECT_EQ(state.events[1].unit, 1);
}

TEST(PruneEvent, KeepsTheLastUnitAndWarns) {
  const auto g = parse_graph(R"(
x = input() {layout=nc,channels=4}
y = input() {layout=index}
a = linear(x) {channels=2}
b = linear(a) {channels=8}
logits = linear(b) {channels=3}
loss = cross_entropy(logits, y)
)");
  const auto scheme = build_coupling_groups(g);
  PruneConfig cfg;
  cfg.target_sparsity = 0.9;
  auto state = start_run(Model{g, init_params(g, 0)}, scheme, cfg, 1);
  state.ledger.accumulate({{"a", {0.0, 0.0}}, {"b", std::vector<double>(8, 1.0)}});
  ASSERT_EQ(prune_event(state, cfg), 1);
  EXPECT_EQ(state.events[0].group, scheme.group_of("a")->id);
  state.ledger.accumulate({{"a", {0.0, 0.0}}, {"b", std::vector<double>(8, 1.0)}});
  ASSERT_EQ(prune_event(state, cfg), 1);
  EXPECT_EQ(state.events[1].group, scheme.group_of("b")->id);
  EXPECT_EQ(state.masks.at("a").surviving(), 1);
  ASSERT_FALSE(state.warnings.empty());
  EXPECT_NE(state.warnings[0].find("last unit"), std::string::npos);
}

TEST(PruneEvent, MasksStayConsistent) {
  auto f = fixture("attention");
  PruneConfig cfg;
  cfg.channels_per_event = 3;
  cfg.target_sparsity = 0.6;
  auto state = start_run(f.model, f.scheme, cfg, 1);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int e = 0; e < 5; ++e) {
    std::map<std::string, std::vector<double>> s;
    for (const auto& [p, v] : state.ledger.raw())
      for (std::size_t i = 0; i < v.size(); ++i) s[p].push_back(u(rng));
    state.ledger.accumulate(s);
    const auto before = state.current_sparsity;
    prune_event(state, cfg);
    EXPECT_TRUE(validate_masks(f.scheme, state.masks).ok());
    EXPECT_GE(state.current_sparsity, before);
  }
  EXPECT_EQ(state.mask_violations, 0u);
  EXPECT_EQ(state.mask_checks, 5u);
}

TEST(PruneEvent, GatedEqualsCompactedAfterEvents) {
  auto f = fixture("residual");
  PruneConfig cfg;
  cfg.channels_per_event = 4;
  auto state = start_run(f.model, f.scheme, cfg, 8);
  for (const auto& b : fixed_batches(f.data, 3, 8, 5)) prune_step(state, cfg, b);
  ASSERT_GT(prune_event(state, cfg), 0);
  const auto gating = make_gating(f.graph, f.scheme, state.masks);
  const auto in = fixed_batches(f.data, 1, 8, 6).front();
  const auto gated = execute(f.graph, state.student.params, in, {.gating = &gating}).outputs.at("out");
  const auto c = compact(state.student, f.scheme, state.masks);
  const auto small = execute(c.graph, c.params, in).outputs.at("out");
  for (std::size_t i = 0; i < gated.data().size(); ++i) EXPECT_NEAR(gated.data()[i], small.data()[i], 1e-6);
}

TEST(Run, TinyTargetIsFinetunedBaseline) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.target_sparsity = 1e-4;
  cfg.interval = 5;
  cfg.finetune_steps = 7;
  const auto batch_fn = make_batches(f.data, 16);
  const auto r = run_pruning(f.model, f.scheme, cfg, 16, batch_fn, nullptr);
  EXPECT_TRUE(r.events.empty());
  EXPECT_EQ(serialize_graph(r.pruned.graph), serialize_graph(f.graph));
  EXPECT_EQ(r.report.pruning_steps, 5);
  EXPECT_EQ(r.report.finetune_steps, 7);
  EXPECT_EQ(r.report.sparsity, 0.0);

  // the same steps without any pruning machinery
  Model base{f.graph, clone_params(f.model.params)};
  std::mt19937_64 rng(cfg.seed);
  std::map<std::string, std::vector<double>> velocity;
  for (int s = 0; s < 12; ++s) {
    const auto b = batch_fn(s, rng);
    for (auto& [_, t] : base.params) {
      t.set_requires_grad(true);
      t.zero_grad();
    }
    execute(f.graph, base.params, b, {.record_gradients = true}).outputs.at("loss").backward();
    const double lr = cfg.learning_rate * (s < 5 ? 1.0 : cfg.finetune_lr_scale);
    for (auto& [name, t] : base.params) {
      auto& v = velocity[name];
      v.resize(static_cast<std::size_t>(t.numel()), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = cfg.momentum * v[i] + t.grad()[i];
        t.data()[i] -= lr * v[i];
      }
    }
  }
  EXPECT_EQ(params_hash(r.pruned.params), params_hash(base.params));
}

TEST(Run, HalfSparsityBookkeeping) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.target_sparsity = 0.5;
  cfg.interval = 4;
  cfg.finetune_steps = 10;
  const auto r = run_pruning(f.model, f.scheme, cfg, 16, make_batches(f.data, 16), make_evaluator(f.data));
  const auto gran = event_granularity(f.graph, f.scheme, cfg.channels_per_event);
  const auto target_count = static_cast<double>(r.report.prunable_before) * (1.0 - cfg.target_sparsity);
  EXPECT_LE(std::abs(static_cast<double>(r.report.prunable_after) - target_count), static_cast<double>(gran));
  EXPECT_EQ(r.report.params_before - r.report.params_after, r.report.prunable_before - r.report.prunable_after);
  EXPECT_EQ(r.report.params_after, total_param_count(r.pruned.params));
  EXPECT_EQ(r.report.events, r.events.size());
  EXPECT_EQ(r.report.mask_violations, 0u);
  EXPECT_GE(r.report.speedup, 1.0);
  EXPECT_TRUE(r.report.teacher_unchanged);
  for (std::size_t i = 1; i < r.events.size(); ++i) EXPECT_GE(r.events[i].sparsity, r.events[i - 1].sparsity);
  EXPECT_EQ(r.report.finetune_steps, 10);
  EXPECT_EQ(r.report.pruning_steps % cfg.interval, 0);
}

TEST(Run, DefaultFinetuneIsThreeTimesPruning) {
  auto f = fixture("plain-mlp");
  PruneConfig cfg;
  cfg.target_sparsity = 0.1;
  cfg.interval = 2;
  cfg.channels_per_event = 4;
  const auto r = run_pruning(f.model, f.scheme, cfg, 8, make_batches(f.data, 8), nullptr);
  EXPECT_EQ(r.report.finetune_steps, 3 * r.report.pruning_steps);
}

TEST(Run, EventsAreReproducible) {
  auto f = fixture("residual");
  PruneConfig cfg;
  cfg.target_sparsity = 0.3;
  cfg.interval = 3;
  cfg.channels_per_event = 2;
  cfg.finetune_steps = 0;
  cfg.seed = 11;
  const auto a = run_pruning(f.model, f.scheme, cfg, 8, make_batches(f.data, 8), nullptr);
  const auto b = run_pruning(f.model, f.scheme, cfg, 8, make_batches(f.data, 8), nullptr);
  ASSERT_FALSE(a.events.empty());
  EXPECT_EQ(events_text(a.events), events_text(b.events));
  EXPECT_EQ(params_hash(a.pruned.params), params_hash(b.pruned.params));
  cfg.seed = 12;
  const auto c = run_pruning(f.model, f.scheme, cfg, 8, make_batches(f.data, 8), nullptr);
  EXPECT_NE(events_text(a.events), events_text(c.events));
}

TEST(Run, LargerTeacherMustMatchLogits) {
  auto f = fixture("plain-mlp");
  ZooOptions wide;
  wide.width = 2;
  const auto tg = zoo_build("plain-mlp", wide);
  const Model teacher{tg, init_params(tg, 1)};
  PruneConfig cfg;
  cfg.kd = KDMethod::KL;
  EXPECT_NO_THROW(start_run(f.model, f.scheme, cfg, 4, &teacher));
  ZooOptions other;
  other.classes = 5;
  const auto bad = zoo_build("plain-mlp", other);
  const Model wrong{bad, init_params(bad, 1)};
  EXPECT_THROW(start_run(f.model, f.scheme, cfg, 4, &wrong), Error);
}

TEST(Run, SchemeMustMatchGraph) {
  auto f = fixture("plain-mlp");
  const auto other = build_coupling_groups(zoo_build("residual"));
  EXPECT_THROW(start_run(f.model, other, PruneConfig{}, 4), Error);
}

TEST(Flops, EstimatorMatchesExecutedMacs) {
  std::mt19937_64 rng(7);
  for (const auto& name : zoo_names()) {
    const auto g = zoo_build(name);
    const auto p = init_params(g, 0);
    const auto in = random_inputs(g, 1, rng);
    NoGradGuard guard;
    reset_mac_count();
    execute(g, p, in);
    EXPECT_EQ(static_cast<std::uint64_t>(count_macs(g)), mac_count()) << name;
    EXPECT_EQ(count_flops(g), 2 * count_macs(g));
  }
}

TEST(Flops, CompactedModelsCountTheirOwnMacs) {
  std::mt19937_64 rng(8);
  for (const auto& name : zoo_names()) {
    const auto g = zoo_build(name);
    const auto scheme = build_coupling_groups(g);
    const auto c = compact(Model{g, init_params(g, 0)}, scheme, random_masks(scheme, rng));
    NoGradGuard guard;
    reset_mac_count();
    execute(c.graph, c.params, random_inputs(c.graph, 1, rng));
    EXPECT_EQ(static_cast<std::uint64_t>(count_macs(c.graph)), mac_count()) << name;
    EXPECT_LE(count_macs(c.graph), count_macs(g));
  }
}

TEST(Sparsity, CounterMatchesCompactedParameters) {
  std::mt19937_64 rng(9);
  for (const auto& name : zoo_names()) {
    const auto g = zoo_build(name);
    const auto scheme = build_coupling_groups(g);
    const SparsityCounter counter(g, scheme);
    const Model m{g, init_params(g, 0)};
    const auto masks = random_masks(scheme, rng);
    const auto c = compact(m, scheme, masks);
    // norm scales and shifts ride along but are not counted as prunable weights
    auto tracked = [&](const ParamStore& ps) {
      std::int64_t n = 0;
      for (const auto& [k, t] : ps)
        if (counter.tracked().count(k.substr(0, k.find('.')))) n += t.numel();
      return n;
    };
    EXPECT_EQ(tracked(m.params), counter.dense_count()) << name;
    EXPECT_EQ(tracked(c.params), counter.count(masks)) << name;
    EXPECT_EQ(counter.sparsity(full_masks(scheme)), 0.0);
  }
}

TEST(Files, EventsCsvRoundTrip) {
  std::vector<PruneEvent> ev{{64, 1, 3, {3, 11}, 0.125, 0.0625}, {128, 0, 0, {0}, 1e-300, 1.0 / 3.0}};
  std::stringstream s;
  write_events_csv(s, ev);
  const auto back = read_events_csv(s);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].channels, (std::vector<std::int64_t>{3, 11}));
  EXPECT_EQ(back[1].score, 1e-300);
  EXPECT_EQ(back[1].sparsity, 1.0 / 3.0);
  EXPECT_EQ(events_text(back), events_text(ev));
  std::stringstream bad("nope\n");
  EXPECT_THROW(read_events_csv(bad), Error);
}

TEST(Files, MasksJsonRoundTrip) {
  const auto scheme = build_coupling_groups(zoo_build("grouped"));
  std::mt19937_64 rng(10);
  const auto masks = random_masks(scheme, rng);
  const auto back = masks_from_json(masks_to_json(masks));
  ASSERT_EQ(back.size(), masks.size());
  for (const auto& [k, m] : masks) EXPECT_EQ(back.at(k).gates, m.gates);
  EXPECT_THROW(masks_from_json("{\"a\": [1, 2]}"), Error);
  EXPECT_THROW(masks_from_json("{"), Error);
}
