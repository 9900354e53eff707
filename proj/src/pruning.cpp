#include "cpd/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cpd/ops.hpp"
#include "json.hpp"

namespace cpd {

void PruneConfig::validate() const {
  if (interval <= 0) throw Error("interval must be positive");
  if (channels_per_event < 1) throw Error("channels_per_event must be at least 1");
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) throw Error("target sparsity must lie in [0, 1)");
  if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must lie in [0, 1)");
  if (pretrain_steps < 0) throw Error("pretrain_steps must be nonnegative");
  if (kd != KDMethod::None) kd_config.validate();
}

namespace {

std::int64_t kept(const std::vector<bool>* keep, std::int64_t fallback) {
  if (!keep) return fallback;
  return std::count(keep->begin(), keep->end(), true);
}

template <typename Map, typename Key>
const std::vector<bool>* find_keep(const Map& m, const Key& k) {
  auto it = m.find(k);
  return it == m.end() ? nullptr : &it->second;
}

}  // namespace

std::int64_t node_param_count(const Graph& graph, const OpNode& n, const ChannelPlan& plan) {
  const auto out = kept(find_keep(plan.producer_keep, n.id), n.out_channels);
  const std::int64_t bias = n.attr_int("bias", 1) ? out : 0;
  switch (n.type) {
    case OpType::Linear: {
      const auto in = kept(find_keep(plan.input_keep, std::make_pair(n.id, 0)), graph.input_node(n, 0).out_channels);
      return in * out + bias;
    }
    case OpType::Conv: {
      const auto in_ch = graph.input_node(n, 0).out_channels;
      const auto k = n.attr_int("kernel", 3);
      if (n.is_depthwise(in_ch)) return out * k * k + bias;
      const auto in = kept(find_keep(plan.input_keep, std::make_pair(n.id, 0)), in_ch);
      return out * (in / n.attr_int("groups", 1)) * k * k + bias;
    }
    case OpType::Param:
      return numel_of(n.out_shape(1)) / n.out_channels * out;
    default:
      return 0;
  }
}

std::int64_t total_param_count(const ParamStore& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

SparsityCounter::SparsityCounter(const Graph& graph, const PruningScheme& scheme) : graph_(graph), scheme_(scheme) {
  for (const auto& g : scheme.groups) {
    if (!g.prunable) continue;
    for (const auto& p : g.producers) tracked_.insert(p);
    for (const auto& c : g.consumers) tracked_.insert(c.op);
  }
  const ChannelPlan dense;
  for (const auto& id : tracked_) dense_ += node_param_count(graph_, graph_.node(id), dense);
}

std::int64_t SparsityCounter::count(const MaskSet& masks) const {
  const auto plan = make_plan(graph_, scheme_, masks);
  std::int64_t n = 0;
  for (const auto& id : tracked_) n += node_param_count(graph_, graph_.node(id), plan);
  return n;
}

double SparsityCounter::sparsity(const MaskSet& masks) const {
  if (dense_ == 0) return 0.0;
  return 1.0 - static_cast<double>(count(masks)) / static_cast<double>(dense_);
}

std::int64_t count_macs(const Graph& graph) {
  std::int64_t macs = 0;
  for (const auto& n : graph.nodes()) {
    switch (n.type) {
      case OpType::Linear: {
        const auto in = graph.input_node(n, 0).out_channels;
        const auto positions = n.layout == Layout::NTC ? n.tokens() : 1;
        macs += positions * in * n.out_channels;
        break;
      }
      case OpType::Conv: {
        const auto in = graph.input_node(n, 0).out_channels;
        const auto k = n.attr_int("kernel", 3);
        macs += n.out_channels * (in / n.attr_int("groups", 1)) * k * k * n.out_spatial.h * n.out_spatial.w;
        break;
      }
      case OpType::MatMul: {
        const auto& a = graph.input_node(n, 0);
        const auto& b = graph.input_node(n, 1);
        if (b.layout == Layout::NCT) {
          macs += a.tokens() * a.out_channels * b.tokens();
        } else {
          macs += n.tokens() * a.out_channels * b.out_channels;
        }
        break;
      }
      default:
        break;
    }
  }
  return macs;
}

std::string loss_node(const Graph& graph) {
  std::string id;
  for (const auto& n : graph.nodes()) {
    if (n.type != OpType::CrossEntropy) continue;
    if (!id.empty()) throw Error("graph has more than one cross-entropy loss");
    id = n.id;
  }
  if (id.empty()) throw Error("graph has no cross-entropy loss");
  return id;
}

std::string logits_node(const Graph& graph) { return graph.node(loss_node(graph)).inputs.at(0); }

namespace {

std::string label_input(const Graph& graph) { return graph.node(loss_node(graph)).inputs.at(1); }

void sgd_update(ParamStore& params, std::map<std::string, std::vector<double>>& velocity, double lr, double momentum) {
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto& v = velocity[name];
    if (v.empty()) v.assign(g.size(), 0.0);
    auto d = p.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      d[i] -= lr * v[i];
    }
  }
}

void zero_grads(ParamStore& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

std::vector<std::int64_t> labels_of(const Tensor& t) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(t.numel()));
  for (double v : t.data()) out.push_back(static_cast<std::int64_t>(std::llround(v)));
  return out;
}

}  // namespace

PruneRunState start_run(const Model& model, const PruningScheme& scheme, const PruneConfig& config,
                        std::int64_t batch_size, const Model* teacher) {
  config.validate();
  if (scheme.graph_fingerprint != graph_fingerprint(model.graph))
    throw Error("pruning scheme was built for a different graph");
  const auto& logits = model.graph.node(logits_node(model.graph));
  if ((config.kd == KDMethod::CWD || config.kd == KDMethod::CIRKD) && logits.layout != Layout::NCHW)
    throw Error(std::string(kd_name(config.kd)) + " distillation needs dense [N, C, H, W] logits");

  PruneRunState s;
  s.student = Model{model.graph, clone_params(model.params)};
  s.teacher = teacher ? Model{teacher->graph, clone_params(teacher->params)} : Model{model.graph, clone_params(model.params)};
  if (teacher) {
    const auto& t_logits = s.teacher.graph.node(logits_node(s.teacher.graph));
    if (t_logits.id != logits.id || t_logits.out_channels != logits.out_channels || t_logits.layout != logits.layout ||
        t_logits.out_spatial != logits.out_spatial)
      throw Error("teacher logits do not match the student's");
  }
  s.scheme = scheme;
  s.masks = full_masks(scheme);
  s.ledger = ImportanceLedger(model.graph, scheme, batch_size);
  s.counter = std::make_unique<SparsityCounter>(model.graph, scheme);
  if (config.kd == KDMethod::CIRKD)
    s.queue = std::make_unique<MemoryQueue>(logits.out_channels, logits.out_channels, config.kd_config.queue_size);
  s.rng.seed(config.seed);
  s.batch_size = batch_size;
  s.teacher_hash = params_hash(s.teacher.params);
  return s;
}

StepLoss training_loss(PruneRunState& state, const PruneConfig& config, const TensorMap& batch, bool update_queue) {
  const auto& graph = state.student.graph;
  const auto gating = make_gating(graph, state.scheme, state.masks);
  ExecOptions opts;
  opts.record_gradients = true;
  opts.gating = &gating;
  const auto res = execute(graph, state.student.params, batch, opts);
  StepLoss out;
  out.total = res.outputs.at(loss_node(graph));
  out.task = out.total.item();
  if (config.kd == KDMethod::None) return out;

  const Tensor& s_logits = res.value(graph, logits_node(graph));
  Tensor t_logits;
  {
    const auto t_res = execute(state.teacher.graph, state.teacher.params, batch);
    t_logits = t_res.value(state.teacher.graph, logits_node(state.teacher.graph));
  }
  const auto& kd = config.kd_config;
  Tensor term;
  switch (config.kd) {
    case KDMethod::KL:
      term = kd_kl(s_logits, t_logits, kd.temperature, 1);
      break;
    case KDMethod::CWD:
      term = kd_cwd(s_logits, t_logits, kd.temperature, kd.cwd_axis);
      break;
    case KDMethod::CIRKD: {
      const auto labels = labels_of(batch.at(label_input(graph)));
      auto rel = kd_cirkd(s_logits, t_logits, labels, *state.queue, kd, state.rng, update_queue);
      term = ops::add(kd_kl(s_logits, t_logits, kd.temperature, 1), rel.total);
      break;
    }
    case KDMethod::None:
      break;
  }
  out.kd = term.item();
  out.total = ops::add(out.total, ops::scale(term, kd.weight));
  return out;
}

void prune_step(PruneRunState& state, const PruneConfig& config, const TensorMap& batch, bool score, double lr_scale) {
  zero_grads(state.student.params);
  const auto loss = training_loss(state, config, batch, true);
  const double value = loss.total.item();
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite training loss at step " << state.step << " (task " << loss.task << ", kd " << loss.kd
        << ", sparsity " << state.current_sparsity << ")";
    throw Error(msg.str());
  }
  loss.total.backward();
  if (score) state.last_scores = state.ledger.accumulate_gradients(state.student.graph, state.student.params);
  sgd_update(state.student.params, state.velocity, config.learning_rate * lr_scale, config.momentum);
  state.last_loss = value;
  state.last_kd = loss.kd;
  ++state.step;
}

int prune_event(PruneRunState& state, const PruneConfig& config) {
  int removed = 0;
  for (std::int64_t k = 0; k < config.channels_per_event; ++k) {
    const auto ranked = state.ledger.ranked_units(state.scheme, state.masks);
    const UnitChoice* chosen = nullptr;
    for (const auto& cand : ranked) {
      const auto& g = state.scheme.groups[static_cast<std::size_t>(cand.group)];
      const auto alive = state.masks.at(g.producers.front()).surviving() / g.unit;
      if (alive <= 1) {
        const auto msg = "group " + std::to_string(g.id) + " keeps its last unit; taking the next-lowest score";
        if (std::find(state.warnings.begin(), state.warnings.end(), msg) == state.warnings.end())
          state.warnings.push_back(msg);
        continue;
      }
      chosen = &cand;
      break;
    }
    if (!chosen) break;
    const auto& g = state.scheme.groups[static_cast<std::size_t>(chosen->group)];
    auto trial = state.masks;
    const auto channels = g.unit_channels(chosen->unit);
    for (const auto& p : g.producers)
      for (auto c : channels) trial[p].gates[static_cast<std::size_t>(c)] = 0;
    const double next = state.counter->sparsity(trial);
    // fire only if it moves sparsity closer to the target
    if (!(config.target_sparsity - state.current_sparsity > (next - state.current_sparsity) / 2.0)) break;
    state.masks = std::move(trial);
    state.current_sparsity = next;
    state.events.push_back(PruneEvent{state.step, g.id, chosen->unit, channels, chosen->score, next});
    ++removed;
  }
  const auto report = validate_masks(state.scheme, state.masks);
  ++state.mask_checks;
  state.mask_violations += report.violations.size();
  state.ledger.reset();
  return removed;
}

void train_dense(Model& model, const PruneConfig& config, std::int64_t steps, const BatchFn& batches,
                 std::mt19937_64& rng) {
  const auto loss_id = loss_node(model.graph);
  std::map<std::string, std::vector<double>> velocity;
  for (std::int64_t s = 0; s < steps; ++s) {
    const auto batch = batches(s, rng);
    zero_grads(model.params);
    ExecOptions opts;
    opts.record_gradients = true;
    const auto res = execute(model.graph, model.params, batch, opts);
    const auto& loss = res.outputs.at(loss_id);
    if (!std::isfinite(loss.item())) throw Error("non-finite loss during dense training at step " + std::to_string(s));
    loss.backward();
    sgd_update(model.params, velocity, config.learning_rate, config.momentum);
  }
}

RunResult run_pruning(const Model& model, const PruningScheme& scheme, const PruneConfig& config,
                      std::int64_t batch_size, const BatchFn& batches, const EvalFn& evaluate,
                      const Model* teacher) {
  config.validate();
  Model dense{model.graph, clone_params(model.params)};
  std::mt19937_64 pre_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  if (config.pretrain_steps > 0) train_dense(dense, config, config.pretrain_steps, batches, pre_rng);

  auto state = start_run(dense, scheme, config, batch_size, teacher);
  std::int64_t events = 0;
  while (true) {
    prune_step(state, config, batches(state.step, state.rng));
    if (state.step % config.interval != 0) continue;
    const int removed = prune_event(state, config);
    events += removed;
    if (removed == 0 || events >= config.max_events) break;
  }
  const auto pruning_steps = state.step;
  const auto finetune = config.finetune_steps < 0 ? 3 * pruning_steps : config.finetune_steps;
  for (std::int64_t s = 0; s < finetune; ++s)
    prune_step(state, config, batches(state.step, state.rng), false, config.finetune_lr_scale);

  RunResult out;
  out.report.teacher_unchanged = params_hash(state.teacher.params) == state.teacher_hash;
  if (!out.report.teacher_unchanged) throw Error("teacher weights changed during the run");
  out.pruned = compact(state.student, state.scheme, state.masks);
  out.teacher = state.teacher;
  out.masks = state.masks;
  out.events = state.events;
  out.warnings = state.warnings;

  auto& r = out.report;
  r.params_before = total_param_count(dense.params);
  r.params_after = total_param_count(out.pruned.params);
  r.prunable_before = state.counter->dense_count();
  r.prunable_after = state.counter->count(state.masks);
  r.sparsity = state.current_sparsity;
  r.target_sparsity = config.target_sparsity;
  r.flops_before = count_flops(dense.graph);
  r.flops_after = count_flops(out.pruned.graph);
  r.speedup = r.flops_after > 0 ? static_cast<double>(r.flops_before) / static_cast<double>(r.flops_after) : 1.0;
  if (evaluate) {
    r.metric_before = evaluate(dense);
    r.metric_after = evaluate(out.pruned);
  }
  r.pruning_steps = pruning_steps;
  r.finetune_steps = finetune;
  r.events = state.events.size();
  r.mask_checks = state.mask_checks;
  r.mask_violations = state.mask_violations;
  return out;
}

void write_events_csv(std::ostream& out, const std::vector<PruneEvent>& events) {
  out << "step,group,unit,channels,score,sparsity\n";
  char buf[64];
  for (const auto& e : events) {
    out << e.step << ',' << e.group << ',' << e.unit << ',';
    for (std::size_t i = 0; i < e.channels.size(); ++i) out << (i ? " " : "") << e.channels[i];
    std::snprintf(buf, sizeof buf, ",%.17g", e.score);
    out << buf;
    std::snprintf(buf, sizeof buf, ",%.17g\n", e.sparsity);
    out << buf;
  }
}

std::vector<PruneEvent> read_events_csv(std::istream& in) {
  std::vector<PruneEvent> events;
  std::string line;
  std::getline(in, line);
  if (line != "step,group,unit,channels,score,sparsity") throw Error("not an events log");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& s : f) std::getline(ss, s, ',');
    PruneEvent e;
    e.step = std::stoll(f[0]);
    e.group = std::stoi(f[1]);
    e.unit = std::stoll(f[2]);
    std::stringstream cs(f[3]);
    for (std::int64_t c; cs >> c;) e.channels.push_back(c);
    e.score = std::stod(f[4]);
    e.sparsity = std::stod(f[5]);
    events.push_back(std::move(e));
  }
  return events;
}

std::string masks_to_json(const MaskSet& masks) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [owner, m] : masks) {
    std::vector<int> g(m.gates.begin(), m.gates.end());
    doc[owner] = g;
  }
  return doc.dump() + "\n";
}

MaskSet masks_from_json(const std::string& text) {
  MaskSet out;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& [owner, arr] : doc.items()) {
      GateMask m{owner, {}};
      for (const auto& v : arr) {
        const int g = v.get<int>();
        if (g != 0 && g != 1) throw Error("gate values must be 0 or 1");
        m.gates.push_back(static_cast<std::uint8_t>(g));
      }
      out[owner] = std::move(m);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed mask file: ") + e.what());
  }
  return out;
}

}  // namespace cpd
