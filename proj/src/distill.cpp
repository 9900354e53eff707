#include "cpd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpd/ops.hpp"

namespace cpd {

std::string_view kd_name(KDMethod m) {
  switch (m) {
    case KDMethod::None: return "none";
    case KDMethod::KL: return "kl";
    case KDMethod::CWD: return "cwd";
    case KDMethod::CIRKD: return "cirkd";
  }
  return "none";
}

KDMethod kd_from_name(std::string_view name) {
  if (name == "none") return KDMethod::None;
  if (name == "kl") return KDMethod::KL;
  if (name == "cwd") return KDMethod::CWD;
  if (name == "cirkd") return KDMethod::CIRKD;
  throw Error("unknown KD method '" + std::string(name) + "' (expected none, kl, cwd or cirkd)");
}

void KDConfig::validate() const {
  if (!(temperature > 0.0)) throw Error("KD temperature must be positive");
  for (double v : {alpha, beta, gamma})
    if (!(v >= 0.1 && v <= 1.0)) throw Error("relational KD weights must lie in [0.1, 1]");
  if (queue_size <= 0 || pixels_per_image <= 0 || memory_samples <= 0) throw Error("KD queue sizes must be positive");
  if (!(relation_temperature > 0.0)) throw Error("relation temperature must be positive");
  if (!(weight >= 0.0)) throw Error("KD weight must be nonnegative");
}

Tensor kd_kl(const Tensor& student, const Tensor& teacher, double temperature, int class_axis) {
  if (student.shape() != teacher.shape())
    throw ShapeError("kd_kl: student " + shape_str(student.shape()) + " vs teacher " + shape_str(teacher.shape()));
  if (!(temperature > 0.0)) throw Error("KD temperature must be positive");
  const auto t_log = ops::log_softmax(teacher.detach(), class_axis, temperature);
  const auto s_log = ops::log_softmax(student, class_axis, temperature);
  return ops::scale(ops::mean(ops::kl_divergence(t_log, s_log, class_axis)), temperature * temperature);
}

Tensor kd_cwd(const Tensor& student, const Tensor& teacher, double temperature, CwdAxis axis) {
  if (student.shape() != teacher.shape())
    throw ShapeError("kd_cwd: student " + shape_str(student.shape()) + " vs teacher " + shape_str(teacher.shape()));
  if (student.rank() != 4) throw ShapeError("kd_cwd expects [N, C, H, W] maps");
  if (!(temperature > 0.0)) throw Error("KD temperature must be positive");
  const auto n = student.dim(0), c = student.dim(1), hw = student.dim(2) * student.dim(3);
  const double t2 = temperature * temperature;
  if (axis == CwdAxis::Channel) return kd_kl(student, teacher, temperature, 1);
  const auto s = ops::reshape(student, {n, c, hw});
  const auto t = ops::reshape(teacher.detach(), {n, c, hw});
  const auto kl = ops::kl_divergence(ops::log_softmax(t, 2, temperature), ops::log_softmax(s, 2, temperature), 2);
  // kl: [N, C]; mean over both axes = (1/C) sum_c, averaged over the batch
  return ops::scale(ops::mean(kl), t2);
}

MemoryQueue::MemoryQueue(std::int64_t classes, std::int64_t dim, std::int64_t capacity)
    : pixels_(static_cast<std::size_t>(classes)), regions_(static_cast<std::size_t>(classes)), dim_(dim), capacity_(capacity) {
  if (classes <= 0 || dim <= 0 || capacity <= 0) throw Error("memory queue sizes must be positive");
}

bool MemoryQueue::empty() const { return pixel_count() == 0 && region_count() == 0; }

namespace {

void push_fifo(std::deque<std::vector<double>>& q, std::vector<double> e, std::int64_t capacity) {
  q.push_back(std::move(e));
  while (static_cast<std::int64_t>(q.size()) > capacity) q.pop_front();
}

std::int64_t total(const std::vector<std::deque<std::vector<double>>>& qs) {
  std::int64_t n = 0;
  for (const auto& q : qs) n += static_cast<std::int64_t>(q.size());
  return n;
}

}  // namespace

void MemoryQueue::push_pixel(std::int64_t cls, std::vector<double> embedding) {
  if (static_cast<std::int64_t>(embedding.size()) != dim_) throw ShapeError("queue embedding size mismatch");
  push_fifo(pixels_.at(static_cast<std::size_t>(cls)), std::move(embedding), capacity_);
}

void MemoryQueue::push_region(std::int64_t cls, std::vector<double> embedding) {
  if (static_cast<std::int64_t>(embedding.size()) != dim_) throw ShapeError("queue embedding size mismatch");
  push_fifo(regions_.at(static_cast<std::size_t>(cls)), std::move(embedding), capacity_);
}

std::int64_t MemoryQueue::pixel_count() const { return total(pixels_); }
std::int64_t MemoryQueue::region_count() const { return total(regions_); }

namespace {

// KL(teacher rows || student rows) of softmax(anchor . keys / tau), averaged
// over rows. keys: [K, D] constant.
Tensor relation_to_keys(const Tensor& s_anchor, const Tensor& t_anchor, const Tensor& keys, double tau) {
  const auto kt = ops::permute(keys, {1, 0});
  const auto s_log = ops::log_softmax(ops::matmul(s_anchor, kt), 1, tau);
  const auto t_log = ops::log_softmax(ops::matmul(t_anchor, kt), 1, tau);
  return ops::mean(ops::kl_divergence(t_log, s_log, 1));
}

Tensor stack_rows(const std::vector<const std::vector<double>*>& rows, std::int64_t dim) {
  std::vector<double> v;
  v.reserve(rows.size() * static_cast<std::size_t>(dim));
  for (const auto* r : rows) v.insert(v.end(), r->begin(), r->end());
  return Tensor({static_cast<std::int64_t>(rows.size()), dim}, std::move(v));
}

}  // namespace

CirkdTerms kd_cirkd(const Tensor& student, const Tensor& teacher, std::span<const std::int64_t> labels,
                    MemoryQueue& queue, const KDConfig& config, std::mt19937_64& rng, bool update_queue) {
  if (student.shape() != teacher.shape())
    throw ShapeError("kd_cirkd: student " + shape_str(student.shape()) + " vs teacher " + shape_str(teacher.shape()));
  if (student.rank() != 4) throw ShapeError("kd_cirkd expects [N, D, H, W] embeddings");
  const auto n = student.dim(0), d = student.dim(1), hw = student.dim(2) * student.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != n * hw) throw ShapeError("kd_cirkd: label count does not match embeddings");
  if (queue.dim() != d) throw ShapeError("kd_cirkd: memory queue dimension does not match embeddings");
  for (auto l : labels)
    if (l < 0 || l >= queue.classes()) throw Error("kd_cirkd: label out of range");
  const double tau = config.relation_temperature;

  const auto p = std::min(config.pixels_per_image, hw);
  std::vector<std::int64_t> picks;
  std::vector<std::int64_t> order(static_cast<std::size_t>(hw));
  for (std::int64_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    for (std::int64_t k = 0; k < p; ++k) {
      std::uniform_int_distribution<std::int64_t> pick(k, hw - 1);
      std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(pick(rng))]);
      picks.push_back(i * hw + order[static_cast<std::size_t>(k)]);
    }
  }

  auto rows = [&](const Tensor& x) {
    const auto flat = ops::reshape(ops::permute(x, {0, 2, 3, 1}), {n * hw, d});
    return ops::l2_normalize(ops::gather(flat, 0, picks), 1);
  };
  const auto s_rows = rows(student);
  const Tensor t_rows = rows(teacher.detach()).detach();

  CirkdTerms out;
  {
    const auto s_sim = ops::reshape(ops::matmul(s_rows, ops::permute(s_rows, {1, 0})), {n, p, n, p});
    const auto t_sim = ops::reshape(ops::matmul(t_rows, ops::permute(t_rows, {1, 0})), {n, p, n, p});
    const auto kl = ops::kl_divergence(ops::log_softmax(t_sim, 3, tau), ops::log_softmax(s_sim, 3, tau), 3);
    out.batch_p2p = ops::mean(kl);
  }

  std::vector<std::int64_t> filled;
  for (std::int64_t k = 0; k < queue.classes(); ++k)
    if (!queue.pixels(k).empty()) filled.push_back(k);
  if (filled.empty()) {
    out.memory_p2p = Tensor::scalar(0.0);
  } else {
    std::vector<const std::vector<double>*> keys;
    std::uniform_int_distribution<std::size_t> cls(0, filled.size() - 1);
    for (std::int64_t m = 0; m < config.memory_samples; ++m) {
      const auto& q = queue.pixels(filled[cls(rng)]);
      std::uniform_int_distribution<std::size_t> entry(0, q.size() - 1);
      keys.push_back(&q[entry(rng)]);
    }
    out.memory_p2p = relation_to_keys(s_rows, t_rows, stack_rows(keys, d), tau);
  }

  if (queue.region_count() == 0) {
    out.memory_p2r = Tensor::scalar(0.0);
  } else {
    std::vector<const std::vector<double>*> keys;
    for (std::int64_t k = 0; k < queue.classes(); ++k)
      for (const auto& e : queue.regions(k)) keys.push_back(&e);
    out.memory_p2r = relation_to_keys(s_rows, t_rows, stack_rows(keys, d), tau);
  }

  out.total = ops::add(ops::add(ops::scale(out.batch_p2p, config.alpha), ops::scale(out.memory_p2p, config.beta)),
                       ops::scale(out.memory_p2r, config.gamma));

  if (update_queue) {
    const auto tv = t_rows.data();
    for (std::size_t r = 0; r < picks.size(); ++r) {
      const auto first = tv.begin() + static_cast<std::ptrdiff_t>(r * static_cast<std::size_t>(d));
      queue.push_pixel(labels[static_cast<std::size_t>(picks[r])], std::vector<double>(first, first + d));
    }
    const auto raw = teacher.data();
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<std::vector<double>> sums(static_cast<std::size_t>(queue.classes()), std::vector<double>(static_cast<std::size_t>(d), 0.0));
      std::vector<std::int64_t> counts(static_cast<std::size_t>(queue.classes()), 0);
      for (std::int64_t px = 0; px < hw; ++px) {
        const auto k = static_cast<std::size_t>(labels[static_cast<std::size_t>(i * hw + px)]);
        ++counts[k];
        for (std::int64_t c = 0; c < d; ++c) sums[k][static_cast<std::size_t>(c)] += raw[static_cast<std::size_t>((i * d + c) * hw + px)];
      }
      for (std::size_t k = 0; k < sums.size(); ++k) {
        if (counts[k] == 0) continue;
        double norm = 0.0;
        for (auto& v : sums[k]) {
          v /= static_cast<double>(counts[k]);
          norm += v * v;
        }
        norm = std::max(std::sqrt(norm), 1e-12);
        for (auto& v : sums[k]) v /= norm;
        queue.push_region(static_cast<std::int64_t>(k), std::move(sums[k]));
      }
    }
  }
  return out;
}

}  // namespace cpd
