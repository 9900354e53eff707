#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpd/tensor.hpp"

namespace cpd {

enum class KDMethod { None, KL, CWD, CIRKD };

std::string_view kd_name(KDMethod m);
KDMethod kd_from_name(std::string_view name);

enum class CwdAxis { Spatial, Channel };

struct KDConfig {
  double temperature = 4.0;
  double alpha = 1.0;  ///< batch pixel-to-pixel weight
  double beta = 0.1;   ///< memory pixel-to-pixel weight
  double gamma = 0.1;  ///< memory pixel-to-region weight
  std::int64_t queue_size = 64;        ///< entries per class in each queue
  std::int64_t pixels_per_image = 16;  ///< sampled anchors per image and step
  std::int64_t memory_samples = 32;    ///< pixel-queue entries drawn per step
  double relation_temperature = 0.1;   ///< similarity softmax temperature
  double weight = 1.0;                 ///< multiplier of the KD term in the training loss
  CwdAxis cwd_axis = CwdAxis::Spatial;  ///< softmax axis of channel-wise distillation

  /// Throws Error when T <= 0 or a relational weight lies outside [0.1, 1].
  void validate() const;
};

/// T^2 * mean over positions of KL(softmax(t/T) || softmax(s/T)) along
/// `class_axis`. Gradients flow into `student` only.
Tensor kd_kl(const Tensor& student, const Tensor& teacher, double temperature, int class_axis = 1);

/// Channel-wise distillation of [N, C, H, W] maps. Spatial: per channel a
/// softmax over the H*W positions, KL summed over positions, scaled by T^2/C
/// and summed over channels, averaged over the batch. Channel: softmax across
/// channels at each position, KL averaged over positions, scaled by T^2.
Tensor kd_cwd(const Tensor& student, const Tensor& teacher, double temperature, CwdAxis axis = CwdAxis::Spatial);

/// Class-aware FIFO queues of teacher embeddings (unit length rows).
class MemoryQueue {
 public:
  MemoryQueue() = default;
  MemoryQueue(std::int64_t classes, std::int64_t dim, std::int64_t capacity);

  std::int64_t classes() const { return static_cast<std::int64_t>(pixels_.size()); }
  std::int64_t dim() const { return dim_; }
  std::int64_t capacity() const { return capacity_; }
  bool empty() const;

  void push_pixel(std::int64_t cls, std::vector<double> embedding);
  void push_region(std::int64_t cls, std::vector<double> embedding);
  const std::deque<std::vector<double>>& pixels(std::int64_t cls) const { return pixels_.at(static_cast<std::size_t>(cls)); }
  const std::deque<std::vector<double>>& regions(std::int64_t cls) const { return regions_.at(static_cast<std::size_t>(cls)); }
  std::int64_t pixel_count() const;
  std::int64_t region_count() const;

 private:
  std::vector<std::deque<std::vector<double>>> pixels_;
  std::vector<std::deque<std::vector<double>>> regions_;
  std::int64_t dim_ = 0;
  std::int64_t capacity_ = 0;
};

struct CirkdTerms {
  Tensor batch_p2p;
  Tensor memory_p2p;
  Tensor memory_p2r;
  Tensor total;  ///< alpha * batch_p2p + beta * memory_p2p + gamma * memory_p2r
};

/// Relational distillation of [N, D, H, W] pixel embeddings with [N, H, W]
/// labels. Anchors are `pixels_per_image` sampled pixels per image; each
/// relation is a row-softmax over cosine similarities / relation_temperature
/// compared with KL(teacher || student). An empty queue contributes 0. When
/// `update_queue` is set, teacher pixel and region embeddings are pushed after
/// the loss is computed.
CirkdTerms kd_cirkd(const Tensor& student, const Tensor& teacher, std::span<const std::int64_t> labels,
                    MemoryQueue& queue, const KDConfig& config, std::mt19937_64& rng, bool update_queue = true);

}  // namespace cpd
