#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cpd/tensor.hpp"

namespace cpd::ops {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

/// Matrix product over the last two axes. Supports [M,K]x[K,N],
/// [B,M,K]x[B,K,N] and [B,M,K]x[K,N] (shared right operand).
Tensor matmul(const Tensor& a, const Tensor& b);

/// Direct 2-D convolution. x: [N,Ci,H,W], w: [Co,Ci/groups,KH,KW], bias: [Co]
/// or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int groups);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

/// softmax(x / temperature) along `axis`. A mask of length dim(axis) removes
/// entries (their probability is exactly 0).
Tensor softmax(const Tensor& x, int axis, double temperature = 1.0,
               std::span<const double> mask = {});
Tensor log_softmax(const Tensor& x, int axis, double temperature = 1.0);

/// Normalizes along `axis` to zero mean and unit variance. With a mask,
/// statistics use only kept entries and masked entries are set to 0.
Tensor layer_norm(const Tensor& x, int axis, double eps = 1e-5, std::span<const double> mask = {});

/// Divides each slice along `axis` by its L2 norm.
Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over the given axes, which are removed from the result.
Tensor mean_axes(const Tensor& x, std::vector<int> axes);

Tensor avg_pool2d(const Tensor& x, int kernel, int stride);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
/// Selects entries `indices` along `axis`.
Tensor gather(const Tensor& x, int axis, std::span<const std::int64_t> indices);

/// Mean cross-entropy of `logits` against integer labels along `class_axis`.
/// labels has one entry per position of logits with class_axis removed.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels, int class_axis);

/// Per-slice KL(p || q) = sum_axis exp(p_log) * (p_log - q_log); `axis` is
/// removed from the result. Both arguments are log-probabilities.
Tensor kl_divergence(const Tensor& p_log, const Tensor& q_log, int axis);

int normalize_axis(int axis, int rank);

}  // namespace cpd::ops
