#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpd {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}  // namespace detail

/// Dense row-major float64 tensor with optional reverse-mode gradient tracking.
///
/// Copies share storage; use clone() for a deep copy. A tensor produced by an
/// operation on requires_grad inputs keeps a tape node that records how to
/// propagate gradients back to its inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// True when this tensor was produced by a recorded operation.
  bool has_tape() const;

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(const std::vector<double>&,
                                               std::vector<std::vector<double>>&)>);
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// One recorded primitive. `backward` receives the gradient of the output and
/// fills gradients for each input; entries for inputs that do not need a
/// gradient are left empty and must not be written.
struct TapeNode {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const std::vector<double>&, std::vector<std::vector<double>>&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;
};

}  // namespace detail

/// Builds an operation result, recording a tape node when gradients are
/// enabled and any input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const std::vector<double>&,
                                      std::vector<std::vector<double>>&)> backward);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Multiply-accumulate counter for matmul/conv kernels on the current thread.
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

}  // namespace cpd
