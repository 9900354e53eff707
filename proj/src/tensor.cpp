#include "cpd/tensor.hpp"

#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace cpd {

namespace {
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::uint64_t mac_count() { return t_macs; }
void reset_mac_count() { t_macs = 0; }
void add_macs(std::uint64_t n) { t_macs += n; }

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  impl_ = std::make_shared<detail::TensorImpl>();
  const auto n = numel_of(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(n), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  const auto n = numel_of(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(s));
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0); }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) flat = flat * s[k++] + i;
  return impl_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_ && (impl_->requires_grad || impl_->node); }

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

bool Tensor::has_tape() const { return impl_ && impl_->node != nullptr; }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const std::vector<double>&,
                                      std::vector<std::vector<double>>&)> backward) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_enabled()) {
    auto node = std::make_shared<detail::TapeNode>();
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

void Tensor::backward() const {
  using detail::TensorImpl;
  if (!impl_) throw Error("backward on undefined tensor");
  if (impl_->data.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->node && !impl_->requires_grad) throw Error("backward called on a tensor with no tape");

  // Post-order DFS gives a topological order of the recorded graph.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if ((child->node || child->requires_grad) && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorImpl*, std::vector<double>> grads;
  grads[impl_.get()] = std::vector<double>(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    auto found = grads.find(t);
    if (found == grads.end()) continue;
    std::vector<double> gout = std::move(found->second);
    grads.erase(found);
    if (!t->node) {
      if (t->grad.empty()) {
        t->grad = std::move(gout);
      } else {
        for (std::size_t i = 0; i < gout.size(); ++i) t->grad[i] += gout[i];
      }
      continue;
    }
    const auto& inputs = t->node->inputs;
    std::vector<std::vector<double>> gin(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i]->node || inputs[i]->requires_grad) gin[i].assign(inputs[i]->data.size(), 0.0);
    }
    t->node->backward(gout, gin);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (gin[i].empty()) continue;
      auto& acc = grads[inputs[i].get()];
      if (acc.empty()) {
        acc = std::move(gin[i]);
      } else {
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += gin[i][k];
      }
    }
  }
}

}  // namespace cpd
