#include "cspeech/tensor/tensor.h"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace cspeech {

namespace {

TensorImplPtr make_impl(std::vector<int64_t> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  int64_t n = 1;
  for (int64_t d : impl->shape) {
    require(d > 0, "tensor: dimension sizes must be positive");
    n *= d;
  }
  impl->data.assign(static_cast<size_t>(n), 0.0);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::fill(impl->data.begin(), impl->data.end(), value);
  return Tensor(impl);
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  require(impl->data.size() == data.size(), "tensor: data length does not match shape");
  impl->data = std::move(data);
  return Tensor(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  auto impl = make_impl({}, requires_grad);
  impl->data[0] = value;
  return Tensor(impl);
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : impl->data) v = dist(rng);
  return Tensor(impl);
}

Tensor Tensor::uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : impl->data) v = dist(rng);
  return Tensor(impl);
}

double Tensor::item() const {
  require(is_scalar(), "tensor: item() requires a single-element tensor");
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  require(impl_->requires_grad || !impl_->grad.empty(),
          "tensor: grad() on a tensor without gradient");
  const_cast<TensorImpl*>(impl_.get())->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tape Tape::build(const Tensor& root) {
  Tape tape;
  tape.root_ = root.impl_ptr();
  // Iterative post-order DFS; parents end up before consumers.
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorImpl* child = node->parents[next_child].get();
      ++next_child;
      if (!visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::backward(double seed) {
  require(root_ != nullptr, "tape: backward on an empty tape");
  require(root_->numel() == 1, "tape: backward requires a scalar root");
  root_->ensure_grad();
  root_->grad[0] += seed;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && node->requires_grad) node->backward_fn(*node);
  }
}

void backward(const Tensor& loss, double seed) {
  Tape tape = Tape::build(loss);
  tape.backward(seed);
}

void check_no_nan(const Tensor& x, const std::string& where) {
  for (double v : x.vec()) {
    if (std::isnan(v)) throw std::runtime_error(where + ": NaN encountered");
  }
}

}  // namespace cspeech
