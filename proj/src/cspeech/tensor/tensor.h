#ifndef CSPEECH_TENSOR_TENSOR_H_
#define CSPEECH_TENSOR_TENSOR_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cspeech/util/common.h"

namespace cspeech {

// Dense double-precision tensor with reverse-mode automatic differentiation.
// A Tensor is a cheap shared handle; the data lives in TensorImpl. Each op
// records its parents and a backward rule on the result node; Tape::build
// topologically orders the nodes reachable from a loss and Tape::backward
// walks them once in reverse.
//
// Values are immutable once created inside a forward pass. Gradients
// accumulate (+=) across fan-out; callers zero grads between steps.

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same size as data
  bool requires_grad = false;
  std::vector<TensorImplPtr> parents;
  std::function<void(TensorImpl&)> backward_fn;  // empty for leaves
  std::string op_name;  // for diagnostics

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Gaussian init, N(0, stddev^2).
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t numel() const { return impl_->numel(); }
  bool is_scalar() const { return impl_->numel() == 1; }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double item() const;
  double at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  const std::vector<double>& grad() const;
  double grad_at(int64_t i) const { return grad()[static_cast<size_t>(i)]; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  TensorImpl* impl() const { return impl_.get(); }
  TensorImplPtr impl_ptr() const { return impl_; }

 private:
  TensorImplPtr impl_;
};

// Ordered record of the ops reachable from a root, inputs before consumers.
class Tape {
 public:
  static Tape build(const Tensor& root);
  // Seeds root grad with `seed` and propagates; visits each op exactly once.
  void backward(double seed = 1.0);
  const std::vector<TensorImpl*>& order() const { return order_; }

 private:
  std::vector<TensorImpl*> order_;  // topological, root last
  TensorImplPtr root_;
};

// Convenience: build a tape from `loss` (must be scalar) and run backward.
void backward(const Tensor& loss, double seed = 1.0);

// ---- ops ------------------------------------------------------------------
// Shapes are checked; mismatches throw std::invalid_argument. Every op
// propagates requires_grad from its inputs and records a backward rule.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
// [R x C] + [C] broadcast over rows (bias add).
Tensor add_rowvec(const Tensor& a, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_rows(const Tensor& a);  // [R x C] -> [R]

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// K one-dim tensors of length M -> [M x K].
Tensor stack_cols(const std::vector<Tensor>& cols);
Tensor row(const Tensor& x, int64_t r);          // [R x C] -> [C]
Tensor element(const Tensor& x, int64_t i);      // flat index -> scalar
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);

// Row gather from a table (embedding lookup); backward scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);
// out[t][s] = x[t][cols[s]] for every row t.
Tensor gather_cols(const Tensor& x, const std::vector<int>& cols);
// out[r] = x[r][col[r]].
Tensor gather_col_per_row(const Tensor& x, const std::vector<int>& col);

Tensor logaddexp(const Tensor& a, const Tensor& b);
// out[i] = keep[i] ? x[i] : fill  (fill is a constant, typically -inf).
Tensor masked_fill(const Tensor& x, const std::vector<bool>& keep, double fill);
// Shift a 1-D tensor down by k, filling vacated slots with `fill`.
Tensor shift(const Tensor& x, int64_t k, double fill);

Tensor detach(const Tensor& x);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);

// Grouped 1-D convolution over a [T x Cin] sequence.
// weight [Cout x Cin/groups x K], bias [Cout] (may be undefined for none).
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int pad_left, int pad_right, int groups);

// Replace the listed rows of x with the (learned) vector m; grads flow to
// x on the untouched rows and to m summed over the replaced rows.
Tensor mask_rows(const Tensor& x, const std::vector<int>& rows, const Tensor& m);

// Per-head relative attention bias: table [2R+1], result [T x T] with
// out[i][j] = table[clip(j - i, -R, R) + R].
Tensor rel_bias_matrix(const Tensor& table, int64_t t_len);

// Throws std::runtime_error if any element is NaN (Inf allowed: log-space
// ops legitimately produce -inf).
void check_no_nan(const Tensor& x, const std::string& where);

}  // namespace cspeech

#endif  // CSPEECH_TENSOR_TENSOR_H_
