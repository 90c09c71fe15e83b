#include <algorithm>
#include <cmath>
#include <limits>

#include "cspeech/tensor/tensor.h"

namespace cspeech {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor make_node(std::vector<int64_t> shape, std::vector<TensorImplPtr> parents,
                 const char* name) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  int64_t n = 1;
  for (int64_t d : impl->shape) n *= d;
  impl->data.assign(static_cast<size_t>(n), 0.0);
  impl->op_name = name;
  for (const auto& p : parents) impl->requires_grad |= p->requires_grad;
  if (impl->requires_grad) impl->parents = std::move(parents);
  return Tensor(impl);
}

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

int64_t rows_of(const Tensor& x) {
  require(x.rank() >= 1, "op: expected tensor of rank >= 1");
  return x.rank() == 1 ? 1 : x.numel() / x.shape().back();
}

int64_t cols_of(const Tensor& x) { return x.shape().back(); }

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const Tensor& a, const char* name, Fwd fwd, Bwd dfdx) {
  Tensor out = make_node(a.shape(), {a.impl_ptr()}, name);
  const size_t n = a.vec().size();
  for (size_t i = 0; i < n; ++i) out.vec()[i] = fwd(a.vec()[i]);
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    out.impl()->backward_fn = [pa, dfdx](TensorImpl& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i)
        pa->grad[i] += self.grad[i] * dfdx(pa->data[i], self.data[i]);
    };
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "add: shape mismatch");
  Tensor out = make_node(a.shape(), {a.impl_ptr(), b.impl_ptr()}, "add");
  for (size_t i = 0; i < out.vec().size(); ++i) out.vec()[i] = a.vec()[i] + b.vec()[i];
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    out.impl()->backward_fn = [pa, pb](TensorImpl& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pb->grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "sub: shape mismatch");
  Tensor out = make_node(a.shape(), {a.impl_ptr(), b.impl_ptr()}, "sub");
  for (size_t i = 0; i < out.vec().size(); ++i) out.vec()[i] = a.vec()[i] - b.vec()[i];
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    out.impl()->backward_fn = [pa, pb](TensorImpl& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pb->grad[i] -= self.grad[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "mul: shape mismatch");
  Tensor out = make_node(a.shape(), {a.impl_ptr(), b.impl_ptr()}, "mul");
  for (size_t i = 0; i < out.vec().size(); ++i) out.vec()[i] = a.vec()[i] * b.vec()[i];
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    out.impl()->backward_fn = [pa, pb](TensorImpl& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  return elementwise_unary(
      a, "scale", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return elementwise_unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require(a.rank() == 2 && v.rank() == 1 && a.dim(1) == v.dim(0),
          "add_rowvec: expected [R x C] and [C]");
  const int64_t r = a.dim(0), c = a.dim(1);
  Tensor out = make_node(a.shape(), {a.impl_ptr(), v.impl_ptr()}, "add_rowvec");
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.vec()[i * c + j] = a.at(i, j) + v.at(j);
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pv = v.impl_ptr();
    out.impl()->backward_fn = [pa, pv, r, c](TensorImpl& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) pv->grad[j] += self.grad[i * c + j];
      }
    };
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 tensors");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_node({m, n}, {a.impl_ptr(), b.impl_ptr()}, "matmul");
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t t = 0; t < k; ++t) {
      const double av = ad[i * k + t];
      if (av == 0.0) continue;
      const double* brow = bd + t * n;
      double* orow = od + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    out.impl()->backward_fn = [pa, pb, m, k, n](TensorImpl& self) {
      const double* g = self.grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = G . B^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            if (gv == 0.0) continue;
            const double* brow = pb->data.data();
            for (int64_t t = 0; t < k; ++t) pa->grad[i * k + t] += gv * brow[t * n + j];
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = A^T . G
        for (int64_t i = 0; i < m; ++i)
          for (int64_t t = 0; t < k; ++t) {
            const double av = pa->data[i * k + t];
            if (av == 0.0) continue;
            const double* grow = g + i * n;
            double* brow = pb->grad.data() + t * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: expected rank-2 tensor");
  const int64_t r = a.dim(0), c = a.dim(1);
  Tensor out = make_node({c, r}, {a.impl_ptr()}, "transpose");
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.vec()[j * r + i] = a.at(i, j);
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    out.impl()->backward_fn = [pa, r, c](TensorImpl& self) {
      pa->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
    };
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_node({}, {a.impl_ptr()}, "sum");
  double s = 0.0;
  for (double v : a.vec()) s += v;
  out.vec()[0] = s;
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    out.impl()->backward_fn = [pa](TensorImpl& self) {
      pa->ensure_grad();
      for (double& g : pa->grad) g += self.grad[0];
    };
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_rows(const Tensor& a) {
  require(a.rank() == 2, "sum_rows: expected rank-2 tensor");
  const int64_t r = a.dim(0), c = a.dim(1);
  Tensor out = make_node({r}, {a.impl_ptr()}, "sum_rows");
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += a.at(i, j);
    out.vec()[i] = s;
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    out.impl()->backward_fn = [pa, r, c](TensorImpl& self) {
      pa->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[i];
    };
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require(x.rank() >= 1 && cols_of(x) >= 1, "softmax: empty axis");
  const int64_t r = rows_of(x), c = cols_of(x);
  Tensor out = make_node(x.shape(), {x.impl_ptr()}, "softmax");
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = out.data() + i * c;
    double mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (int64_t j = 0; j < c; ++j) yi[j] /= z;
  }
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, r, c](TensorImpl& self) {
      px->ensure_grad();
      for (int64_t i = 0; i < r; ++i) {
        const double* y = self.data.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (int64_t j = 0; j < c; ++j) px->grad[i * c + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& x) {
  require(x.rank() >= 1 && cols_of(x) >= 1, "log_softmax: empty axis");
  const int64_t r = rows_of(x), c = cols_of(x);
  Tensor out = make_node(x.shape(), {x.impl_ptr()}, "log_softmax");
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = out.data() + i * c;
    double mx = xi[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    const double lz = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j) yi[j] = xi[j] - lz;
  }
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, r, c](TensorImpl& self) {
      px->ensure_grad();
      for (int64_t i = 0; i < r; ++i) {
        const double* y = self.data.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double gsum = 0.0;
        for (int64_t j = 0; j < c; ++j) gsum += g[j];
        for (int64_t j = 0; j < c; ++j)
          px->grad[i * c + j] += g[j] - std::exp(y[j]) * gsum;
      }
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require(eps > 0.0, "layer_norm: eps must be positive");
  const int64_t c = cols_of(x);
  require(gain.rank() == 1 && gain.dim(0) == c, "layer_norm: gain shape mismatch");
  require(bias.rank() == 1 && bias.dim(0) == c, "layer_norm: bias shape mismatch");
  const int64_t r = rows_of(x);
  Tensor out = make_node(x.shape(), {x.impl_ptr(), gain.impl_ptr(), bias.impl_ptr()},
                         "layer_norm");
  auto xhat = std::make_shared<std::vector<double>>(x.vec().size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = inv;
    for (int64_t j = 0; j < c; ++j) {
      const double xh = (xi[j] - mu) * inv;
      (*xhat)[static_cast<size_t>(i * c + j)] = xh;
      out.vec()[static_cast<size_t>(i * c + j)] = xh * gain.at(j) + bias.at(j);
    }
  }
  if (out.requires_grad()) {
    auto px = x.impl_ptr(), pg = gain.impl_ptr(), pb = bias.impl_ptr();
    out.impl()->backward_fn = [px, pg, pb, xhat, inv_std, r, c](TensorImpl& self) {
      for (int64_t i = 0; i < r; ++i) {
        const double* g = self.grad.data() + i * c;
        const double* xh = xhat->data() + i * c;
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int64_t j = 0; j < c; ++j) pg->grad[j] += g[j] * xh[j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t j = 0; j < c; ++j) pb->grad[j] += g[j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const double inv = (*inv_std)[static_cast<size_t>(i)];
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
          for (int64_t j = 0; j < c; ++j) {
            const double dxh = g[j] * pg->data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j) {
            const double dxh = g[j] * pg->data[j];
            px->grad[i * c + j] += inv * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    };
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return elementwise_unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
               v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return elementwise_unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh_op(const Tensor& x) {
  return elementwise_unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return elementwise_unary(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                     : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return elementwise_unary(
      x, "log_sigmoid",
      [](double v) { return v >= 0.0 ? -std::log1p(std::exp(-v))
                                     : v - std::log1p(std::exp(v)); },
      [](double v, double) {
        // d/dx log sigma(x) = sigma(-x)
        return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v))
                        : 1.0 / (1.0 + std::exp(v));
      });
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  require(x.rank() == 2 && r0 >= 0 && r1 > r0 && r1 <= x.dim(0), "slice_rows: bad range");
  const int64_t c = x.dim(1);
  Tensor out = make_node({r1 - r0, c}, {x.impl_ptr()}, "slice_rows");
  std::copy(x.data() + r0 * c, x.data() + r1 * c, out.data());
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, r0, c](TensorImpl& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i)
        px->grad[static_cast<size_t>(r0 * c) + i] += self.grad[i];
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  require(x.rank() == 2 && c0 >= 0 && c1 > c0 && c1 <= x.dim(1), "slice_cols: bad range");
  const int64_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
  Tensor out = make_node({r, w}, {x.impl_ptr()}, "slice_cols");
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < w; ++j) out.vec()[i * w + j] = x.at(i, c0 + j);
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, r, c, c0, w](TensorImpl& self) {
      px->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) px->grad[i * c + c0 + j] += self.grad[i * w + j];
    };
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const int64_t c = parts[0].dim(1);
  int64_t r = 0;
  std::vector<TensorImplPtr> parents;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(1) == c, "concat_rows: column mismatch");
    r += p.dim(0);
    parents.push_back(p.impl_ptr());
  }
  Tensor out = make_node({r, c}, parents, "concat_rows");
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + off);
    off += p.numel();
  }
  if (out.requires_grad()) {
    auto impls = parents;
    out.impl()->backward_fn = [impls](TensorImpl& self) {
      size_t off = 0;
      for (const auto& p : impls) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
        }
        off += p->data.size();
      }
    };
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const int64_t r = parts[0].dim(0);
  int64_t c = 0;
  std::vector<TensorImplPtr> parents;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(0) == r, "concat_cols: row mismatch");
    c += p.dim(1);
    parents.push_back(p.impl_ptr());
  }
  Tensor out = make_node({r, c}, parents, "concat_cols");
  int64_t coff = 0;
  for (const auto& p : parts) {
    const int64_t pc = p.dim(1);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < pc; ++j) out.vec()[i * c + coff + j] = p.at(i, j);
    coff += pc;
  }
  if (out.requires_grad()) {
    auto impls = parents;
    out.impl()->backward_fn = [impls, r, c](TensorImpl& self) {
      int64_t coff = 0;
      for (const auto& p : impls) {
        const int64_t pc = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < pc; ++j)
              p->grad[i * pc + j] += self.grad[i * c + coff + j];
        }
        coff += pc;
      }
    };
  }
  return out;
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
  require(!cols.empty(), "stack_cols: no columns");
  const int64_t m = cols[0].dim(0);
  const int64_t k = static_cast<int64_t>(cols.size());
  std::vector<TensorImplPtr> parents;
  for (const auto& col : cols) {
    require(col.rank() == 1 && col.dim(0) == m, "stack_cols: length mismatch");
    parents.push_back(col.impl_ptr());
  }
  Tensor out = make_node({m, k}, parents, "stack_cols");
  for (int64_t j = 0; j < k; ++j)
    for (int64_t i = 0; i < m; ++i) out.vec()[i * k + j] = cols[static_cast<size_t>(j)].at(i);
  if (out.requires_grad()) {
    auto impls = parents;
    out.impl()->backward_fn = [impls, m, k](TensorImpl& self) {
      for (int64_t j = 0; j < k; ++j) {
        auto& p = impls[static_cast<size_t>(j)];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (int64_t i = 0; i < m; ++i) p->grad[i] += self.grad[i * k + j];
      }
    };
  }
  return out;
}

Tensor row(const Tensor& x, int64_t r) {
  require(x.rank() == 2 && r >= 0 && r < x.dim(0), "row: index out of range");
  const int64_t c = x.dim(1);
  Tensor out = make_node({c}, {x.impl_ptr()}, "row");
  std::copy(x.data() + r * c, x.data() + (r + 1) * c, out.data());
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, r, c](TensorImpl& self) {
      px->ensure_grad();
      for (int64_t j = 0; j < c; ++j) px->grad[r * c + j] += self.grad[j];
    };
  }
  return out;
}

Tensor element(const Tensor& x, int64_t i) {
  require(i >= 0 && i < x.numel(), "element: index out of range");
  Tensor out = make_node({}, {x.impl_ptr()}, "element");
  out.vec()[0] = x.vec()[static_cast<size_t>(i)];
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, i](TensorImpl& self) {
      px->ensure_grad();
      px->grad[static_cast<size_t>(i)] += self.grad[0];
    };
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  require(n == x.numel(), "reshape: element count mismatch");
  Tensor out = make_node(std::move(shape), {x.impl_ptr()}, "reshape");
  out.vec() = x.vec();
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px](TensorImpl& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i) px->grad[i] += self.grad[i];
    };
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  require(table.rank() == 2, "gather_rows: expected rank-2 table");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int idx : indices)
    require(idx >= 0 && idx < v, "gather_rows: index out of range");
  const int64_t n = static_cast<int64_t>(indices.size());
  Tensor out = make_node({n, d}, {table.impl_ptr()}, "gather_rows");
  for (int64_t i = 0; i < n; ++i)
    std::copy(table.data() + indices[static_cast<size_t>(i)] * d,
              table.data() + (indices[static_cast<size_t>(i)] + 1) * d, out.data() + i * d);
  if (out.requires_grad()) {
    auto pt = table.impl_ptr();
    auto idx = indices;
    out.impl()->backward_fn = [pt, idx, d](TensorImpl& self) {
      pt->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t j = 0; j < d; ++j)
          pt->grad[static_cast<size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    };
  }
  return out;
}

Tensor gather_cols(const Tensor& x, const std::vector<int>& cols) {
  require(x.rank() == 2, "gather_cols: expected rank-2 tensor");
  const int64_t t = x.dim(0), c = x.dim(1);
  for (int idx : cols) require(idx >= 0 && idx < c, "gather_cols: index out of range");
  const int64_t s = static_cast<int64_t>(cols.size());
  Tensor out = make_node({t, s}, {x.impl_ptr()}, "gather_cols");
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < s; ++j)
      out.vec()[i * s + j] = x.at(i, cols[static_cast<size_t>(j)]);
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto idx = cols;
    out.impl()->backward_fn = [px, idx, t, c](TensorImpl& self) {
      px->ensure_grad();
      const int64_t s = static_cast<int64_t>(idx.size());
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < s; ++j)
          px->grad[i * c + idx[static_cast<size_t>(j)]] += self.grad[i * s + j];
    };
  }
  return out;
}

Tensor gather_col_per_row(const Tensor& x, const std::vector<int>& col) {
  require(x.rank() == 2 && static_cast<int64_t>(col.size()) == x.dim(0),
          "gather_col_per_row: one column index per row required");
  const int64_t r = x.dim(0), c = x.dim(1);
  for (int idx : col) require(idx >= 0 && idx < c, "gather_col_per_row: index out of range");
  Tensor out = make_node({r}, {x.impl_ptr()}, "gather_col_per_row");
  for (int64_t i = 0; i < r; ++i) out.vec()[i] = x.at(i, col[static_cast<size_t>(i)]);
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto idx = col;
    out.impl()->backward_fn = [px, idx, c](TensorImpl& self) {
      px->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i)
        px->grad[i * static_cast<size_t>(c) + static_cast<size_t>(idx[i])] += self.grad[i];
    };
  }
  return out;
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  require(same_shape(a, b), "logaddexp: shape mismatch");
  Tensor out = make_node(a.shape(), {a.impl_ptr(), b.impl_ptr()}, "logaddexp");
  for (size_t i = 0; i < out.vec().size(); ++i) {
    const double x = a.vec()[i], y = b.vec()[i];
    const double m = std::max(x, y);
    out.vec()[i] = (m == kNegInf) ? kNegInf : m + std::log1p(std::exp(std::min(x, y) - m));
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    out.impl()->backward_fn = [pa, pb](TensorImpl& self) {
      for (size_t i = 0; i < self.data.size(); ++i) {
        const double o = self.data[i];
        if (o == kNegInf) continue;  // both inputs were log(0); no gradient
        const double g = self.grad[i];
        if (pa->requires_grad) {
          pa->ensure_grad();
          pa->grad[i] += g * std::exp(pa->data[i] - o);
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          pb->grad[i] += g * std::exp(pb->data[i] - o);
        }
      }
    };
  }
  return out;
}

Tensor masked_fill(const Tensor& x, const std::vector<bool>& keep, double fill) {
  require(keep.size() == x.vec().size(), "masked_fill: mask length mismatch");
  Tensor out = make_node(x.shape(), {x.impl_ptr()}, "masked_fill");
  for (size_t i = 0; i < keep.size(); ++i) out.vec()[i] = keep[i] ? x.vec()[i] : fill;
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto k = keep;
    out.impl()->backward_fn = [px, k](TensorImpl& self) {
      px->ensure_grad();
      for (size_t i = 0; i < k.size(); ++i)
        if (k[i]) px->grad[i] += self.grad[i];
    };
  }
  return out;
}

Tensor shift(const Tensor& x, int64_t k, double fill) {
  require(x.rank() == 1, "shift: expected 1-D tensor");
  const int64_t n = x.dim(0);
  Tensor out = make_node({n}, {x.impl_ptr()}, "shift");
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = i - k;
    out.vec()[i] = (src >= 0 && src < n) ? x.at(src) : fill;
  }
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, k, n](TensorImpl& self) {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const int64_t src = i - k;
        if (src >= 0 && src < n) px->grad[src] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor detach(const Tensor& x) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = x.shape();
  impl->data = x.vec();
  impl->requires_grad = false;
  impl->op_name = "detach";
  return Tensor(impl);
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto mask = std::make_shared<std::vector<double>>(x.vec().size());
  for (double& m : *mask) m = (u(rng) >= p) ? keep_scale : 0.0;
  Tensor out = make_node(x.shape(), {x.impl_ptr()}, "dropout");
  for (size_t i = 0; i < out.vec().size(); ++i) out.vec()[i] = x.vec()[i] * (*mask)[i];
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    out.impl()->backward_fn = [px, mask](TensorImpl& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i) px->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return out;
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int pad_left, int pad_right, int groups) {
  require(x.rank() == 2, "conv1d: input must be [T x Cin]");
  require(weight.rank() == 3, "conv1d: weight must be [Cout x Cin/groups x K]");
  require(stride >= 1 && groups >= 1, "conv1d: bad stride/groups");
  const int64_t t_in = x.dim(0), c_in = x.dim(1);
  const int64_t c_out = weight.dim(0), c_g = weight.dim(1), k = weight.dim(2);
  require(c_in % groups == 0 && c_out % groups == 0, "conv1d: groups must divide channels");
  require(c_g == c_in / groups, "conv1d: weight channel dim disagrees with groups");
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == c_out, "conv1d: bias shape mismatch");
  const int64_t t_out = (t_in + pad_left + pad_right - k) / stride + 1;
  require(t_out >= 1, "conv1d: input shorter than kernel");
  const int64_t out_per_group = c_out / groups;

  std::vector<TensorImplPtr> parents = {x.impl_ptr(), weight.impl_ptr()};
  if (bias.defined()) parents.push_back(bias.impl_ptr());
  Tensor out = make_node({t_out, c_out}, parents, "conv1d");

  const double* xd = x.data();
  const double* wd = weight.data();
  double* od = out.data();
  for (int64_t to = 0; to < t_out; ++to) {
    for (int64_t co = 0; co < c_out; ++co) {
      const int64_t g = co / out_per_group;
      double acc = bias.defined() ? bias.at(co) : 0.0;
      const double* wrow = wd + co * c_g * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const int64_t ti = to * stride - pad_left + kk;
        if (ti < 0 || ti >= t_in) continue;
        const double* xrow = xd + ti * c_in + g * c_g;
        for (int64_t cg = 0; cg < c_g; ++cg) acc += xrow[cg] * wrow[cg * k + kk];
      }
      od[to * c_out + co] = acc;
    }
  }
  if (out.requires_grad()) {
    auto px = x.impl_ptr(), pw = weight.impl_ptr();
    TensorImplPtr pb = bias.defined() ? bias.impl_ptr() : nullptr;
    out.impl()->backward_fn = [px, pw, pb, t_in, c_in, c_out, c_g, k, stride, pad_left,
                               out_per_group, t_out](TensorImpl& self) {
      const double* g = self.grad.data();
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t to = 0; to < t_out; ++to)
          for (int64_t co = 0; co < c_out; ++co) pb->grad[co] += g[to * c_out + co];
      }
      const bool need_x = px->requires_grad, need_w = pw->requires_grad;
      if (need_x) px->ensure_grad();
      if (need_w) pw->ensure_grad();
      if (!need_x && !need_w) return;
      for (int64_t to = 0; to < t_out; ++to) {
        for (int64_t co = 0; co < c_out; ++co) {
          const double gv = g[to * c_out + co];
          if (gv == 0.0) continue;
          const int64_t grp = co / out_per_group;
          for (int64_t kk = 0; kk < k; ++kk) {
            const int64_t ti = to * stride - pad_left + kk;
            if (ti < 0 || ti >= t_in) continue;
            for (int64_t cg = 0; cg < c_g; ++cg) {
              const size_t xi = static_cast<size_t>(ti * c_in + grp * c_g + cg);
              const size_t wi = static_cast<size_t>((co * c_g + cg) * k + kk);
              if (need_w) pw->grad[wi] += gv * px->data[xi];
              if (need_x) px->grad[xi] += gv * pw->data[wi];
            }
          }
        }
      }
    };
  }
  return out;
}

Tensor mask_rows(const Tensor& x, const std::vector<int>& rows, const Tensor& m) {
  require(x.rank() == 2, "mask_rows: expected [T x D] input");
  require(m.rank() == 1 && m.dim(0) == x.dim(1), "mask_rows: embedding dimension mismatch");
  const int64_t t = x.dim(0), d = x.dim(1);
  for (int r : rows) require(r >= 0 && r < t, "mask_rows: row index out of range");
  Tensor out = make_node({t, d}, {x.impl_ptr(), m.impl_ptr()}, "mask_rows");
  out.vec() = x.vec();
  std::vector<bool> replaced(static_cast<size_t>(t), false);
  for (int r : rows) replaced[static_cast<size_t>(r)] = true;
  for (int64_t i = 0; i < t; ++i)
    if (replaced[static_cast<size_t>(i)])
      std::copy(m.data(), m.data() + d, out.data() + i * d);
  if (out.requires_grad()) {
    auto px = x.impl_ptr(), pm = m.impl_ptr();
    auto rep = std::make_shared<std::vector<bool>>(std::move(replaced));
    out.impl()->backward_fn = [px, pm, rep, t, d](TensorImpl& self) {
      for (int64_t i = 0; i < t; ++i) {
        if ((*rep)[static_cast<size_t>(i)]) {
          if (pm->requires_grad) {
            pm->ensure_grad();
            for (int64_t j = 0; j < d; ++j) pm->grad[j] += self.grad[i * d + j];
          }
        } else if (px->requires_grad) {
          px->ensure_grad();
          for (int64_t j = 0; j < d; ++j) px->grad[i * d + j] += self.grad[i * d + j];
        }
      }
    };
  }
  return out;
}

Tensor rel_bias_matrix(const Tensor& table, int64_t t_len) {
  require(table.rank() == 1 && table.dim(0) % 2 == 1, "rel_bias_matrix: table must be [2R+1]");
  const int64_t r = (table.dim(0) - 1) / 2;
  Tensor out = make_node({t_len, t_len}, {table.impl_ptr()}, "rel_bias_matrix");
  for (int64_t i = 0; i < t_len; ++i)
    for (int64_t j = 0; j < t_len; ++j) {
      const int64_t off = std::clamp(j - i, -r, r) + r;
      out.vec()[i * t_len + j] = table.at(off);
    }
  if (out.requires_grad()) {
    auto pt = table.impl_ptr();
    out.impl()->backward_fn = [pt, t_len, r](TensorImpl& self) {
      pt->ensure_grad();
      for (int64_t i = 0; i < t_len; ++i)
        for (int64_t j = 0; j < t_len; ++j) {
          const int64_t off = std::clamp(j - i, -r, r) + r;
          pt->grad[off] += self.grad[i * t_len + j];
        }
    };
  }
  return out;
}

}  // namespace cspeech
