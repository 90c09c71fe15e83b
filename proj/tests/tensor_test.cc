#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "cspeech/tensor/grad_check.h"
#include "cspeech/tensor/tensor.h"

using namespace cspeech;

namespace {

// Independent triple-loop matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
      c[i * n + j] = s;
    }
  return c;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul identity leaves input unchanged") {
  Rng rng = make_rng(7);
  Tensor b = Tensor::randn({3, 2}, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.vec()[i * 3 + i] = 1.0;
  Tensor c = matmul(eye, b);
  CHECK(max_abs_diff(c.vec(), b.vec()) == 0.0);
}

TEST_CASE("matmul 1x1") {
  Tensor a = Tensor::from({1, 1}, {2.0});
  Tensor b = Tensor::from({1, 1}, {3.0});
  CHECK(matmul(a, b).item() == doctest::Approx(6.0).epsilon(0));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng = make_rng(11);
  Tensor a = Tensor::randn({5, 4}, rng);
  Tensor b = Tensor::randn({4, 3}, rng);
  Tensor c = matmul(a, b);
  auto expect = naive_matmul(a.vec(), b.vec(), 5, 4, 3);
  CHECK(max_abs_diff(c.vec(), expect) <= 1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax of zeros is uniform") {
  Tensor x = Tensor::from({3}, {0.0, 0.0, 0.0});
  Tensor y = softmax_rows(x);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant and rows sum to one") {
  Rng rng = make_rng(3);
  Tensor x = Tensor::randn({4, 6}, rng);
  Tensor shifted = add_scalar(x, 17.5);
  Tensor y0 = softmax_rows(x);
  Tensor y1 = softmax_rows(shifted);
  CHECK(max_abs_diff(y0.vec(), y1.vec()) <= 1e-12);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += y0.at(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax survives large logits") {
  Tensor x = Tensor::from({2}, {1000.0, 0.0});
  Tensor y = softmax_rows(x);
  CHECK(std::isfinite(y.at(0)));
  CHECK(y.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.at(1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("layer_norm constant slice maps to bias") {
  Tensor x = Tensor::full({2, 5}, 3.7);
  Tensor gain = Tensor::full({5}, 1.0);
  Tensor bias = Tensor::zeros({5});
  Tensor y = layer_norm(x, gain, bias, 1e-5);
  for (double v : y.vec()) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("layer_norm matches closed-form mean/var oracle") {
  // x = [1, 3]: mean 2, biased var 1 -> pre-affine output (x - 2)/sqrt(1 + eps).
  const double eps = 1e-8;
  Tensor x = Tensor::from({1, 2}, {1.0, 3.0});
  Tensor gain = Tensor::full({2}, 1.0);
  Tensor bias = Tensor::zeros({2});
  Tensor y = layer_norm(x, gain, bias, eps);
  const double expect = 1.0 / std::sqrt(1.0 + eps);
  CHECK(y.at(0, 0) == doctest::Approx(-expect).epsilon(1e-14));
  CHECK(y.at(0, 1) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  Rng rng = make_rng(5);
  Tensor x = Tensor::randn({8, 16}, rng);
  Tensor gain = Tensor::full({16}, 1.0);
  Tensor bias = Tensor::zeros({16});
  Tensor y = layer_norm(x, gain, bias, 1e-10);
  for (int i = 0; i < 8; ++i) {
    double mu = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mu += y.at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) <= 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward of sum gives ones") {
  Rng rng = make_rng(1);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0, /*requires_grad=*/true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(matmul) matches finite differences") {
  Rng rng = make_rng(2);
  Tensor w = Tensor::randn({4, 3}, rng);
  Tensor x0 = Tensor::randn({2, 4}, rng);
  auto f = [&](const Tensor& x) { return sum(matmul(x, w)); };
  auto report = grad_check(f, x0, 1e-5, 1e-6);
  CHECK(report.passed);
}

TEST_CASE("disconnected leaf keeps zero grad") {
  Rng rng = make_rng(4);
  Tensor x = Tensor::randn({3}, rng, 1.0, true);
  Tensor unused = Tensor::randn({3}, rng, 1.0, true);
  backward(sum(mul(x, x)));
  CHECK(!unused.has_grad());
  unused.zero_grad();
  // After an explicit zero_grad the buffer exists and stays zero.
  for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward requires scalar loss") {
  Tensor x = Tensor::full({2}, 1.0, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("gradients accumulate across fan-out") {
  Tensor x = Tensor::from({1}, {2.0}, true);
  Tensor y = add(mul(x, x), mul(x, x));  // 2x^2, dy/dx = 4x = 8
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(8.0).epsilon(1e-14));
}

TEST_CASE("grad_check passes on sum of squares") {
  Rng rng = make_rng(6);
  Tensor x = Tensor::randn({5}, rng);
  auto f = [](const Tensor& t) { return sum(mul(t, t)); };
  auto report = grad_check(f, x, 1e-5, 1e-7);
  CHECK(report.passed);
}

TEST_CASE("grad_check passes on softmax cross-entropy") {
  Rng rng = make_rng(8);
  Tensor logits = Tensor::randn({4, 7}, rng);
  std::vector<int> targets = {1, 3, 0, 6};
  auto f = [&](const Tensor& t) {
    return neg(mean(gather_col_per_row(log_softmax_rows(t), targets)));
  };
  auto report = grad_check(f, logits, 1e-5, 1e-5);
  CHECK(report.passed);
}

TEST_CASE("grad_check flags an injected wrong backward rule") {
  // Hand-built node computing sum(x^2) whose backward claims d/dx = 3x.
  auto f = [](const Tensor& x) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = {};
    impl->data = {0.0};
    for (double v : x.vec()) impl->data[0] += v * v;
    impl->requires_grad = x.requires_grad();
    if (impl->requires_grad) {
      impl->parents = {x.impl_ptr()};
      auto px = x.impl_ptr();
      impl->backward_fn = [px](TensorImpl& self) {
        px->ensure_grad();
        for (size_t i = 0; i < px->data.size(); ++i)
          px->grad[i] += self.grad[0] * 3.0 * px->data[i];
      };
    }
    return Tensor(impl);
  };
  Rng rng = make_rng(9);
  Tensor x = Tensor::randn({4}, rng);
  auto report = grad_check(f, x, 1e-5, 1e-5);
  CHECK(!report.passed);
}

TEST_CASE("grad_check rejects non-finite objective") {
  Tensor x = Tensor::from({1}, {-1.0});
  auto f = [](const Tensor& t) {
    return sum(masked_fill(t, {false}, std::nan("")));
  };
  CHECK_THROWS_AS(grad_check(f, x, 1e-5, 1e-5), std::runtime_error);
}

TEST_CASE("grad_check covers every differentiable op") {
  Rng rng = make_rng(10);
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    std::vector<int64_t> shape;
  };
  Tensor w = Tensor::randn({4, 4}, rng);
  Tensor v4 = Tensor::randn({4}, rng);
  Tensor gain = Tensor::randn({4}, rng, 0.3);
  Tensor bias = Tensor::randn({4}, rng, 0.3);
  Tensor cw = Tensor::randn({4, 2, 3}, rng, 0.5);  // conv weight, 2 groups
  Tensor cb = Tensor::randn({4}, rng, 0.5);
  Tensor membed = Tensor::randn({4}, rng);
  Tensor c34 = Tensor::randn({3, 4}, rng);
  Tensor c24 = Tensor::randn({2, 4}, rng);
  Tensor c44 = Tensor::randn({4, 4}, rng);
  Tensor c6 = Tensor::randn({6}, rng);
  Tensor c8 = Tensor::randn({8}, rng);
  std::vector<bool> keep = {true, false, true, true, false, true, true, false};
  std::vector<Case> cases = {
      {"add", [&](const Tensor& x) { return sum(mul(add(x, c34), c34)); }, {3, 4}},
      {"sub", [&](const Tensor& x) { return sum(mul(sub(x, c34), x)); }, {3, 4}},
      {"mul+scale", [&](const Tensor& x) { return sum(scale(mul(x, x), 0.7)); }, {6}},
      {"add_rowvec", [&](const Tensor& x) { return sum(mul(add_rowvec(x, v4), x)); }, {3, 4}},
      {"matmul", [&](const Tensor& x) { return sum(mul(matmul(x, w), x)); }, {3, 4}},
      {"transpose", [&](const Tensor& x) { return sum(mul(transpose(x), transpose(x))); }, {3, 4}},
      {"mean", [&](const Tensor& x) { return mean(mul(x, x)); }, {5}},
      {"sum_rows", [&](const Tensor& x) { return sum(mul(sum_rows(x), sum_rows(x))); }, {3, 4}},
      {"softmax", [&](const Tensor& x) { return sum(mul(softmax_rows(x), c24)); }, {2, 4}},
      {"log_softmax", [&](const Tensor& x) { return sum(mul(log_softmax_rows(x), c24)); }, {2, 4}},
      {"layer_norm", [&](const Tensor& x) { return sum(mul(layer_norm(x, gain, bias, 1e-5), c34)); }, {3, 4}},
      {"gelu", [&](const Tensor& x) { return sum(gelu(x)); }, {7}},
      {"tanh", [&](const Tensor& x) { return sum(tanh_op(x)); }, {7}},
      {"sigmoid", [&](const Tensor& x) { return sum(sigmoid(x)); }, {7}},
      {"log_sigmoid", [&](const Tensor& x) { return sum(log_sigmoid(x)); }, {7}},
      {"slice_rows", [&](const Tensor& x) { return sum(mul(slice_rows(x, 1, 3), slice_rows(x, 0, 2))); }, {4, 3}},
      {"slice_cols", [&](const Tensor& x) { return sum(mul(slice_cols(x, 1, 3), slice_cols(x, 0, 2))); }, {3, 4}},
      {"concat_rows", [&](const Tensor& x) { return sum(mul(concat_rows({x, x}), concat_rows({x, x}))); }, {2, 3}},
      {"concat_cols", [&](const Tensor& x) { return sum(mul(concat_cols({x, x}), concat_cols({x, x}))); }, {3, 2}},
      {"stack_cols", [&](const Tensor& x) { auto r0 = row(x, 0); auto r1 = row(x, 1); return sum(mul(stack_cols({r0, r1}), stack_cols({r1, r0}))); }, {2, 3}},
      {"element", [&](const Tensor& x) { return mul(element(x, 2), element(x, 5)); }, {6}},
      {"reshape", [&](const Tensor& x) { return sum(mul(reshape(x, {2, 6}), reshape(x, {2, 6}))); }, {3, 4}},
      {"gather_rows", [&](const Tensor& x) { return sum(mul(gather_rows(x, {0, 2, 2}), gather_rows(x, {1, 0, 2}))); }, {3, 4}},
      {"gather_cols", [&](const Tensor& x) { return sum(mul(gather_cols(x, {0, 2, 2}), gather_cols(x, {3, 0, 1}))); }, {3, 4}},
      {"gather_col_per_row", [&](const Tensor& x) { return sum(mul(gather_col_per_row(x, {1, 0, 3}), gather_col_per_row(x, {2, 2, 0}))); }, {3, 4}},
      {"logaddexp", [&](const Tensor& x) { return sum(logaddexp(x, c6)); }, {6}},
      {"masked_fill", [&](const Tensor& x) { return sum(mul(masked_fill(x, keep, 0.25), x)); }, {8}},
      {"shift", [&](const Tensor& x) { return sum(mul(shift(x, 2, 0.0), x)); }, {6}},
      {"conv1d", [&](const Tensor& x) { return sum(mul(conv1d(x, cw, cb, 1, 1, 1, 2), c44)); }, {4, 4}},
      {"mask_rows", [&](const Tensor& x) { return sum(mul(mask_rows(x, {1, 3}, membed), c44)); }, {4, 4}},
      {"dropout", [&](const Tensor& x) { Rng r = make_rng(42); return sum(mul(dropout(x, 0.5, r, true), c8)); }, {8}},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    Tensor x = Tensor::randn(c.shape, rng);
    auto report = grad_check(c.f, x, 1e-5, 1e-5);
    CAPTURE(report.max_rel_error);
    CAPTURE(report.worst_index);
    CHECK(report.passed);
  }
  // Parameter-side gradients of conv and rel_bias.
  {
    Tensor x = Tensor::randn({5, 4}, rng);
    auto fw = [&](const Tensor& wt) { return sum(conv1d(x, wt, cb, 2, 1, 0, 2)); };
    CHECK(grad_check(fw, cw, 1e-5, 1e-5).passed);
    Tensor table = Tensor::randn({7}, rng);
    Tensor c55 = Tensor::randn({5, 5}, rng);
    auto ft = [&](const Tensor& t) { return sum(mul(rel_bias_matrix(t, 5), c55)); };
    CHECK(grad_check(ft, table, 1e-5, 1e-5).passed);
    auto fm = [&](const Tensor& m) { return sum(mask_rows(x, {0, 2}, m)); };
    CHECK(grad_check(fm, membed, 1e-5, 1e-5).passed);
  }
}

TEST_CASE("tape orders inputs before consumers and visits each op once") {
  Rng rng = make_rng(12);
  Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
  Tensor y = matmul(gelu(x), softmax_rows(x));
  Tensor loss = sum(mul(y, y));
  Tape tape = Tape::build(loss);
  const auto& order = tape.order();
  // Topological: every node's parents appear earlier.
  for (size_t i = 0; i < order.size(); ++i) {
    for (const auto& parent : order[i]->parents) {
      bool found_before = false;
      for (size_t j = 0; j < i; ++j)
        if (order[j] == parent.get()) found_before = true;
      CHECK(found_before);
    }
  }
  // Wrap every backward rule with a visit counter; each fires exactly once.
  std::vector<int> visits(order.size(), 0);
  for (size_t i = 0; i < order.size(); ++i) {
    if (!order[i]->backward_fn) continue;
    auto inner = order[i]->backward_fn;
    int* counter = &visits[i];
    order[i]->backward_fn = [inner, counter](TensorImpl& self) {
      ++(*counter);
      inner(self);
    };
  }
  tape.backward();
  for (size_t i = 0; i < order.size(); ++i) {
    if (order[i]->requires_grad && !order[i]->parents.empty()) CHECK(visits[i] == 1);
  }
}

TEST_CASE("forward and backward are bit-identical across runs with a fixed seed") {
  auto run = [] {
    Rng rng = make_rng(99);
    Tensor x = Tensor::randn({4, 5}, rng, 1.0, true);
    Tensor w = Tensor::randn({5, 4}, rng, 1.0, true);
    Tensor loss = sum(mul(softmax_rows(matmul(x, w)), gelu(matmul(x, w))));
    backward(loss);
    std::vector<double> out = {loss.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}

TEST_CASE("check_no_nan flags NaN but tolerates -inf") {
  Tensor ok = Tensor::from({2}, {1.0, -std::numeric_limits<double>::infinity()});
  CHECK_NOTHROW(check_no_nan(ok, "test"));
  Tensor bad = Tensor::from({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(check_no_nan(bad, "test"), std::runtime_error);
}
