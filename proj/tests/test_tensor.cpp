#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "fd_suite.hpp"

#include "iclb/optim.hpp"
#include "iclb/tensor.hpp"

using namespace iclb;
using iclb::testing::max_gradient_error;
using iclb::testing::random_tensor;
using iclb::testing::weighted_sum;
using Vars = std::vector<Var<double>>;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

bool all_finite(const Tensor<double>& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("tensor construction checks shape against data") {
  CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), DimensionError);
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("matmul") {
  Graph<double> g;
  SUBCASE("identity leaves the operand unchanged") {
    Tensor<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    auto x = random_tensor({3, 4}, 1);
    auto y = matmul(g.constant(eye), g.constant(x));
    CHECK(y.value().data == x.data);
  }
  SUBCASE("zero matrix gives zeros") {
    auto y = matmul(g.constant(Tensor<double>({2, 2})), g.constant(random_tensor({2, 5}, 2)));
    for (double v : y.value().data) CHECK(v == 0.0);
  }
  SUBCASE("matches the triple-loop product") {
    auto a = random_tensor({4, 3}, 3), b = random_tensor({3, 2}, 4);
    auto c = matmul(g.constant(a), g.constant(b));
    auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(c.value()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  }
  SUBCASE("inner dimension mismatch names both shapes") {
    try {
      matmul(g.constant(Tensor<double>({2, 3})), g.constant(Tensor<double>({4, 2})));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }
}

TEST_CASE("softmax") {
  Graph<double> g;
  SUBCASE("equal logits give a uniform row") {
    auto y = softmax(g.constant(Tensor<double>({1, 5}, 3.0)));
    for (double v : y.value().data) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("huge logit saturates without NaN") {
    auto y = softmax(g.constant(Tensor<double>({1, 2}, std::vector<double>{1e4, 0.0})));
    CHECK(all_finite(y.value()));
    CHECK(y.value()[0] == doctest::Approx(1.0));
    CHECK(y.value()[1] == doctest::Approx(0.0));
  }
  SUBCASE("closed form on [0,1,2]") {
    auto y = softmax(g.constant(Tensor<double>({1, 3}, std::vector<double>{0.0, 1.0, 2.0})));
    const double z = 1.0 + std::exp(1.0) + std::exp(2.0);
    for (int k = 0; k < 3; ++k) CHECK(std::abs(y.value()[k] - std::exp(double(k)) / z) < 1e-6);
  }
  SUBCASE("rows sum to one along either axis") {
    auto x = random_tensor({6, 7}, 5, -20.0, 20.0);
    for (int axis : {0, 1, -1}) {
      auto y = softmax(g.constant(x), axis).value();
      const std::size_t outer = axis == 0 ? 7 : 6, inner = axis == 0 ? 6 : 7;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += axis == 0 ? y.at(i, o) : y.at(o, i);
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("invalid axis") { CHECK_THROWS_AS(softmax(g.constant(Tensor<double>({2, 2})), 2), DimensionError); }
}

TEST_CASE("layer_norm") {
  Graph<double> g;
  auto ones = g.constant(Tensor<double>({4}, 1.0));
  auto zeros = g.constant(Tensor<double>({4}));
  SUBCASE("constant vector normalizes to zeros") {
    auto y = layer_norm(g.constant(Tensor<double>({1, 4}, 7.0)), ones, zeros);
    for (double v : y.value().data) CHECK(v == 0.0);
  }
  SUBCASE("[-1,1] is a fixed point up to eps") {
    auto one2 = g.constant(Tensor<double>({2}, 1.0));
    auto zero2 = g.constant(Tensor<double>({2}));
    auto y = layer_norm(g.constant(Tensor<double>({1, 2}, std::vector<double>{-1.0, 1.0})), one2, zero2);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y.value()[0] == doctest::Approx(-expect).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("random vector has zero mean and unit variance") {
    auto one64 = g.constant(Tensor<double>({64}, 1.0));
    auto zero64 = g.constant(Tensor<double>({64}));
    auto y = layer_norm(g.constant(random_tensor({1, 64}, 6, -3.0, 5.0)), one64, zero64).value();
    const double mean = std::accumulate(y.data.begin(), y.data.end(), 0.0) / 64.0;
    double var = 0.0;
    for (double v : y.data) var += (v - mean) * (v - mean);
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("gelu") {
  Graph<double> g;
  auto y = gelu(g.constant(Tensor<double>({3}, std::vector<double>{0.0, 30.0, 1.0}))).value();
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(30.0).epsilon(1e-12));
  const double ref = 0.5 * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (1.0 + 0.044715)));
  CHECK(std::abs(y[2] - ref) < 1e-6);
  CHECK(std::abs(gelu_scalar(1.0) - ref) < 1e-12);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones") {
    Graph<double> g;
    auto x = g.variable(random_tensor({3, 4}, 7));
    g.backward(sum(x));
    for (double v : x.grad().data) CHECK(v == 1.0);
  }
  SUBCASE("x*x gives 2x") {
    Graph<double> g;
    auto x = g.variable(Tensor<double>({1}, 1.75));
    g.backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(3.5));
  }
  SUBCASE("non-scalar loss is a contract error") {
    Graph<double> g;
    auto x = g.variable(Tensor<double>({2, 2}, 1.0));
    CHECK_THROWS_AS(g.backward(x), ContractError);
  }
  SUBCASE("parameter gradients accumulate across calls") {
    Parameter<double> p("w", Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
    for (int rep = 0; rep < 2; ++rep) {
      Graph<double> g;
      auto w = g.parameter(p);
      g.backward(sum(mul(w, w)));
    }
    CHECK(p.grad[0] == doctest::Approx(4.0));
    CHECK(p.grad[1] == doctest::Approx(-8.0));
  }
  SUBCASE("shared subexpression is visited once") {
    Graph<double> g;
    auto x = g.variable(Tensor<double>({1}, 3.0));
    auto y = scale(x, 2.0);
    g.backward(sum(add(y, y)));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
  }
}

TEST_CASE("finite-difference gradient checks per op") {
  for (const auto& [name, err] : iclb::testing::op_gradient_errors()) {
    INFO(name);
    CHECK(err < iclb::testing::kFdTolerance);
  }
}

TEST_CASE("attention matches a per-head reference") {
  const std::size_t batch = 2, seq = 3, heads = 2, dim = 4, hd = dim / heads;
  auto qkv = random_tensor({batch * seq, 3 * dim}, 40);
  Graph<double> g;
  auto out = attention(g.constant(qkv), batch, seq, heads).value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<double> w(seq);
        double z = 0.0, mx = -1e300;
        for (std::size_t j = 0; j < seq; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < hd; ++d) s += qkv.at(b * seq + i, h * hd + d) * qkv.at(b * seq + j, dim + h * hd + d);
          w[j] = s / std::sqrt(double(hd));
          mx = std::max(mx, w[j]);
        }
        for (auto& x : w) z += (x = std::exp(x - mx));
        for (std::size_t d = 0; d < hd; ++d) {
          double ref = 0.0;
          for (std::size_t j = 0; j < seq; ++j) ref += w[j] / z * qkv.at(b * seq + j, 2 * dim + h * hd + d);
          CHECK(out.at(b * seq + i, h * hd + d) == doctest::Approx(ref).epsilon(1e-12));
        }
      }
}

TEST_CASE("masked_smooth_l1 ignores unweighted entries") {
  Graph<double> g;
  Tensor<double> target({1, 3}, std::vector<double>{0.0, 0.0, 0.0});
  const std::vector<std::uint8_t> w{1, 0, 1};
  auto loss = masked_smooth_l1(g.constant(Tensor<double>({1, 3}, std::vector<double>{0.5, 100.0, 3.0})), target, w);
  // Huber(0.5) = 0.125, Huber(3) = 2.5.
  CHECK(loss.value()[0] == doctest::Approx((0.125 + 2.5) / 2.0));
  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK(masked_smooth_l1(g.constant(target), target, none).value()[0] == 0.0);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Parameter<double> p("w", random_tensor({3}, 50));
    const auto before = p.value.data;
    std::vector<Parameter<double>*> ps{&p};
    AdamState<double> st;
    for (int i = 0; i < 5; ++i) adam_step<double>(ps, st, {});
    CHECK(p.value.data == before);
  }
  SUBCASE("constant gradient moves against its sign") {
    Parameter<double> p("w", Tensor<double>({2}, std::vector<double>{0.0, 0.0}));
    std::vector<Parameter<double>*> ps{&p};
    AdamState<double> st;
    for (int i = 0; i < 50; ++i) {
      p.grad = Tensor<double>({2}, std::vector<double>{0.3, -2.0});
      adam_step<double>(ps, st, {});
    }
    CHECK(p.value[0] < 0.0);
    CHECK(p.value[1] > 0.0);
  }
  SUBCASE("one step from known moments matches the hand computation") {
    Parameter<double> p("w", Tensor<double>({1}, 0.5));
    p.grad = Tensor<double>({1}, 0.2);
    std::vector<Parameter<double>*> ps{&p};
    AdamState<double> st;
    st.m.emplace_back(Shape{1}, 0.1);
    st.v.emplace_back(Shape{1}, 0.01);
    st.step = 1;
    AdamConfig cfg;
    cfg.lr = 1e-2;
    adam_step<double>(ps, st, cfg);
    // m = 0.9·0.1 + 0.1·0.2 = 0.11, v = 0.999·0.01 + 0.001·0.04 = 0.01003, t = 2.
    const double mhat = 0.11 / (1.0 - 0.81), vhat = 0.01003 / (1.0 - 0.998001);
    CHECK(std::abs(p.value[0] - (0.5 - 1e-2 * mhat / (std::sqrt(vhat) + 1e-8))) < 1e-7);
  }
  SUBCASE("mismatched state is rejected") {
    Parameter<double> p("w", Tensor<double>({2}));
    p.grad = Tensor<double>({2});
    std::vector<Parameter<double>*> ps{&p};
    AdamState<double> st;
    st.m.emplace_back(Shape{3});
    st.v.emplace_back(Shape{3});
    CHECK_THROWS_AS(adam_step<double>(ps, st, {}), DimensionError);
  }
}

TEST_CASE("float and double graphs agree on a small expression") {
  auto xd = random_tensor({3, 4}, 60);
  Tensor<float> xf({3, 4});
  for (std::size_t i = 0; i < xd.numel(); ++i) xf[i] = static_cast<float>(xd[i]);
  Graph<double> gd;
  Graph<float> gf;
  auto yd = gelu(softmax(gd.constant(xd))).value();
  auto yf = gelu(softmax(gf.constant(xf))).value();
  for (std::size_t i = 0; i < yd.numel(); ++i) CHECK(std::abs(yd[i] - yf[i]) < 1e-6);
}
