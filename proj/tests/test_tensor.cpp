#include <cmath>
#include <numbers>

#include "doctest.h"
#include "msdm/errors.hpp"
#include "msdm/ops.hpp"
#include "gradient_suite.hpp"
#include "support.hpp"

using namespace msdm;
using msdm::test::gradcheck;
using msdm::test::randn;

namespace {

Tensor T(Shape s, std::vector<double> v, bool g = false) { return Tensor::from(std::move(s), std::move(v), g); }

// Direct nested-loop cross-correlation.
std::vector<double> conv_reference(const Tensor& x, const Tensor& k, const Tensor* bias, std::size_t stride,
                                   std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = k.dim(0), K = k.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(O * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double s = bias ? (*bias)[o] : 0.0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v) {
              const long y = static_cast<long>(i * stride + u) - static_cast<long>(pad);
              const long z = static_cast<long>(j * stride + v) - static_cast<long>(pad);
              if (y < 0 || z < 0 || y >= static_cast<long>(H) || z >= static_cast<long>(W)) continue;
              s += x[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(z)] *
                   k[((o * C + c) * K + u) * K + v];
            }
        out[(o * Ho + i) * Wo + j] = s;
      }
  return out;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("tensor construction rejects bad data") {
    CHECK_THROWS_AS(T({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(T({2}, {1, NAN}), NumericError);
    CHECK_THROWS_AS(T({1}, {INFINITY}), NumericError);
    const auto z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK_FALSE(z.has_grad());
  }

  TEST_CASE("matmul identity and annihilator") {
    const auto I = T({2, 2}, {1, 0, 0, 1});
    const auto M = T({2, 2}, {1, 2, 3, 4});
    const auto P = ops::matmul(I, M);
    CHECK(std::vector<double>(P.data().begin(), P.data().end()) == std::vector<double>{1, 2, 3, 4});
    const auto Z = ops::matmul(I, Tensor::zeros({2, 3}));
    for (double v : Z.data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(ops::matmul(M, Tensor::zeros({3, 2})), DimensionError);
  }

  TEST_CASE("matmul gradients against central differences") {
    Rng rng(11);
    auto a = randn({3, 4}, rng), b = randn({4, 2}, rng);
    const auto g = gradcheck([&] { return ops::sum(ops::square(ops::matmul(a, b))); }, {a, b}, 1e-6, 1e-8);
    CHECK(g.checked == 20);
    CHECK(g.max_rel < 1e-6);
  }

  TEST_CASE("conv2d trivial cases") {
    const auto x = T({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const auto id = ops::conv2d(x, T({1, 1, 1, 1}, {1}), 1, 0);
    CHECK(std::vector<double>(id.data().begin(), id.data().end()) ==
          std::vector<double>(x.data().begin(), x.data().end()));
    const auto s = ops::conv2d(Tensor::full({1, 4, 4}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), 1, 0);
    CHECK(s.shape() == Shape{1, 2, 2});
    for (double v : s.data()) CHECK(v == 9.0);
  }

  TEST_CASE("conv2d equals the nested-loop reference exactly") {
    Rng rng(5);
    for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 3}, std::tuple{1, 0, 1}, std::tuple{1, 2, 5}}) {
      const auto x = randn({3, 7, 7}, rng), w = randn({4, 3, std::size_t(k), std::size_t(k)}, rng), b = randn({4}, rng);
      const auto y = ops::conv2d(x, w, b, std::size_t(stride), std::size_t(pad));
      const auto ref = conv_reference(x, w, &b, std::size_t(stride), std::size_t(pad));
      REQUIRE(y.numel() == ref.size());
      double worst = 0.0;
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
      // Summation order differs from the reference only through blocking; the
      // scalar path keeps it to rounding noise.
      CHECK(worst < 1e-12);
    }
  }

  TEST_CASE("conv2d rejects non-integral extents and channel mismatch") {
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 2, 0), DimensionError);
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 1, 1), DimensionError);
  }

  TEST_CASE("softmax closed forms") {
    const auto u = ops::softmax(T({1, 3}, {0, 0, 0}), 1);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    const auto big = ops::softmax(T({1, 2}, {1000, 1000}), 1);
    CHECK(big[0] == 0.5);
    CHECK(big[1] == 0.5);
    const auto q = ops::softmax(T({1, 2}, {0, std::log(3.0)}), 1);
    CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-14));
  }

  TEST_CASE("group norm special cases") {
    const auto x = Tensor::full({4, 3, 3}, 2.5);
    const auto y = ops::group_norm(x, 2, Tensor::full({4}, 1.0), Tensor::zeros({4}));
    for (double v : y.data()) CHECK(v == 0.0);
    Rng rng(3);
    const auto r = randn({4, 3, 3}, rng);
    const auto c = ops::group_norm(r, 2, Tensor::zeros({4}), T({4}, {1, 2, 3, 4}));
    for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == double(i / 9 + 1));
    CHECK_THROWS_AS(ops::group_norm(r, 3, Tensor::zeros({4}), Tensor::zeros({4})), DimensionError);
  }

  TEST_CASE("autodiff trivial gradients") {
    auto x = T({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    {
      Tape tape;
      TapeScope s(tape);
      tape.backward(ops::sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
    auto s = Tensor::scalar(3.0, true);
    {
      Tape tape;
      TapeScope sc(tape);
      tape.backward(ops::mul(s, s));
    }
    CHECK(s.grad()[0] == 6.0);
  }

  TEST_CASE("backward requires a scalar loss") {
    auto x = T({2}, {1, 2}, true);
    Tape tape;
    TapeScope s(tape);
    const auto y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }

  TEST_CASE("tape records inputs before outputs and replays in reverse") {
    auto x = T({2}, {1, 2}, true);
    Tape tape;
    TapeScope s(tape);
    const auto a = ops::square(x);
    const auto b = ops::exp(a);
    const auto c = ops::sum(b);
    REQUIRE(tape.size() == 3);
    for (std::size_t i = 0; i < tape.size(); ++i) {
      for (const auto& in : tape.records()[i].inputs) {
        bool produced_later = false;
        for (std::size_t j = i; j < tape.size(); ++j) produced_later |= tape.records()[j].output.same_storage(in);
        CHECK_FALSE(produced_later);
      }
    }
    tape.backward(c);
    CHECK(x.grad()[0] == doctest::Approx(2.0 * std::exp(1.0)));
  }

  TEST_CASE("no tape means no recording") {
    auto x = T({2}, {1, 2}, true);
    const auto y = ops::square(x);
    CHECK_FALSE(y.requires_grad());
    Tape tape;
    TapeScope s(tape);
    {
      NoGradScope ng;
      (void)ops::square(x);
    }
    CHECK(tape.size() == 0);
  }

  TEST_CASE("every op's gradient matches central differences") {
    const auto report = test::op_gradients(1e-5, 1e-2);
    CHECK(report.size() >= 25);
    for (const auto& g : report) {
      INFO(g.op << " max rel " << g.max_rel);
      CHECK(g.checked > 0);
      CHECK(g.max_rel < 1e-5);
    }
  }

  TEST_CASE("shape mismatches are dimension errors") {
    CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    CHECK_THROWS_AS(ops::linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
    CHECK_THROWS_AS(ops::avg_pool2x(Tensor::zeros({1, 3, 4})), DimensionError);
  }

  TEST_CASE("non-finite results are rejected at the op boundary") {
    CHECK_THROWS_AS(ops::exp(Tensor::full({1}, 1000.0)), NumericError);
  }
}
