#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "msdm/diffusion.hpp"
#include "msdm/errors.hpp"
#include "msdm/ops.hpp"
#include "msdm/optim.hpp"
#include "support.hpp"

using namespace msdm;
using namespace msdm::diffusion;

namespace {

void set_grad(Tensor& p, const std::vector<double>& g) {
  auto dst = p.mutable_grad();
  std::copy(g.begin(), g.end(), dst.begin());
}

}  // namespace

TEST_SUITE("optim") {
  TEST_CASE("first Adam step is lr times the gradient sign") {
    auto p = Tensor::scalar(1.0, true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    set_grad(p, {1.0});
    opt.step();
    // m_hat = 1, v_hat = 1: p = 1 - 0.1 / (1 + 1e-8)
    CHECK(p[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(opt.step_count() == 1);
  }

  TEST_CASE("zero gradient leaves parameters alone without decay") {
    auto p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    set_grad(p, {0, 0, 0});
    opt.step();
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
    CHECK(p[2] == 0.5);
  }

  TEST_CASE("decoupled decay alone") {
    auto p = Tensor::scalar(1.0, true);
    AdamW opt({p}, {0.1, 0.9, 0.999, 1e-8, 0.01});
    set_grad(p, {0.0});
    opt.step();
    CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-15));
  }

  TEST_CASE("AdamW matches an independent recurrence over many steps") {
    Rng rng(8);
    auto p = test::randn({5}, rng, 1.0, true);
    std::vector<double> ref(p.data().begin(), p.data().end()), m(5, 0.0), v(5, 0.0);
    const AdamWConfig cfg{0.01, 0.9, 0.999, 1e-8, 0.05};
    AdamW opt({p}, cfg);
    for (int t = 1; t <= 25; ++t) {
      std::vector<double> g(5);
      for (auto& x : g) x = rng.normal();
      set_grad(p, g);
      opt.step();
      for (std::size_t i = 0; i < 5; ++i) {
        ref[i] -= cfg.lr * cfg.weight_decay * ref[i];
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
        ref[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
      }
      for (std::size_t i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-13));
      for (double gi : p.grad()) CHECK(gi == 0.0);
    }
    CHECK(opt.first_moment(0).size() == 5);
  }

  TEST_CASE("identical seeds give bit-identical trajectories over 100 steps") {
    const auto run = [] {
      Rng rng(31);
      auto w = test::randn({4, 3}, rng, 1.0, true);
      auto x = test::randn({6, 4}, rng);
      auto y = test::randn({6, 3}, rng);
      AdamW opt({w}, {0.01, 0.9, 0.999, 1e-8, 0.01});
      std::vector<double> trace;
      for (int step = 0; step < 100; ++step) {
        Tape tape;
        {
          TapeScope scope(tape);
          tape.backward(ops::mse_loss(ops::matmul(x, w), y));
        }
        opt.step();
        trace.insert(trace.end(), w.data().begin(), w.data().end());
      }
      return trace;
    };
    const auto a = run(), b = run();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }

  TEST_CASE("fan-out doubles the gradient on a linear graph") {
    auto x = Tensor::from({3}, {1.0, -2.0, 4.0}, true);
    auto c = Tensor::from({3}, {0.5, 2.0, -1.0});
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(ops::sum(ops::mul(x, c)));
    }
    const std::vector<double> once(x.grad().begin(), x.grad().end());
    x.clear_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      const auto y = ops::mul(x, c);
      tape.backward(ops::add(ops::sum(y), ops::sum(ops::mul(x, c))));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(once[i] == c[i]);
      CHECK(x.grad()[i] == 2.0 * once[i]);
    }
  }

  TEST_CASE("missing gradient buffer is a contract error") {
    auto p = Tensor::scalar(1.0, true);
    AdamW opt({p}, {});
    CHECK_THROWS_AS(opt.step(), ContractError);
  }
}

TEST_SUITE("diffusion") {
  TEST_CASE("linear schedule small cases") {
    const auto s1 = make_linear_schedule(1, 0.1, 0.1);
    CHECK(s1.beta(1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(s1.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    const auto s2 = make_linear_schedule(2, 0.1, 0.3);
    CHECK(s2.beta(1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(s2.beta(2) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(s2.alpha_bar(2) == doctest::Approx(0.63).epsilon(1e-15));
    CHECK(s2.alpha_bar(0) == 1.0);
  }

  TEST_CASE("linear and cosine T=10 tables against a fresh evaluation of the formulas") {
    const auto lin = make_linear_schedule(10, 1e-3, 0.2);
    double ab = 1.0;
    for (int t = 1; t <= 10; ++t) {
      const double beta = 1e-3 + (0.2 - 1e-3) * (t - 1) / 9.0;
      ab *= 1.0 - beta;
      CHECK(std::abs(lin.beta(t) - beta) < 1e-12);
      CHECK(std::abs(lin.alpha_bar(t) - ab) < 1e-12);
    }
    const auto cos = make_cosine_schedule(10);
    const auto f = [](double t) {
      const double c = std::cos((t / 10.0 + 0.008) / 1.008 * M_PI / 2.0);
      return c * c;
    };
    double prod = 1.0;
    for (int t = 1; t <= 10; ++t) {
      const double beta = std::min(1.0 - f(t) / f(t - 1), 0.999);
      prod *= 1.0 - beta;
      CHECK(std::abs(cos.beta(t) - beta) < 1e-12);
      CHECK(std::abs(cos.alpha_bar(t) - prod) < 1e-12);
    }
    CHECK(cos.alpha_bar(0) == 1.0);
  }

  TEST_CASE("default T=100 schedule") {
    const auto s = make_default_linear_schedule(100);
    for (int t = 1; t <= 100; ++t) {
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) < 1.0);
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK(s.alpha_bar(100) < 0.05);
    double ref = 1.0;
    for (int i = 0; i < 1000; ++i) ref *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
    CHECK(std::abs(reference_final_alpha_bar() - ref) < 1e-15);
    CHECK(s.alpha_bar(100) == doctest::Approx(ref).epsilon(1e-9));
    const auto c = make_cosine_schedule(100);
    for (int t = 1; t <= 100; ++t) CHECK(c.alpha_bar(t) < c.alpha_bar(t - 1));
    std::ostringstream csv;
    write_schedule_csv(csv, s);
    CHECK(csv.str().rfind("t,beta,alpha,alpha_bar\n", 0) == 0);
  }

  TEST_CASE("schedule bounds are configuration errors") {
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.3, 0.1), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS((GuidanceConfig{1.0, 1.5}.validate()), ConfigError);
  }

  TEST_CASE("q_sample endpoints and range") {
    const auto s = make_default_linear_schedule(100);
    const auto x0 = Tensor::from({3}, {1, -2, 3}), n = Tensor::from({3}, {0.5, 0.1, -0.7});
    const auto y = q_sample(x0, 0, n, s);
    for (int i = 0; i < 3; ++i) CHECK(y[i] == x0[i]);
    NoiseSchedule limit = make_linear_schedule(1, 0.5, 0.5);
    limit.alpha_bars[1] = 0.0;
    const auto z = q_sample(x0, 1, n, limit);
    for (int i = 0; i < 3; ++i) CHECK(z[i] == n[i]);
    CHECK_THROWS_AS(q_sample(x0, 101, n, s), ContractError);
    CHECK_THROWS_AS(q_sample(x0, -1, n, s), ContractError);
  }

  TEST_CASE("q_sample Monte-Carlo mean and variance within 3 sigma") {
    const auto s = make_default_linear_schedule(100);
    const int t = 40, n = 10000;
    const double x0v = 0.8, ab = s.alpha_bar(t);
    const auto x0 = Tensor::scalar(x0v);
    Rng rng(77);
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = q_sample(x0, t, standard_normal({1}, rng), s)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n, var = (sq - n * mean * mean) / (n - 1);
    const double var_true = 1.0 - ab;
    CHECK(std::abs(mean - std::sqrt(ab) * x0v) < 3.0 * std::sqrt(var_true / n));
    CHECK(std::abs(var - var_true) < 3.0 * var_true * std::sqrt(2.0 / (n - 1)));
  }

  TEST_CASE("eps loss oracles") {
    const auto s = make_default_linear_schedule(100);
    const auto text = TextEmbedding::null(8);
    Rng rng(5);
    const auto x0 = test::randn({4, 2, 2}, rng);
    const NoisePredictor zero = [](const Tensor& x, int, const TextEmbedding&) { return Tensor::zeros(x.shape()); };
    double total = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double l = eps_loss(zero, x0, text, s, {1.0, 0.1}, rng).item();
      CHECK(l >= 0.0);
      total += l;
    }
    CHECK(std::abs(total / 1000.0 - 1.0) < 0.1);

    // Oracle predictor recovers the injected noise from x_t and the known x0.
    const NoisePredictor oracle = [&](const Tensor& x, int t, const TextEmbedding&) {
      const double ab = s.alpha_bar(t);
      return ops::scale(ops::sub(x, ops::scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
    };
    for (int i = 0; i < 50; ++i) CHECK(eps_loss(oracle, x0, text, s, {1.0, 0.1}, rng).item() < 1e-20);
  }

  TEST_CASE("classifier-free guidance combine") {
    const auto u = Tensor::from({3}, {0.1, -0.2, 0.3}), c = Tensor::from({3}, {1.7, 0.4, -2.2});
    const auto one = cfg_combine(u, c, 1.0), zero = cfg_combine(u, c, 0.0);
    for (int i = 0; i < 3; ++i) {
      CHECK(one[i] == c[i]);
      CHECK(zero[i] == u[i]);
    }
    const auto two = cfg_combine(Tensor::zeros({3}), c, 2.0);
    for (int i = 0; i < 3; ++i) CHECK(two[i] == 2.0 * c[i]);
  }

  TEST_CASE("ancestral sampler recurrences") {
    const auto text = TextEmbedding::null(4);
    // Zero model, T=2, noise replayed from the same seeded stream.
    const auto s2 = make_linear_schedule(2, 0.1, 0.3);
    const NoisePredictor zero = [](const Tensor& x, int, const TextEmbedding&) { return Tensor::zeros(x.shape()); };
    const auto out = ddpm_sample(zero, text, s2, {1.0, 0.0}, 99, {3});
    Rng rng(99);
    double x[3];
    for (double& v : x) v = rng.normal();
    const double sigma2 = std::sqrt(0.3 * (1.0 - 0.9) / (1.0 - 0.63));
    for (double& v : x) v = v / std::sqrt(0.7);
    for (double& v : x) v += sigma2 * rng.normal();
    for (double& v : x) v = v / std::sqrt(0.9);
    for (int i = 0; i < 3; ++i) CHECK(out[i] == doctest::Approx(x[i]).epsilon(1e-14));

    // T=1 with the exact noise inverts the forward step.
    const auto s1 = make_linear_schedule(1, 0.2, 0.2);
    const auto x0 = Tensor::from({3}, {0.3, -1.0, 2.0});
    const NoisePredictor exact = [&](const Tensor& xt, int t, const TextEmbedding&) {
      const double ab = s1.alpha_bar(t);
      return ops::scale(ops::sub(xt, ops::scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
    };
    const auto inv = ddpm_sample(exact, text, s1, {1.0, 0.0}, 3, {3});
    for (int i = 0; i < 3; ++i) CHECK(inv[i] == doctest::Approx(x0[i]).epsilon(1e-12));
  }

  TEST_CASE("sampler is bit-identical across reruns and guidance 1 skips the unconditional pass") {
    const auto s = make_default_linear_schedule(20);
    int null_calls = 0;
    const NoisePredictor model = [&](const Tensor& x, int t, const TextEmbedding& e) {
      if (e.is_null) ++null_calls;
      return ops::scale(ops::tanh(x), 0.1 * t / 20.0 + (e.is_null ? 0.0 : 0.05));
    };
    TextEmbedding text{Tensor::full({1, 4}, 0.5), Tensor::full({4}, 0.5), false};
    const auto a = ddpm_sample(model, text, s, {1.0, 0.0}, 1234, {2, 2, 2});
    const auto b = ddpm_sample(model, text, s, {1.0, 0.0}, 1234, {2, 2, 2});
    CHECK(null_calls == 0);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) == 0);
    const auto g = ddpm_sample(model, text, s, {3.0, 0.0}, 1234, {2, 2, 2});
    CHECK(null_calls == 20);
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs |= a[i] != g[i];
    CHECK(differs);
  }
}
