#include "msdm/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include "msdm/errors.hpp"
#include "msdm/ops.hpp"

namespace msdm::diffusion {

namespace {

NoiseSchedule from_betas(std::vector<double> betas_1_to_T) {
  NoiseSchedule s;
  s.T = static_cast<int>(betas_1_to_T.size());
  s.betas.reserve(betas_1_to_T.size() + 1);
  s.betas.push_back(0.0);
  s.betas.insert(s.betas.end(), betas_1_to_T.begin(), betas_1_to_T.end());
  s.alphas.resize(s.betas.size());
  s.alpha_bars.resize(s.betas.size());
  s.alphas[0] = 1.0;
  s.alpha_bars[0] = 1.0;
  for (std::size_t t = 1; t < s.betas.size(); ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
  }
  return s;
}

std::vector<double> linear_betas(int T, double start, double end) {
  std::vector<double> b(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    b[static_cast<std::size_t>(i)] = T == 1 ? start : start + (end - start) * i / (T - 1);
  }
  return b;
}

double final_alpha_bar(const std::vector<double>& betas) {
  double a = 1.0;
  for (double b : betas) a *= 1.0 - b;
  return a;
}

}  // namespace

double NoiseSchedule::posterior_variance(int t) const {
  if (t < 1 || t > T) throw ContractError("posterior_variance: t out of range");
  return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || beta_start > beta_end || !(beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  return from_betas(linear_betas(T, beta_start, beta_end));
}

NoiseSchedule make_cosine_schedule(int T) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  constexpr double s = 0.008;
  const auto f = [&](double t) {
    const double c = std::cos(((t / T + s) / (1.0 + s)) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    const double prev = f(t - 1.0) / f0;
    const double cur = f(static_cast<double>(t)) / f0;
    betas[static_cast<std::size_t>(t - 1)] = std::min(1.0 - cur / prev, 0.999);
  }
  return from_betas(std::move(betas));
}

double reference_final_alpha_bar() {
  static const double ref = final_alpha_bar(linear_betas(1000, 1e-4, 0.02));
  return ref;
}

NoiseSchedule make_default_linear_schedule(int T) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  const double target = reference_final_alpha_bar();
  double lo = 1e-3, hi = 0.999 / 0.02;
  if (final_alpha_bar(linear_betas(T, 1e-4 * hi, 0.02 * hi)) > target) {
    return make_linear_schedule(T, 1e-4 * hi, 0.02 * hi);
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (final_alpha_bar(linear_betas(T, 1e-4 * mid, 0.02 * mid)) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return make_linear_schedule(T, 1e-4 * hi, 0.02 * hi);
}

void write_schedule_csv(std::ostream& os, const NoiseSchedule& schedule) {
  os << "t,beta,alpha,alpha_bar\n";
  os.precision(17);
  for (int t = 1; t <= schedule.T; ++t) {
    os << t << ',' << schedule.beta(t) << ',' << schedule.alpha(t) << ',' << schedule.alpha_bar(t) << '\n';
  }
}

void GuidanceConfig::validate() const {
  if (!(scale >= 0.0)) throw ConfigError("guidance scale must be nonnegative");
  if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) {
    throw ConfigError("guidance drop_probability must lie in [0, 1]");
  }
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.T) {
    throw ContractError("q_sample: t=" + std::to_string(t) + " outside 0.." + std::to_string(schedule.T));
  }
  if (x0.shape() != noise.shape()) throw DimensionError("q_sample: noise shape differs from x0");
  const double ab = schedule.alpha_bar(t);
  return ops::add(ops::scale(x0, std::sqrt(ab)), ops::scale(noise, std::sqrt(1.0 - ab)));
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v));
}

Tensor eps_loss(const NoisePredictor& model, const Tensor& x0, const TextEmbedding& text,
                const NoiseSchedule& schedule, const GuidanceConfig& guidance, Rng& rng,
                EpsLossSample* info) {
  const int t = static_cast<int>(rng.between(1, schedule.T));
  const bool drop = rng.bernoulli(guidance.drop_probability);
  const Tensor noise = standard_normal(x0.shape(), rng);
  const Tensor x_t = q_sample(x0, t, noise, schedule);
  const Tensor eps_hat = drop ? model(x_t, t, TextEmbedding::null(text.width())) : model(x_t, t, text);
  if (eps_hat.shape() != x0.shape()) throw DimensionError("eps_loss: model output shape differs from input");
  if (info != nullptr) *info = EpsLossSample{t, drop};
  return ops::mse_loss(eps_hat, noise);
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
  if (eps_uncond.shape() != eps_cond.shape()) throw DimensionError("cfg_combine: shape mismatch");
  if (scale == 1.0) return eps_cond;
  if (scale == 0.0) return eps_uncond;
  return ops::add(eps_uncond, ops::scale(ops::sub(eps_cond, eps_uncond), scale));
}

Tensor ddpm_sample(const NoisePredictor& model, const TextEmbedding& text, const NoiseSchedule& schedule,
                   const GuidanceConfig& guidance, std::uint64_t seed, const Shape& latent_shape) {
  NoGradScope no_grad;
  Rng rng(seed);
  Tensor x = standard_normal(latent_shape, rng);
  const TextEmbedding null_text = TextEmbedding::null(text.width());
  for (int t = schedule.T; t >= 1; --t) {
    Tensor eps = model(x, t, text);
    if (guidance.scale != 1.0) eps = cfg_combine(model(x, t, null_text), eps, guidance.scale);
    const double beta = schedule.beta(t);
    const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    std::vector<double> next(x.numel());
    const auto xv = x.data();
    const auto ev = eps.data();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] = (xv[i] - coef * ev[i]) * inv_sqrt_alpha;
    if (t > 1) {
      const double sigma = std::sqrt(schedule.posterior_variance(t));
      for (auto& v : next) v += sigma * rng.normal();
    }
    x = Tensor::from(latent_shape, std::move(next));
  }
  return x;
}

}  // namespace msdm::diffusion
