#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "msdm/rng.hpp"
#include "msdm/tensor.hpp"
#include "msdm/text_embedding.hpp"

namespace msdm::diffusion {

/// Per-timestep noise tables, indexed 0..T. Index 0 holds the convention
/// alpha_bar = 1 (beta = 0); steps 1..T are the real schedule.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
  // Posterior variance beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t).
  double posterior_variance(int t) const;
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);
NoiseSchedule make_cosine_schedule(int T);

// Linear 1e-4..0.02 endpoints rescaled so alpha_bar_T equals that of the
// 1000-step reference schedule.
NoiseSchedule make_default_linear_schedule(int T);
double reference_final_alpha_bar();

void write_schedule_csv(std::ostream& os, const NoiseSchedule& schedule);

struct GuidanceConfig {
  double scale = 1.0;
  double drop_probability = 0.1;
  void validate() const;
};

// epsilon-hat = model(x_t, t, text)
using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t, const TextEmbedding& text)>;

// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. t = 0 returns x0.
Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& schedule);

Tensor standard_normal(const Shape& shape, Rng& rng);

struct EpsLossSample {
  int t = 0;
  bool dropped = false;
};

// Mean squared error between injected and predicted noise for one sample.
// With probability drop_probability the text is replaced by the null prompt.
Tensor eps_loss(const NoisePredictor& model, const Tensor& x0, const TextEmbedding& text,
                const NoiseSchedule& schedule, const GuidanceConfig& guidance, Rng& rng,
                EpsLossSample* info = nullptr);

// uncond + scale (cond - uncond); scale 1 and 0 return the operands exactly.
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale);

// Ancestral DDPM sampling from x_T ~ N(0, I). Fully determined by `seed`.
// When guidance.scale == 1 the unconditional pass is skipped.
Tensor ddpm_sample(const NoisePredictor& model, const TextEmbedding& text, const NoiseSchedule& schedule,
                   const GuidanceConfig& guidance, std::uint64_t seed, const Shape& latent_shape);

}  // namespace msdm::diffusion
