#pragma once

#include <cstdint>
#include <vector>

#include "msdm/tensor.hpp"

namespace msdm {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay.
///
/// Per step: p -= lr*wd*p, then the bias-corrected Adam update. Gradients are
/// zeroed (buffers kept) after the update. A parameter without a gradient
/// buffer is a contract error.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  void step();
  std::uint64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t t_ = 0;
};

// Allocates zero gradient buffers so every parameter has one before backward.
void zero_grads(std::vector<Tensor>& params);

}  // namespace msdm
