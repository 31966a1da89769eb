#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "msdm/rng.hpp"
#include "msdm/tensor.hpp"

namespace msdm::test {

inline Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(shape, std::move(v), requires_grad);
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Central differences on every entry (or `max_entries` random entries) of
// each input, compared against the tape's gradient. Relative error uses
// max(|analytic|, |numeric|, floor) as denominator.
inline GradCheck gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs, double h = 1e-5,
                           double floor = 1e-2, std::size_t max_entries = 0, std::uint64_t seed = 1) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheck out;
  Rng rng(seed);
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_entries && idx.size() > max_entries) {
      shuffle(idx, rng);
      idx.resize(max_entries);
    }
    for (std::size_t i : idx) {
      auto d = t.mutable_data();
      const double x0 = d[i];
      double fp, fm;
      {
        NoGradScope ng;
        d[i] = x0 + h;
        fp = loss_fn().item();
        d[i] = x0 - h;
        fm = loss_fn().item();
        d[i] = x0;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel = std::max(out.max_rel, rel);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace msdm::test
