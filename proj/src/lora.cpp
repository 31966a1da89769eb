#include "msdm/lora.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "msdm/errors.hpp"
#include "msdm/kernels.hpp"
#include "msdm/ops.hpp"
#include "msdm/rng.hpp"

namespace msdm::lora {

Tensor LoraAdapter::delta() const {
  const std::size_t out = d_out(), in = d_in();
  std::vector<double> d(out * in);
  kernels::gemm(out, in, static_cast<std::size_t>(rank), B.ptr(), A.ptr(), d.data());
  const double s = scale();
  for (auto& v : d) v *= s;
  return Tensor::from({out, in}, std::move(d));
}

std::vector<AdapterPtr> attach(const NamedTensors& base, const std::vector<std::string>& targets, int rank,
                               std::optional<double> alpha, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("lora: rank must be >= 1");
  std::unordered_map<std::string, Tensor> by_name;
  for (const auto& [name, t] : base) by_name.emplace(name, t);
  std::vector<AdapterPtr> out;
  out.reserve(targets.size());
  Rng root(seed);
  for (const auto& target : targets) {
    auto it = by_name.find(target);
    if (it == by_name.end()) throw ConfigError("lora: unknown target '" + target + "'");
    Tensor w = it->second;
    if (w.rank() != 2) throw ConfigError("lora: target '" + target + "' is not a 2-D weight");
    const std::size_t d_out = w.dim(0), d_in = w.dim(1);
    if (static_cast<std::size_t>(rank) > std::min(d_in, d_out)) {
      throw ConfigError("lora: rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                        std::to_string(std::min(d_in, d_out)) + " for '" + target + "'");
    }
    w.set_requires_grad(false);
    Rng rng = root.fork(target);
    std::vector<double> a(static_cast<std::size_t>(rank) * d_in);
    for (auto& v : a) v = rng.normal() * kInitStd;
    auto adapter = std::make_shared<LoraAdapter>();
    adapter->target = target;
    adapter->rank = rank;
    adapter->alpha = alpha.value_or(static_cast<double>(rank));
    adapter->A = Tensor::from({static_cast<std::size_t>(rank), d_in}, std::move(a), true);
    adapter->B = Tensor::zeros({d_out, static_cast<std::size_t>(rank)}, true);
    out.push_back(std::move(adapter));
  }
  return out;
}

Tensor adapted_forward(const Tensor& x, const Tensor& base_weight, const LoraAdapter& adapter,
                       const Tensor& bias) {
  const Tensor base = ops::linear(x, base_weight, bias);
  if (!adapter.enabled) return base;
  if (adapter.d_in() != base_weight.dim(1) || adapter.d_out() != base_weight.dim(0)) {
    throw DimensionError("lora: adapter for '" + adapter.target + "' does not match weight " +
                         shape_str(base_weight.shape()));
  }
  const Tensor low = ops::linear(ops::linear(x, adapter.A), adapter.B);
  return ops::add(base, ops::scale(low, adapter.scale()));
}

Tensor merge(const Tensor& base_weight, const LoraAdapter& adapter) {
  if (!adapter.enabled) throw ContractError("lora: merge requires an enabled adapter");
  const Tensor d = adapter.delta();
  if (d.shape() != base_weight.shape()) throw DimensionError("lora: merge shape mismatch");
  std::vector<double> out(base_weight.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = base_weight[i] + d[i];
  return Tensor::from(base_weight.shape(), std::move(out));
}

Tensor unmerge(const Tensor& merged_weight, const LoraAdapter& adapter) {
  const Tensor d = adapter.delta();
  if (d.shape() != merged_weight.shape()) throw DimensionError("lora: unmerge shape mismatch");
  std::vector<double> out(merged_weight.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = merged_weight[i] - d[i];
  return Tensor::from(merged_weight.shape(), std::move(out));
}

std::size_t trainable_param_count(const std::vector<AdapterPtr>& adapters, std::size_t extras) {
  std::size_t n = extras;
  for (const auto& a : adapters) n += static_cast<std::size_t>(a->rank) * (a->d_in() + a->d_out());
  return n;
}

std::size_t trainable_param_count(const std::vector<std::pair<std::size_t, std::size_t>>& target_shapes,
                                  int rank, std::size_t extras) {
  std::size_t n = extras;
  for (const auto& [d_out, d_in] : target_shapes) n += static_cast<std::size_t>(rank) * (d_in + d_out);
  return n;
}

std::vector<Tensor> trainable_tensors(const std::vector<AdapterPtr>& adapters) {
  std::vector<Tensor> out;
  for (const auto& a : adapters) {
    out.push_back(a->A);
    out.push_back(a->B);
  }
  return out;
}

void save_adapters(const std::filesystem::path& path, const std::vector<AdapterPtr>& adapters) {
  NamedTensors tensors;
  std::ostringstream sidecar;
  sidecar.precision(17);
  for (const auto& a : adapters) {
    tensors.emplace_back("lora." + a->target + ".A", a->A);
    tensors.emplace_back("lora." + a->target + ".B", a->B);
    sidecar << a->target << ' ' << a->rank << ' ' << a->alpha << '\n';
  }
  save_checkpoint(path, tensors);
  std::ofstream f(path.string() + ".txt", std::ios::trunc);
  if (!f) throw IoError("cannot write adapter sidecar for " + path.string());
  f << sidecar.str();
}

std::vector<AdapterPtr> load_adapters(const std::filesystem::path& path) {
  const NamedTensors tensors = load_checkpoint(path);
  std::unordered_map<std::string, Tensor> by_name;
  for (const auto& [name, t] : tensors) by_name.emplace(name, t);
  std::ifstream f(path.string() + ".txt");
  if (!f) throw IoError("missing adapter sidecar " + path.string() + ".txt");
  std::vector<AdapterPtr> out;
  std::string target;
  int rank = 0;
  double alpha = 0.0;
  while (f >> target >> rank >> alpha) {
    auto a = std::make_shared<LoraAdapter>();
    a->target = target;
    a->rank = rank;
    a->alpha = alpha;
    auto ia = by_name.find("lora." + target + ".A");
    auto ib = by_name.find("lora." + target + ".B");
    if (ia == by_name.end() || ib == by_name.end()) throw IoError("adapter tensors missing for " + target);
    a->A = ia->second;
    a->B = ib->second;
    a->A.set_requires_grad(true);
    a->B.set_requires_grad(true);
    if (a->A.dim(0) != static_cast<std::size_t>(rank) || a->B.dim(1) != static_cast<std::size_t>(rank)) {
      throw IoError("adapter rank mismatch for " + target);
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace msdm::lora
