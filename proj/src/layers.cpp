#include "msdm/layers.hpp"

#include <cmath>

#include "msdm/errors.hpp"
#include "msdm/ops.hpp"

namespace msdm::nn {

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Linear Linear::make(std::string name, std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  Linear l;
  l.name = std::move(name);
  l.weight = gaussian({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  if (adapter && adapter->enabled) return lora::adapted_forward(x, weight, *adapter, bias);
  return ops::linear(x, weight, bias);
}

void Linear::collect(NamedTensors& out) const {
  out.emplace_back(name + ".weight", weight);
  if (bias.defined()) out.emplace_back(name + ".bias", bias);
}

Conv2d Conv2d::make(std::string name, std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
  Conv2d c;
  c.name = std::move(name);
  c.weight = gaussian({out, in, k, k}, 1.0 / std::sqrt(static_cast<double>(in * k * k)), rng);
  c.bias = Tensor::zeros({out}, true);
  c.padding = k / 2;
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, 1, padding); }

void Conv2d::collect(NamedTensors& out) const {
  out.emplace_back(name + ".weight", weight);
  out.emplace_back(name + ".bias", bias);
}

GroupNorm GroupNorm::make(std::string name, std::size_t channels, std::size_t groups) {
  GroupNorm g;
  g.name = std::move(name);
  g.gain = Tensor::full({channels}, 1.0, true);
  g.bias = Tensor::zeros({channels}, true);
  g.groups = groups;
  return g;
}

Tensor GroupNorm::forward(const Tensor& x) const { return ops::group_norm(x, groups, gain, bias); }

void GroupNorm::collect(NamedTensors& out) const {
  out.emplace_back(name + ".gain", gain);
  out.emplace_back(name + ".bias", bias);
}

CrossAttentionBlock CrossAttentionBlock::make(std::string name, std::size_t visual_width,
                                              std::size_t text_width, std::size_t attn_width,
                                              std::size_t ff_mult, Rng& rng) {
  CrossAttentionBlock b;
  b.visual_width = visual_width;
  b.width = attn_width == 0 ? visual_width : attn_width;
  b.projected = b.width != visual_width;
  const std::size_t w = b.width;
  if (b.projected) {
    b.proj_in = Linear::make(name + ".proj_in", visual_width, w, true, rng);
    b.proj_out = Linear::make(name + ".proj_out", w, visual_width, true, rng);
  }
  b.to_q = Linear::make(name + ".to_q", w, w, false, rng);
  b.to_k = Linear::make(name + ".to_k", text_width, w, false, rng);
  b.to_v = Linear::make(name + ".to_v", text_width, w, false, rng);
  b.to_out = Linear::make(name + ".to_out", w, w, true, rng);
  b.ff1 = Linear::make(name + ".ff1", w, ff_mult * w, true, rng);
  b.ff2 = Linear::make(name + ".ff2", ff_mult * w, w, true, rng);
  b.name = std::move(name);
  return b;
}

Tensor CrossAttentionBlock::forward_tokens(const Tensor& visual, const TextEmbedding& text,
                                           AttentionProbe* probe) const {
  if (visual.rank() != 2 || visual.dim(1) != visual_width) {
    throw DimensionError(name + ": visual tokens " + shape_str(visual.shape()) + " vs width " +
                         std::to_string(visual_width));
  }
  if (text.width() != to_k.weight.dim(1)) {
    throw DimensionError(name + ": text width " + std::to_string(text.width()) + " vs " +
                         std::to_string(to_k.weight.dim(1)));
  }
  const Tensor h_in = projected ? proj_in.forward(visual) : visual;
  const Tensor q = to_q.forward(h_in);
  const Tensor k = to_k.forward(text.tokens);
  const Tensor v = to_v.forward(text.tokens);
  const Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(static_cast<double>(width)));
  const Tensor attn = ops::softmax(scores, 1);
  if (probe != nullptr) probe->weights = attn;
  const Tensor h = ops::add(h_in, to_out.forward(ops::matmul(attn, v)));
  const Tensor y = ops::add(h, ff2.forward(ops::gelu(ff1.forward(h))));
  if (!projected) return y;
  return ops::add(visual, proj_out.forward(y));
}

Tensor CrossAttentionBlock::forward(const Tensor& feature_map, const TextEmbedding& text) const {
  if (feature_map.rank() != 3) throw DimensionError(name + ": expected [C x H x W]");
  const std::size_t c = feature_map.dim(0), hh = feature_map.dim(1), ww = feature_map.dim(2);
  const Tensor tokens = ops::transpose(ops::reshape(feature_map, {c, hh * ww}));
  const Tensor out = forward_tokens(tokens, text);
  return ops::reshape(ops::transpose(out), {c, hh, ww});
}

void CrossAttentionBlock::collect(NamedTensors& out) const {
  if (projected) {
    proj_in.collect(out);
    proj_out.collect(out);
  }
  for (const Linear* l : {&to_q, &to_k, &to_v, &to_out, &ff1, &ff2}) l->collect(out);
}

std::vector<Linear*> CrossAttentionBlock::linears() {
  std::vector<Linear*> v{&to_q, &to_k, &to_v, &to_out, &ff1, &ff2};
  if (projected) {
    v.push_back(&proj_in);
    v.push_back(&proj_out);
  }
  return v;
}

Tensor timestep_embedding(int t, std::size_t dim) {
  if (dim % 2 != 0) throw DimensionError("timestep_embedding: odd width");
  const std::size_t half = dim / 2;
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[i] = std::sin(t * freq);
    v[i + half] = std::cos(t * freq);
  }
  return Tensor::from({1, dim}, std::move(v));
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

void set_requires_grad(NamedTensors& named, bool on) {
  for (auto& [_, t] : named) t.set_requires_grad(on);
}

}  // namespace msdm::nn
