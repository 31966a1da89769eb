#include "msdm/unet.hpp"

#include "msdm/errors.hpp"
#include "msdm/ops.hpp"

namespace msdm {

ResBlock ResBlock::make(const std::string& name, std::size_t in, std::size_t out, std::size_t time_width,
                        std::size_t groups, Rng& rng) {
  ResBlock b;
  b.norm1 = nn::GroupNorm::make(name + ".norm1", in, groups);
  b.conv1 = nn::Conv2d::make(name + ".conv1", in, out, 3, rng);
  b.time_proj = nn::Linear::make(name + ".time_proj", time_width, out, true, rng);
  b.norm2 = nn::GroupNorm::make(name + ".norm2", out, groups);
  b.conv2 = nn::Conv2d::make(name + ".conv2", out, out, 3, rng);
  b.has_skip = in != out;
  if (b.has_skip) b.skip = nn::Conv2d::make(name + ".skip", in, out, 1, rng);
  return b;
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1.forward(ops::silu(norm1.forward(x)));
  h = ops::add_channel_bias(h, time_proj.forward(ops::silu(temb)));
  h = conv2.forward(ops::silu(norm2.forward(h)));
  return ops::add(has_skip ? skip.forward(x) : x, h);
}

void ResBlock::collect(NamedTensors& out) const {
  norm1.collect(out);
  conv1.collect(out);
  time_proj.collect(out);
  norm2.collect(out);
  conv2.collect(out);
  if (has_skip) skip.collect(out);
}

Unet::Unet(UnetConfig config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const auto& c = config_;
  time1_ = nn::Linear::make("time.fc1", c.ch1, c.time_width, true, rng);
  time2_ = nn::Linear::make("time.fc2", c.time_width, c.time_width, true, rng);
  conv_in_ = nn::Conv2d::make("conv_in", c.latent_channels, c.ch1, 3, rng);
  res1_ = ResBlock::make("res1", c.ch1, c.ch1, c.time_width, c.groups, rng);
  attn1_ = nn::CrossAttentionBlock::make("attn1", c.ch1, c.text_width, c.attn1_width, c.ff_mult, rng);
  down_ = nn::Conv2d::make("down", c.ch1, c.ch2, 3, rng);
  res2_ = ResBlock::make("res2", c.ch2, c.ch2, c.time_width, c.groups, rng);
  attn2_ = nn::CrossAttentionBlock::make("attn2", c.ch2, c.text_width, c.attn2_width, c.ff_mult, rng);
  up_ = nn::Conv2d::make("up", c.ch2, c.ch1, 3, rng);
  res3_ = ResBlock::make("res3", 2 * c.ch1, c.ch1, c.time_width, c.groups, rng);
  norm_out_ = nn::GroupNorm::make("norm_out", c.ch1, c.groups);
  conv_out_ = nn::Conv2d::make("conv_out", c.ch1, c.latent_channels, 3, rng);
}

Tensor Unet::forward(const Tensor& z_t, int t, const TextEmbedding& text) const {
  if (t < 1 || t > config_.timesteps) {
    throw ContractError("unet: timestep " + std::to_string(t) + " outside 1.." + std::to_string(config_.timesteps));
  }
  if (z_t.rank() != 3 || z_t.dim(0) != config_.latent_channels) {
    throw DimensionError("unet: latent " + shape_str(z_t.shape()));
  }
  const Tensor temb = time2_.forward(ops::silu(time1_.forward(nn::timestep_embedding(t, config_.ch1))));
  const Tensor h0 = conv_in_.forward(z_t);
  const Tensor h1 = attn1_.forward(res1_.forward(h0, temb), text);
  const Tensor d = down_.forward(ops::avg_pool2x(h1));
  const Tensor h2 = attn2_.forward(res2_.forward(d, temb), text);
  const Tensor u = up_.forward(ops::upsample_nearest2x(h2));
  const Tensor h3 = res3_.forward(ops::concat0(u, h1), temb);
  return conv_out_.forward(ops::silu(norm_out_.forward(h3)));
}

NamedTensors Unet::parameters() const {
  NamedTensors out;
  time1_.collect(out);
  time2_.collect(out);
  conv_in_.collect(out);
  res1_.collect(out);
  attn1_.collect(out);
  down_.collect(out);
  res2_.collect(out);
  attn2_.collect(out);
  up_.collect(out);
  res3_.collect(out);
  norm_out_.collect(out);
  conv_out_.collect(out);
  return out;
}

std::size_t Unet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : parameters()) n += t.numel();
  return n;
}

std::map<std::string, nn::Linear*> Unet::linear_index() {
  std::map<std::string, nn::Linear*> index;
  for (auto* block : {&attn1_, &attn2_}) {
    for (nn::Linear* l : block->linears()) index.emplace(l->name, l);
  }
  return index;
}

std::vector<std::string> Unet::attention_linear_names() const {
  std::vector<std::string> names;
  for (const auto* block : {&attn1_, &attn2_}) {
    for (const auto* l : {&block->to_q, &block->to_k, &block->to_v, &block->to_out, &block->ff1, &block->ff2}) {
      names.push_back(l->name);
    }
  }
  return names;
}

NamedTensors Unet::linear_weights(const std::vector<std::string>& names) const {
  auto index = const_cast<Unet*>(this)->linear_index();
  NamedTensors out;
  for (const auto& n : names) {
    auto it = index.find(n);
    if (it == index.end()) throw ConfigError("unet: no linear layer named '" + n + "'");
    out.emplace_back(n, it->second->weight);
  }
  return out;
}

void Unet::install_adapters(const std::vector<lora::AdapterPtr>& adapters) {
  auto index = linear_index();
  for (const auto& a : adapters) {
    auto it = index.find(a->target);
    if (it == index.end()) throw ConfigError("unet: adapter target '" + a->target + "' not found");
    it->second->adapter = a;
  }
}

void Unet::remove_adapters() {
  for (auto& [_, l] : linear_index()) l->adapter.reset();
}

}  // namespace msdm
