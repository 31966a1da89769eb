#include <cmath>
#include <cstring>

#include "doctest.h"
#include "msdm/checkpoint.hpp"
#include "msdm/errors.hpp"
#include "msdm/layers.hpp"
#include "msdm/ops.hpp"
#include "msdm/text_encoder.hpp"
#include "msdm/unet.hpp"
#include "msdm/vae.hpp"
#include "gradient_suite.hpp"
#include "support.hpp"

using namespace msdm;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(double)) == 0;
}

void fill(const Tensor& t, double v) {
  Tensor h = t;
  for (auto& x : h.mutable_data()) x = v;
}

}  // namespace

TEST_SUITE("nets") {
  TEST_CASE("text encoder null prompt, determinism and separation") {
    const TextEncoder enc(7);
    const auto null = enc.encode("");
    CHECK(null.is_null);
    CHECK(null.length() == 1);
    for (double v : null.tokens.data()) CHECK(v == 0.0);
    const auto a = enc.encode("generate an image containing a polyp");
    const auto b = enc.encode("generate an image containing a polyp");
    CHECK(bitwise_equal(a.tokens, b.tokens));
    CHECK(bitwise_equal(a.pooled, b.pooled));
    CHECK(a.width() == TextEncoder::kWidth);
    CHECK(cosine(enc.encode("polyp").pooled, enc.encode("instrument").pooled) < 0.99);
    CHECK(enc.encode(std::string(200, 'a') + " b c d e f g h i j k l m n o p q r s t").length() <= TextEncoder::kMaxLength);
  }

  TEST_CASE("cross-attention with one text token ignores the queries") {
    Rng rng(1);
    auto block = nn::CrossAttentionBlock::make("attn", 8, 6, 0, 2, rng);
    TextEmbedding text{test::randn({1, 6}, rng), Tensor::zeros({6}), false};
    const auto x = test::randn({5, 8}, rng);
    nn::AttentionProbe probe;
    const auto y0 = block.forward_tokens(x, text, &probe);
    for (double w : probe.weights.data()) CHECK(w == 1.0);
    fill(block.to_q.weight, 0.37);
    const auto y1 = block.forward_tokens(x, text);
    CHECK(bitwise_equal(y0, y1));
    // With feed-forward zeroed the output is x + V W_out^T + b_out on every row.
    fill(block.ff1.weight, 0.0);
    fill(block.ff2.weight, 0.0);
    fill(block.ff1.bias, 0.0);
    fill(block.ff2.bias, 0.0);
    const auto y2 = block.forward_tokens(x, text);
    const auto v = block.to_out.forward(block.to_v.forward(text.tokens));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 8; ++j) CHECK(y2[i * 8 + j] == doctest::Approx(x[i * 8 + j] + v[j]).epsilon(1e-14));
  }

  TEST_CASE("cross-attention pure residual and normalised weights") {
    Rng rng(2);
    auto block = nn::CrossAttentionBlock::make("attn", 8, 6, 0, 2, rng);
    TextEmbedding text{test::randn({4, 6}, rng), Tensor::zeros({6}), false};
    const auto x = test::randn({9, 8}, rng);
    nn::AttentionProbe probe;
    block.forward_tokens(x, text, &probe);
    REQUIRE(probe.weights.shape() == Shape{9, 4});
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) s += probe.weights[i * 4 + j];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    fill(block.to_v.weight, 0.0);
    fill(block.to_out.bias, 0.0);
    for (auto* l : {&block.ff1, &block.ff2}) {
      fill(l->weight, 0.0);
      fill(l->bias, 0.0);
    }
    CHECK(bitwise_equal(block.forward_tokens(x, text), x));
    TextEmbedding wrong{Tensor::zeros({1, 5}), Tensor::zeros({5}), false};
    CHECK_THROWS_AS(block.forward_tokens(x, wrong), DimensionError);
    CHECK_THROWS_AS(block.forward_tokens(Tensor::zeros({3, 7}), text), DimensionError);
  }

  TEST_CASE("VAE shapes, bounds and reparameterisation") {
    const Vae vae({}, 3);
    Rng rng(4);
    const auto x = test::randn({3, 32, 32}, rng, 0.5);
    const auto enc = vae.encode(x, rng);
    CHECK(enc.mean.shape() == Shape{4, 8, 8});
    CHECK(enc.logvar.shape() == Shape{4, 8, 8});
    CHECK(enc.z.shape() == Shape{4, 8, 8});
    const auto big = test::randn({4, 8, 8}, rng, 50.0);
    const auto y = vae.decode(big);
    CHECK(y.shape() == Shape{3, 32, 32});
    for (double v : y.data()) CHECK((v >= -1.0 && v <= 1.0));
    CHECK(vae.decode(vae.encode_mean(x)).shape() == x.shape());
    CHECK_THROWS_AS(vae.encode_mean(Tensor::zeros({3, 30, 30})), DimensionError);
    CHECK_THROWS_AS(vae.encode_mean(Tensor::zeros({1, 32, 32})), DimensionError);

    const auto mean = test::randn({4, 2, 2}, rng);
    const auto z = reparameterize(mean, Tensor::full({4, 2, 2}, -60.0), rng);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z[i] == doctest::Approx(mean[i]).epsilon(1e-12));
  }

  TEST_CASE("reparameterisation variance matches exp(logvar)") {
    Rng rng(10);
    const double lv = -0.7;
    const int n = 10000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double d = reparameterize(Tensor::scalar(2.0), Tensor::scalar(lv), rng)[0] - 2.0;
      sum += d;
      sq += d * d;
    }
    const double var = (sq - sum * sum / n) / (n - 1), truth = std::exp(lv);
    CHECK(std::abs(var - truth) < 3.0 * truth * std::sqrt(2.0 / (n - 1)));
  }

  TEST_CASE("KL and VAE loss closed forms") {
    CHECK(kl_divergence(Tensor::zeros({4}), Tensor::zeros({4})).item() == 0.0);
    CHECK(kl_divergence(Tensor::scalar(1.0), Tensor::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
    const auto x = Tensor::from({3}, {0.1, 0.2, 0.3});
    CHECK(vae_loss(x, Tensor::zeros({2}), Tensor::zeros({2}), x, 0.5).item() == 0.0);
    CHECK_THROWS_AS(vae_loss(x, Tensor::zeros({2}), Tensor::zeros({2}), Tensor::zeros({4}), 0.5), DimensionError);
  }

  TEST_CASE("VAE loss graph gradients on sampled parameters") {
    CHECK(test::vae_loss_gradient_error(10, 1e-6, 1e-3) < 1e-4);
  }

  TEST_CASE("U-Net contract") {
    UnetConfig cfg;
    cfg.ch1 = 16;
    cfg.ch2 = 16;
    cfg.time_width = 32;
    cfg.groups = 4;
    Unet unet(cfg, 5);
    const TextEncoder enc(1);
    Rng rng(6);
    const auto z = test::randn({4, 8, 8}, rng);
    const auto a = unet.forward(z, 10, enc.encode("a polyp"));
    CHECK(a.shape() == z.shape());
    const auto b = unet.forward(z, 10, enc.encode("biopsy forceps in view"));
    double linf = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) linf = std::max(linf, std::abs(a[i] - b[i]));
    CHECK(linf > 0.0);
    CHECK_THROWS_AS(unet.forward(z, 0, enc.encode("x")), ContractError);
    CHECK_THROWS_AS(unet.forward(z, cfg.timesteps + 1, enc.encode("x")), ContractError);
    CHECK_THROWS_AS(unet.forward(Tensor::zeros({3, 8, 8}), 5, enc.encode("x")), DimensionError);
    for (auto& [_, t] : unet.parameters()) fill(t, 0.0);
    const auto zero = unet.forward(z, 10, enc.encode("a polyp"));
    for (double v : zero.data()) CHECK(v == 0.0);
  }

  TEST_CASE("checkpoint round trip and header layout") {
    Rng rng(8);
    NamedTensors ts = {{"w", test::randn({2, 3}, rng)}, {"b", test::randn({4}, rng)}};
    const auto bytes = encode_checkpoint(ts);
    CHECK(std::memcmp(bytes.data(), "MSDM", 4) == 0);
    std::uint32_t version = 0, count = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&count, bytes.data() + 8, 4);
    CHECK(version == kCheckpointVersion);
    CHECK(count == 2);
    CHECK(bytes.size() == 12 + (4 + 1 + 4 + 16 + 48) + (4 + 1 + 4 + 8 + 32));
    const auto back = decode_checkpoint(bytes);
    REQUIRE(back.size() == 2);
    CHECK(back[0].first == "w");
    CHECK(bitwise_equal(back[0].second, ts[0].second));
    CHECK(bitwise_equal(back[1].second, ts[1].second));
    CHECK(digest(back) == digest(ts));
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), IoError);
    auto cut = bytes;
    cut.resize(cut.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(cut), IoError);
    NamedTensors wrong = {{"w", Tensor::zeros({3, 2})}};
    CHECK_THROWS_AS(assign_by_name(wrong, ts), DimensionError);
  }
}
