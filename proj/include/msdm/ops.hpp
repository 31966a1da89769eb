#pragma once

// Differentiable tensor operations. Every function validates shapes, rejects
// non-finite results, and records a backward rule on the active tape when any
// input requires grad. No implicit broadcasting: bias-style additions have
// their own named ops.

#include <cstddef>

#include "msdm/tensor.hpp"

namespace msdm::ops {

Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
Tensor transpose(const Tensor& a);                // 2-D only
// x[N x in] * W[out x in]^T (+ bias[out]). bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// x[C x ...] + b[c] for every element of channel c. b.numel() must equal C.
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& x);  // [L x D] -> [D]
Tensor mse_loss(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat0(const Tensor& a, const Tensor& b);  // along the leading axis
Tensor slice2d(const Tensor& a, std::size_t rows, std::size_t cols);  // top-left block

Tensor softmax(const Tensor& x, std::size_t axis);

// Cross-correlation. input [C x H x W], kernels [C' x C x k x k], k odd.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

inline constexpr double kGroupNormEps = 1e-5;
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain, const Tensor& bias);

Tensor upsample_nearest2x(const Tensor& x);  // [C x H x W] -> [C x 2H x 2W]
Tensor avg_pool2x(const Tensor& x);          // [C x H x W] -> [C x H/2 x W/2]

}  // namespace msdm::ops
