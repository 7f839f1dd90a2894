#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "diat/tensor.hpp"

namespace diat {

// Convolutions take [C,H,W] or batch-major [N,C,H,W] input. Zero padding.

/// weight [C_out, C_in, kH, kW], bias [C_out] (may be undefined).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int pad, int stride);

/// weight [C_in, C_out, kH, kW], bias [C_out] (may be undefined). The forward
/// map is the adjoint of conv2d with the same weight tensor and geometry.
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int pad,
                        int stride, int out_pad);

std::int64_t conv_out_extent(std::int64_t in, int kernel, int pad, int stride);
std::int64_t deconv_out_extent(std::int64_t in, int kernel, int pad, int stride, int out_pad);

/// input [N_in] -> [M], or batched [B, N_in] -> [B, M]. weight [M, N_in].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Per-sample, per-channel normalization of [N,C,H,W] (or [C,H,W]) with a
/// learnable affine transform.
Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
/// log(clamp(x, lo, 1-lo)); gradient is zero where clamping is active.
Tensor log_clamped(const Tensor& x, double lo);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; shapes must match exactly.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum of squared entries.
Tensor frobenius_sq(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
/// Concatenates [N,C_i,H,W] (or [C_i,H,W]) tensors along channels.
Tensor concat_channels(const std::vector<Tensor>& parts);

/// Mean cross-entropy of logits [N,K] against class indices.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Separable Gaussian filter with radius ceil(3*sigma), normalized taps and
/// mirror reflection at the borders. Shape preserving; linear and
/// differentiable.
Tensor gaussian_blur(const Tensor& image, double sigma);
/// Normalized one-sided taps k[0..r] of the blur kernel.
std::vector<double> gaussian_taps(double sigma);

// Non-differentiable helpers.

Tensor clamp(const Tensor& x, double lo, double hi);
/// Stacks equal-shaped tensors into a new leading batch dimension.
Tensor stack(const std::vector<Tensor>& items);
/// Sample i of a batched tensor, without the batch dimension.
Tensor unstack_one(const Tensor& batch, std::int64_t i);
double dot(const Tensor& a, const Tensor& b);

}  // namespace diat
