#pragma once

// Forward and backward kernels of the tensor core. Loops are OpenMP-parallel
// over independent outputs (sample, output channel, cell); each output value is
// produced by a single thread in a fixed summation order, so results do not
// depend on the worker count. Serial reference loops live in reference.hpp.

#include <cstddef>
#include <span>
#include <vector>

#include "kw/tensor.hpp"

namespace kw::ops {

struct ConvParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

struct ConvGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, group_in_channels, kernel_h, kernel_w;
  std::size_t out_h, out_w;
  std::size_t groups, stride, pad;

  std::size_t group_out_channels() const { return out_channels / groups; }
  std::size_t patch_size() const { return group_in_channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
  Shape output_shape() const { return {batch, out_channels, out_h, out_w}; }
};

// Validates x [N,C,H,W] against a kernel of extents [F, C/groups, KH, KW].
// Throws ShapeError on dimension mismatch, std::invalid_argument on bad stride.
ConvGeometry conv_geometry(const Shape& x, const Shape& kernel, const ConvParams& p);

// Cross-correlation without bias. w: [F, C/groups, KH, KW].
Tensor conv2d(const Tensor& x, const Tensor& w, const ConvParams& p = {});

// Sample n is convolved with its own kernel w[n]. w: [N, F, C/groups, KH, KW].
// Equivalent to a grouped convolution over the batch.
Tensor conv2d_per_sample(const Tensor& x, const Tensor& w, const ConvParams& p = {});

struct ConvGrads {
  Tensor dx;  // empty unless requested
  Tensor dw;
};

ConvGrads conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& w, const ConvParams& p,
                          bool per_sample, bool need_dx, bool need_dw);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& dy, const Shape& x_shape);

// v [N,d], m [d',d], bias [d'] -> v m^T + bias
Tensor dense_affine(const Tensor& v, const Tensor& m, const Tensor& bias);

struct AffineGrads {
  Tensor dv, dm, dbias;
};
AffineGrads dense_affine_backward(const Tensor& dy, const Tensor& v, const Tensor& m);

Tensor relu(const Tensor& v);
Tensor relu_backward(const Tensor& dy, const Tensor& v);

// Mean cross-entropy of softmax(logits [N,K]) against integer labels.
Real softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor softmax_cross_entropy_backward(const Tensor& logits, std::span<const int> labels);

}  // namespace kw::ops
