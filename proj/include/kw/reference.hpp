#pragma once

// Serial, loop-for-loop reference kernels. They are the test oracles for the
// parallel fast paths in ops.hpp and the baseline in bench/.

#include "kw/ops.hpp"
#include "kw/tensor.hpp"

namespace kw::reference {

// Direct nested-loop cross-correlation. w: [F, C/groups, KH, KW].
Tensor conv2d(const Tensor& x, const Tensor& w, const ops::ConvParams& p = {});

// w: [N, F, C/groups, KH, KW]; sample n uses w[n].
Tensor conv2d_per_sample(const Tensor& x, const Tensor& w, const ops::ConvParams& p = {});

Tensor dense_affine(const Tensor& v, const Tensor& m, const Tensor& bias);

Tensor global_avg_pool(const Tensor& x);

}  // namespace kw::reference
