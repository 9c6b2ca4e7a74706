#include "kw/reference.hpp"

#include <string>

namespace kw::reference {

namespace {

void direct_conv(const Tensor& x, const Real* w, std::size_t n, const ops::ConvGeometry& g, Tensor& y) {
  const std::size_t fg = g.group_out_channels();
  for (std::size_t f = 0; f < g.out_channels; ++f) {
    const std::size_t grp = f / fg;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        Real acc = 0;
        for (std::size_t c = 0; c < g.group_in_channels; ++c) {
          for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
            for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
              const long ih = long(oh * g.stride + kh) - long(g.pad);
              const long iw = long(ow * g.stride + kw) - long(g.pad);
              if (ih < 0 || iw < 0 || ih >= long(g.in_h) || iw >= long(g.in_w)) continue;
              const Real wv = w[((f * g.group_in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw];
              acc += x.at(n, grp * g.group_in_channels + c, std::size_t(ih), std::size_t(iw)) * wv;
            }
          }
        }
        y.at(n, f, oh, ow) = acc;
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const ops::ConvParams& p) {
  const auto g = ops::conv_geometry(x.shape(), w.shape(), p);
  Tensor y(g.output_shape());
  for (std::size_t n = 0; n < g.batch; ++n) direct_conv(x, w.ptr(), n, g, y);
  return y;
}

Tensor conv2d_per_sample(const Tensor& x, const Tensor& w, const ops::ConvParams& p) {
  if (w.rank() != 5) throw ShapeError("per-sample kernel must be rank 5, got " + shape_str(w.shape()));
  const auto g = ops::conv_geometry(x.shape(), {w.dim(1), w.dim(2), w.dim(3), w.dim(4)}, p);
  if (w.dim(0) != g.batch) throw ShapeError("per-sample kernel count does not match batch");
  const std::size_t stride = w.size() / w.dim(0);
  Tensor y(g.output_shape());
  for (std::size_t n = 0; n < g.batch; ++n) direct_conv(x, w.ptr() + n * stride, n, g, y);
  return y;
}

Tensor dense_affine(const Tensor& v, const Tensor& m, const Tensor& bias) {
  const std::size_t n = v.dim(0), d = v.dim(1), d_out = m.dim(0);
  if (m.dim(1) != d || bias.dim(0) != d_out) throw ShapeError("reference affine: dimension mismatch");
  Tensor out({n, d_out});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < d_out; ++o) {
      Real acc = 0;
      for (std::size_t i = 0; i < d; ++i) acc += v.at(s, i) * m.at(o, i);
      out.at(s, o) = acc + bias[o];
    }
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real acc = 0;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) acc += x.at(s, ch, i, j);
      out.at(s, ch) = acc / Real(h * w);
    }
  return out;
}

}  // namespace kw::reference
