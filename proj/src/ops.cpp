#include "kw/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kw::ops {

namespace {

using Index = std::ptrdiff_t;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

// Unfolds the receptive fields of one (sample, group) into col [patch, pixels].
void im2col(const Real* x, const ConvGeometry& g, std::size_t group, Real* col) {
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.group_in_channels; ++c) {
    const Real* plane = x + (group * g.group_in_channels + c) * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        Real* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const Index ih = Index(oh * g.stride + kh) - Index(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const Index iw = Index(ow * g.stride + kw) - Index(g.pad);
            const bool inside = ih >= 0 && ih < Index(g.in_h) && iw >= 0 && iw < Index(g.in_w);
            row[oh * g.out_w + ow] = inside ? plane[ih * Index(g.in_w) + iw] : Real(0);
          }
        }
      }
    }
  }
}

// Scatter-adds col [patch, pixels] back onto the input planes of one group.
void col2im(const Real* col, const ConvGeometry& g, std::size_t group, Real* dx) {
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.group_in_channels; ++c) {
    Real* plane = dx + (group * g.group_in_channels + c) * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        const Real* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const Index ih = Index(oh * g.stride + kh) - Index(g.pad);
          if (ih < 0 || ih >= Index(g.in_h)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const Index iw = Index(ow * g.stride + kw) - Index(g.pad);
            if (iw < 0 || iw >= Index(g.in_w)) continue;
            plane[ih * Index(g.in_w) + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

std::vector<Real> unfold_batch(const Tensor& x, const ConvGeometry& g) {
  const std::size_t block = g.patch_size() * g.out_pixels();
  std::vector<Real> cols(g.batch * g.groups * block);
  const std::size_t in_sample = g.in_channels * g.in_h * g.in_w;
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < Index(g.batch * g.groups); ++job) {
    const std::size_t n = std::size_t(job) / g.groups, grp = std::size_t(job) % g.groups;
    im2col(x.ptr() + n * in_sample, g, grp, cols.data() + std::size_t(job) * block);
  }
  return cols;
}

Shape kernel_extents(const Tensor& w, bool per_sample) {
  if (!per_sample) {
    require_rank(w, 4, "conv kernel");
    return w.shape();
  }
  require_rank(w, 5, "per-sample conv kernel");
  return {w.dim(1), w.dim(2), w.dim(3), w.dim(4)};
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvParams& p, bool per_sample) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel_extents(w, per_sample), p);
  if (per_sample && w.dim(0) != g.batch)
    throw ShapeError("per-sample kernels: batch " + std::to_string(g.batch) + " vs " + std::to_string(w.dim(0)) +
                     " kernels");
  const std::vector<Real> cols = unfold_batch(x, g);
  Tensor y(g.output_shape());
  const std::size_t patch = g.patch_size(), pixels = g.out_pixels();
  const std::size_t fg = g.group_out_channels();
  const std::size_t kernel_stride = g.out_channels * patch;
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < Index(g.batch * g.out_channels); ++job) {
    const std::size_t n = std::size_t(job) / g.out_channels, f = std::size_t(job) % g.out_channels;
    const std::size_t grp = f / fg;
    const Real* wrow = w.ptr() + (per_sample ? n * kernel_stride : 0) + f * patch;
    const Real* col = cols.data() + (n * g.groups + grp) * patch * pixels;
    Real* out = y.ptr() + (n * g.out_channels + f) * pixels;
    for (std::size_t k = 0; k < patch; ++k) {
      const Real wk = wrow[k];
      const Real* crow = col + k * pixels;
      for (std::size_t q = 0; q < pixels; ++q) out[q] += wk * crow[q];
    }
  }
  return y;
}

}  // namespace

ConvGeometry conv_geometry(const Shape& x, const Shape& kernel, const ConvParams& p) {
  if (x.size() != 4) throw ShapeError("conv input must be [N,C,H,W], got " + shape_str(x));
  if (kernel.size() != 4) throw ShapeError("conv kernel must be [F,C,KH,KW], got " + shape_str(kernel));
  if (p.stride == 0) throw std::invalid_argument("conv stride must be positive");
  if (p.groups == 0) throw std::invalid_argument("conv groups must be positive");
  ConvGeometry g{};
  g.batch = x[0];
  g.in_channels = x[1];
  g.in_h = x[2];
  g.in_w = x[3];
  g.out_channels = kernel[0];
  g.group_in_channels = kernel[1];
  g.kernel_h = kernel[2];
  g.kernel_w = kernel[3];
  g.groups = p.groups;
  g.stride = p.stride;
  g.pad = p.pad;
  if (g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0)
    throw ShapeError("conv groups " + std::to_string(g.groups) + " must divide input channels " +
                     std::to_string(g.in_channels) + " and output channels " + std::to_string(g.out_channels));
  if (g.in_channels / g.groups != g.group_in_channels)
    throw ShapeError("conv channel mismatch: input " + shape_str(x) + " has " + std::to_string(g.in_channels) +
                     " channels, kernel " + shape_str(kernel) + " expects " +
                     std::to_string(g.group_in_channels * g.groups));
  if (g.in_h + 2 * g.pad < g.kernel_h || g.in_w + 2 * g.pad < g.kernel_w)
    throw ShapeError("conv kernel " + shape_str(kernel) + " larger than padded input " + shape_str(x));
  g.out_h = (g.in_h + 2 * g.pad - g.kernel_h) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.pad - g.kernel_w) / g.stride + 1;
  return g;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvParams& p) { return conv_forward(x, w, p, false); }

Tensor conv2d_per_sample(const Tensor& x, const Tensor& w, const ConvParams& p) {
  return conv_forward(x, w, p, true);
}

ConvGrads conv2d_backward(const Tensor& dy, const Tensor& x, const Tensor& w, const ConvParams& p,
                          bool per_sample, bool need_dx, bool need_dw) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel_extents(w, per_sample), p);
  if (dy.shape() != g.output_shape())
    throw ShapeError("conv backward: gradient " + shape_str(dy.shape()) + " vs output " +
                     shape_str(g.output_shape()));
  const std::size_t patch = g.patch_size(), pixels = g.out_pixels();
  const std::size_t fg = g.group_out_channels();
  const std::size_t kernel_stride = g.out_channels * patch;
  ConvGrads grads;

  if (need_dx) {
    grads.dx = Tensor(x.shape());
    const std::size_t in_sample = g.in_channels * g.in_h * g.in_w;
#pragma omp parallel
    {
      std::vector<Real> dcol(patch * pixels);
#pragma omp for schedule(static)
      for (Index job = 0; job < Index(g.batch * g.groups); ++job) {
        const std::size_t n = std::size_t(job) / g.groups, grp = std::size_t(job) % g.groups;
        std::fill(dcol.begin(), dcol.end(), Real(0));
        for (std::size_t fl = 0; fl < fg; ++fl) {
          const std::size_t f = grp * fg + fl;
          const Real* wrow = w.ptr() + (per_sample ? n * kernel_stride : 0) + f * patch;
          const Real* dyrow = dy.ptr() + (n * g.out_channels + f) * pixels;
          for (std::size_t k = 0; k < patch; ++k) {
            const Real wk = wrow[k];
            Real* drow = dcol.data() + k * pixels;
            for (std::size_t q = 0; q < pixels; ++q) drow[q] += wk * dyrow[q];
          }
        }
        col2im(dcol.data(), g, grp, grads.dx.ptr() + n * in_sample);
      }
    }
  }

  if (need_dw) {
    grads.dw = Tensor(w.shape());
    const std::vector<Real> cols = unfold_batch(x, g);
    if (per_sample) {
#pragma omp parallel for schedule(static)
      for (Index job = 0; job < Index(g.batch * g.out_channels); ++job) {
        const std::size_t n = std::size_t(job) / g.out_channels, f = std::size_t(job) % g.out_channels;
        const Real* col = cols.data() + (n * g.groups + f / fg) * patch * pixels;
        const Real* dyrow = dy.ptr() + (n * g.out_channels + f) * pixels;
        Real* dw = grads.dw.ptr() + n * kernel_stride + f * patch;
        for (std::size_t k = 0; k < patch; ++k) {
          Real acc = 0;
          const Real* crow = col + k * pixels;
          for (std::size_t q = 0; q < pixels; ++q) acc += dyrow[q] * crow[q];
          dw[k] = acc;
        }
      }
    } else {
#pragma omp parallel for schedule(static)
      for (Index fi = 0; fi < Index(g.out_channels); ++fi) {
        const std::size_t f = std::size_t(fi);
        Real* dw = grads.dw.ptr() + f * patch;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const Real* col = cols.data() + (n * g.groups + f / fg) * patch * pixels;
          const Real* dyrow = dy.ptr() + (n * g.out_channels + f) * pixels;
          for (std::size_t k = 0; k < patch; ++k) {
            Real acc = 0;
            const Real* crow = col + k * pixels;
            for (std::size_t q = 0; q < pixels; ++q) acc += dyrow[q] * crow[q];
            dw[k] += acc;
          }
        }
      }
    }
  }
  return grads;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  Tensor out({n, c});
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < Index(n * c); ++i) {
    const Real* plane = x.ptr() + std::size_t(i) * area;
    Real s = 0;
    for (std::size_t q = 0; q < area; ++q) s += plane[q];
    out[std::size_t(i)] = s / Real(area);
  }
  return out;
}

Tensor global_avg_pool_backward(const Tensor& dy, const Shape& x_shape) {
  if (x_shape.size() != 4 || dy.shape() != Shape{x_shape[0], x_shape[1]})
    throw ShapeError("global_avg_pool backward: gradient " + shape_str(dy.shape()) + " vs input " +
                     shape_str(x_shape));
  const std::size_t area = x_shape[2] * x_shape[3];
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const Real v = dy[i] / Real(area);
    std::fill_n(dx.ptr() + i * area, area, v);
  }
  return dx;
}

Tensor dense_affine(const Tensor& v, const Tensor& m, const Tensor& bias) {
  require_rank(v, 2, "affine input");
  require_rank(m, 2, "affine weight");
  require_rank(bias, 1, "affine bias");
  const std::size_t n = v.dim(0), d = v.dim(1), d_out = m.dim(0);
  if (m.dim(1) != d)
    throw ShapeError("affine: input width " + std::to_string(d) + " vs weight " + shape_str(m.shape()));
  if (bias.dim(0) != d_out)
    throw ShapeError("affine: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(m.shape()));
  Tensor out({n, d_out});
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < Index(n * d_out); ++job) {
    const std::size_t s = std::size_t(job) / d_out, o = std::size_t(job) % d_out;
    const Real* vrow = v.ptr() + s * d;
    const Real* mrow = m.ptr() + o * d;
    Real acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += vrow[i] * mrow[i];
    out[std::size_t(job)] = acc + bias[o];
  }
  return out;
}

AffineGrads dense_affine_backward(const Tensor& dy, const Tensor& v, const Tensor& m) {
  const std::size_t n = v.dim(0), d = v.dim(1), d_out = m.dim(0);
  if (dy.shape() != Shape{n, d_out})
    throw ShapeError("affine backward: gradient " + shape_str(dy.shape()) + " vs output [" + std::to_string(n) + "x" +
                     std::to_string(d_out) + "]");
  AffineGrads g{Tensor(v.shape()), Tensor(m.shape()), Tensor({d_out})};
#pragma omp parallel for schedule(static)
  for (Index si = 0; si < Index(n); ++si) {
    const std::size_t s = std::size_t(si);
    Real* dv = g.dv.ptr() + s * d;
    for (std::size_t o = 0; o < d_out; ++o) {
      const Real gy = dy[s * d_out + o];
      const Real* mrow = m.ptr() + o * d;
      for (std::size_t i = 0; i < d; ++i) dv[i] += gy * mrow[i];
    }
  }
#pragma omp parallel for schedule(static)
  for (Index oi = 0; oi < Index(d_out); ++oi) {
    const std::size_t o = std::size_t(oi);
    Real* dm = g.dm.ptr() + o * d;
    Real db = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const Real gy = dy[s * d_out + o];
      const Real* vrow = v.ptr() + s * d;
      for (std::size_t i = 0; i < d; ++i) dm[i] += gy * vrow[i];
      db += gy;
    }
    g.dbias[o] = db;
  }
  return g;
}

Tensor relu(const Tensor& v) {
  Tensor out = v;
  for (auto& e : out.data()) e = e > 0 ? e : Real(0);
  return out;
}

Tensor relu_backward(const Tensor& dy, const Tensor& v) {
  if (dy.shape() != v.shape()) throw ShapeError("relu backward: shape mismatch");
  Tensor dx(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) dx[i] = v[i] > 0 ? dy[i] : Real(0);
  return dx;
}

namespace {
void check_logits(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "logits");
  if (labels.size() != logits.dim(0))
    throw ShapeError("cross entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.dim(0)) + " rows");
  for (int y : labels)
    if (y < 0 || std::size_t(y) >= logits.dim(1))
      throw std::invalid_argument("cross entropy: label " + std::to_string(y) + " out of range");
}

// log-sum-exp of one row, max-shifted
Real row_lse(const Real* row, std::size_t k) {
  Real mx = row[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
  Real s = 0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}
}  // namespace

Real softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Real total = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const Real* row = logits.ptr() + s * k;
    total += row_lse(row, k) - row[labels[s]];
  }
  return total / Real(n);
}

Tensor softmax_cross_entropy_backward(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor g(logits.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const Real* row = logits.ptr() + s * k;
    const Real lse = row_lse(row, k);
    for (std::size_t j = 0; j < k; ++j) {
      Real p = std::exp(row[j] - lse);
      if (int(j) == labels[s]) p -= 1;
      g[s * k + j] = p / Real(n);
    }
  }
  return g;
}

}  // namespace kw::ops
