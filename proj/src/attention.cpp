#include "kw/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace kw {

namespace {
std::atomic<std::size_t> g_degenerate_events{0};

Real abs_sum(std::span<const Real> z) {
  Real s = 0;
  for (Real v : z) s += std::abs(v);
  return s;
}

Real sign(Real v) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); }

bool uses_abs_denominator(AttentionFunction fn) {
  return fn == AttentionFunction::naf || fn == AttentionFunction::relu_norm;
}
}  // namespace

std::string_view to_string(AttentionFunction fn) {
  switch (fn) {
    case AttentionFunction::naf: return "naf";
    case AttentionFunction::softmax: return "softmax";
    case AttentionFunction::sigmoid: return "sigmoid";
    case AttentionFunction::relu_norm: return "relu_norm";
  }
  return "?";
}

AttentionFunction parse_attention_function(std::string_view s) {
  if (s == "naf") return AttentionFunction::naf;
  if (s == "softmax") return AttentionFunction::softmax;
  if (s == "sigmoid") return AttentionFunction::sigmoid;
  if (s == "relu_norm") return AttentionFunction::relu_norm;
  throw std::invalid_argument("unknown attention function '" + std::string(s) + "'");
}

void normalize_attention(std::span<const Real> z, Real tau, std::span<const Real> beta, AttentionFunction fn,
                         std::span<Real> alpha) {
  const std::size_t n = z.size();
  if (beta.size() != n || alpha.size() != n) throw ShapeError("normalize_attention: row lengths differ");
  const Real keep = 1 - tau;
  switch (fn) {
    case AttentionFunction::naf:
    case AttentionFunction::relu_norm: {
      const Real s = abs_sum(z);
      if (s < kDegenerateAttentionSum) {
        g_degenerate_events.fetch_add(1, std::memory_order_relaxed);
        for (std::size_t j = 0; j < n; ++j) alpha[j] = keep * Real(0) + tau * beta[j];
        return;
      }
      for (std::size_t j = 0; j < n; ++j) {
        const Real num = fn == AttentionFunction::naf ? z[j] : std::max(z[j], Real(0));
        alpha[j] = keep * (num / s) + tau * beta[j];
      }
      return;
    }
    case AttentionFunction::softmax: {
      Real mx = z.empty() ? 0 : z[0];
      for (Real v : z) mx = std::max(mx, v);
      Real s = 0;
      for (Real v : z) s += std::exp(v - mx);
      for (std::size_t j = 0; j < n; ++j) alpha[j] = keep * (std::exp(z[j] - mx) / s) + tau * beta[j];
      return;
    }
    case AttentionFunction::sigmoid:
      for (std::size_t j = 0; j < n; ++j) alpha[j] = keep * (1 / (1 + std::exp(-z[j]))) + tau * beta[j];
      return;
  }
}

void normalize_attention_vjp(std::span<const Real> z, Real tau, AttentionFunction fn, std::span<const Real> dalpha,
                             std::span<Real> dz) {
  const std::size_t n = z.size();
  if (dalpha.size() != n || dz.size() != n) throw ShapeError("normalize_attention_vjp: row lengths differ");
  const Real keep = 1 - tau;
  std::fill(dz.begin(), dz.end(), Real(0));
  if (keep == 0) return;
  if (uses_abs_denominator(fn)) {
    const Real s = abs_sum(z);
    if (s < kDegenerateAttentionSum) return;
    // u_j = g(z_j) / s  with g = identity (naf) or max(., 0) (relu_norm)
    Real gu = 0;  // sum_j dalpha_j * g(z_j)
    for (std::size_t j = 0; j < n; ++j)
      gu += dalpha[j] * (fn == AttentionFunction::naf ? z[j] : std::max(z[j], Real(0)));
    for (std::size_t p = 0; p < n; ++p) {
      const Real direct = fn == AttentionFunction::naf ? dalpha[p] : (z[p] > 0 ? dalpha[p] : Real(0));
      dz[p] = keep * (direct / s - sign(z[p]) * gu / (s * s));
    }
    return;
  }
  if (fn == AttentionFunction::softmax) {
    Real mx = z[0];
    for (Real v : z) mx = std::max(mx, v);
    Real s = 0;
    for (Real v : z) s += std::exp(v - mx);
    std::vector<Real> p(n);
    Real dot = 0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(z[j] - mx) / s;
      dot += dalpha[j] * p[j];
    }
    for (std::size_t j = 0; j < n; ++j) dz[j] = keep * p[j] * (dalpha[j] - dot);
    return;
  }
  for (std::size_t j = 0; j < n; ++j) {
    const Real sg = 1 / (1 + std::exp(-z[j]));
    dz[j] = keep * dalpha[j] * sg * (1 - sg);
  }
}

namespace {
void check_rows(const Tensor& z, const Tensor& beta) {
  if (beta.rank() != 2) throw ShapeError("beta must be [m, cols], got " + shape_str(beta.shape()));
  if (z.size() % beta.size() != 0 || z.dim(0) * beta.size() != z.size())
    throw ShapeError("attention logits " + shape_str(z.shape()) + " do not match beta " + shape_str(beta.shape()));
}
}  // namespace

Tensor normalize_attention_rows(const Tensor& z, Real tau, const Tensor& beta, AttentionFunction fn) {
  check_rows(z, beta);
  const std::size_t cols = beta.dim(1), rows_per_sample = beta.dim(0);
  const std::size_t rows = z.size() / cols;
  Tensor alpha(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t br = r % rows_per_sample;
    normalize_attention(z.data().subspan(r * cols, cols), tau, beta.data().subspan(br * cols, cols), fn,
                        alpha.data().subspan(r * cols, cols));
  }
  return alpha;
}

Tensor normalize_attention_rows_backward(const Tensor& dalpha, const Tensor& z, Real tau, const Tensor& beta,
                                         AttentionFunction fn) {
  check_rows(z, beta);
  if (dalpha.shape() != z.shape()) throw ShapeError("attention backward: gradient shape mismatch");
  const std::size_t cols = beta.dim(1);
  const std::size_t rows = z.size() / cols;
  Tensor dz(z.shape());
  for (std::size_t r = 0; r < rows; ++r)
    normalize_attention_vjp(z.data().subspan(r * cols, cols), tau, fn, dalpha.data().subspan(r * cols, cols),
                            dz.data().subspan(r * cols, cols));
  return dz;
}

std::size_t degenerate_attention_events() { return g_degenerate_events.load(std::memory_order_relaxed); }

Real temperature_at(const TemperatureSchedule& schedule, std::size_t step) {
  if (schedule.anneal_steps == 0) return 0;
  if (step >= schedule.anneal_steps) return 0;
  return std::max(Real(0), 1 - Real(step) / Real(schedule.anneal_steps));
}

}  // namespace kw
