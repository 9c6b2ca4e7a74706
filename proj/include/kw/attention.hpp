#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "kw/tensor.hpp"

namespace kw {

// naf: z_j / sum_p |z_p|, which keeps the sign of each logit.
// relu_norm: max(z_j, 0) / sum_p |z_p|.
enum class AttentionFunction { naf, softmax, sigmoid, relu_norm };

std::string_view to_string(AttentionFunction fn);
AttentionFunction parse_attention_function(std::string_view s);

// Below this, sum |z| counts as zero and the normalized term is dropped.
inline constexpr Real kDegenerateAttentionSum = 1e-12;

// alpha_j = (1 - tau) * normalize(z)_j + tau * beta_j over one row of logits
// (the zero-cell logit included).
void normalize_attention(std::span<const Real> z, Real tau, std::span<const Real> beta, AttentionFunction fn,
                         std::span<Real> alpha);

// dz for a given d(alpha); beta does not enter the derivative.
void normalize_attention_vjp(std::span<const Real> z, Real tau, AttentionFunction fn, std::span<const Real> dalpha,
                             std::span<Real> dz);

// z: [N, m, cols] (or [N, m * cols]); beta: [m, cols]. Row-wise normalize.
Tensor normalize_attention_rows(const Tensor& z, Real tau, const Tensor& beta, AttentionFunction fn);
Tensor normalize_attention_rows_backward(const Tensor& dalpha, const Tensor& z, Real tau, const Tensor& beta,
                                         AttentionFunction fn);

// Number of rows normalized with a degenerate denominator since start-up.
std::size_t degenerate_attention_events();

// tau(step) = max(0, 1 - step / anneal_steps); anneal_steps = 0 means no
// annealing phase (tau = 0 throughout).
struct TemperatureSchedule {
  std::size_t anneal_steps = 0;
};

Real temperature_at(const TemperatureSchedule& schedule, std::size_t step);

}  // namespace kw
