#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kw/model.hpp"

namespace kw {

struct GradcheckOptions {
  std::size_t batch = 2;
  std::size_t height = 6, width = 6;
  Real eps = 1e-5;
  // projection: a fixed random linear functional of the logits, which never
  // saturates; cross_entropy: mean cross-entropy on random labels.
  enum class Loss { projection, cross_entropy } loss = Loss::projection;
  std::size_t max_coords = 0;  // per parameter tensor; 0 checks all
  // Biases are redrawn from N(0, bias_std^2) after initialization. Zero biases
  // with a dead attention hidden layer leave every logit at exactly 0, where
  // the linear normalization is discontinuous.
  Real bias_std = 0.5;
  std::uint64_t seed = 7;
};

struct FamilyError {
  std::string family;  // e.g. "warehouse.cells", "attention.fc2.weight"
  Real max_rel_error = 0;
  std::size_t coords = 0;
  std::string worst_param;
};

struct GradcheckRun {
  Real tau = 0;
  std::vector<FamilyError> families;
  Real max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  Real analytic = 0, numeric = 0;
};

struct GradcheckReport {
  std::vector<GradcheckRun> runs;
  Real max_rel_error = 0;
  bool passed(Real tolerance) const { return max_rel_error <= tolerance; }
};

std::string parameter_family(const std::string& param_name);

// Tape gradients of a scalar loss of the logits on a small random batch against
// central differences of the plain forward pass, per parameter family.
GradcheckReport gradcheck(const ArchSpec& arch, const NetOptions& options, std::span<const Real> taus,
                          const GradcheckOptions& opt = {});

std::string format_gradcheck(const GradcheckReport& report, Real tolerance);

}  // namespace kw
