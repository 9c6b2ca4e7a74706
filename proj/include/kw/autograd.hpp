#pragma once

// Tape-based reverse-mode differentiation over whole-tensor operations.
//
// Nodes are appended in evaluation order, so reverse index order is a valid
// reverse topological order. A tape is single-writer and is meant to live for
// one training step.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kw/ops.hpp"
#include "kw/tensor.hpp"

namespace kw::ad {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

class Tape;

class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  const Tensor& input(std::size_t i) const;
  const Tensor& output() const;
  const Tensor& grad_output() const;
  bool needs_grad(std::size_t i) const;
  // Adds g into the gradient accumulator of input i (no-op if untracked).
  void accumulate(std::size_t i, const Tensor& g);

 private:
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  // Tracked leaf; names must be unique within a tape.
  Var parameter(std::string name, Tensor value);
  Var constant(Tensor value);
  // Output of an operation. Tracked iff any input is tracked.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Empty tensor when the node received no gradient.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<Var> parameters() const;

  // Seeds d(loss)/d(loss) = 1 and replays recorded operations in reverse.
  void backward(Var loss);

  // Node ids whose backward function ran during the last backward().
  const std::vector<std::size_t>& last_replay() const { return replay_; }

 private:
  friend class BackwardContext;
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
    std::string name;
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> names_;
  std::vector<std::size_t> replay_;
};

using GradientMap = std::map<std::string, Tensor>;

// d(loss)/d(p) for every parameter leaf p on the tape; zero for parameters the
// loss does not depend on. Throws std::invalid_argument for a non-scalar loss.
GradientMap backprop_gradients(Tape& tape, Var loss);

// Recorded operations.
Var sum(Tape& t, Var x);
// sum(x * weights) with constant weights; a scalar probe of x.
Var weighted_sum(Tape& t, Var x, const Tensor& weights);
Var relu(Tape& t, Var x);
Var global_avg_pool(Tape& t, Var x);
Var dense_affine(Tape& t, Var v, Var m, Var bias);
Var conv2d(Tape& t, Var x, Var w, const ops::ConvParams& p = {});
Var conv2d_per_sample(Tape& t, Var x, Var w, const ops::ConvParams& p = {});
Var softmax_cross_entropy(Tape& t, Var logits, std::vector<int> labels);

// Finite-difference oracle for analytic gradients.
using ParamMap = std::map<std::string, Tensor>;

struct FiniteDiffOptions {
  Real eps = 1e-5;
  std::size_t max_coords = 0;  // per parameter; 0 checks every coordinate
  std::uint64_t seed = 0;
  // 2: (f(t+e) - f(t-e)) / 2e. 4: the five-point stencil, O(e^4) truncation.
  int order = 2;
};

struct FiniteDiffResult {
  Real max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  Real analytic = 0;
  Real numeric = 0;
  std::size_t checked = 0;
  std::map<std::string, Real> per_param;
};

// max over sampled coordinates of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-8).
FiniteDiffResult finite_diff_check(const std::function<Real(const ParamMap&)>& f, const ParamMap& theta,
                                   const ParamMap& analytic, const FiniteDiffOptions& options = {});

}  // namespace kw::ad
