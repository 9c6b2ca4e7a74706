#include "kw/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace kw::ad {

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}
const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::grad_output() const { return tape_.nodes_[node_].grad; }

bool BackwardContext::needs_grad(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].requires_grad;
}

void BackwardContext::accumulate(std::size_t i, const Tensor& g) {
  auto& target = tape_.nodes_[tape_.nodes_[node_].inputs.at(i)];
  if (!target.requires_grad) return;
  if (g.shape() != target.value.shape())
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                     shape_str(target.value.shape()));
  if (target.grad.empty())
    target.grad = g;
  else
    axpy(1, g, target.grad);
}

Var Tape::parameter(std::string name, Tensor value) {
  if (names_.count(name)) throw std::invalid_argument("duplicate parameter name on tape: " + name);
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.is_parameter = true;
  node.name = name;
  names_[std::move(name)] = nodes_.size();
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (Var v : inputs) {
    if (v.id >= nodes_.size()) throw std::invalid_argument("operation input is not on this tape");
    node.inputs.push_back(v.id);
    node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

std::vector<Var> Tape::parameters() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].is_parameter) out.push_back(Var{i});
  return out;
}

void Tape::backward(Var loss) {
  if (loss.id >= nodes_.size()) throw std::invalid_argument("loss is not on this tape");
  if (nodes_[loss.id].value.size() != 1)
    throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  for (auto& node : nodes_) node.grad = Tensor();
  replay_.clear();
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    BackwardContext ctx(*this, id);
    node.backward(ctx);
    replay_.push_back(id);
  }
}

GradientMap backprop_gradients(Tape& tape, Var loss) {
  tape.backward(loss);
  GradientMap grads;
  for (Var p : tape.parameters()) {
    const Tensor& g = tape.grad(p);
    grads[tape.name(p)] = g.empty() ? Tensor::zeros_like(tape.value(p)) : g;
  }
  return grads;
}

Var sum(Tape& t, Var x) {
  Tensor out({1}, kw::sum(t.value(x)));
  return t.record(std::move(out), {x}, [](BackwardContext& c) {
    c.accumulate(0, Tensor(c.input(0).shape(), c.grad_output()[0]));
  });
}

Var weighted_sum(Tape& t, Var x, const Tensor& weights) {
  const Tensor& xv = t.value(x);
  if (xv.shape() != weights.shape()) throw ShapeError("weighted_sum: weights shape mismatch");
  Real s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  return t.record(Tensor({1}, s), {x}, [weights](BackwardContext& c) {
    c.accumulate(0, c.grad_output()[0] * weights);
  });
}

Var relu(Tape& t, Var x) {
  return t.record(ops::relu(t.value(x)), {x}, [](BackwardContext& c) {
    c.accumulate(0, ops::relu_backward(c.grad_output(), c.input(0)));
  });
}

Var global_avg_pool(Tape& t, Var x) {
  return t.record(ops::global_avg_pool(t.value(x)), {x}, [](BackwardContext& c) {
    c.accumulate(0, ops::global_avg_pool_backward(c.grad_output(), c.input(0).shape()));
  });
}

Var dense_affine(Tape& t, Var v, Var m, Var bias) {
  return t.record(ops::dense_affine(t.value(v), t.value(m), t.value(bias)), {v, m, bias}, [](BackwardContext& c) {
    auto g = ops::dense_affine_backward(c.grad_output(), c.input(0), c.input(1));
    c.accumulate(0, g.dv);
    c.accumulate(1, g.dm);
    c.accumulate(2, g.dbias);
  });
}

namespace {
Var conv_record(Tape& t, Var x, Var w, const ops::ConvParams& p, bool per_sample) {
  Tensor y = per_sample ? ops::conv2d_per_sample(t.value(x), t.value(w), p) : ops::conv2d(t.value(x), t.value(w), p);
  return t.record(std::move(y), {x, w}, [p, per_sample](BackwardContext& c) {
    auto g = ops::conv2d_backward(c.grad_output(), c.input(0), c.input(1), p, per_sample, c.needs_grad(0),
                                  c.needs_grad(1));
    if (c.needs_grad(0)) c.accumulate(0, g.dx);
    if (c.needs_grad(1)) c.accumulate(1, g.dw);
  });
}
}  // namespace

Var conv2d(Tape& t, Var x, Var w, const ops::ConvParams& p) { return conv_record(t, x, w, p, false); }

Var conv2d_per_sample(Tape& t, Var x, Var w, const ops::ConvParams& p) { return conv_record(t, x, w, p, true); }

Var softmax_cross_entropy(Tape& t, Var logits, std::vector<int> labels) {
  Real loss = ops::softmax_cross_entropy(t.value(logits), labels);
  return t.record(Tensor({1}, loss), {logits}, [labels = std::move(labels)](BackwardContext& c) {
    c.accumulate(0, c.grad_output()[0] * ops::softmax_cross_entropy_backward(c.input(0), labels));
  });
}

FiniteDiffResult finite_diff_check(const std::function<Real(const ParamMap&)>& f, const ParamMap& theta,
                                   const ParamMap& analytic, const FiniteDiffOptions& options) {
  if (!(options.eps > 0)) throw std::invalid_argument("finite difference step must be positive");
  if (options.order != 2 && options.order != 4) throw std::invalid_argument("finite difference order must be 2 or 4");
  FiniteDiffResult result;
  ParamMap probe = theta;
  std::size_t param_index = 0;
  for (const auto& [name, value] : theta) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw std::invalid_argument("no analytic gradient for parameter " + name);
    if (it->second.shape() != value.shape()) throw ShapeError("analytic gradient shape mismatch for " + name);

    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords > 0 && options.max_coords < coords.size()) {
      std::mt19937_64 rng(options.seed + 0x9E3779B97F4A7C15ull * (param_index + 1));
      for (std::size_t i = 0; i < options.max_coords; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
        std::swap(coords[i], coords[pick(rng)]);
      }
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }

    Real worst = 0;
    Tensor& slot = probe.at(name);
    for (std::size_t k : coords) {
      const Real saved = slot[k];
      auto at = [&](Real shift) {
        slot[k] = saved + shift;
        const Real v = f(probe);
        slot[k] = saved;
        if (!std::isfinite(v)) {
          std::ostringstream os;
          os << "non-finite function value while perturbing " << name << "[" << k << "]";
          throw std::runtime_error(os.str());
        }
        return v;
      };
      const Real h = options.eps;
      const Real numeric = options.order == 2
                               ? (at(h) - at(-h)) / (2 * h)
                               : (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      const Real a = it->second[k];
      const Real denom = std::max({std::abs(a), std::abs(numeric), Real(1e-8)});
      const Real err = std::abs(a - numeric) / denom;
      ++result.checked;
      worst = std::max(worst, err);
      if (err > result.max_rel_error || result.checked == 1) {
        result.max_rel_error = err;
        result.worst_param = name;
        result.worst_index = k;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    result.per_param[name] = worst;
    ++param_index;
  }
  return result;
}

}  // namespace kw::ad
