#pragma once

// A sequential KernelWarehouse classifier: the architecture's conv layers in document
// order, each followed by ReLU, then global average pooling and an affine
// classifier.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kw/arch.hpp"
#include "kw/attention.hpp"
#include "kw/autograd.hpp"
#include "kw/kw_layer.hpp"
#include "kw/planner.hpp"

namespace kw {

struct NetOptions {
  Rational b = Rational::make(1, 1);
  std::optional<CellPolicy> policy_override;
  AttentionFunction function = AttentionFunction::naf;
  BetaSpec beta;
  std::size_t num_classes = 10;
  bool fine_tune = false;  // disables the tau blend in every layer
  // Fan-in used for the cell initialization scale: the cell's own c*kh*kw, or
  // the largest c*kh*kw among the kernels assembled from the warehouse.
  enum class CellFanIn { cell, kernel } cell_fan_in = CellFanIn::cell;
};

struct NamedTensor {
  std::string name;
  Tensor* value;
};

class KWNet {
 public:
  KWNet(ArchSpec arch, NetOptions options);

  KWNet(const KWNet&) = delete;
  KWNet& operator=(const KWNet&) = delete;
  KWNet(KWNet&&) = default;
  KWNet& operator=(KWNet&&) = default;

  // Cells: normal with std sqrt(2 / (c * kh * kw)) of the cell. Affine
  // weights: uniform(+-1/sqrt(fan_in)). Biases: zero.
  void initialize(std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  const NetOptions& options() const { return options_; }
  const WarehousePlan& plan() const { return plan_; }
  const std::vector<BetaTable>& beta_tables() const { return beta_; }
  const std::vector<KWConvLayer>& layers() const { return layers_; }
  std::vector<KWConvLayer>& layers() { return layers_; }
  const std::vector<std::shared_ptr<Warehouse>>& warehouses() const { return warehouses_; }
  std::size_t input_channels() const { return layers_.front().spec.input_channels(); }

  // Every trainable tensor, in a fixed order. Beta tables are metadata and
  // are not listed.
  std::vector<NamedTensor> parameters();
  std::map<std::string, Tensor> parameter_values() const;
  void set_parameter_values(const std::map<std::string, Tensor>& values);

  struct Trace {
    Tensor logits;
    std::vector<Tensor> alphas;       // per layer, [N, m, n_cols]
    std::vector<Tensor> activations;  // per layer, post-ReLU
  };
  Trace run(const Tensor& x, Real tau) const;
  Tensor logits(const Tensor& x, Real tau) const { return run(x, tau).logits; }

  struct TapeTrace {
    ad::Var logits;
    std::vector<ad::Var> alphas;
    std::vector<ad::Var> activations;
  };
  // Registers every parameter on the tape under its parameters() name.
  TapeTrace forward(ad::Tape& tape, const Tensor& x, Real tau) const;

 private:
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  ArchSpec arch_;
  NetOptions options_;
  WarehousePlan plan_;
  std::vector<BetaTable> beta_;
  std::vector<std::shared_ptr<Warehouse>> warehouses_;
  std::vector<KWConvLayer> layers_;
  Tensor classifier_weight_;  // [classes, channels]
  Tensor classifier_bias_;
};

std::string warehouse_param_name(const std::string& group);
std::string attention_param_name(const std::string& layer, const char* field);

}  // namespace kw
