#pragma once

// Runtime KernelWarehouse convolution.
//
// Per input sample the layer computes attention logits from the pooled input,
// normalizes them into m rows of mixture weights, assembles every kernel slot
// as a weighted sum of the shared warehouse cells, and convolves the sample
// with its own assembled kernel.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kw/arch.hpp"
#include "kw/attention.hpp"
#include "kw/autograd.hpp"
#include "kw/ops.hpp"
#include "kw/planner.hpp"
#include "kw/tensor.hpp"

namespace kw {

// n learnable cells shared by the layers of one group. The zero cell e_z is
// not stored: it only owns an attention column and never contributes to a
// kernel, so it stays zero by construction.
struct Warehouse {
  std::string group;
  CellDims cell;
  std::size_t n = 0;
  bool zero_cell_active = false;
  std::vector<std::string> shared_by;
  Tensor cells;  // [n, f, c, kh, kw]

  static Warehouse from_plan(const GroupPlan& group);
  std::size_t n_cols() const { return n + (zero_cell_active ? 1 : 0); }
};

struct AttentionModuleParams {
  std::string layer_id;
  Tensor fc1_weight;  // [hidden, c]
  Tensor fc1_bias;    // [hidden]
  Tensor fc2_weight;  // [m * n_cols, hidden]
  Tensor fc2_bias;    // [m * n_cols]

  static AttentionModuleParams zeros(std::string layer_id, std::size_t in_channels, std::size_t logits,
                                     std::size_t min_hidden = 1);
  std::size_t hidden() const { return fc1_weight.dim(0); }
  std::size_t logits() const { return fc2_weight.dim(0); }
};

struct KWConvLayer {
  LayerSpec spec;
  PartitionMap partition;
  std::shared_ptr<Warehouse> warehouse;
  AttentionModuleParams attention;
  Tensor beta;  // [m, n_cols], this layer's rows of the group table
  AttentionFunction function = AttentionFunction::naf;
  // false disables the tau blend (fine-tuning, or no initialization strategy).
  bool use_temperature = true;

  std::size_t m() const { return partition.m(); }
  std::size_t n_cols() const { return warehouse->n_cols(); }
  Real effective_tau(Real tau) const { return use_temperature ? tau : Real(0); }
  ops::ConvParams conv_params() const { return {spec.stride, spec.pad, spec.conv_groups()}; }
};

// Attention parameters are zero; the caller initializes them.
KWConvLayer make_kw_layer(const LayerSpec& spec, const GroupPlan& group, std::shared_ptr<Warehouse> warehouse,
                          const BetaTable& group_beta, AttentionFunction fn, std::size_t min_hidden = 1);

// fc2(relu(fc1(gap(x)))) as [N, m, n_cols].
Tensor attention_logits(const Tensor& x, const KWConvLayer& layer);

// Mixture weights [N, m, n_cols] at temperature tau.
Tensor kw_attention(const Tensor& x, const KWConvLayer& layer, Real tau);

// Slot i of the kernel = sum_j alpha[i][j] * cells[j]; the e_z column is skipped.
Tensor assemble_kernel(const Tensor& alpha, const Warehouse& warehouse, const PartitionMap& partition);
// alpha [N, m, n_cols] -> kernels [N, f, c, kh, kw]
Tensor assemble_kernels(const Tensor& alpha, const Tensor& cells, const PartitionMap& partition);

struct AssembleGrads {
  Tensor dalpha;
  Tensor dcells;
};
AssembleGrads assemble_kernels_backward(const Tensor& dkernels, const Tensor& alpha, const Tensor& cells,
                                        const PartitionMap& partition, bool need_dalpha, bool need_dcells);

Tensor kw_forward(const Tensor& x, const KWConvLayer& layer, Real tau);

// Vanilla dynamic convolution: per sample, mix n whole kernels [n, f, c, kh, kw]
// with attention from `attention` and convolve. Plain loops, used as an
// equivalence target. beta has n or n + 1 entries (extra e_z column).
Tensor reference_dynamic_conv(const Tensor& x, const Tensor& kernels, const AttentionModuleParams& attention,
                              Real tau, std::span<const Real> beta, const ops::ConvParams& p,
                              AttentionFunction fn = AttentionFunction::naf);

// Tape-recorded forward.
struct LayerVars {
  ad::Var fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  ad::Var cells;  // the shared warehouse
};

struct KWTrace {
  ad::Var output;
  ad::Var alpha;  // [N, m * n_cols]
};

KWTrace kw_forward(ad::Tape& tape, ad::Var x, const KWConvLayer& layer, const LayerVars& vars, Real tau);

}  // namespace kw
