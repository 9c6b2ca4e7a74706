#include "kw/kw_layer.hpp"

#include <algorithm>
#include <cmath>

#include "kw/reference.hpp"

namespace kw {

namespace {
using Index = std::ptrdiff_t;

struct AssemblyShape {
  std::size_t batch, m, cols, n, cell_volume;
};

AssemblyShape assembly_shape(const Tensor& alpha, const Tensor& cells, const PartitionMap& partition) {
  if (cells.rank() != 5) throw ShapeError("warehouse cells must be [n, f, c, kh, kw], got " + shape_str(cells.shape()));
  const Shape cell_shape{cells.dim(1), cells.dim(2), cells.dim(3), cells.dim(4)};
  if (cell_shape != partition.cell.shape())
    throw ShapeError("warehouse cell " + shape_str(cell_shape) + " does not match partition cell " +
                     partition.cell.str() + " of layer '" + partition.layer_id + "'");
  if (alpha.rank() < 2) throw ShapeError("attention weights must be batched, got " + shape_str(alpha.shape()));
  AssemblyShape s{alpha.dim(0), partition.m(), 0, cells.dim(0), partition.cell.volume()};
  if (alpha.size() % (s.batch * s.m) != 0)
    throw ShapeError("attention weights " + shape_str(alpha.shape()) + " do not have " + std::to_string(s.m) +
                     " rows per sample");
  s.cols = alpha.size() / (s.batch * s.m);
  if (s.cols != s.n && s.cols != s.n + 1)
    throw ShapeError("attention rows have " + std::to_string(s.cols) + " columns for a warehouse of " +
                     std::to_string(s.n) + " cells");
  return s;
}

// Visits the kernel coordinates covered by one slot in cell-local row-major order.
template <class Fn>
void for_each_in_slot(const PartitionMap& p, const CellSlot& slot, Fn&& fn) {
  const auto& K = p.kernel;
  const auto& C = p.cell;
  std::size_t local = 0;
  for (std::size_t a = 0; a < C.f; ++a)
    for (std::size_t b = 0; b < C.c; ++b)
      for (std::size_t u = 0; u < C.kh; ++u) {
        const std::size_t base = (((slot.offset.f + a) * K.c + slot.offset.c + b) * K.kh + slot.offset.kh + u) * K.kw +
                                 slot.offset.kw;
        for (std::size_t v = 0; v < C.kw; ++v) fn(local++, base + v);
      }
}
}  // namespace

Warehouse Warehouse::from_plan(const GroupPlan& group) {
  Warehouse w;
  w.group = group.name;
  w.cell = group.cell;
  w.n = group.n;
  w.zero_cell_active = group.has_zero_cell;
  for (const auto& p : group.partitions) w.shared_by.push_back(p.layer_id);
  w.cells = Tensor({group.n, group.cell.f, group.cell.c, group.cell.kh, group.cell.kw});
  return w;
}

AttentionModuleParams AttentionModuleParams::zeros(std::string layer_id, std::size_t in_channels, std::size_t logits,
                                                   std::size_t min_hidden) {
  const std::size_t hidden = attention_hidden_width(in_channels, min_hidden);
  return {std::move(layer_id), Tensor({hidden, in_channels}), Tensor({hidden}), Tensor({logits, hidden}),
          Tensor({logits})};
}

KWConvLayer make_kw_layer(const LayerSpec& spec, const GroupPlan& group, std::shared_ptr<Warehouse> warehouse,
                          const BetaTable& group_beta, AttentionFunction fn, std::size_t min_hidden) {
  if (!warehouse || warehouse->n != group.n || !(warehouse->cell == group.cell))
    throw PlanningError("warehouse does not match plan of group '" + group.name + "'");
  if (group_beta.rows() != group.m_t || group_beta.cols() != group.n_cols())
    throw PlanningError("beta table does not match plan of group '" + group.name + "'");
  KWConvLayer layer;
  layer.spec = spec;
  layer.partition = group.partition(spec.id);
  layer.warehouse = std::move(warehouse);
  layer.function = fn;
  layer.use_temperature = group_beta.spec().strategy != BetaStrategy::none;
  const std::size_t cols = group.n_cols(), first = group.slot_offset(spec.id);
  layer.beta = Tensor({layer.m(), cols});
  for (std::size_t i = 0; i < layer.m(); ++i)
    for (std::size_t j = 0; j < cols; ++j) layer.beta.at(i, j) = group_beta.at(first + i, j);
  layer.attention = AttentionModuleParams::zeros(spec.id, spec.input_channels(), layer.m() * cols, min_hidden);
  return layer;
}

Tensor attention_logits(const Tensor& x, const KWConvLayer& layer) {
  if (x.rank() != 4 || x.dim(1) != layer.spec.input_channels())
    throw ShapeError("layer '" + layer.spec.id + "' expects " + std::to_string(layer.spec.input_channels()) +
                     " input channels, got input " + shape_str(x.shape()));
  const auto& a = layer.attention;
  Tensor hidden = ops::relu(ops::dense_affine(ops::global_avg_pool(x), a.fc1_weight, a.fc1_bias));
  Tensor z = ops::dense_affine(hidden, a.fc2_weight, a.fc2_bias);
  return z.reshaped({x.dim(0), layer.m(), layer.n_cols()});
}

Tensor kw_attention(const Tensor& x, const KWConvLayer& layer, Real tau) {
  return normalize_attention_rows(attention_logits(x, layer), layer.effective_tau(tau), layer.beta, layer.function);
}

Tensor assemble_kernels(const Tensor& alpha, const Tensor& cells, const PartitionMap& partition) {
  const AssemblyShape s = assembly_shape(alpha, cells, partition);
  const KernelDims& K = partition.kernel;
  Tensor out({s.batch, K.f, K.c, K.kh, K.kw});
  const std::size_t kernel_volume = K.volume();
#pragma omp parallel
  {
    std::vector<Real> block(s.cell_volume);
#pragma omp for schedule(static)
    for (Index job = 0; job < Index(s.batch * s.m); ++job) {
      const std::size_t sample = std::size_t(job) / s.m, i = std::size_t(job) % s.m;
      const Real* arow = alpha.ptr() + std::size_t(job) * s.cols;
      std::fill(block.begin(), block.end(), Real(0));
      for (std::size_t j = 0; j < s.n; ++j) {
        const Real a = arow[j];
        if (a == 0) continue;
        const Real* cell = cells.ptr() + j * s.cell_volume;
        for (std::size_t q = 0; q < s.cell_volume; ++q) block[q] += a * cell[q];
      }
      Real* kernel = out.ptr() + sample * kernel_volume;
      for_each_in_slot(partition, partition.slots[i], [&](std::size_t local, std::size_t dst) { kernel[dst] = block[local]; });
    }
  }
  return out;
}

Tensor assemble_kernel(const Tensor& alpha, const Warehouse& warehouse, const PartitionMap& partition) {
  if (alpha.rank() != 2 || alpha.dim(0) != partition.m())
    throw ShapeError("assemble_kernel expects alpha [m, n_cols] with m = " + std::to_string(partition.m()) + ", got " +
                     shape_str(alpha.shape()));
  if (alpha.dim(1) != warehouse.n_cols())
    throw ShapeError("assemble_kernel: alpha has " + std::to_string(alpha.dim(1)) + " columns, warehouse needs " +
                     std::to_string(warehouse.n_cols()));
  Tensor batched = assemble_kernels(alpha.reshaped({1, alpha.dim(0), alpha.dim(1)}), warehouse.cells, partition);
  return batched.reshaped(partition.kernel.shape());
}

AssembleGrads assemble_kernels_backward(const Tensor& dkernels, const Tensor& alpha, const Tensor& cells,
                                        const PartitionMap& partition, bool need_dalpha, bool need_dcells) {
  const AssemblyShape s = assembly_shape(alpha, cells, partition);
  const KernelDims& K = partition.kernel;
  if (dkernels.shape() != Shape{s.batch, K.f, K.c, K.kh, K.kw})
    throw ShapeError("assembly backward: gradient " + shape_str(dkernels.shape()) + " does not match kernels");
  const std::size_t kernel_volume = K.volume();

  // Gradient of every slot block, [N * m, cell_volume].
  std::vector<Real> blocks(s.batch * s.m * s.cell_volume);
#pragma omp parallel for schedule(static)
  for (Index job = 0; job < Index(s.batch * s.m); ++job) {
    const std::size_t sample = std::size_t(job) / s.m, i = std::size_t(job) % s.m;
    const Real* dk = dkernels.ptr() + sample * kernel_volume;
    Real* block = blocks.data() + std::size_t(job) * s.cell_volume;
    for_each_in_slot(partition, partition.slots[i], [&](std::size_t local, std::size_t src) { block[local] = dk[src]; });
  }

  AssembleGrads g;
  if (need_dalpha) {
    g.dalpha = Tensor(alpha.shape());
#pragma omp parallel for schedule(static)
    for (Index job = 0; job < Index(s.batch * s.m); ++job) {
      const Real* block = blocks.data() + std::size_t(job) * s.cell_volume;
      Real* drow = g.dalpha.ptr() + std::size_t(job) * s.cols;
      for (std::size_t j = 0; j < s.n; ++j) {
        const Real* cell = cells.ptr() + j * s.cell_volume;
        Real acc = 0;
        for (std::size_t q = 0; q < s.cell_volume; ++q) acc += block[q] * cell[q];
        drow[j] = acc;
      }
    }
  }
  if (need_dcells) {
    g.dcells = Tensor(cells.shape());
#pragma omp parallel for schedule(static)
    for (Index jj = 0; jj < Index(s.n); ++jj) {
      const std::size_t j = std::size_t(jj);
      Real* dcell = g.dcells.ptr() + j * s.cell_volume;
      for (std::size_t job = 0; job < s.batch * s.m; ++job) {
        const Real a = alpha[job * s.cols + j];
        if (a == 0) continue;
        const Real* block = blocks.data() + job * s.cell_volume;
        for (std::size_t q = 0; q < s.cell_volume; ++q) dcell[q] += a * block[q];
      }
    }
  }
  return g;
}

Tensor kw_forward(const Tensor& x, const KWConvLayer& layer, Real tau) {
  const Tensor alpha = kw_attention(x, layer, tau);
  const Tensor kernels = assemble_kernels(alpha, layer.warehouse->cells, layer.partition);
  return ops::conv2d_per_sample(x, kernels, layer.conv_params());
}

Tensor reference_dynamic_conv(const Tensor& x, const Tensor& kernels, const AttentionModuleParams& attention,
                              Real tau, std::span<const Real> beta, const ops::ConvParams& p, AttentionFunction fn) {
  if (kernels.rank() != 5) throw ShapeError("reference dynamic conv: kernels must be [n, f, c, kh, kw]");
  const std::size_t n = kernels.dim(0);
  const std::size_t cols = beta.size();
  if (cols != n && cols != n + 1) throw ShapeError("reference dynamic conv: beta length must be n or n + 1");
  if (attention.logits() != cols) throw ShapeError("reference dynamic conv: attention emits the wrong logit count");
  const Shape kshape{kernels.dim(1), kernels.dim(2), kernels.dim(3), kernels.dim(4)};
  const std::size_t kvol = shape_volume(kshape);

  Tensor hidden = reference::dense_affine(reference::global_avg_pool(x), attention.fc1_weight, attention.fc1_bias);
  for (auto& v : hidden.data()) v = std::max(v, Real(0));
  const Tensor z = reference::dense_affine(hidden, attention.fc2_weight, attention.fc2_bias);

  const std::size_t batch = x.dim(0), sample_volume = x.size() / batch;
  Tensor y;
  std::vector<Real> alpha(cols);
  for (std::size_t s = 0; s < batch; ++s) {
    const Real* zs = z.ptr() + s * cols;
    if (fn == AttentionFunction::naf) {
      Real denom = 0;
      for (std::size_t j = 0; j < cols; ++j) denom += std::abs(zs[j]);
      for (std::size_t j = 0; j < cols; ++j)
        alpha[j] = (1 - tau) * (denom < 1e-12 ? Real(0) : zs[j] / denom) + tau * beta[j];
    } else {
      normalize_attention({zs, cols}, tau, beta, fn, alpha);
    }
    Tensor w(kshape);
    for (std::size_t q = 0; q < kvol; ++q) {
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += alpha[j] * kernels[j * kvol + q];
      w[q] = acc;
    }
    Tensor xs({1, x.dim(1), x.dim(2), x.dim(3)},
              std::vector<Real>(x.ptr() + s * sample_volume, x.ptr() + (s + 1) * sample_volume));
    Tensor ys = reference::conv2d(xs, w, p);
    if (y.empty()) y = Tensor({batch, ys.dim(1), ys.dim(2), ys.dim(3)});
    std::copy(ys.data().begin(), ys.data().end(), y.ptr() + s * ys.size());
  }
  return y;
}

KWTrace kw_forward(ad::Tape& tape, ad::Var x, const KWConvLayer& layer, const LayerVars& vars, Real tau) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 4 || xv.dim(1) != layer.spec.input_channels())
    throw ShapeError("layer '" + layer.spec.id + "' expects " + std::to_string(layer.spec.input_channels()) +
                     " input channels, got input " + shape_str(xv.shape()));
  ad::Var pooled = ad::global_avg_pool(tape, x);
  ad::Var hidden = ad::relu(tape, ad::dense_affine(tape, pooled, vars.fc1_weight, vars.fc1_bias));
  ad::Var z = ad::dense_affine(tape, hidden, vars.fc2_weight, vars.fc2_bias);

  const Real t = layer.effective_tau(tau);
  const AttentionFunction fn = layer.function;
  const Tensor beta = layer.beta;
  ad::Var alpha = tape.record(normalize_attention_rows(tape.value(z), t, beta, fn), {z},
                              [t, fn, beta](ad::BackwardContext& c) {
                                c.accumulate(0, normalize_attention_rows_backward(c.grad_output(), c.input(0), t, beta, fn));
                              });

  const PartitionMap& partition = layer.partition;
  ad::Var kernels = tape.record(assemble_kernels(tape.value(alpha), tape.value(vars.cells), partition),
                                {alpha, vars.cells}, [partition](ad::BackwardContext& c) {
                                  auto g = assemble_kernels_backward(c.grad_output(), c.input(0), c.input(1), partition,
                                                                     c.needs_grad(0), c.needs_grad(1));
                                  if (c.needs_grad(0)) c.accumulate(0, g.dalpha);
                                  if (c.needs_grad(1)) c.accumulate(1, g.dcells);
                                });
  return {ad::conv2d_per_sample(tape, x, kernels, layer.conv_params()), alpha};
}

}  // namespace kw
