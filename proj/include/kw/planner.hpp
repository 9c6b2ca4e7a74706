#pragma once

// Warehouse planning: cell dimensions, kernel partitions, warehouse sizes and
// the binary attention-initialization tables.
//
// For a warehouse group of l layers whose kernels are partitioned into m_1..m_l
// cells, m_t = sum m_i mixture slots share n = round(b * m_t) learnable cells.
// When n < m_t the group also carries a permanently-zero cell e_z that only
// takes part in attention normalization.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kw/arch.hpp"
#include "kw/rational.hpp"
#include "json.hpp"

namespace kw {

class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CellSlot {
  std::size_t index = 0;
  Dims4 offset;  // (f0, c0, kh0, kw0)
};

struct PartitionMap {
  std::string layer_id;
  KernelDims kernel;
  CellDims cell;
  std::vector<CellSlot> slots;  // lexicographic in (f0, c0, kh0, kw0)

  std::size_t m() const { return slots.size(); }
};

enum class BetaStrategy { one_to_one, all_to_one, k_to_one, none };

struct BetaSpec {
  BetaStrategy strategy = BetaStrategy::one_to_one;
  std::size_t k = 1;  // k_to_one only
};

std::string beta_spec_str(const BetaSpec& spec);
BetaSpec parse_beta_spec(std::string_view text);  // "one_to_one", "all_to_one", "none", "k_to_one:<k>"

// Binary table with one row per mixture slot (group order) and one column per
// cell, plus a trailing e_z column when the group has a zero cell.
class BetaTable {
 public:
  BetaTable() = default;
  BetaTable(BetaSpec spec, std::size_t rows, std::size_t cols) : spec_(spec), rows_(rows), cols_(cols), bits_(rows * cols) {}

  const BetaSpec& spec() const { return spec_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c]; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }
  std::size_t row_sum(std::size_t r) const;
  std::size_t col_sum(std::size_t c) const;

 private:
  BetaSpec spec_;
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct GroupPlan {
  std::string name;
  CellPolicy policy = CellPolicy::gcd;
  CellDims cell;
  std::size_t n = 0;
  std::size_t m_t = 0;
  bool has_zero_cell = false;
  Rational b;
  std::vector<PartitionMap> partitions;  // member layers in document order

  std::size_t n_cols() const { return n + (has_zero_cell ? 1 : 0); }
  const PartitionMap& partition(std::string_view layer_id) const;
  // Index of the layer's first slot in the group-global slot order.
  std::size_t slot_offset(std::string_view layer_id) const;
};

struct WarehousePlan {
  Rational b;
  std::vector<GroupPlan> groups;

  const GroupPlan& group(std::string_view name) const;
  const GroupPlan& group_of_layer(std::string_view layer_id) const;
  friend bool operator==(const WarehousePlan& a, const WarehousePlan& b);
};

CellDims derive_cell_dims(std::span<const LayerSpec> group_layers, CellPolicy policy,
                          CellSpatial spatial = CellSpatial::gcd);

PartitionMap partition_kernel(const KernelDims& kernel, const CellDims& cell, std::string layer_id = {});

// policy_override, when set, replaces the policy of every non-explicit group.
WarehousePlan plan_warehouses(const ArchSpec& arch, Rational b, std::optional<CellPolicy> policy_override = {});

BetaTable assign_beta(const GroupPlan& group, const BetaSpec& spec);
std::vector<BetaTable> assign_beta(const WarehousePlan& plan, const BetaSpec& spec);

std::size_t attention_hidden_width(std::size_t in_channels, std::size_t min_hidden = 1);

struct GroupParamCounts {
  std::string name;
  std::uint64_t warehouse = 0;  // n * |cell|
  std::uint64_t static_conv = 0;  // sum of member kernel volumes
  std::uint64_t attention = 0;  // attention modules of the member layers
  double ratio = 0;  // warehouse / static_conv
};

struct ParamReport {
  std::vector<GroupParamCounts> groups;
  std::uint64_t warehouse = 0, static_conv = 0, attention = 0;
  double ratio = 0;
};

ParamReport count_params(const WarehousePlan& plan, const ArchSpec& arch);

// Plan report document: per group cell dims, m per layer, m_t, n, zero-cell
// flag and parameter counts.
nlohmann::ordered_json plan_report(const WarehousePlan& plan, const ArchSpec& arch);

}  // namespace kw
