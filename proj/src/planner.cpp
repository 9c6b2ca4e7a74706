#include "kw/planner.hpp"

#include <algorithm>
#include <numeric>

namespace kw {

std::string beta_spec_str(const BetaSpec& spec) {
  switch (spec.strategy) {
    case BetaStrategy::one_to_one: return "one_to_one";
    case BetaStrategy::all_to_one: return "all_to_one";
    case BetaStrategy::none: return "none";
    case BetaStrategy::k_to_one: return "k_to_one:" + std::to_string(spec.k);
  }
  return "?";
}

BetaSpec parse_beta_spec(std::string_view text) {
  if (text == "one_to_one") return {BetaStrategy::one_to_one, 1};
  if (text == "all_to_one") return {BetaStrategy::all_to_one, 1};
  if (text == "none") return {BetaStrategy::none, 1};
  constexpr std::string_view prefix = "k_to_one:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string k(text.substr(prefix.size()));
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != k.size() || v <= 0) throw std::invalid_argument("k_to_one needs a positive k, got '" + k + "'");
    return {BetaStrategy::k_to_one, std::size_t(v)};
  }
  throw std::invalid_argument("unknown beta strategy '" + std::string(text) + "'");
}

std::size_t BetaTable::row_sum(std::size_t r) const {
  std::size_t s = 0;
  for (std::size_t c = 0; c < cols_; ++c) s += at(r, c);
  return s;
}

std::size_t BetaTable::col_sum(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t r = 0; r < rows_; ++r) s += at(r, c);
  return s;
}

const PartitionMap& GroupPlan::partition(std::string_view layer_id) const {
  for (const auto& p : partitions)
    if (p.layer_id == layer_id) return p;
  throw PlanningError("layer '" + std::string(layer_id) + "' is not in group '" + name + "'");
}

std::size_t GroupPlan::slot_offset(std::string_view layer_id) const {
  std::size_t offset = 0;
  for (const auto& p : partitions) {
    if (p.layer_id == layer_id) return offset;
    offset += p.m();
  }
  throw PlanningError("layer '" + std::string(layer_id) + "' is not in group '" + name + "'");
}

const GroupPlan& WarehousePlan::group(std::string_view name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw PlanningError("plan has no group '" + std::string(name) + "'");
}

const GroupPlan& WarehousePlan::group_of_layer(std::string_view layer_id) const {
  for (const auto& g : groups)
    for (const auto& p : g.partitions)
      if (p.layer_id == layer_id) return g;
  throw PlanningError("plan has no layer '" + std::string(layer_id) + "'");
}

bool operator==(const WarehousePlan& a, const WarehousePlan& b) {
  if (!(a.b == b.b) || a.groups.size() != b.groups.size()) return false;
  for (std::size_t i = 0; i < a.groups.size(); ++i) {
    const auto& x = a.groups[i];
    const auto& y = b.groups[i];
    if (x.name != y.name || x.policy != y.policy || !(x.cell == y.cell) || x.n != y.n || x.m_t != y.m_t ||
        x.has_zero_cell != y.has_zero_cell || !(x.b == y.b) || x.partitions.size() != y.partitions.size())
      return false;
    for (std::size_t j = 0; j < x.partitions.size(); ++j) {
      const auto& p = x.partitions[j];
      const auto& q = y.partitions[j];
      if (p.layer_id != q.layer_id || !(p.kernel == q.kernel) || !(p.cell == q.cell) || p.m() != q.m()) return false;
      for (std::size_t s = 0; s < p.m(); ++s)
        if (p.slots[s].index != q.slots[s].index || !(p.slots[s].offset == q.slots[s].offset)) return false;
    }
  }
  return true;
}

namespace {

// Largest divisor of v that is at most v / 2 (1 for v = 1).
std::size_t half_divisor(std::size_t v) {
  for (std::size_t d = v / 2; d > 1; --d)
    if (v % d == 0) return d;
  return 1;
}

}  // namespace

CellDims derive_cell_dims(std::span<const LayerSpec> group_layers, CellPolicy policy, CellSpatial spatial) {
  if (group_layers.empty()) throw PlanningError("cannot derive cell dimensions for an empty group");
  if (policy == CellPolicy::explicit_dims) throw PlanningError("explicit groups carry their own cell dimensions");
  CellDims cell = group_layers.front().kernel;
  bool same_spatial = true;
  for (const auto& layer : group_layers) {
    cell.f = std::gcd(cell.f, layer.kernel.f);
    cell.c = std::gcd(cell.c, layer.kernel.c);
    same_spatial = same_spatial && layer.kernel.kh == group_layers.front().kernel.kh &&
                   layer.kernel.kw == group_layers.front().kernel.kw;
  }
  if (!same_spatial || spatial == CellSpatial::unit) {
    cell.kh = 1;
    cell.kw = 1;
  }
  if (policy == CellPolicy::gcd_half) {
    cell.f = half_divisor(cell.f);
    cell.c = half_divisor(cell.c);
  }
  return cell;
}

PartitionMap partition_kernel(const KernelDims& kernel, const CellDims& cell, std::string layer_id) {
  const auto k = kernel.as_array();
  const auto e = cell.as_array();
  static constexpr const char* axes[] = {"f", "c", "kh", "kw"};
  for (std::size_t a = 0; a < 4; ++a) {
    if (e[a] == 0 || k[a] % e[a] != 0)
      throw PlanningError("cell " + cell.str() + " does not divide kernel " + kernel.str() + " of layer '" + layer_id +
                          "' along axis " + axes[a]);
  }
  PartitionMap map;
  map.layer_id = std::move(layer_id);
  map.kernel = kernel;
  map.cell = cell;
  for (std::size_t f0 = 0; f0 < kernel.f; f0 += cell.f)
    for (std::size_t c0 = 0; c0 < kernel.c; c0 += cell.c)
      for (std::size_t h0 = 0; h0 < kernel.kh; h0 += cell.kh)
        for (std::size_t w0 = 0; w0 < kernel.kw; w0 += cell.kw)
          map.slots.push_back({map.slots.size(), {f0, c0, h0, w0}});
  return map;
}

WarehousePlan plan_warehouses(const ArchSpec& arch, Rational b, std::optional<CellPolicy> policy_override) {
  if (b.num <= 0 || b.den <= 0) throw PlanningError("budget b must be positive, got " + b.str());
  WarehousePlan plan;
  plan.b = b;
  for (const auto& gspec : arch.groups) {
    const std::vector<LayerSpec> members = arch.layers_in(gspec.name);
    GroupPlan group;
    group.name = gspec.name;
    group.b = b;
    group.policy = gspec.policy;
    if (policy_override && gspec.policy != CellPolicy::explicit_dims) group.policy = *policy_override;
    if (group.policy == CellPolicy::explicit_dims) {
      if (!gspec.cell_dims) throw PlanningError("group '" + gspec.name + "' uses explicit policy without cell_dims");
      group.cell = *gspec.cell_dims;
    } else {
      group.cell = derive_cell_dims(members, group.policy, gspec.spatial);
    }
    for (const auto& layer : members) {
      group.partitions.push_back(partition_kernel(layer.kernel, group.cell, layer.id));
      group.m_t += group.partitions.back().m();
    }
    const std::int64_t n = b.scaled_round(std::int64_t(group.m_t));
    if (n < 1)
      throw PlanningError("group '" + gspec.name + "': b = " + b.str() + " with m_t = " + std::to_string(group.m_t) +
                          " leaves no kernel cells");
    group.n = std::size_t(n);
    group.has_zero_cell = group.n < group.m_t;
    plan.groups.push_back(std::move(group));
  }
  return plan;
}

BetaTable assign_beta(const GroupPlan& group, const BetaSpec& spec) {
  BetaTable table(spec, group.m_t, group.n_cols());
  switch (spec.strategy) {
    case BetaStrategy::one_to_one:
      for (std::size_t r = 0; r < group.m_t; ++r) table.set(r, r < group.n ? r : group.n, true);
      break;
    case BetaStrategy::all_to_one:
      for (std::size_t r = 0; r < group.m_t; ++r)
        for (std::size_t c = 0; c < group.n; ++c) table.set(r, c, true);
      break;
    case BetaStrategy::k_to_one:
      if (spec.k == 0 || spec.k * group.m_t > group.n)
        throw std::invalid_argument("k_to_one(" + std::to_string(spec.k) + ") needs k * m_t <= n, group '" +
                                    group.name + "' has m_t = " + std::to_string(group.m_t) +
                                    ", n = " + std::to_string(group.n));
      for (std::size_t r = 0; r < group.m_t; ++r)
        for (std::size_t c = r * spec.k; c < (r + 1) * spec.k; ++c) table.set(r, c, true);
      break;
    case BetaStrategy::none:
      break;
  }
  return table;
}

std::vector<BetaTable> assign_beta(const WarehousePlan& plan, const BetaSpec& spec) {
  std::vector<BetaTable> out;
  for (const auto& g : plan.groups) out.push_back(assign_beta(g, spec));
  return out;
}

std::size_t attention_hidden_width(std::size_t in_channels, std::size_t min_hidden) {
  return std::max<std::size_t>((in_channels + 15) / 16, std::max<std::size_t>(min_hidden, 1));
}

ParamReport count_params(const WarehousePlan& plan, const ArchSpec& arch) {
  ParamReport report;
  for (const auto& g : plan.groups) {
    GroupParamCounts counts;
    counts.name = g.name;
    counts.warehouse = std::uint64_t(g.n) * g.cell.volume();
    for (const auto& p : g.partitions) {
      const LayerSpec& layer = arch.layer(p.layer_id);
      counts.static_conv += layer.kernel.volume();
      const std::uint64_t c = layer.input_channels();
      const std::uint64_t h = attention_hidden_width(c, arch.attention_min_hidden);
      const std::uint64_t logits = std::uint64_t(p.m()) * g.n_cols();
      counts.attention += c * h + h + h * logits + logits;
    }
    counts.ratio = double(counts.warehouse) / double(counts.static_conv);
    report.warehouse += counts.warehouse;
    report.static_conv += counts.static_conv;
    report.attention += counts.attention;
    report.groups.push_back(std::move(counts));
  }
  report.ratio = report.static_conv ? double(report.warehouse) / double(report.static_conv) : 0.0;
  return report;
}

nlohmann::ordered_json plan_report(const WarehousePlan& plan, const ArchSpec& arch) {
  using nlohmann::ordered_json;
  const ParamReport params = count_params(plan, arch);
  ordered_json doc;
  doc["budget_b"] = plan.b.str();
  doc["groups"] = ordered_json::array();
  for (std::size_t i = 0; i < plan.groups.size(); ++i) {
    const auto& g = plan.groups[i];
    const auto& pc = params.groups[i];
    ordered_json gj;
    gj["name"] = g.name;
    gj["cell_policy"] = std::string(to_string(g.policy));
    gj["cell_dims"] = {g.cell.f, g.cell.c, g.cell.kh, g.cell.kw};
    gj["m_per_layer"] = ordered_json::array();
    for (const auto& p : g.partitions) gj["m_per_layer"].push_back({{"layer", p.layer_id}, {"m", p.m()}});
    gj["m_t"] = g.m_t;
    gj["n"] = g.n;
    gj["has_zero_cell"] = g.has_zero_cell;
    gj["param_counts"] = {{"warehouse", pc.warehouse},
                          {"static_conv", pc.static_conv},
                          {"attention", pc.attention},
                          {"warehouse_to_static_ratio", pc.ratio}};
    doc["groups"].push_back(std::move(gj));
  }
  doc["totals"] = {{"warehouse", params.warehouse},
                   {"static_conv", params.static_conv},
                   {"attention", params.attention},
                   {"warehouse_to_static_ratio", params.ratio}};
  return doc;
}

}  // namespace kw
