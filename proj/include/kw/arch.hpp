#pragma once

// Declarative description of the convolutional layers a KernelWarehouse model
// manages, and of how they are grouped around shared warehouses.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kw/rational.hpp"
#include "kw/tensor.hpp"
#include "json.hpp"

namespace kw {

// Extents of a convolution kernel or kernel cell, ordered (f, c, kh, kw).
struct Dims4 {
  std::size_t f = 1, c = 1, kh = 1, kw = 1;

  std::size_t volume() const { return f * c * kh * kw; }
  std::array<std::size_t, 4> as_array() const { return {f, c, kh, kw}; }
  Shape shape() const { return {f, c, kh, kw}; }
  std::string str() const;
  friend bool operator==(const Dims4&, const Dims4&) = default;
};

using KernelDims = Dims4;
using CellDims = Dims4;

enum class LayerKind { standard, depthwise };
enum class CellPolicy { gcd, gcd_half, explicit_dims };
// How spatial cell extents are chosen by the gcd policies: the common spatial
// size when every member agrees (otherwise 1), or always 1x1.
enum class CellSpatial { gcd, unit };

std::string_view to_string(LayerKind k);
std::string_view to_string(CellPolicy p);
std::string_view to_string(CellSpatial s);
CellPolicy parse_cell_policy(std::string_view s);

struct LayerSpec {
  std::string id;
  KernelDims kernel;
  std::size_t stride = 1;
  std::size_t pad = 0;
  LayerKind kind = LayerKind::standard;
  std::string stage;
  std::string warehouse_group;

  // Channels of the activation this layer consumes.
  std::size_t input_channels() const { return kind == LayerKind::depthwise ? kernel.f : kernel.c; }
  std::size_t conv_groups() const { return kind == LayerKind::depthwise ? kernel.f : 1; }
};

struct GroupSpec {
  std::string name;
  CellPolicy policy = CellPolicy::gcd;
  std::optional<CellDims> cell_dims;  // required iff policy is explicit
  CellSpatial spatial = CellSpatial::gcd;
};

struct ArchSpec {
  std::vector<LayerSpec> layers;
  std::vector<GroupSpec> groups;
  std::optional<Rational> budget;
  // Floor on the attention hidden width; 1 keeps the plain ceil(c / 16).
  std::size_t attention_min_hidden = 1;

  const GroupSpec& group(std::string_view name) const;
  const LayerSpec& layer(std::string_view id) const;
  // Members of a group in document order.
  std::vector<LayerSpec> layers_in(std::string_view group) const;
};

class ArchSpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ArchSpec parse_arch_spec(std::string_view text);
ArchSpec arch_from_json(const nlohmann::json& doc);
ArchSpec load_arch_spec(const std::filesystem::path& path);
nlohmann::json to_json(const ArchSpec& arch);

}  // namespace kw
