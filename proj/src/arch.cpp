#include "kw/arch.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace kw {

using nlohmann::json;

std::string Dims4::str() const {
  std::ostringstream os;
  os << f << 'x' << c << 'x' << kh << 'x' << kw;
  return os.str();
}

std::string_view to_string(LayerKind k) { return k == LayerKind::depthwise ? "depthwise" : "standard"; }

std::string_view to_string(CellPolicy p) {
  switch (p) {
    case CellPolicy::gcd: return "gcd";
    case CellPolicy::gcd_half: return "gcd_half";
    case CellPolicy::explicit_dims: return "explicit";
  }
  return "?";
}

std::string_view to_string(CellSpatial s) { return s == CellSpatial::unit ? "unit" : "gcd"; }

CellPolicy parse_cell_policy(std::string_view s) {
  if (s == "gcd") return CellPolicy::gcd;
  if (s == "gcd_half") return CellPolicy::gcd_half;
  if (s == "explicit") return CellPolicy::explicit_dims;
  throw ArchSpecError("unknown cell policy '" + std::string(s) + "'");
}

const GroupSpec& ArchSpec::group(std::string_view name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw ArchSpecError("unknown warehouse group '" + std::string(name) + "'");
}

const LayerSpec& ArchSpec::layer(std::string_view id) const {
  for (const auto& l : layers)
    if (l.id == id) return l;
  throw ArchSpecError("unknown layer '" + std::string(id) + "'");
}

std::vector<LayerSpec> ArchSpec::layers_in(std::string_view group) const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers)
    if (l.warehouse_group == group) out.push_back(l);
  return out;
}

namespace {

Dims4 read_dims(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw ArchSpecError(what + ": expected [f, c, kh, kw]");
  std::array<std::size_t, 4> v{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!j[i].is_number_integer() || j[i].get<long long>() <= 0)
      throw ArchSpecError(what + ": extents must be positive integers");
    v[i] = j[i].get<std::size_t>();
  }
  return {v[0], v[1], v[2], v[3]};
}

std::size_t read_uint(const json& obj, const char* key, std::size_t fallback, const std::string& what) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ArchSpecError(what + ": '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::string read_string(const json& obj, const char* key, const std::string& what) {
  if (!obj.contains(key) || !obj.at(key).is_string()) throw ArchSpecError(what + ": missing string field '" + key + "'");
  return obj.at(key).get<std::string>();
}

std::size_t line_of(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + std::size_t(std::count(text.begin(), text.begin() + std::ptrdiff_t(byte), '\n'));
}

}  // namespace

ArchSpec arch_from_json(const json& doc) {
  if (!doc.is_object()) throw ArchSpecError("architecture spec must be a JSON object");
  if (!doc.contains("layers") || !doc.at("layers").is_array()) throw ArchSpecError("spec needs a 'layers' array");
  if (!doc.contains("groups") || !doc.at("groups").is_array()) throw ArchSpecError("spec needs a 'groups' array");

  ArchSpec arch;
  std::set<std::string> group_names;
  for (const json& g : doc.at("groups")) {
    GroupSpec spec;
    spec.name = read_string(g, "name", "group");
    const std::string what = "group '" + spec.name + "'";
    if (!group_names.insert(spec.name).second) throw ArchSpecError("duplicate group " + spec.name);
    spec.policy = g.contains("cell_policy") ? parse_cell_policy(read_string(g, "cell_policy", what)) : CellPolicy::gcd;
    if (g.contains("cell_spatial")) {
      const std::string s = read_string(g, "cell_spatial", what);
      if (s == "unit")
        spec.spatial = CellSpatial::unit;
      else if (s == "gcd")
        spec.spatial = CellSpatial::gcd;
      else
        throw ArchSpecError(what + ": unknown cell_spatial '" + s + "'");
    }
    if (spec.policy == CellPolicy::explicit_dims) {
      if (!g.contains("cell_dims")) throw ArchSpecError(what + ": explicit policy requires cell_dims");
      spec.cell_dims = read_dims(g.at("cell_dims"), what + " cell_dims");
    } else if (g.contains("cell_dims")) {
      throw ArchSpecError(what + ": cell_dims is only allowed with the explicit policy");
    }
    arch.groups.push_back(std::move(spec));
  }

  std::set<std::string> ids;
  for (const json& l : doc.at("layers")) {
    LayerSpec spec;
    spec.id = read_string(l, "id", "layer");
    const std::string what = "layer '" + spec.id + "'";
    if (!ids.insert(spec.id).second) throw ArchSpecError("duplicate layer id '" + spec.id + "'");
    if (!l.contains("kernel")) throw ArchSpecError(what + ": missing kernel");
    spec.kernel = read_dims(l.at("kernel"), what + " kernel");
    spec.stride = read_uint(l, "stride", 1, what);
    if (spec.stride == 0) throw ArchSpecError(what + ": stride must be positive");
    spec.pad = read_uint(l, "pad", 0, what);
    const std::string kind = l.contains("kind") ? read_string(l, "kind", what) : "standard";
    if (kind == "standard")
      spec.kind = LayerKind::standard;
    else if (kind == "depthwise")
      spec.kind = LayerKind::depthwise;
    else
      throw ArchSpecError(what + ": unknown kind '" + kind + "'");
    if (spec.kind == LayerKind::depthwise && spec.kernel.c != 1)
      throw ArchSpecError(what + ": depthwise kernels must have c = 1");
    spec.warehouse_group = read_string(l, "warehouse_group", what);
    if (!group_names.count(spec.warehouse_group))
      throw ArchSpecError(what + " references missing warehouse group '" + spec.warehouse_group + "'");
    spec.stage = l.contains("stage") ? read_string(l, "stage", what) : spec.warehouse_group;
    arch.layers.push_back(std::move(spec));
  }
  if (arch.layers.empty()) throw ArchSpecError("spec has no layers");
  for (const auto& g : arch.groups)
    if (arch.layers_in(g.name).empty()) throw ArchSpecError("warehouse group '" + g.name + "' has no layers");

  arch.attention_min_hidden = read_uint(doc, "attention_min_hidden", 1, "spec");
  if (arch.attention_min_hidden == 0) throw ArchSpecError("attention_min_hidden must be positive");

  if (doc.contains("budget_b")) {
    const json& b = doc.at("budget_b");
    try {
      if (b.is_string())
        arch.budget = Rational::parse(b.get<std::string>());
      else if (b.is_number())
        arch.budget = Rational::from_double(b.get<double>());
      else
        throw ArchSpecError("budget_b must be a string \"p/q\" or a number");
    } catch (const std::invalid_argument& e) {
      throw ArchSpecError(std::string("budget_b: ") + e.what());
    }
  }
  return arch;
}

ArchSpec parse_arch_spec(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ArchSpecError("syntax error at line " + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": " +
                        e.what());
  }
  return arch_from_json(doc);
}

ArchSpec load_arch_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchSpecError("cannot open architecture spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_arch_spec(ss.str());
}

json to_json(const ArchSpec& arch) {
  json doc;
  doc["layers"] = json::array();
  for (const auto& l : arch.layers) {
    doc["layers"].push_back({{"id", l.id},
                             {"kernel", {l.kernel.f, l.kernel.c, l.kernel.kh, l.kernel.kw}},
                             {"stride", l.stride},
                             {"pad", l.pad},
                             {"kind", std::string(to_string(l.kind))},
                             {"stage", l.stage},
                             {"warehouse_group", l.warehouse_group}});
  }
  doc["groups"] = json::array();
  for (const auto& g : arch.groups) {
    json gj{{"name", g.name}, {"cell_policy", std::string(to_string(g.policy))},
            {"cell_spatial", std::string(to_string(g.spatial))}};
    if (g.cell_dims) gj["cell_dims"] = {g.cell_dims->f, g.cell_dims->c, g.cell_dims->kh, g.cell_dims->kw};
    doc["groups"].push_back(std::move(gj));
  }
  if (arch.budget) doc["budget_b"] = arch.budget->str();
  if (arch.attention_min_hidden != 1) doc["attention_min_hidden"] = arch.attention_min_hidden;
  return doc;
}

}  // namespace kw
