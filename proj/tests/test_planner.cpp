#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <numeric>

#include "kw/arch.hpp"
#include "kw/planner.hpp"
#include "kw/rational.hpp"

using namespace kw;

namespace {

const std::filesystem::path kData = KW_DATA_DIR;

ArchSpec resnet18() { return load_arch_spec(kData / "specs" / "resnet18.json"); }

LayerSpec layer(std::string id, Dims4 k, std::string group = "g") {
  LayerSpec l;
  l.id = std::move(id);
  l.kernel = k;
  l.warehouse_group = std::move(group);
  return l;
}

// Layers with 1x1x1x1 explicit cells, so each layer contributes f slots.
ArchSpec unit_cell_arch(std::vector<std::size_t> filters) {
  ArchSpec a;
  for (std::size_t i = 0; i < filters.size(); ++i) a.layers.push_back(layer("l" + std::to_string(i), {filters[i], 1, 1, 1}));
  GroupSpec g;
  g.name = "g";
  g.policy = CellPolicy::explicit_dims;
  g.cell_dims = Dims4{1, 1, 1, 1};
  a.groups.push_back(g);
  return a;
}

std::vector<std::size_t> stage_values(const WarehousePlan& plan, bool n) {
  std::vector<std::size_t> out;
  for (const auto& g : plan.groups) out.push_back(n ? g.n : g.m_t);
  return out;
}

using V = std::vector<std::size_t>;

}  // namespace

TEST_CASE("rational budgets") {
  CHECK(Rational::parse("1/2") == Rational::make(1, 2));
  CHECK(Rational::parse("2/4") == Rational::make(1, 2));
  CHECK(Rational::parse("0.25") == Rational::make(1, 4));
  CHECK(Rational::parse("4") == Rational::make(4, 1));
  CHECK(Rational::parse("1/4").str() == "1/4");
  CHECK_THROWS_AS(Rational::parse("1/0"), std::invalid_argument);
  CHECK_THROWS_AS(Rational::parse("x"), std::invalid_argument);
  CHECK_THROWS_AS(Rational::parse(""), std::invalid_argument);
  CHECK(Rational::make(1, 2).scaled_round(5) == 3);  // half up
  CHECK(Rational::make(1, 3).scaled_round(4) == 1);
  CHECK(Rational::make(2, 3).scaled_round(4) == 3);
  CHECK(Rational::from_double(0.5) == Rational::make(1, 2));
}

TEST_CASE("parse a single-layer spec") {
  const ArchSpec a = parse_arch_spec(R"({
    "layers": [{"id": "c", "kernel": [8, 4, 3, 3], "stride": 1, "pad": 1, "kind": "standard",
                "warehouse_group": "w"}],
    "groups": [{"name": "w", "cell_policy": "gcd"}],
    "budget_b": "1/2"})");
  CHECK(a.layers.size() == 1);
  CHECK(a.groups.size() == 1);
  CHECK(a.layers[0].kernel == Dims4{8, 4, 3, 3});
  REQUIRE(a.budget);
  CHECK(*a.budget == Rational::make(1, 2));
  CHECK(parse_arch_spec(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "w"}],
                            "groups": [{"name": "w", "cell_policy": "gcd"}], "budget_b": 0.5})")
            .budget == Rational::make(1, 2));
}

TEST_CASE("bundled ResNet18 spec") {
  const ArchSpec a = resnet18();
  CHECK(a.groups.size() == 4);
  CHECK(a.layers.size() == 19);
  CHECK(a.layers_in("stage1").size() == 6);
  CHECK(a.layers_in("stage4").size() == 3);
  // Round trip through the document form.
  const ArchSpec again = arch_from_json(to_json(a));
  CHECK(plan_warehouses(again, Rational::make(1, 1)) == plan_warehouses(a, Rational::make(1, 1)));
}

TEST_CASE("architecture spec errors") {
  auto message = [](std::string_view text) {
    try {
      parse_arch_spec(text);
    } catch (const ArchSpecError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string missing = message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "nowhere"}],
                                          "groups": [{"name": "w", "cell_policy": "gcd"}]})");
  CHECK(missing.find("nowhere") != std::string::npos);

  const std::string dup = message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "w"},
                                                  {"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "w"}],
                                      "groups": [{"name": "w", "cell_policy": "gcd"}]})");
  CHECK(dup.find("duplicate") != std::string::npos);

  const std::string kind = message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "kind": "dilated",
                                                   "warehouse_group": "w"}],
                                       "groups": [{"name": "w", "cell_policy": "gcd"}]})");
  CHECK(kind.find("dilated") != std::string::npos);

  const std::string syntax = message("{\n  \"layers\": [\n    {\"id\": \"c\",, }\n]}");
  CHECK(syntax.find("line 3") != std::string::npos);

  CHECK_FALSE(message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1], "warehouse_group": "w"}],
                          "groups": [{"name": "w", "cell_policy": "gcd"}]})").empty());
  CHECK_FALSE(message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "w"}],
                          "groups": [{"name": "w", "cell_policy": "explicit"}]})").empty());
  CHECK_FALSE(message(R"({"layers": [{"id": "c", "kernel": [4, 2, 3, 3], "kind": "depthwise",
                                      "warehouse_group": "w"}],
                          "groups": [{"name": "w", "cell_policy": "gcd"}]})").empty());
  CHECK_FALSE(message(R"({"layers": [{"id": "c", "kernel": [1, 1, 1, 1], "warehouse_group": "w"}],
                          "groups": [{"name": "w", "cell_policy": "gcd"}, {"name": "empty", "cell_policy": "gcd"}]})")
                  .empty());
  CHECK_FALSE(message(R"({"layers": [], "groups": []})").empty());
}

TEST_CASE("cell dimensions from common divisors") {
  std::vector<LayerSpec> stage;
  for (int i = 0; i < 4; ++i) stage.push_back(layer("a" + std::to_string(i), {64, 64, 3, 3}));
  stage.push_back(layer("b", {128, 64, 3, 3}));
  stage.push_back(layer("d", {128, 64, 1, 1}));
  CHECK(derive_cell_dims(stage, CellPolicy::gcd) == Dims4{64, 64, 1, 1});
  CHECK(derive_cell_dims(stage, CellPolicy::gcd_half) == Dims4{32, 32, 1, 1});

  const std::vector<LayerSpec> single{layer("s", {24, 12, 3, 3})};
  CHECK(derive_cell_dims(single, CellPolicy::gcd) == Dims4{24, 12, 3, 3});
  CHECK(partition_kernel({24, 12, 3, 3}, derive_cell_dims(single, CellPolicy::gcd)).m() == 1);

  const std::vector<LayerSpec> same_spatial{layer("x", {16, 8, 3, 3}), layer("y", {16, 16, 3, 3})};
  CHECK(derive_cell_dims(same_spatial, CellPolicy::gcd) == Dims4{16, 8, 3, 3});
  CHECK(derive_cell_dims(same_spatial, CellPolicy::gcd, CellSpatial::unit) == Dims4{16, 8, 1, 1});
  CHECK_THROWS_AS(derive_cell_dims(std::vector<LayerSpec>{}, CellPolicy::gcd), PlanningError);
}

TEST_CASE("kernel partition") {
  CHECK(partition_kernel({64, 64, 3, 3}, {64, 64, 1, 1}).m() == 9);
  CHECK(partition_kernel({128, 64, 1, 1}, {64, 64, 1, 1}).m() == 2);
  const PartitionMap whole = partition_kernel({8, 4, 3, 3}, {8, 4, 3, 3});
  REQUIRE(whole.m() == 1);
  CHECK(whole.slots[0].offset == Dims4{0, 0, 0, 0});

  const PartitionMap p = partition_kernel({4, 4, 2, 2}, {2, 2, 1, 1});
  REQUIRE(p.m() == 16);
  for (std::size_t i = 0; i < p.m(); ++i) CHECK(p.slots[i].index == i);
  for (std::size_t i = 1; i < p.m(); ++i) CHECK(p.slots[i - 1].offset.as_array() < p.slots[i].offset.as_array());
  CHECK(p.slots[1].offset == Dims4{0, 0, 0, 1});
  CHECK(p.slots[4].offset == Dims4{0, 2, 0, 0});

  try {
    partition_kernel({64, 48, 3, 3}, {64, 32, 1, 1}, "bad");
    FAIL("expected a planning error");
  } catch (const PlanningError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bad") != std::string::npos);
    CHECK(msg.find("axis c") != std::string::npos);
  }
}

TEST_CASE("ResNet18 warehouse sizes") {
  const ArchSpec a = resnet18();
  const WarehousePlan b1 = plan_warehouses(a, Rational::make(1, 1));
  CHECK(stage_values(b1, false) == V{56, 47, 47, 27});
  CHECK(stage_values(b1, true) == V{56, 47, 47, 27});
  for (const auto& g : b1.groups) CHECK_FALSE(g.has_zero_cell);

  const WarehousePlan b2 = plan_warehouses(a, Rational::make(2, 1));
  CHECK(stage_values(b2, false) == V{56, 47, 47, 27});
  CHECK(stage_values(b2, true) == V{112, 94, 94, 54});

  const WarehousePlan b4 = plan_warehouses(a, Rational::make(4, 1));
  CHECK(stage_values(b4, true) == V{224, 188, 188, 108});

  const WarehousePlan half = plan_warehouses(a, Rational::make(1, 2), CellPolicy::gcd_half);
  CHECK(stage_values(half, false) == V{224, 188, 188, 108});
  CHECK(stage_values(half, true) == V{112, 94, 94, 54});
  for (const auto& g : half.groups) CHECK(g.has_zero_cell);

  const WarehousePlan quarter = plan_warehouses(a, Rational::make(1, 4), CellPolicy::gcd_half);
  CHECK(stage_values(quarter, false) == V{224, 188, 188, 108});
  CHECK(stage_values(quarter, true) == V{56, 47, 47, 27});

  CHECK(b1.group("stage1").cell == Dims4{64, 64, 1, 1});
  CHECK(b1.group("stage4").cell == Dims4{512, 512, 1, 1});
  CHECK(b1.group_of_layer("layer3.0.downsample").name == "stage2");
  CHECK(b1.group("stage1").slot_offset("layer2.0.conv1") == 36);
}

TEST_CASE("degenerate single-kernel plan") {
  ArchSpec a;
  a.layers.push_back(layer("only", {8, 4, 3, 3}));
  a.groups.push_back(GroupSpec{"g", CellPolicy::gcd, std::nullopt, CellSpatial::gcd});
  const WarehousePlan plan = plan_warehouses(a, Rational::make(1, 1));
  CHECK(plan.groups[0].m_t == 1);
  CHECK(plan.groups[0].n == 1);
  CHECK_FALSE(plan.groups[0].has_zero_cell);
  CHECK_THROWS_AS(plan_warehouses(a, Rational::make(1, 3)), PlanningError);  // round(1/3) = 0
  CHECK_THROWS_AS(plan_warehouses(a, Rational::make(0, 1)), PlanningError);
}

TEST_CASE("partitions tile every planned ResNet18 kernel exactly once") {
  const ArchSpec a = resnet18();
  for (const std::optional<CellPolicy> policy : {std::optional<CellPolicy>{}, std::optional{CellPolicy::gcd_half}}) {
    const WarehousePlan plan = plan_warehouses(a, Rational::make(1, 1), policy);
    std::size_t layers = 0;
    for (const auto& g : plan.groups) {
      for (const auto& p : g.partitions) {
        const Dims4 k = p.kernel, c = p.cell;
        std::vector<std::uint8_t> hits(k.volume(), 0);
        for (const auto& s : p.slots)
          for (std::size_t f = 0; f < c.f; ++f)
            for (std::size_t ch = 0; ch < c.c; ++ch)
              for (std::size_t i = 0; i < c.kh; ++i)
                for (std::size_t j = 0; j < c.kw; ++j) {
                  const std::size_t idx =
                      (((s.offset.f + f) * k.c + s.offset.c + ch) * k.kh + s.offset.kh + i) * k.kw + s.offset.kw + j;
                  ++hits[idx];
                }
        CHECK(p.m() * c.volume() == k.volume());
        CHECK(std::all_of(hits.begin(), hits.end(), [](std::uint8_t h) { return h == 1; }));
        ++layers;
      }
    }
    CHECK(layers == 19);
  }
}

TEST_CASE("budget identity") {
  const ArchSpec a = resnet18();
  for (const auto& text : {"1/4", "1/2", "1", "2", "4", "1/3", "3/7", "0.9", "5/3"}) {
    const Rational b = Rational::parse(text);
    const WarehousePlan plan = plan_warehouses(a, b);
    CHECK(plan.b == b);
    for (const auto& g : plan.groups) {
      CHECK(g.m_t == std::accumulate(g.partitions.begin(), g.partitions.end(), std::size_t(0),
                                     [](std::size_t s, const PartitionMap& p) { return s + p.m(); }));
      CHECK(std::abs(double(g.n) / double(g.m_t) - b.to_double()) <= 1.0 / (2.0 * double(g.m_t)) + 1e-15);
      CHECK(g.has_zero_cell == (g.n < g.m_t));
    }
  }
}

TEST_CASE("planning is idempotent") {
  const ArchSpec a = resnet18();
  CHECK(plan_warehouses(a, Rational::make(1, 2)) == plan_warehouses(a, Rational::make(1, 2)));
  CHECK(plan_report(plan_warehouses(a, Rational::make(2, 1)), a).dump() ==
        plan_report(plan_warehouses(a, Rational::make(2, 1)), a).dump());
}

TEST_CASE("beta tables") {
  SUBCASE("one to one with n = m_t") {
    const ArchSpec a = unit_cell_arch({2, 2, 2});
    const GroupPlan g = plan_warehouses(a, Rational::make(1, 1)).groups[0];
    REQUIRE(g.m_t == 6);
    const BetaTable t = assign_beta(g, {BetaStrategy::one_to_one});
    REQUIRE(t.rows() == 6);
    REQUIRE(t.cols() == 6);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 6; ++c) CHECK(t.at(r, c) == (r == c ? 1 : 0));
  }
  SUBCASE("one to one with a zero cell") {
    const ArchSpec a = unit_cell_arch({2, 2});
    const GroupPlan g = plan_warehouses(a, Rational::make(1, 2)).groups[0];
    REQUIRE(g.n == 2);
    REQUIRE(g.has_zero_cell);
    const BetaTable t = assign_beta(g, {BetaStrategy::one_to_one});
    REQUIRE(t.cols() == 3);
    CHECK(t.at(0, 0) == 1);
    CHECK(t.at(1, 1) == 1);
    CHECK(t.at(2, 2) == 1);
    CHECK(t.at(3, 2) == 1);
    for (std::size_t r = 0; r < 4; ++r) CHECK(t.row_sum(r) == 1);
  }
  SUBCASE("two to one") {
    const ArchSpec a = unit_cell_arch({2});
    const GroupPlan g = plan_warehouses(a, Rational::make(2, 1)).groups[0];
    REQUIRE(g.n == 4);
    const BetaTable t = assign_beta(g, parse_beta_spec("k_to_one:2"));
    CHECK(t.spec().k == 2);
    const std::vector<std::vector<int>> expected{{1, 1, 0, 0}, {0, 0, 1, 1}};
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 4; ++c) CHECK(t.at(r, c) == expected[r][c]);
    CHECK_THROWS_AS(assign_beta(g, parse_beta_spec("k_to_one:3")), std::invalid_argument);
  }
  SUBCASE("all to one and none") {
    const ArchSpec a = unit_cell_arch({3});
    const GroupPlan g = plan_warehouses(a, Rational::make(2, 3)).groups[0];
    REQUIRE(g.has_zero_cell);
    const BetaTable all = assign_beta(g, {BetaStrategy::all_to_one});
    const BetaTable none = assign_beta(g, {BetaStrategy::none});
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < g.n; ++c) CHECK(all.at(r, c) == 1);
      CHECK(all.at(r, g.n) == 0);
      CHECK(none.row_sum(r) == 0);
    }
  }
  SUBCASE("strategy names") {
    CHECK(beta_spec_str(parse_beta_spec("one_to_one")) == "one_to_one");
    CHECK(beta_spec_str(parse_beta_spec("k_to_one:3")) == "k_to_one:3");
    CHECK_THROWS_AS(parse_beta_spec("many"), std::invalid_argument);
    CHECK_THROWS_AS(parse_beta_spec("k_to_one:0"), std::invalid_argument);
  }
}

TEST_CASE("one to one tables are bijective onto the first min(n, m_t) cells") {
  const ArchSpec a = resnet18();
  for (const auto& text : {"1/4", "1/2", "1", "2", "4"}) {
    const WarehousePlan plan = plan_warehouses(a, Rational::parse(text), CellPolicy::gcd_half);
    for (const auto& g : plan.groups) {
      const BetaTable t = assign_beta(g, {BetaStrategy::one_to_one});
      CHECK(t.rows() == g.m_t);
      CHECK(t.cols() == g.n_cols());
      for (std::size_t r = 0; r < t.rows(); ++r) CHECK(t.row_sum(r) == 1);
      const std::size_t used = std::min(g.n, g.m_t);
      for (std::size_t c = 0; c < g.n; ++c) CHECK(t.col_sum(c) == (c < used ? 1u : 0u));
      if (g.has_zero_cell) CHECK(t.col_sum(g.n) == g.m_t - g.n);
    }
  }
}

TEST_CASE("attention hidden width") {
  CHECK(attention_hidden_width(64) == 4);
  CHECK(attention_hidden_width(65) == 5);
  CHECK(attention_hidden_width(8) == 1);
  CHECK(attention_hidden_width(1) == 1);
  CHECK(attention_hidden_width(8, 16) == 16);
  CHECK(attention_hidden_width(512, 16) == 32);
}

TEST_CASE("parameter counts") {
  const ArchSpec a = resnet18();
  const ParamReport one = count_params(plan_warehouses(a, Rational::make(1, 1)), a);
  CHECK(one.ratio == 1.0);
  for (const auto& g : one.groups) CHECK(g.ratio == 1.0);
  CHECK(one.groups[3].warehouse == 7077888);
  CHECK(one.groups[3].static_conv == 7077888);

  const WarehousePlan half_plan = plan_warehouses(a, Rational::make(1, 2), CellPolicy::gcd_half);
  const ParamReport half = count_params(half_plan, a);
  for (std::size_t i = 0; i < half.groups.size(); ++i)
    CHECK(std::abs(half.groups[i].ratio - 0.5) <= 1.0 / double(half_plan.groups[i].m_t));

  // Attention modules: c*h + h + h*m*cols + m*cols per layer.
  const WarehousePlan plan = plan_warehouses(a, Rational::make(1, 1));
  for (std::size_t gi = 0; gi < plan.groups.size(); ++gi) {
    const auto& g = plan.groups[gi];
    std::uint64_t expected = 0;
    for (const auto& p : g.partitions) {
      const std::uint64_t c = a.layer(p.layer_id).input_channels(), h = (c + 15) / 16, mc = p.m() * g.n_cols();
      expected += c * h + h + h * mc + mc;
    }
    CHECK(one.groups[gi].attention == expected);
  }

  const ArchSpec odd = unit_cell_arch({3});
  const WarehousePlan odd_plan = plan_warehouses(odd, Rational::make(1, 2));
  REQUIRE(odd_plan.groups[0].n == 2);
  CHECK(std::abs(count_params(odd_plan, odd).ratio - 0.5) <= 1.0 / 3.0);
}

TEST_CASE("plan report document") {
  const ArchSpec a = resnet18();
  const auto doc = plan_report(plan_warehouses(a, Rational::make(1, 2), CellPolicy::gcd_half), a);
  REQUIRE(doc["groups"].size() == 4);
  const auto& s1 = doc["groups"][0];
  CHECK(s1["cell_dims"] == nlohmann::ordered_json({32, 32, 1, 1}));
  CHECK(s1["m_t"] == 224);
  CHECK(s1["n"] == 112);
  CHECK(s1["has_zero_cell"] == true);
  CHECK(s1["m_per_layer"].size() == 6);
  CHECK(s1["param_counts"].contains("warehouse"));
  CHECK(doc["budget_b"] == "1/2");
}
