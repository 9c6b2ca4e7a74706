#include <array>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kw/arch.hpp"
#include "kw/checkpoint.hpp"
#include "kw/dataset.hpp"
#include "kw/gradcheck.hpp"
#include "kw/parallel.hpp"
#include "kw/planner.hpp"
#include "kw/stats.hpp"
#include "kw/train.hpp"

namespace {

constexpr kw::Real kGradTolerance = 1e-4;

int cmd_plan(const std::string& spec_path, const std::string& b_text, const std::string& policy,
             const std::string& out_path) {
  const kw::ArchSpec arch = kw::load_arch_spec(spec_path);
  kw::Rational b = arch.budget.value_or(kw::Rational::make(1, 1));
  if (!b_text.empty()) b = kw::Rational::parse(b_text);
  std::optional<kw::CellPolicy> override;
  if (!policy.empty()) override = kw::parse_cell_policy(policy);
  const kw::WarehousePlan plan = kw::plan_warehouses(arch, b, override);
  const std::string doc = kw::plan_report(plan, arch).dump(2) + "\n";
  if (out_path.empty() || out_path == "-") {
    std::cout << doc;
  } else {
    std::ofstream(out_path, std::ios::trunc) << doc;
    for (const auto& g : plan.groups)
      std::printf("%-10s cell %-14s m_t %4zu  n %4zu%s\n", g.name.c_str(), g.cell.str().c_str(), g.m_t, g.n,
                  g.has_zero_cell ? "  (+e_z)" : "");
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& run_dir) {
  const kw::TrainConfig cfg = kw::load_train_config(config_path);
  const auto result = kw::train(cfg, run_dir, &std::cout);
  std::printf("initial_loss %.6f  final_loss %.6f  steps %zu\ncheckpoint %s\n", double(result.initial_loss),
              double(result.final_loss), result.steps, result.checkpoint.string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split, std::size_t limit) {
  const kw::KWNet net = kw::restore_model(kw::load_checkpoint(ckpt_path));
  const auto data = kw::load_idx_split(data_dir, split, limit);
  const auto r = kw::evaluate(net, data, 0);
  std::printf("{\"samples\": %zu, \"accuracy\": %.6f, \"loss\": %.9g}\n", r.samples, double(r.accuracy),
              double(r.loss));
  return 0;
}

int cmd_attn_stats(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
                   std::size_t limit, double tau, const std::string& out_dir) {
  const kw::KWNet net = kw::restore_model(kw::load_checkpoint(ckpt_path));
  const auto data = kw::load_idx_split(data_dir, split, limit);
  const auto stats = kw::collect_attention_stats(net, data, tau);
  const auto paths = kw::write_attention_stats(stats, out_dir);
  for (std::size_t i = 0; i < stats.size(); ++i)
    std::printf("%s: %zu slots x %zu cells, diagonal argmax ratio %.3f (%zu one-hot rows) -> %s\n",
                stats[i].group.c_str(), stats[i].row_labels.size(), stats[i].col_labels.size(),
                stats[i].diagonal_ratio(), stats[i].one_hot_rows, paths[i].string().c_str());
  return 0;
}

int cmd_gradcheck(const std::string& config_path) {
  const kw::TrainConfig cfg = kw::load_train_config(config_path);
  const std::array<kw::Real, 3> taus{0.0, 0.37, 1.0};
  const auto report = kw::gradcheck(cfg.arch, cfg.net, taus, {.seed = cfg.seed});
  std::cout << kw::format_gradcheck(report, kGradTolerance);
  return report.passed(kGradTolerance) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  kw::configure_threads_from_env();
  CLI::App app{"KernelWarehouse dynamic convolution toolkit"};
  app.require_subcommand(1);

  std::string spec_path, b_text, policy, out_path;
  auto* plan = app.add_subcommand("plan", "plan warehouses for an architecture");
  plan->add_option("spec", spec_path, "architecture JSON")->required()->check(CLI::ExistingFile);
  plan->add_option("--b", b_text, "budget factor, p/q or decimal");
  plan->add_option("--policy", policy, "cell policy override")->check(CLI::IsMember({"gcd", "gcd_half"}));
  plan->add_option("-o,--output", out_path, "plan JSON output (default stdout)");

  std::string config_path, run_dir;
  auto* train = app.add_subcommand("train", "train a network from a config");
  train->add_option("--config", config_path, "training config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("-o,--output", run_dir, "run directory")->required();

  std::string ckpt_path, data_dir, split = "test";
  std::size_t limit = 0;
  double tau = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at tau = 0");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "IDX dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--limit", limit, "use only the first N samples");

  auto* stats = app.add_subcommand("attn-stats", "export mean attention per warehouse as CSV");
  stats->add_option("--ckpt", ckpt_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  stats->add_option("--data", data_dir, "IDX dataset directory")->required()->check(CLI::ExistingDirectory);
  stats->add_option("-o,--output", out_path, "CSV directory")->required();
  stats->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  stats->add_option("--limit", limit, "use only the first N samples");
  stats->add_option("--tau", tau, "temperature for the forward pass")->check(CLI::Range(0.0, 1.0));

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter family");
  grad->add_option("--config", config_path, "training config JSON")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*plan) return cmd_plan(spec_path, b_text, policy, out_path);
    if (*train) return cmd_train(config_path, run_dir);
    if (*eval) return cmd_eval(ckpt_path, data_dir, split, limit);
    if (*stats) return cmd_attn_stats(ckpt_path, data_dir, split, limit, tau, out_path);
    if (*grad) return cmd_gradcheck(config_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "kwctl: %s\n", e.what());
    return 2;
  }
  return 0;
}
