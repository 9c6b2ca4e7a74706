#include "kw/gradcheck.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <random>

#include "kw/ops.hpp"

namespace kw {

std::string parameter_family(const std::string& name) {
  if (name.rfind("warehouse/", 0) == 0) return "warehouse.cells";
  if (name.rfind("layer/", 0) == 0) return "attention." + name.substr(name.rfind('/') + 1);
  if (name.rfind("classifier/", 0) == 0) return "classifier." + name.substr(name.rfind('/') + 1);
  return name;
}

GradcheckReport gradcheck(const ArchSpec& arch, const NetOptions& options, std::span<const Real> taus,
                          const GradcheckOptions& opt) {
  KWNet net(arch, options);
  net.initialize(opt.seed);
  std::mt19937_64 rng(opt.seed + 1);
  std::normal_distribution<Real> normal;
  if (opt.bias_std > 0) {
    for (auto& p : net.parameters())
      if (p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "bias") == 0)
        for (auto& v : p.value->data()) v = opt.bias_std * normal(rng);
  }
  Tensor x({opt.batch, net.input_channels(), opt.height, opt.width});
  for (auto& v : x.data()) v = normal(rng);
  std::vector<int> labels(opt.batch);
  std::uniform_int_distribution<int> pick(0, int(options.num_classes) - 1);
  for (auto& l : labels) l = pick(rng);
  Tensor projection({opt.batch, options.num_classes});
  for (auto& v : projection.data()) v = normal(rng);
  const bool use_ce = opt.loss == GradcheckOptions::Loss::cross_entropy;

  const ad::ParamMap theta = net.parameter_values();
  GradcheckReport report;
  for (Real tau : taus) {
    ad::Tape tape;
    const auto trace = net.forward(tape, x, tau);
    const ad::Var loss = use_ce ? ad::softmax_cross_entropy(tape, trace.logits, labels)
                                : ad::weighted_sum(tape, trace.logits, projection);
    const ad::GradientMap analytic = ad::backprop_gradients(tape, loss);

    auto f = [&](const ad::ParamMap& p) {
      net.set_parameter_values(p);
      const Tensor logits = net.logits(x, tau);
      if (use_ce) return ops::softmax_cross_entropy(logits, labels);
      Real s = 0;
      for (std::size_t i = 0; i < logits.size(); ++i) s += logits[i] * projection[i];
      return s;
    };
    const auto fd = ad::finite_diff_check(f, theta, analytic, {.eps = opt.eps, .max_coords = opt.max_coords, .seed = opt.seed});
    net.set_parameter_values(theta);

    GradcheckRun run;
    run.tau = tau;
    run.worst_param = fd.worst_param;
    run.worst_index = fd.worst_index;
    run.analytic = fd.analytic;
    run.numeric = fd.numeric;
    std::map<std::string, FamilyError> fam;
    for (const auto& [name, err] : fd.per_param) {
      auto& e = fam[parameter_family(name)];
      e.family = parameter_family(name);
      const std::size_t n = theta.at(name).size();
      e.coords += opt.max_coords ? std::min(opt.max_coords, n) : n;
      if (err >= e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_param = name;
      }
    }
    for (auto& [k, e] : fam) {
      run.max_rel_error = std::max(run.max_rel_error, e.max_rel_error);
      run.families.push_back(e);
    }
    report.max_rel_error = std::max(report.max_rel_error, run.max_rel_error);
    report.runs.push_back(std::move(run));
  }
  return report;
}

std::string format_gradcheck(const GradcheckReport& report, Real tolerance) {
  std::string out;
  char buf[256];
  for (const auto& run : report.runs) {
    std::snprintf(buf, sizeof buf, "tau = %.4g\n", double(run.tau));
    out += buf;
    for (const auto& e : run.families) {
      std::snprintf(buf, sizeof buf, "  %-22s max_rel_error %.3e over %6zu coords  %s\n", e.family.c_str(),
                    double(e.max_rel_error), e.coords, e.max_rel_error <= tolerance ? "ok" : "FAIL");
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "  worst coordinate %s[%zu]: analytic %.9e numeric %.9e\n", run.worst_param.c_str(),
                  run.worst_index, double(run.analytic), double(run.numeric));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "overall max_rel_error %.3e (tolerance %.1e): %s\n", double(report.max_rel_error),
                double(tolerance), report.passed(tolerance) ? "PASS" : "FAIL");
  out += buf;
  return out;
}

}  // namespace kw
