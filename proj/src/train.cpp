#include "kw/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "kw/ops.hpp"

namespace kw {

using nlohmann::json;

namespace {

std::string_view to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::constant: return "constant";
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::step: return "step";
  }
  return "?";
}

LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  if (s == "step") return LrSchedule::step;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant, cosine or step)");
}

Rational parse_budget(const json& b) {
  if (b.is_string()) return Rational::parse(b.get<std::string>());
  if (b.is_number()) return Rational::from_double(b.get<double>());
  throw ConfigError("budget_b must be a string \"p/q\" or a number");
}

Real non_negative(const json& doc, const char* key, Real fallback) {
  const Real v = doc.value(key, fallback);
  if (!std::isfinite(v) || v < 0) throw ConfigError(std::string(key) + " must be finite and non-negative");
  return v;
}

NetOptions::CellFanIn parse_cell_fan_in(const std::string& s) {
  if (s == "cell") return NetOptions::CellFanIn::cell;
  if (s == "kernel") return NetOptions::CellFanIn::kernel;
  throw ConfigError("cell_init_fan_in must be \"cell\" or \"kernel\", got '" + s + "'");
}

json net_metadata(const NetOptions& o) {
  json doc;
  doc["budget_b"] = o.b.str();
  doc["cell_policy"] = o.policy_override ? json(std::string(to_string(*o.policy_override))) : json(nullptr);
  doc["attention_function"] = std::string(to_string(o.function));
  doc["beta_strategy"] = beta_spec_str(o.beta);
  doc["num_classes"] = o.num_classes;
  doc["fine_tune"] = o.fine_tune;
  doc["cell_init_fan_in"] = o.cell_fan_in == NetOptions::CellFanIn::cell ? "cell" : "kernel";
  return doc;
}

NetOptions net_options_from(const json& doc) {
  NetOptions o;
  o.b = Rational::parse(doc.at("budget_b").get<std::string>());
  if (!doc.at("cell_policy").is_null()) o.policy_override = parse_cell_policy(doc.at("cell_policy").get<std::string>());
  o.function = parse_attention_function(doc.at("attention_function").get<std::string>());
  o.beta = parse_beta_spec(doc.at("beta_strategy").get<std::string>());
  o.num_classes = doc.at("num_classes").get<std::size_t>();
  o.fine_tune = doc.at("fine_tune").get<bool>();
  o.cell_fan_in = parse_cell_fan_in(doc.value("cell_init_fan_in", std::string("cell")));
  return o;
}

json plan_metadata(const WarehousePlan& plan) {
  json groups = json::array();
  for (const auto& g : plan.groups)
    groups.push_back({{"group", g.name},
                      {"cell_dims", g.cell.as_array()},
                      {"m_t", g.m_t},
                      {"n", g.n},
                      {"has_zero_cell", g.has_zero_cell}});
  return groups;
}

}  // namespace

TrainConfig train_config_from_json(const json& doc, const std::filesystem::path& base_dir) {
  TrainConfig cfg;
  try {
    cfg.arch_path = base_dir / doc.at("arch").get<std::string>();
    cfg.arch = load_arch_spec(cfg.arch_path);
    if (doc.contains("budget_b"))
      cfg.net.b = parse_budget(doc.at("budget_b"));
    else if (cfg.arch.budget)
      cfg.net.b = *cfg.arch.budget;
    if (doc.contains("cell_policy") && !doc.at("cell_policy").is_null())
      cfg.net.policy_override = parse_cell_policy(doc.at("cell_policy").get<std::string>());
    cfg.net.function = parse_attention_function(doc.value("attention_function", std::string("naf")));
    cfg.net.beta = parse_beta_spec(doc.value("beta_strategy", std::string("one_to_one")));
    cfg.net.num_classes = doc.value("num_classes", std::size_t(10));
    cfg.net.fine_tune = doc.value("fine_tune", false);
    cfg.net.cell_fan_in = parse_cell_fan_in(doc.value("cell_init_fan_in", std::string("cell")));

    const json opt = doc.value("optimizer", json::object());
    cfg.optimizer.lr = non_negative(opt, "lr", cfg.optimizer.lr);
    cfg.optimizer.momentum = non_negative(opt, "momentum", cfg.optimizer.momentum);
    cfg.optimizer.weight_decay = non_negative(opt, "weight_decay", cfg.optimizer.weight_decay);
    cfg.optimizer.schedule = parse_schedule(opt.value("schedule", std::string("cosine")));
    cfg.optimizer.step_epochs = opt.value("step_epochs", cfg.optimizer.step_epochs);
    cfg.optimizer.gamma = non_negative(opt, "gamma", cfg.optimizer.gamma);
    if (cfg.optimizer.step_epochs == 0) throw ConfigError("optimizer.step_epochs must be positive");

    cfg.epochs = doc.value("epochs", cfg.epochs);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    cfg.anneal_epochs = non_negative(doc, "anneal_epochs", cfg.anneal_epochs);
    cfg.seed = doc.value("seed", cfg.seed);
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");

    const json& ds = doc.at("dataset");
    cfg.dataset.path = base_dir / ds.at("path").get<std::string>();
    cfg.dataset.kind = ds.value("kind", std::string("idx"));
    cfg.dataset.split = ds.value("split", std::string("train"));
    cfg.dataset.limit = ds.value("limit", std::size_t(0));
    if (cfg.dataset.kind != "idx") throw ConfigError("unsupported dataset kind '" + cfg.dataset.kind + "'");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return train_config_from_json(doc, path.parent_path());
}

json to_json(const TrainConfig& c) {
  json doc = net_metadata(c.net);
  doc["arch"] = c.arch_path.lexically_normal().string();
  doc["optimizer"] = {{"lr", c.optimizer.lr},
                      {"momentum", c.optimizer.momentum},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"schedule", std::string(to_string(c.optimizer.schedule))},
                      {"step_epochs", c.optimizer.step_epochs},
                      {"gamma", c.optimizer.gamma}};
  doc["epochs"] = c.epochs;
  doc["batch_size"] = c.batch_size;
  doc["anneal_epochs"] = c.anneal_epochs;
  doc["seed"] = c.seed;
  doc["dataset"] = {{"path", c.dataset.path.lexically_normal().string()},
                    {"kind", c.dataset.kind},
                    {"split", c.dataset.split},
                    {"limit", c.dataset.limit}};
  return doc;
}

Real learning_rate_at(const OptimizerConfig& opt, std::size_t step, std::size_t steps_per_epoch,
                      std::size_t total_steps) {
  switch (opt.schedule) {
    case LrSchedule::constant: return opt.lr;
    case LrSchedule::cosine:
      if (total_steps == 0) return opt.lr;
      return opt.lr * 0.5 * (1 + std::cos(std::numbers::pi * Real(step) / Real(total_steps)));
    case LrSchedule::step: {
      const std::size_t epoch = steps_per_epoch ? step / steps_per_epoch : 0;
      return opt.lr * std::pow(opt.gamma, Real(epoch / opt.step_epochs));
    }
  }
  return opt.lr;
}

nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json doc;
  doc["epoch"] = r.epoch;
  doc["loss"] = r.loss;
  doc["train_loss"] = r.train_loss;
  doc["accuracy"] = r.accuracy;
  doc["tau"] = r.tau;
  doc["lr"] = r.lr;
  return doc;
}

EvalResult evaluate(const KWNet& net, const LabeledImages& data, Real tau, std::size_t batch) {
  if (data.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
  EvalResult result;
  result.samples = data.size();
  std::size_t correct = 0;
  Real loss_sum = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = net.logits(data.gather(idx), tau);
    const auto labels = data.gather_labels(idx);
    loss_sum += ops::softmax_cross_entropy(logits, labels) * Real(idx.size());
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Real* row = logits.ptr() + i * k;
      if (std::size_t(std::max_element(row, row + k) - row) == std::size_t(labels[i])) ++correct;
    }
  }
  result.loss = loss_sum / Real(data.size());
  result.accuracy = Real(correct) / Real(data.size());
  return result;
}

Checkpoint make_checkpoint(const KWNet& net, const std::map<std::string, Tensor>* momentum,
                           const json& extra_metadata) {
  Checkpoint ckpt;
  ckpt.metadata = extra_metadata;
  ckpt.metadata["arch"] = to_json(net.arch());
  ckpt.metadata["net"] = net_metadata(net.options());
  ckpt.metadata["plan"] = plan_metadata(net.plan());
  ckpt.metadata["init"] = {{"cells", "normal(0, sqrt(2 / cell fan-in))"},
                           {"affine_weights", "uniform(+-1/sqrt(fan-in))"},
                           {"biases", "zero"}};
  const auto values = net.parameter_values();
  std::vector<std::string> order;
  for (auto& p : const_cast<KWNet&>(net).parameters()) order.push_back(p.name);
  for (const auto& name : order) ckpt.add(name, values.at(name));
  if (momentum)
    for (const auto& name : order)
      if (auto it = momentum->find(name); it != momentum->end()) ckpt.add("optim/momentum/" + name, it->second);
  return ckpt;
}

void load_parameters(KWNet& net, const Checkpoint& ckpt) {
  if (ckpt.metadata.contains("plan") && ckpt.metadata.at("plan") != plan_metadata(net.plan()))
    throw CheckpointError("checkpoint warehouse plan " + ckpt.metadata.at("plan").dump() +
                          " does not match the model plan " + plan_metadata(net.plan()).dump());
  std::set<std::string> names;
  for (auto& p : net.parameters()) {
    if (!ckpt.has(p.name)) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    const Tensor& t = ckpt.tensor(p.name);
    if (t.shape() != p.value->shape())
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(t.shape()) + " in the checkpoint, " +
                            shape_str(p.value->shape()) + " in the model");
    names.insert(p.name);
  }
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind("optim/", 0) != 0 && !names.contains(name))
      throw CheckpointError("checkpoint has unexpected tensor '" + name + "'");
  for (auto& p : net.parameters()) *p.value = ckpt.tensor(p.name);
}

KWNet restore_model(const Checkpoint& ckpt) {
  try {
    KWNet net(arch_from_json(ckpt.metadata.at("arch")), net_options_from(ckpt.metadata.at("net")));
    load_parameters(net, ckpt);
    return net;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
}

TrainResult train(const TrainConfig& config, const std::filesystem::path& run_dir, std::ostream* log) {
  std::filesystem::create_directories(run_dir);
  const LabeledImages data = load_idx_split(config.dataset.path, config.dataset.split, config.dataset.limit);
  for (int label : data.labels)
    if (label < 0 || std::size_t(label) >= config.net.num_classes)
      throw ConfigError("label " + std::to_string(label) + " outside [0, " + std::to_string(config.net.num_classes) +
                        ")");

  KWNet net(config.arch, config.net);
  net.initialize(config.seed);

  const std::size_t n = data.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const TemperatureSchedule schedule{std::size_t(std::llround(config.anneal_epochs * Real(steps_per_epoch)))};

  std::map<std::string, Tensor> momentum;
  for (const auto& [name, value] : net.parameter_values()) momentum.emplace(name, Tensor(value.shape()));

  TrainResult result;
  result.initial_loss = evaluate(net, data, temperature_at(schedule, 0)).loss;

  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw TrainingError("cannot write " + (run_dir / "metrics.jsonl").string());

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  Real lr = learning_rate_at(config.optimizer, 0, steps_per_epoch, total_steps);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Real loss_sum = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(n, start + config.batch_size) - start);
      const Real tau = temperature_at(schedule, step);
      lr = learning_rate_at(config.optimizer, step, steps_per_epoch, total_steps);

      ad::Tape tape;
      const auto trace = net.forward(tape, data.gather(idx), tau);
      const ad::Var loss = ad::softmax_cross_entropy(tape, trace.logits, data.gather_labels(idx));
      const Real loss_value = tape.value(loss)[0];
      if (step == 0) {
        for (const auto& a : trace.alphas) result.initial_alphas.push_back(tape.value(a));
        result.first_batch.assign(idx.begin(), idx.end());
      }
      if (!std::isfinite(loss_value)) {
        std::string where = "classifier";
        for (std::size_t li = 0; li < trace.activations.size(); ++li)
          if (!tape.value(trace.activations[li]).all_finite()) {
            where = "layer '" + net.layers()[li].spec.id + "'";
            break;
          }
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                            "); first non-finite activation: " + where);
      }
      loss_sum += loss_value * Real(idx.size());

      const auto grads = ad::backprop_gradients(tape, loss);
      for (auto& p : net.parameters()) {
        Tensor& v = momentum.at(p.name);
        const Tensor& g = grads.at(p.name);
        Real* vp = v.ptr();
        Real* w = p.value->ptr();
        const Real* gp = g.ptr();
        for (std::size_t i = 0; i < v.size(); ++i) {
          vp[i] = config.optimizer.momentum * vp[i] + gp[i] + config.optimizer.weight_decay * w[i];
          w[i] -= lr * vp[i];
        }
      }
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / Real(n);
    rec.tau = temperature_at(schedule, step);
    rec.lr = lr;
    const EvalResult full = evaluate(net, data, rec.tau);
    rec.train_loss = full.loss;
    rec.accuracy = full.accuracy;
    result.epochs.push_back(rec);
    metrics << to_json(rec).dump() << '\n';
    metrics.flush();
    if (log) *log << to_json(rec).dump() << '\n';
  }
  result.steps = step;
  result.final_loss =
      result.epochs.empty() ? result.initial_loss : result.epochs.back().train_loss;

  json meta;
  meta["config"] = to_json(config);
  meta["state"] = {{"step", step}, {"epoch", config.epochs}, {"tau", temperature_at(schedule, step)}};
  result.checkpoint = run_dir / "checkpoint.kwck";
  save_checkpoint(make_checkpoint(net, &momentum, meta), result.checkpoint);

  nlohmann::ordered_json summary;
  summary["initial_loss"] = result.initial_loss;
  summary["final_loss"] = result.final_loss;
  summary["steps"] = result.steps;
  summary["epochs"] = config.epochs;
  summary["steps_per_epoch"] = steps_per_epoch;
  summary["anneal_steps"] = schedule.anneal_steps;
  std::ofstream(run_dir / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  return result;
}

}  // namespace kw
