#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kw/checkpoint.hpp"
#include "kw/dataset.hpp"
#include "kw/model.hpp"

namespace kw {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LrSchedule { constant, cosine, step };

struct OptimizerConfig {
  Real lr = 0.05;
  Real momentum = 0.9;
  Real weight_decay = 1e-4;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t step_epochs = 1;  // step schedule: decay every step_epochs
  Real gamma = 0.1;             // step schedule: decay factor
};

struct DatasetConfig {
  std::filesystem::path path;
  std::string kind = "idx";
  std::string split = "train";
  std::size_t limit = 0;
};

struct TrainConfig {
  std::filesystem::path arch_path;
  ArchSpec arch;
  NetOptions net;
  OptimizerConfig optimizer;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  Real anneal_epochs = 1;  // may be fractional; rounded to whole steps
  std::uint64_t seed = 0;
  DatasetConfig dataset;
};

// Relative paths in the document resolve against base_dir.
TrainConfig train_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
TrainConfig load_train_config(const std::filesystem::path& path);
nlohmann::json to_json(const TrainConfig& config);

Real learning_rate_at(const OptimizerConfig& opt, std::size_t step, std::size_t steps_per_epoch,
                      std::size_t total_steps);

struct EpochRecord {
  std::size_t epoch = 0;
  Real loss = 0;        // mean mini-batch loss over the epoch
  Real train_loss = 0;  // full pass over the training set after the epoch
  Real accuracy = 0;
  Real tau = 0;  // temperature for the next step
  Real lr = 0;   // learning rate of the epoch's last step
};

nlohmann::ordered_json to_json(const EpochRecord& record);

struct TrainResult {
  Real initial_loss = 0;  // full-pass training loss before the first step
  Real final_loss = 0;    // full-pass training loss after the last epoch
  std::size_t steps = 0;
  std::vector<EpochRecord> epochs;
  std::filesystem::path checkpoint;
  std::vector<Tensor> initial_alphas;  // per layer, alpha of the first batch at step 0
  std::vector<std::size_t> first_batch;  // sample indices of that batch
};

// Writes metrics.jsonl, summary.json and checkpoint.kwck into run_dir.
TrainResult train(const TrainConfig& config, const std::filesystem::path& run_dir, std::ostream* log = nullptr);

struct EvalResult {
  Real accuracy = 0;
  Real loss = 0;
  std::size_t samples = 0;
};

EvalResult evaluate(const KWNet& net, const LabeledImages& data, Real tau = 0, std::size_t batch = 128);

// Parameters, optimizer momentum ("optim/momentum/<name>") and enough metadata
// to rebuild the network.
Checkpoint make_checkpoint(const KWNet& net, const std::map<std::string, Tensor>* momentum,
                           const nlohmann::json& extra_metadata);

// Rebuilds the network from checkpoint metadata and loads its parameters.
KWNet restore_model(const Checkpoint& ckpt);

// Loads parameters into an existing network. Missing, extra or reshaped
// tensors and a differing warehouse plan raise CheckpointError.
void load_parameters(KWNet& net, const Checkpoint& ckpt);

}  // namespace kw
