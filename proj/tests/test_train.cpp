#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "kw/checkpoint.hpp"
#include "kw/dataset.hpp"
#include "kw/gradcheck.hpp"
#include "kw/stats.hpp"
#include "kw/train.hpp"
#include "support.hpp"

using namespace kw;
namespace fs = std::filesystem;

namespace {

const fs::path kData = KW_DATA_DIR;

// The smoke config on a smaller slice, so each run takes a fraction of a second.
TrainConfig small_config(std::size_t limit = 64, std::size_t epochs = 1) {
  TrainConfig c = load_train_config(kData / "configs" / "smoke.json");
  c.dataset.limit = limit;
  c.epochs = epochs;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_pair(const kwtest::TempDir& dir, const std::vector<std::uint8_t>& images,
                const std::vector<std::uint8_t>& labels) {
  kwtest::write_bytes(dir / "train-images-idx3-ubyte", images);
  kwtest::write_bytes(dir / "train-labels-idx1-ubyte", labels);
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("idx fixtures load and standardize") {
  kwtest::TempDir dir("idx");
  write_pair(dir, kwtest::idx_images(5, 4, 3, 11), kwtest::idx_labels({3, 1, 4, 1, 5}));
  const LabeledImages d = load_idx_split(dir.path(), "train");
  REQUIRE(d.size() == 5);
  CHECK(d.images.shape() == Shape{5, 1, 4, 3});
  CHECK(d.labels == std::vector<int>{3, 1, 4, 1, 5});
  Real mean = 0, sq = 0;
  for (Real v : d.images.data()) mean += v;
  mean /= Real(d.images.size());
  for (Real v : d.images.data()) sq += (v - mean) * (v - mean);
  CHECK(std::abs(mean) <= 1e-12);
  CHECK(sq / Real(d.images.size()) == doctest::Approx(1.0).epsilon(1e-12));
  // Raw pixel order survives standardization: pixel (seed + 7i + j) mod 256 is
  // increasing along j within the first image.
  CHECK(d.images.at(0, 0, 0, 1) > d.images.at(0, 0, 0, 0));

  const LabeledImages two = load_idx_split(dir.path(), "train", 2);
  CHECK(two.size() == 2);
  CHECK(two.labels == std::vector<int>{3, 1});

  const std::vector<std::size_t> pick{4, 0};
  CHECK(d.gather(pick).shape() == Shape{2, 1, 4, 3});
  CHECK(d.gather_labels(pick) == std::vector<int>{5, 3});
}

TEST_CASE("idx format errors name the file and offset") {
  kwtest::TempDir dir("idxerr");
  const auto labels = kwtest::idx_labels({0, 1, 2});

  SUBCASE("bad image magic") {
    auto img = kwtest::idx_images(3, 2, 2);
    img[3] = 0x01;
    write_pair(dir, img, labels);
    const std::string msg = error_of([&] { load_idx_split(dir.path(), "train"); });
    CHECK(msg.find("bad image magic") != std::string::npos);
    CHECK(msg.find("byte offset 0") != std::string::npos);
    CHECK(msg.find("train-images-idx3-ubyte") != std::string::npos);
  }
  SUBCASE("bad label magic") {
    auto lab = labels;
    lab[3] = 0x03;
    write_pair(dir, kwtest::idx_images(3, 2, 2), lab);
    CHECK_THROWS_AS(load_idx_split(dir.path(), "train"), DatasetFormatError);
  }
  SUBCASE("count mismatch") {
    write_pair(dir, kwtest::idx_images(4, 2, 2), labels);
    CHECK(error_of([&] { load_idx_split(dir.path(), "train"); }).find("count mismatch") != std::string::npos);
  }
  SUBCASE("truncated pixels") {
    auto img = kwtest::idx_images(3, 2, 2);
    img.resize(img.size() - 1);
    write_pair(dir, img, labels);
    const std::string msg = error_of([&] { load_idx_split(dir.path(), "train"); });
    CHECK(msg.find("truncated pixel data") != std::string::npos);
  }
  SUBCASE("truncated header") {
    write_pair(dir, {0, 0, 8}, labels);
    CHECK(error_of([&] { load_idx_split(dir.path(), "train"); }).find("truncated header") != std::string::npos);
  }
  SUBCASE("missing file and unknown split") {
    CHECK_THROWS_AS(load_idx_split(dir.path(), "train"), DatasetFormatError);
    CHECK_THROWS_AS(load_idx_split(dir.path(), "validation"), std::invalid_argument);
  }
}

TEST_CASE("bundled digit subsets") {
  const LabeledImages train = load_idx_split(kData / "mnist", "train");
  const LabeledImages test = load_idx_split(kData / "mnist", "test");
  CHECK(train.size() == 512);
  CHECK(test.size() == 1024);
  CHECK(train.images.shape() == Shape{512, 1, 28, 28});
  std::vector<int> seen(10, 0);
  for (int l : train.labels) {
    REQUIRE(l >= 0);
    REQUIRE(l < 10);
    ++seen[std::size_t(l)];
  }
  for (int c : seen) CHECK(c > 0);
}

TEST_CASE("checkpoint container round trip") {
  std::mt19937_64 rng(31);
  Checkpoint c;
  c.metadata = {{"note", "x"}, {"n", 3}};
  c.add("a", kwtest::randn({2, 3}, rng));
  c.add("b/c", kwtest::randn({4}, rng));
  c.add("scalar", Tensor({1}, -0.0));
  const auto bytes = serialize_checkpoint(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "KWCK");
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.metadata == c.metadata);
  REQUIRE(back.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].first == c.tensors[i].first);
    CHECK(back.tensors[i].second == c.tensors[i].second);
  }
  CHECK(std::signbit(back.tensor("scalar")[0]));
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK_THROWS_AS(c.add("a", Tensor({1})), CheckpointError);
  CHECK_THROWS_AS(back.tensor("missing"), CheckpointError);
}

TEST_CASE("checkpoint corruption is rejected") {
  Checkpoint c;
  c.add("w", Tensor({3}, {1, 2, 3}));
  const auto good = serialize_checkpoint(c);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(error_of([&] { parse_checkpoint(bad_magic); }).find("bad magic") != std::string::npos);

  auto bad_version = good;
  bad_version[4] = 9;
  CHECK(error_of([&] { parse_checkpoint(bad_version); }).find("version") != std::string::npos);

  CHECK_THROWS_AS(parse_checkpoint(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), CheckpointError);
  CHECK_THROWS_AS(parse_checkpoint(std::vector<std::uint8_t>(good.begin(), good.end() - 8)), CheckpointError);
  auto extra = good;
  extra.push_back(0);
  CHECK_THROWS_AS(parse_checkpoint(extra), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.kwck"), CheckpointError);
}

TEST_CASE("model checkpoints restore and reject mismatches") {
  const TrainConfig cfg = small_config();
  KWNet net(cfg.arch, cfg.net);
  net.initialize(5);
  const Checkpoint ckpt = make_checkpoint(net, nullptr, {{"tag", "t"}});
  kwtest::TempDir dir("ckpt");
  save_checkpoint(ckpt, dir / "a.kwck");
  const Checkpoint loaded = load_checkpoint(dir / "a.kwck");
  save_checkpoint(loaded, dir / "b.kwck");
  CHECK(kwtest::read_bytes(dir / "a.kwck") == kwtest::read_bytes(dir / "b.kwck"));

  const KWNet restored = restore_model(loaded);
  CHECK(restored.parameter_values() == net.parameter_values());
  std::mt19937_64 rng(32);
  const Tensor x = kwtest::randn({3, 1, 28, 28}, rng);
  CHECK(restored.logits(x, 0) == net.logits(x, 0));
  CHECK(restored.logits(x, 0.5) == net.logits(x, 0.5));

  SUBCASE("different budget") {
    NetOptions o = cfg.net;
    o.b = Rational::make(2, 1);
    KWNet other(cfg.arch, o);
    CHECK(error_of([&] { load_parameters(other, loaded); }).find("warehouse plan") != std::string::npos);
  }
  SUBCASE("missing tensor") {
    Checkpoint partial = loaded;
    partial.metadata.erase("plan");
    partial.tensors.erase(partial.tensors.begin());
    KWNet other(cfg.arch, cfg.net);
    CHECK(error_of([&] { load_parameters(other, partial); }).find("lacks parameter") != std::string::npos);
  }
  SUBCASE("reshaped tensor") {
    Checkpoint reshaped = loaded;
    reshaped.metadata.erase("plan");
    auto& [name, t] = reshaped.tensors.back();
    t = Tensor({t.size() + 1});
    KWNet other(cfg.arch, cfg.net);
    CHECK(error_of([&] { load_parameters(other, reshaped); }).find("has shape") != std::string::npos);
  }
  SUBCASE("unexpected tensor") {
    Checkpoint extra = loaded;
    extra.add("stray", Tensor({1}));
    KWNet other(cfg.arch, cfg.net);
    CHECK(error_of([&] { load_parameters(other, extra); }).find("unexpected tensor 'stray'") != std::string::npos);
  }
}

TEST_CASE("config parsing") {
  const TrainConfig c = load_train_config(kData / "configs" / "smoke.json");
  CHECK(c.epochs == 2);
  CHECK(c.dataset.limit == 512);
  CHECK(c.net.b == Rational::make(1, 1));
  CHECK(c.arch.layers.size() == 3);
  CHECK(fs::exists(c.dataset.path));

  const TrainConfig again = train_config_from_json(to_json(c), "/");
  CHECK(to_json(again) == to_json(c));

  auto base = nlohmann::json::parse(slurp(kData / "configs" / "smoke.json"));
  auto with = [&](auto edit) {
    auto d = base;
    edit(d);
    return d;
  };
  const fs::path dir = kData / "configs";
  CHECK_THROWS_AS(train_config_from_json(with([](auto& d) { d["optimizer"]["schedule"] = "linear"; }), dir),
                  ConfigError);
  CHECK_THROWS_AS(train_config_from_json(with([](auto& d) { d["optimizer"]["lr"] = -1; }), dir), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(with([](auto& d) { d["batch_size"] = 0; }), dir), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(with([](auto& d) { d.erase("dataset"); }), dir), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(with([](auto& d) { d["cell_init_fan_in"] = "layer"; }), dir),
                  ConfigError);
  CHECK_THROWS_AS(load_train_config("/nonexistent.json"), ConfigError);
}

TEST_CASE("learning rate schedules") {
  OptimizerConfig o;
  o.lr = 0.1;
  o.schedule = LrSchedule::cosine;
  CHECK(learning_rate_at(o, 0, 10, 100) == 0.1);
  CHECK(learning_rate_at(o, 50, 10, 100) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK(std::abs(learning_rate_at(o, 100, 10, 100)) <= 1e-16);
  o.schedule = LrSchedule::step;
  o.step_epochs = 2;
  o.gamma = 0.5;
  CHECK(learning_rate_at(o, 19, 10, 100) == 0.1);
  CHECK(learning_rate_at(o, 20, 10, 100) == 0.05);
  CHECK(learning_rate_at(o, 45, 10, 100) == 0.025);
  o.schedule = LrSchedule::constant;
  CHECK(learning_rate_at(o, 77, 10, 100) == 0.1);
}

TEST_CASE("zero epochs write an untrained checkpoint") {
  kwtest::TempDir dir("zero");
  const TrainConfig cfg = small_config(64, 0);
  const TrainResult r = train(cfg, dir.path());
  CHECK(r.steps == 0);
  CHECK(r.epochs.empty());
  CHECK(r.final_loss == r.initial_loss);
  CHECK(slurp(dir / "metrics.jsonl").empty());
  KWNet fresh(cfg.arch, cfg.net);
  fresh.initialize(cfg.seed);
  CHECK(restore_model(load_checkpoint(r.checkpoint)).parameter_values() == fresh.parameter_values());
}

TEST_CASE("same seed, same run") {
  kwtest::TempDir a("runa"), b("runb");
  const TrainConfig cfg = small_config(64, 2);
  const TrainResult ra = train(cfg, a.path());
  const TrainResult rb = train(cfg, b.path());
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
  CHECK(kwtest::read_bytes(a / "checkpoint.kwck") == kwtest::read_bytes(b / "checkpoint.kwck"));
  CHECK(ra.initial_loss == rb.initial_loss);

  TrainConfig other = cfg;
  other.seed += 1;
  kwtest::TempDir c("runc");
  train(other, c.path());
  CHECK(slurp(a / "metrics.jsonl") != slurp(c / "metrics.jsonl"));
}

TEST_CASE("logged temperature follows the schedule") {
  kwtest::TempDir dir("tau");
  TrainConfig cfg = small_config(64, 3);
  cfg.anneal_epochs = 2.5;
  const TrainResult r = train(cfg, dir.path());
  const std::size_t spe = (64 + cfg.batch_size - 1) / cfg.batch_size;
  REQUIRE(r.epochs.size() == 3);
  REQUIRE(r.steps == 3 * spe);
  const TemperatureSchedule s{std::size_t(std::llround(2.5 * Real(spe)))};
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(r.epochs[e].epoch == e + 1);
    CHECK(r.epochs[e].tau == temperature_at(s, (e + 1) * spe));
    CHECK(std::isfinite(r.epochs[e].loss));
  }
  CHECK(r.epochs[1].tau > 0);
  CHECK(r.epochs[2].tau == 0);

  std::istringstream lines(slurp(dir / "metrics.jsonl"));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto doc = nlohmann::json::parse(line);
    CHECK(doc.at("tau").get<Real>() == r.epochs[count].tau);
    CHECK(doc.at("train_loss").get<Real>() == r.epochs[count].train_loss);
    ++count;
  }
  CHECK(count == 3);
}

TEST_CASE("untrained network is at chance on held-out digits") {
  const TrainConfig cfg = small_config();
  KWNet net(cfg.arch, cfg.net);
  net.initialize(cfg.seed);
  const LabeledImages test = load_idx_split(kData / "mnist", "test");
  const EvalResult r = evaluate(net, test);
  CHECK(r.samples == 1024);
  CHECK(r.accuracy <= 0.2);
  CHECK(std::isfinite(r.loss));
  CHECK_THROWS_AS(evaluate(net, LabeledImages{}), std::invalid_argument);
}

TEST_CASE("trained smoke checkpoint beats chance on held-out digits") {
  kwtest::TempDir dir("smoke");
  const TrainResult r = train(load_train_config(kData / "configs" / "smoke.json"), dir.path());
  const KWNet net = restore_model(load_checkpoint(r.checkpoint));
  const EvalResult e = evaluate(net, load_idx_split(kData / "mnist", "test"));
  CHECK(e.accuracy > 0.2);
  CHECK(r.final_loss < std::log(10.0));
}

TEST_CASE("attention statistics") {
  const TrainConfig cfg = small_config(32);
  KWNet net(cfg.arch, cfg.net);
  net.initialize(cfg.seed);
  const LabeledImages data = load_idx_split(cfg.dataset.path, "train", 32);
  SUBCASE("at tau = 1 the mean attention is the beta table") {
    const auto stats = collect_attention_stats(net, data, 1);
    REQUIRE(stats.size() == net.plan().groups.size());
    for (std::size_t g = 0; g < stats.size(); ++g) {
      const GroupPlan& plan = net.plan().groups[g];
      CHECK(stats[g].group == plan.name);
      CHECK(stats[g].mean.shape() == Shape{plan.m_t, plan.n_cols()});
      CHECK(stats[g].row_labels.size() == plan.m_t);
      CHECK(stats[g].col_labels.size() == plan.n_cols());
      for (std::size_t r = 0; r < plan.m_t; ++r)
        for (std::size_t c = 0; c < plan.n_cols(); ++c)
          CHECK(stats[g].mean.at(r, c) == Real(net.beta_tables()[g].at(r, c)));
      CHECK(stats[g].diagonal_ratio() == 1.0);
    }
    const std::string csv = attention_stats_csv(stats[0]);
    CHECK(csv.rfind("slot,e1,", 0) == 0);
    std::size_t rows = 0;
    for (char ch : csv) rows += ch == '\n';
    CHECK(rows == 1 + net.plan().groups[0].m_t);
  }
  SUBCASE("files") {
    kwtest::TempDir dir("stats");
    const auto paths = write_attention_stats(collect_attention_stats(net, data, 0), dir.path());
    REQUIRE(paths.size() == net.plan().groups.size());
    for (const auto& p : paths) CHECK(fs::file_size(p) > 0);
  }
  CHECK_THROWS_AS(collect_attention_stats(net, LabeledImages{}), std::invalid_argument);
}

TEST_CASE("initial attention per beta strategy") {
  for (const std::string strategy : {"one_to_one", "all_to_one", "none"}) {
    CAPTURE(strategy);
    kwtest::TempDir dir("beta");
    // The full smoke set: on a tiny slice the anneal rounds to zero steps.
    TrainConfig cfg = small_config(512, 1);
    cfg.net.beta = parse_beta_spec(strategy);
    const TrainResult r = train(cfg, dir.path());
    REQUIRE(std::isfinite(r.final_loss));
    KWNet net(cfg.arch, cfg.net);
    net.initialize(cfg.seed);
    const LabeledImages data = load_idx_split(cfg.dataset.path, "train", 512);
    const auto raw = net.run(data.gather(r.first_batch), 0).alphas;
    REQUIRE(r.initial_alphas.size() == net.layers().size());
    for (std::size_t li = 0; li < net.layers().size(); ++li) {
      const Tensor& a = r.initial_alphas[li];
      const Tensor& beta = net.layers()[li].beta;
      if (strategy == "none") {
        REQUIRE(a.size() == raw[li].size());
        CHECK(max_abs_diff(a, raw[li].reshaped(a.shape())) == 0);
      } else {
        // Rows of a are flattened [m * n_cols] blocks, one per sample.
        REQUIRE(a.size() == a.dim(0) * beta.size());
        for (std::size_t n = 0; n < a.dim(0); ++n)
          for (std::size_t k = 0; k < beta.size(); ++k) CHECK(a[n * beta.size() + k] == beta[k]);
      }
    }
  }
}

TEST_CASE("gradcheck on the miniature network") {
  const TrainConfig cfg = load_train_config(kData / "configs" / "gradcheck.json");
  const std::array<Real, 3> taus{0.0, 0.37, 1.0};
  const GradcheckReport report = gradcheck(cfg.arch, cfg.net, taus, {.seed = cfg.seed});
  REQUIRE(report.runs.size() == 3);
  for (const auto& run : report.runs) {
    CHECK(run.families.size() == 7);
    for (const auto& f : run.families) {
      CAPTURE(f.family);
      CHECK(f.coords > 0);
      CHECK(f.max_rel_error <= 1e-4);
    }
  }
  CHECK(report.passed(1e-4));
  CHECK(format_gradcheck(report, 1e-4).find("PASS") != std::string::npos);
  CHECK(parameter_family("layer/conv2/attention/fc1.weight") == "attention.fc1.weight");
  CHECK(parameter_family("warehouse/w/cells") == "warehouse.cells");
}
