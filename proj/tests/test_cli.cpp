#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "stackcap/commands.hpp"

using namespace stackcap;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stackcap_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Config tiny_config(const fs::path& out) {
  Config c;
  c.n_train = 24;
  c.n_val = 8;
  c.embed_dim = 8;
  c.hidden_dim = c.attention_dim = 12;
  c.xe_epochs = 2;
  c.rl_epochs = 1;
  c.xe_batch_size = 8;
  c.rl_batch_size = 8;
  c.out_dir = out.string();
  return c;
}

std::vector<json> read_log(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(STACKCAP_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsMatchTheDeskSetup) {
  const Config c;
  EXPECT_EQ(c.n_train, 2000u);
  EXPECT_EQ(c.n_val, 200u);
  EXPECT_EQ(c.hidden_dim, 64u);
  EXPECT_EQ(c.xe_epochs, 30u);
  EXPECT_EQ(c.xe_lr, 4e-4);
  EXPECT_EQ(c.rl_lr, 5e-5);
  EXPECT_EQ(c.adam_beta1, 0.9);
  EXPECT_EQ(c.beam_width, 5u);
  EXPECT_EQ(c.clip_norm, 5.0);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(json{{"hiden_dim", 32}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"hidden_dim", -3}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"hidden_dim", "big"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"xe_lr", 0.0}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"baseline", "triple"}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"hidden_dim", 32}}), ConfigError);  // attention_dim differs
  EXPECT_THROW(config_from_json(json::array()), ConfigError);
  const Config c = config_from_json(json{{"hidden_dim", 32}, {"attention_dim", 32}, {"seed", 9}});
  EXPECT_EQ(c.hidden_dim, 32u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.n_train, 2000u);
}

TEST(Config, RoundTripsThroughJsonAndHashesStably) {
  Config c;
  c.seed = 17;
  c.reward_metric = "mix";
  const Config back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
  Config d = c;
  d.rl_epochs = 11;
  EXPECT_NE(config_hash(d), config_hash(c));
  EXPECT_EQ(model_hash(d), model_hash(c));
  d.hidden_dim = d.attention_dim = 32;
  EXPECT_NE(model_hash(d), model_hash(c));
  EXPECT_EQ(fnv1a64(""), 0xCBF29CE484222325ull);
  EXPECT_EQ(hex64(fnv1a64("a")), "af63dc4c8601ec8c");
}

TEST(Config, LoadReportsMissingFile) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  const fs::path dir = scratch("cfg");
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config((dir / "bad.json").string()), ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Checkpoint sample_checkpoint(bool with_adam) {
  Config cfg = tiny_config("unused");
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  ck.model_hash = model_hash(cfg);
  ck.phase = "xe";
  ck.epoch = 3;
  ck.best_val_cider = 0.25;
  ck.config = to_json(cfg);
  ck.params = init_model(model_dims(cfg, 19), 5);
  if (with_adam) {
    AdamState st;
    auto refs = parameter_refs(ck.params);
    std::vector<Tensor> grads;
    Rng rng(2);
    for (auto* p : refs) grads.push_back(uniform_tensor(p->shape(), rng, 1.0));
    ModelParams copy = ck.params;
    adam_update(parameter_refs(copy), grads, st, AdamConfig{});
    ck.adam = st;
  }
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (bool adam : {false, true}) {
    const Checkpoint ck = sample_checkpoint(adam);
    std::stringstream a;
    write_checkpoint(a, ck);
    const std::string bytes = a.str();
    EXPECT_EQ(bytes.substr(0, 8), "SCAPCKPT");
    std::istringstream in(bytes);
    const Checkpoint back = read_checkpoint(in, ck.params.dims);
    EXPECT_EQ(back.params.tensors(), ck.params.tensors());
    EXPECT_EQ(back.epoch, 3u);
    EXPECT_EQ(back.phase, "xe");
    EXPECT_EQ(back.best_val_cider, 0.25);
    EXPECT_EQ(back.adam.has_value(), adam);
    std::stringstream b;
    write_checkpoint(b, back);
    EXPECT_EQ(b.str(), bytes);
  }
}

TEST(Checkpoint, RejectsCorruptOrMismatchedFiles) {
  const Checkpoint ck = sample_checkpoint(true);
  std::stringstream s;
  write_checkpoint(s, ck);
  const std::string bytes = s.str();
  auto read = [&](const std::string& data, const ModelDims& dims) {
    std::istringstream in(data);
    return read_checkpoint(in, dims);
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(read(bad_magic, ck.params.dims), CheckpointError);
  EXPECT_THROW(read(bytes.substr(0, bytes.size() - 9), ck.params.dims), CheckpointError);
  EXPECT_THROW(read(bytes + "x", ck.params.dims), CheckpointError);
  ModelDims other = ck.params.dims;
  other.hidden_dim = other.attention_dim = 16;
  EXPECT_THROW(read(bytes, other), CheckpointError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(read(bad_version, ck.params.dims), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt", ck.params.dims), CheckpointError);
}

// ---------------------------------------------------------------------------
// Logs

TEST(Log, RecordsMatchTheSchema) {
  EpochRecord xe;
  xe.phase = "xe";
  xe.epoch = 1;
  xe.per_stage_losses = {3.0, 2.5, 2.0};
  EXPECT_NO_THROW(commands::validate_log_record(commands::epoch_json(xe, "0123456789abcdef")));
  EpochRecord rl;
  rl.phase = "rl";
  rl.epoch = 2;
  rl.per_stage_rewards = {{0.5, 0.4, 0.3, 0.3}, {0.6, 0.5, 0.5, 0.2}};
  const json j = commands::epoch_json(rl, "0123456789abcdef");
  EXPECT_NO_THROW(commands::validate_log_record(j));
  EXPECT_EQ(j["per_stage_rewards"][1]["stage"], 2);
  json broken = j;
  broken.erase("val_cider");
  EXPECT_THROW(commands::validate_log_record(broken), std::invalid_argument);
  broken = j;
  broken["phase"] = "warmup";
  EXPECT_THROW(commands::validate_log_record(broken), std::invalid_argument);
  EpochRecord empty;
  empty.phase = "xe";
  empty.epoch = 1;
  EXPECT_THROW(commands::validate_log_record(commands::epoch_json(empty, "abc")), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Commands end to end on a tiny config

class CommandsTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("commands");
    cfg_ = tiny_config(dir_);
    xe_ = commands::train_xe(cfg_, std::nullopt);
    rl_ = commands::train_rl(cfg_, xe_.best_path.string());
  }
  static inline fs::path dir_;
  static inline Config cfg_;
  static inline commands::TrainOutcome xe_, rl_;
};

TEST_F(CommandsTest, TrainingWritesLogsAndCheckpoints) {
  for (const char* f : {"xe_last.ckpt", "xe_best.ckpt", "xe_log.jsonl", "rl_last.ckpt", "rl_best.ckpt", "rl_log.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  }
  const auto xe_log = read_log(dir_ / "xe_log.jsonl");
  ASSERT_EQ(xe_log.size(), 2u);
  for (const auto& j : xe_log) EXPECT_NO_THROW(commands::validate_log_record(j));
  EXPECT_EQ(xe_log[1]["epoch"], 2);
  const auto rl_log = read_log(dir_ / "rl_log.jsonl");
  ASSERT_EQ(rl_log.size(), 1u);
  EXPECT_NO_THROW(commands::validate_log_record(rl_log[0]));
  EXPECT_EQ(rl_log[0]["epoch"], 1);
  const auto ck = load_checkpoint((dir_ / "xe_last.ckpt").string(), model_dims(cfg_, 19));
  EXPECT_TRUE(ck.adam.has_value());
  EXPECT_EQ(ck.epoch, 2u);
  EXPECT_FALSE(load_checkpoint((dir_ / "xe_best.ckpt").string(), model_dims(cfg_, 19)).adam.has_value());
}

TEST_F(CommandsTest, ResumeContinuesTheEpochCounter) {
  const fs::path dir = scratch("resume");
  Config c = cfg_;
  c.out_dir = dir.string();
  c.xe_epochs = 1;
  commands::train_xe(c, std::nullopt);
  c.xe_epochs = 3;
  const auto r = commands::train_xe(c, (dir / "xe_last.ckpt").string());
  EXPECT_EQ(r.last_epoch, 3u);
  const auto log = read_log(dir / "xe_log.jsonl");
  ASSERT_EQ(log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(log[i]["epoch"], i + 1);

  // resuming yields the same parameters as an uninterrupted run
  const fs::path straight = scratch("straight");
  Config s = c;
  s.out_dir = straight.string();
  commands::train_xe(s, std::nullopt);
  const auto a = load_checkpoint((straight / "xe_last.ckpt").string(), model_dims(c, 19));
  const auto b = load_checkpoint((dir / "xe_last.ckpt").string(), model_dims(c, 19));
  EXPECT_EQ(a.params.tensors(), b.params.tensors());
}

TEST_F(CommandsTest, IncompatibleCheckpointIsRejected) {
  Config other = cfg_;
  other.hidden_dim = other.attention_dim = 16;
  EXPECT_THROW(commands::eval(other, xe_.best_path.string(), "val", 0), CheckpointError);
  EXPECT_THROW(commands::train_xe(cfg_, (dir_ / "rl_last.ckpt").string()), CheckpointError);
}

TEST_F(CommandsTest, EvalIsDeterministicAndBeamOneEqualsGreedy) {
  const json a = commands::eval(cfg_, rl_.best_path.string(), "val", 1);
  const json b = commands::eval(cfg_, rl_.best_path.string(), "val", 1);
  EXPECT_EQ(a.dump(), b.dump());
  ASSERT_EQ(a["greedy"].size(), 3u);
  EXPECT_EQ(a["images"], 8);
  EXPECT_DOUBLE_EQ(a["beam"]["cider"].get<double>(), a["greedy"][2]["cider"].get<double>());
  EXPECT_DOUBLE_EQ(a["greedy"][2]["cider_x10"].get<double>(), 10 * a["greedy"][2]["cider"].get<double>());
  EXPECT_THROW(commands::eval(cfg_, rl_.best_path.string(), "test", 0), std::invalid_argument);
}

TEST_F(CommandsTest, DecodeListsEveryStage) {
  const json j = commands::decode(cfg_, xe_.best_path.string(), 3, std::nullopt, 2);
  EXPECT_EQ(j["scene_id"], 3);
  EXPECT_EQ(j["stages"].size(), 3u);
  EXPECT_EQ(j["references"].size(), 3u);
  EXPECT_EQ(j["beam"]["width"], 2);
  const json fresh = commands::decode(cfg_, xe_.best_path.string(), std::nullopt, 1234, 0);
  EXPECT_FALSE(fresh.contains("beam"));
  EXPECT_THROW(commands::decode(cfg_, xe_.best_path.string(), 99999, std::nullopt, 0), std::out_of_range);
}

TEST_F(CommandsTest, AttentionExportHasOneNormalisedGridPerFineStageStep) {
  const json j = commands::export_attention(cfg_, xe_.best_path.string(), 30, std::nullopt);
  EXPECT_EQ(j["grid"], 4);
  std::map<std::size_t, std::size_t> per_stage;
  for (const auto& m : j["maps"]) {
    ++per_stage[m["stage"].get<std::size_t>()];
    double s = 0.0;
    ASSERT_EQ(m["alpha"].size(), 4u);
    for (const auto& row : m["alpha"]) {
      for (double a : row) s += a;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  ASSERT_EQ(per_stage.size(), 2u);
  const auto ex = load_dataset(cfg_).find(30);
  const auto params = load_checkpoint(xe_.best_path.string(), model_dims(cfg_, 19)).params;
  const auto ro = rollout_greedy(params, ex.features);
  EXPECT_EQ(per_stage[1], ro[1].tokens.size());
  EXPECT_EQ(per_stage[2], ro[2].tokens.size());
}

TEST(Gradcheck, ReportCoversEveryParameter) {
  Config c;
  const auto rep = xe_gradcheck(commands::gradcheck_dims(c), c.seed, c.gradcheck_step, c.gradcheck_tol);
  EXPECT_TRUE(rep.passed) << rep.worst().name << " " << rep.max_rel_error();
  const json j = commands::gradcheck_json(rep);
  EXPECT_EQ(j["parameters"].size(), rep.entries.size());
  EXPECT_TRUE(j["passed"].get<bool>());
}

// ---------------------------------------------------------------------------
// The binary itself

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train-xe --bogus"), 1);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "missing.ckpt").string()), 2);
  std::ofstream(dir / "cfg.json") << R"({"hiden_dim": 3})";
  EXPECT_EQ(run_cli("gen-data --config " + (dir / "cfg.json").string()), 2);
  EXPECT_EQ(run_cli("gradcheck --tol 1e-30"), 3);
  EXPECT_EQ(run_cli("gen-data --out " + dir.string()), 0);
  std::ifstream in(dir / "dataset.jsonl");
  const auto data = shapeworld::read_dataset_jsonl(in);
  EXPECT_EQ(data.train.size(), 2000u);
  EXPECT_EQ(data.val.size(), 200u);
}
