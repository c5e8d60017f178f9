#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "stackcap/trainer.hpp"

namespace stackcap {

/// Every tunable of a run as one flat JSON object. Keys absent from a config
/// file keep these defaults; unknown keys are rejected.
struct Config {
  std::uint64_t seed = 1;

  // data
  std::size_t n_train = 2000;
  std::size_t n_val = 200;
  std::size_t grid = 4;
  std::string data_path;  // dataset JSONL; empty = generate from seed

  // model
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t attention_dim = 64;
  std::size_t fine_stages = 2;
  std::size_t max_len = 12;

  // optimisation
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;
  double xe_lr = 4e-4;
  std::size_t xe_epochs = 30;
  std::size_t xe_batch_size = 16;
  double rl_lr = 5e-5;
  std::size_t rl_epochs = 10;
  std::size_t rl_batch_size = 16;
  std::size_t rl_samples_per_image = 1;
  std::string reward_metric = "cider";
  std::string baseline = "dual";
  std::string prev_reward_source = "sample";
  bool detach_cross_stage = false;

  // inference
  std::size_t beam_width = 5;

  // gradient check model
  std::size_t gradcheck_hidden_dim = 8;
  std::size_t gradcheck_embed_dim = 4;
  std::size_t gradcheck_grid = 2;
  std::size_t gradcheck_max_len = 3;
  std::size_t gradcheck_vocab = 8;
  double gradcheck_step = 1e-5;
  double gradcheck_tol = 1e-4;

  std::string out_dir = "runs/default";
};

#define STACKCAP_CONFIG_FIELDS(X)                                                                           \
  X(seed) X(n_train) X(n_val) X(grid) X(data_path) X(embed_dim) X(hidden_dim) X(attention_dim) X(fine_stages) \
  X(max_len) X(adam_beta1) X(adam_beta2) X(adam_eps) X(clip_norm) X(xe_lr) X(xe_epochs) X(xe_batch_size)      \
  X(rl_lr) X(rl_epochs) X(rl_batch_size) X(rl_samples_per_image) X(reward_metric) X(baseline)                \
  X(prev_reward_source) X(detach_cross_stage) X(beam_width) X(gradcheck_hidden_dim) X(gradcheck_embed_dim)  \
  X(gradcheck_grid) X(gradcheck_max_len) X(gradcheck_vocab) X(gradcheck_step) X(gradcheck_tol) X(out_dir)

inline nlohmann::json to_json(const Config& c) {
  nlohmann::json j = nlohmann::json::object();
#define X(name) j[#name] = c.name;
  STACKCAP_CONFIG_FIELDS(X)
#undef X
  return j;
}

/// Errors from config parsing or validation; the CLI maps these to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const Config& c) {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (c.n_train == 0 || c.n_val == 0) fail("n_train and n_val must be positive");
  if (c.grid < 2) fail("grid must be >= 2");
  if (c.hidden_dim != c.attention_dim) fail("attention_dim must equal hidden_dim");
  if (c.fine_stages < 1) fail("fine_stages must be >= 1");
  if (c.embed_dim == 0 || c.hidden_dim == 0 || c.max_len == 0) fail("model sizes must be positive");
  if (c.xe_batch_size == 0 || c.rl_batch_size == 0 || c.rl_samples_per_image == 0) fail("batch sizes must be positive");
  if (!(c.xe_lr > 0) || !(c.rl_lr > 0)) fail("learning rates must be positive");
  if (!(c.adam_beta1 >= 0 && c.adam_beta1 < 1) || !(c.adam_beta2 >= 0 && c.adam_beta2 < 1)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(c.adam_eps > 0)) fail("adam_eps must be positive");
  if (c.beam_width == 0) fail("beam_width must be >= 1");
  if (!(c.gradcheck_step > 0)) fail("gradcheck_step must be positive");
  if (!(c.gradcheck_tol > 0)) fail("gradcheck_tol must be positive");
  if (c.gradcheck_vocab < 4) fail("gradcheck_vocab must cover the four reserved tokens");
  try {
    parse_reward_metric(c.reward_metric);
    parse_baseline_mode(c.baseline);
    parse_prev_source(c.prev_reward_source);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

inline Config config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  Config c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
    if (known[key].is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0) {
      throw ConfigError("config: key '" + key + "' must be non-negative");
    }
  }
  try {
#define X(name) \
  if (j.contains(#name)) j.at(#name).get_to(c.name);
    STACKCAP_CONFIG_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// FNV-1a of the canonical (sorted-key) dump of the whole config.
inline std::string config_hash(const Config& c) { return hex64(fnv1a64(to_json(c).dump())); }

/// Hash of the keys that fix the parameter skeleton; a checkpoint can only be
/// loaded under a config with the same model hash.
inline std::string model_hash(const Config& c) {
  nlohmann::json j = {{"embed_dim", c.embed_dim},     {"hidden_dim", c.hidden_dim},
                      {"attention_dim", c.attention_dim}, {"fine_stages", c.fine_stages},
                      {"max_len", c.max_len},         {"grid", c.grid}};
  return hex64(fnv1a64(j.dump()));
}

inline ModelDims model_dims(const Config& c, std::size_t vocab_size) {
  ModelDims d;
  d.vocab_size = vocab_size;
  d.embed_dim = c.embed_dim;
  d.hidden_dim = c.hidden_dim;
  d.attention_dim = c.attention_dim;
  d.feature_dim = shapeworld::kFeatureDim;
  d.grid = c.grid;
  d.fine_stages = c.fine_stages;
  d.max_len = c.max_len;
  d.validate();
  return d;
}

inline XeConfig xe_config(const Config& c) {
  XeConfig x;
  x.adam = {c.xe_lr, c.adam_beta1, c.adam_beta2, c.adam_eps};
  x.epochs = c.xe_epochs;
  x.batch_size = c.xe_batch_size;
  x.clip_norm = c.clip_norm;
  x.seed = derive_seed(c.seed, "xe");
  return x;
}

inline RlConfig rl_config(const Config& c) {
  RlConfig r;
  r.adam = {c.rl_lr, c.adam_beta1, c.adam_beta2, c.adam_eps};
  r.metric = parse_reward_metric(c.reward_metric);
  r.epochs = c.rl_epochs;
  r.batch_size = c.rl_batch_size;
  r.samples_per_image = c.rl_samples_per_image;
  r.clip_norm = c.clip_norm;
  r.options.baseline = parse_baseline_mode(c.baseline);
  r.options.prev = parse_prev_source(c.prev_reward_source);
  r.options.decoder.detach_cross_stage = c.detach_cross_stage;
  r.seed = derive_seed(c.seed, "rl");
  return r;
}

/// Dataset named by the config: read from data_path or generated from the seed.
inline shapeworld::Dataset load_dataset(const Config& c) {
  if (!c.data_path.empty()) {
    std::ifstream in(c.data_path);
    if (!in) throw ConfigError("cannot open dataset " + c.data_path);
    return shapeworld::read_dataset_jsonl(in);
  }
  return shapeworld::generate_dataset(c.n_train, c.n_val, derive_seed(c.seed, "data"), c.grid);
}

}  // namespace stackcap
