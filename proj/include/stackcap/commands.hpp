#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "stackcap/checkpoint.hpp"
#include "stackcap/config.hpp"
#include "stackcap/trainer.hpp"

// Command bodies behind the stackcap CLI. Each takes a validated Config and
// writes its artifacts; errors surface as exceptions that the CLI maps to
// exit codes.

namespace stackcap::commands {

namespace fs = std::filesystem;
using nlohmann::json;

inline fs::path ensure_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (!fs::is_directory(p)) throw std::runtime_error("cannot create output directory " + dir);
  return p;
}

inline json scores_json(const CaptionScores& s) {
  return {{"bleu1", s.bleu[0]},  {"bleu2", s.bleu[1]},       {"bleu3", s.bleu[2]},
          {"bleu4", s.bleu[3]},  {"cider", s.cider},         {"cider_x10", s.cider * kCiderReportScale},
          {"exact_match", s.exact_match}};
}

/// One line of xe_log.jsonl / rl_log.jsonl.
inline json epoch_json(const EpochRecord& r, const std::string& config_hash) {
  json j = {{"phase", r.phase},         {"epoch", r.epoch},     {"config_hash", config_hash},
            {"val_cider", r.val_cider}, {"val_bleu4", r.val_bleu4}, {"rejected_steps", r.rejected_steps},
            {"wall_time", r.wall_time}};
  if (r.phase == "xe") {
    j["per_stage_losses"] = r.per_stage_losses;
  } else {
    json stages = json::array();
    for (std::size_t i = 0; i < r.per_stage_rewards.size(); ++i) {
      const auto& s = r.per_stage_rewards[i];
      stages.push_back({{"stage", i + 1},
                        {"r_sample", s.r_sample},
                        {"r_greedy", s.r_greedy},
                        {"r_prev", s.r_prev},
                        {"delta", s.delta}});
    }
    j["per_stage_rewards"] = stages;
    j["coarse_r_sample"] = r.coarse_sample_reward;
  }
  return j;
}

/// Throws unless `line` is a valid training-log record.
inline void validate_log_record(const json& j) {
  auto need = [&](const char* key, auto pred, const char* what) {
    if (!j.contains(key) || !pred(j.at(key))) {
      throw std::invalid_argument(std::string("log record: '") + key + "' must be " + what);
    }
  };
  auto is_num = [](const json& v) { return v.is_number(); };
  need("phase", [](const json& v) { return v.is_string() && (v == "xe" || v == "rl"); }, "\"xe\" or \"rl\"");
  need("epoch", [](const json& v) { return v.is_number_unsigned() && v.get<std::size_t>() >= 1; }, "an integer >= 1");
  need("config_hash", [](const json& v) { return v.is_string() && v.get<std::string>().size() == 16; }, "a hex hash");
  need("val_cider", is_num, "a number");
  need("val_bleu4", is_num, "a number");
  need("wall_time", [](const json& v) { return v.is_number() && v.get<double>() >= 0; }, "a non-negative number");
  if (j.at("phase") == "xe") {
    need("per_stage_losses", [](const json& v) {
      if (!v.is_array() || v.size() < 2) return false;
      for (const auto& x : v) {
        if (!x.is_number() || x.get<double>() < 0) return false;
      }
      return true;
    }, "an array of non-negative numbers, one per stage");
  } else {
    need("per_stage_rewards", [](const json& v) {
      if (!v.is_array() || v.empty()) return false;
      for (const auto& s : v) {
        for (const char* k : {"stage", "r_sample", "r_greedy", "r_prev", "delta"}) {
          if (!s.contains(k) || !s.at(k).is_number()) return false;
        }
      }
      return true;
    }, "an array of {stage, r_sample, r_greedy, r_prev, delta}");
  }
}

/// Checkpoint compatibility: the model skeleton of the checkpoint's config
/// must match the current one.
inline Checkpoint load_compatible(const std::string& path, const Config& cfg, const shapeworld::Dataset& data) {
  Checkpoint ck = load_checkpoint(path, model_dims(cfg, data.vocab.size()));
  if (ck.model_hash != model_hash(cfg)) {
    throw CheckpointError("checkpoint " + path + " was written for a different model configuration (model hash " +
                          ck.model_hash + ", config gives " + model_hash(cfg) + ")");
  }
  return ck;
}

struct TrainOutcome {
  double best_val_cider = 0.0;
  std::size_t last_epoch = 0;
  fs::path best_path;
  fs::path log_path;
};

namespace detail {

inline Checkpoint make_checkpoint(const Config& cfg, const std::string& phase, const ModelParams& params,
                                  std::size_t epoch, double best, const std::optional<AdamState>& adam) {
  Checkpoint ck;
  ck.config_hash = config_hash(cfg);
  ck.model_hash = model_hash(cfg);
  ck.phase = phase;
  ck.epoch = epoch;
  ck.best_val_cider = best;
  ck.config = to_json(cfg);
  ck.params = params;
  ck.adam = adam;
  return ck;
}

/// Writes <phase>_last every epoch, <phase>_best on improvement, and one log line.
inline EpochHook writer(const Config& cfg, const std::string& phase, const fs::path& dir, std::ofstream& log,
                        std::ostream* progress) {
  return [&cfg, phase, dir, &log, progress](const EpochRecord& r, const TrainState& st, bool improved) {
    const std::string hash = config_hash(cfg);
    log << epoch_json(r, hash).dump() << '\n';
    log.flush();
    save_checkpoint((dir / (phase + "_last.ckpt")).string(),
                    make_checkpoint(cfg, phase, st.params, st.epoch, st.best_val_cider, st.adam));
    if (improved) {
      save_checkpoint((dir / (phase + "_best.ckpt")).string(),
                      make_checkpoint(cfg, phase, *st.best, st.epoch, st.best_val_cider, std::nullopt));
    }
    if (progress) {
      std::ostringstream line;
      line << phase << " epoch " << r.epoch << "  val CIDEr " << std::fixed << std::setprecision(4) << r.val_cider
           << "  BLEU-4 " << r.val_bleu4 << (improved ? "  (best)" : "") << "  " << std::setprecision(1)
           << r.wall_time << "s";
      *progress << line.str() << std::endl;
    }
  };
}

}  // namespace detail

/// Cross-entropy phase. With `resume`, continues from an xe checkpoint
/// (parameters, Adam moments, epoch counter, best score).
inline TrainOutcome train_xe(const Config& cfg, const std::optional<std::string>& resume,
                             std::ostream* progress = nullptr) {
  const auto data = load_dataset(cfg);
  const fs::path dir = ensure_dir(cfg.out_dir);
  TrainState st;
  if (resume) {
    Checkpoint ck = load_compatible(*resume, cfg, data);
    if (ck.phase != "xe") throw CheckpointError("train-xe: resume checkpoint has phase '" + ck.phase + "'");
    st.params = std::move(ck.params);
    st.epoch = ck.epoch;
    st.best_val_cider = ck.best_val_cider;
    if (ck.adam) st.adam = std::move(*ck.adam);
  } else {
    st.params = init_model(model_dims(cfg, data.vocab.size()), derive_seed(cfg.seed, "init"));
  }
  const fs::path log_path = dir / "xe_log.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  stackcap::train_xe(st, data, xe_config(cfg), detail::writer(cfg, "xe", dir, log, progress));
  return {st.best_val_cider, st.epoch, dir / "xe_best.ckpt", log_path};
}

/// REINFORCE phase. An xe checkpoint starts a fresh RL run from its weights;
/// an rl checkpoint resumes that run.
inline TrainOutcome train_rl(const Config& cfg, const std::string& checkpoint, std::ostream* progress = nullptr) {
  const auto data = load_dataset(cfg);
  const fs::path dir = ensure_dir(cfg.out_dir);
  Checkpoint ck = load_compatible(checkpoint, cfg, data);
  TrainState st;
  st.params = std::move(ck.params);
  const bool resume = ck.phase == "rl";
  if (resume) {
    st.epoch = ck.epoch;
    st.best_val_cider = ck.best_val_cider;
    if (ck.adam) st.adam = std::move(*ck.adam);
  } else if (ck.phase != "xe") {
    throw CheckpointError("train-rl: unknown checkpoint phase '" + ck.phase + "'");
  }
  const fs::path log_path = dir / "rl_log.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  stackcap::train_rl(st, data, rl_config(cfg), detail::writer(cfg, "rl", dir, log, progress));
  return {st.best_val_cider, st.epoch, dir / "rl_best.ckpt", log_path};
}

inline json eval_report_json(const EvalReport& rep, const std::string& split) {
  json stages = json::array();
  for (std::size_t i = 0; i < rep.stages.size(); ++i) {
    json s = scores_json(rep.stages[i]);
    s["stage"] = i;
    stages.push_back(s);
  }
  json j = {{"split", split}, {"images", rep.images}, {"greedy", stages}};
  if (rep.beam) {
    json b = scores_json(*rep.beam);
    b["width"] = rep.beam_width;
    j["beam"] = b;
  }
  return j;
}

/// Metrics JSON for a checkpoint on one split: greedy per stage, beam on
/// the final stage when beam > 0.
inline json eval(const Config& cfg, const std::string& checkpoint, const std::string& split, std::size_t beam) {
  const auto data = load_dataset(cfg);
  const auto& examples = data.split(split);
  Checkpoint ck = load_compatible(checkpoint, cfg, data);
  json j = eval_report_json(evaluate(ck.params, examples, data.corpus, beam), split);
  j["config_hash"] = config_hash(cfg);
  j["checkpoint_phase"] = ck.phase;
  j["checkpoint_epoch"] = ck.epoch;
  return j;
}

inline std::string join_words(const std::vector<std::string>& w) {
  std::string s;
  for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
  return s;
}

inline std::string describe(const shapeworld::Scene& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    os << (i ? ", " : "") << shapeworld::name(o.color) << ' ' << shapeworld::name(o.shape) << " at (" << s.row(o)
       << ',' << s.col(o) << ')';
  }
  return os.str();
}

/// Example for a dataset scene id, or a fresh scene drawn from `scene_seed`.
inline shapeworld::Example pick_scene(const shapeworld::Dataset& data, const Config& cfg,
                                      std::optional<std::uint64_t> scene_id,
                                      std::optional<std::uint64_t> scene_seed) {
  if (scene_id) return data.find(*scene_id);
  if (scene_seed) return shapeworld::make_example(shapeworld::generate_scene(0, *scene_seed, cfg.grid), data.vocab);
  throw std::invalid_argument("choose a scene with --scene ID or --scene-seed N");
}

/// Per-stage greedy captions plus the final-stage beam caption.
inline json decode(const Config& cfg, const std::string& checkpoint, std::optional<std::uint64_t> scene_id,
                   std::optional<std::uint64_t> scene_seed, std::size_t beam) {
  const auto data = load_dataset(cfg);
  Checkpoint ck = load_compatible(checkpoint, cfg, data);
  const auto ex = pick_scene(data, cfg, scene_id, scene_seed);
  const auto ro = rollout_greedy(ck.params, ex.features);
  json stages = json::array();
  for (std::size_t i = 0; i < ro.size(); ++i) {
    stages.push_back({{"stage", i}, {"caption", join_words(data.vocab.decode(ro[i].tokens))}});
  }
  json refs = json::array();
  for (const auto& r : ex.refs) refs.push_back(join_words(data.vocab.decode(r)));
  json j = {{"scene_id", ex.scene.id}, {"scene", describe(ex.scene)}, {"stages", stages}, {"references", refs}};
  if (beam > 0) {
    j["beam"] = {{"width", beam},
                 {"caption", join_words(data.vocab.decode(beam_search(ck.params, ex.features, beam).tokens))}};
  }
  return j;
}

/// Attention grids of every fine stage at every step of a greedy rollout.
inline json attention_maps(const ModelParams& params, const shapeworld::Example& ex, const Vocabulary& vocab) {
  if (params.dims.fine_stages < 1) throw std::invalid_argument("export-attention: model has no fine stage");
  const auto ro = rollout_greedy(params, ex.features);
  const std::size_t k = params.dims.grid;
  json maps = json::array();
  for (std::size_t i = 1; i < ro.size(); ++i) {
    for (std::size_t t = 0; t < ro[i].tokens.size(); ++t) {
      json grid = json::array();
      for (std::size_t r = 0; r < k; ++r) {
        grid.push_back(std::vector<double>(ro[i].attention_maps[t].begin() + r * k,
                                           ro[i].attention_maps[t].begin() + (r + 1) * k));
      }
      maps.push_back({{"stage", i}, {"t", t}, {"token", vocab.word(ro[i].tokens[t])}, {"alpha", grid}});
    }
  }
  json objs = json::array();
  for (const auto& o : ex.scene.objects) {
    objs.push_back({{"cell", o.cell}, {"shape", shapeworld::name(o.shape)}, {"color", shapeworld::name(o.color)}});
  }
  return {{"scene_id", ex.scene.id}, {"grid", k}, {"objects", objs}, {"maps", maps}};
}

inline json export_attention(const Config& cfg, const std::string& checkpoint,
                             std::optional<std::uint64_t> scene_id, std::optional<std::uint64_t> scene_seed) {
  const auto data = load_dataset(cfg);
  Checkpoint ck = load_compatible(checkpoint, cfg, data);
  return attention_maps(ck.params, pick_scene(data, cfg, scene_id, scene_seed), data.vocab);
}

inline ModelDims gradcheck_dims(const Config& cfg) {
  ModelDims d;
  d.vocab_size = cfg.gradcheck_vocab;
  d.embed_dim = cfg.gradcheck_embed_dim;
  d.hidden_dim = cfg.gradcheck_hidden_dim;
  d.attention_dim = cfg.gradcheck_hidden_dim;
  d.feature_dim = shapeworld::kFeatureDim;
  d.grid = cfg.gradcheck_grid;
  d.fine_stages = cfg.fine_stages;
  d.max_len = cfg.gradcheck_max_len;
  return d;
}

inline json gradcheck_json(const GradCheckReport& rep) {
  json entries = json::array();
  for (const auto& e : rep.entries) {
    entries.push_back({{"name", e.name},
                       {"max_rel_error", e.max_rel_error},
                       {"worst_index", e.worst_index},
                       {"analytic", e.analytic},
                       {"numeric", e.numeric}});
  }
  return {{"passed", rep.passed},
          {"tol", rep.tol},
          {"max_rel_error", rep.max_rel_error()},
          {"worst_parameter", rep.entries.empty() ? "" : rep.worst().name},
          {"parameters", entries}};
}

}  // namespace stackcap::commands
