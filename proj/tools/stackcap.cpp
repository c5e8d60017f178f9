// stackcap: data generation, training, evaluation and diagnostics for the
// coarse-to-fine captioner on the synthetic shape task.
//
// Exit codes: 0 success, 1 usage error, 2 validation failure (config,
// checkpoint, dataset, unknown scene or split), 3 numeric failure
// (non-finite values, gradient check above tolerance).

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "stackcap/commands.hpp"

namespace {

using namespace stackcap;
namespace cmd = stackcap::commands;

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kInvalid = 2;
constexpr int kNumeric = 3;

struct Options {
  std::string config_path;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> beam;
  std::string split = "val";
  std::optional<std::uint64_t> scene;
  std::optional<std::uint64_t> scene_seed;
  std::optional<double> tol;
};

Config resolve_config(const Options& o) {
  Config c = o.config_path.empty() ? Config{} : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  validate(c);
  return c;
}

void write_json(const nlohmann::json& j, const std::string& out_dir, const std::string& file) {
  std::cout << j.dump(2) << '\n';
  if (!out_dir.empty()) {
    const auto path = cmd::ensure_dir(out_dir) / file;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << '\n';
  }
}

void require_checkpoint(const Options& o, const std::string& verb) {
  if (o.checkpoint.empty()) throw ConfigError(verb + " needs --checkpoint");
}

int run(const std::string& verb, const Options& o) {
  const Config cfg = resolve_config(o);
  if (verb == "gen-data") {
    const auto data = load_dataset(cfg);
    const auto path = cmd::ensure_dir(cfg.out_dir) / "dataset.jsonl";
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    shapeworld::write_dataset_jsonl(f, data);
    std::cout << "wrote " << data.train.size() << " train and " << data.val.size() << " val scenes to "
              << path.string() << '\n';
  } else if (verb == "train-xe") {
    const auto resume = o.checkpoint.empty() ? std::nullopt : std::optional(o.checkpoint);
    const auto r = cmd::train_xe(cfg, resume, &std::cout);
    std::cout << "best val CIDEr " << r.best_val_cider << " -> " << r.best_path.string() << '\n';
  } else if (verb == "train-rl") {
    require_checkpoint(o, verb);
    const auto r = cmd::train_rl(cfg, o.checkpoint, &std::cout);
    std::cout << "best val CIDEr " << r.best_val_cider << " -> " << r.best_path.string() << '\n';
  } else if (verb == "eval") {
    require_checkpoint(o, verb);
    write_json(cmd::eval(cfg, o.checkpoint, o.split, o.beam.value_or(cfg.beam_width)), o.out,
               "eval_" + o.split + ".json");
  } else if (verb == "decode") {
    require_checkpoint(o, verb);
    const auto j = cmd::decode(cfg, o.checkpoint, o.scene, o.scene_seed, o.beam.value_or(cfg.beam_width));
    std::cout << "scene " << j["scene_id"] << ": " << j["scene"].get<std::string>() << '\n';
    const std::size_t stages = j["stages"].size();
    for (const auto& s : j["stages"]) {
      const std::size_t i = s["stage"];
      const char* label = i == 0 ? " (coarse)" : i + 1 == stages ? " (final)" : "";
      std::cout << "  stage " << i << label << ": " << s["caption"].get<std::string>() << '\n';
    }
    if (j.contains("beam")) {
      std::cout << "  beam K=" << j["beam"]["width"] << ": " << j["beam"]["caption"].get<std::string>() << '\n';
    }
  } else if (verb == "export-attention") {
    require_checkpoint(o, verb);
    const auto j = cmd::export_attention(cfg, o.checkpoint, o.scene, o.scene_seed);
    write_json(j, o.out, "attention_scene" + std::to_string(j["scene_id"].get<std::uint64_t>()) + ".json");
  } else if (verb == "gradcheck") {
    const double tol = o.tol.value_or(cfg.gradcheck_tol);
    if (!(tol > 0)) throw ConfigError("gradcheck: --tol must be positive");
    const auto rep = xe_gradcheck(cmd::gradcheck_dims(cfg), cfg.seed, cfg.gradcheck_step, tol);
    for (const auto& e : rep.entries) {
      std::cout << (e.max_rel_error < tol ? "  ok   " : "  FAIL ") << e.name << "  max rel error "
                << e.max_rel_error << '\n';
    }
    std::cout << "worst parameter: " << rep.worst().name << " (" << rep.max_rel_error() << ")\n"
              << (rep.passed ? "PASS" : "FAIL") << " at tol " << tol << '\n';
    if (!o.out.empty()) {
      std::ofstream f(cmd::ensure_dir(o.out) / "gradcheck.json");
      f << cmd::gradcheck_json(rep).dump(2) << '\n';
    }
    return rep.passed ? kOk : kNumeric;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine captioning with stacked attention on a synthetic shape task"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file (defaults apply to missing keys)");
    sub->add_option("--seed", o.seed, "Override the master seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto with_checkpoint = [&](CLI::App* sub) { sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file"); };
  auto with_scene = [&](CLI::App* sub) {
    auto* id = sub->add_option("--scene", o.scene, "Scene id from the dataset");
    sub->add_option("--scene-seed", o.scene_seed, "Draw a fresh scene from this seed")->excludes(id);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset as JSONL");
  common(gen);
  auto* xe = app.add_subcommand("train-xe", "Cross-entropy training; --checkpoint resumes an xe run");
  common(xe);
  with_checkpoint(xe);
  auto* rl = app.add_subcommand("train-rl", "REINFORCE fine-tuning from an xe checkpoint (rl checkpoint resumes)");
  common(rl);
  with_checkpoint(rl);
  auto* ev = app.add_subcommand("eval", "Per-stage BLEU-1..4 and CIDEr on a split, plus final-stage beam search");
  common(ev);
  with_checkpoint(ev);
  ev->add_option("--split", o.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--beam", o.beam, "Beam width (0 = greedy only)");
  auto* dec = app.add_subcommand("decode", "Print every stage's caption for one scene");
  common(dec);
  with_checkpoint(dec);
  with_scene(dec);
  dec->add_option("--beam", o.beam, "Beam width (0 = greedy only)");
  auto* att = app.add_subcommand("export-attention", "Write fine-stage attention grids for one scene as JSON");
  common(att);
  with_checkpoint(att);
  with_scene(att);
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the unrolled model on a tiny config");
  common(gc);
  gc->add_option("--tol", o.tol, "Relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    return run(verb, o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    // config, checkpoint, dataset and lookup errors
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  }
}
