#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "stackcap/decoder.hpp"
#include "stackcap/gradcheck.hpp"
#include "stackcap/metrics.hpp"
#include "stackcap/shapeworld.hpp"

namespace stackcap {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("adam: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be positive");
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<Tensor*>& params) {
    AdamState s;
    for (const Tensor* p : params) {
      s.m.emplace_back(p->shape(), 0.0);
      s.v.emplace_back(p->shape(), 0.0);
    }
    return s;
  }
};

inline std::vector<Tensor*> parameter_refs(ModelParams& m) {
  std::vector<Tensor*> out;
  m.for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

/// Bias-corrected Adam. Throws NumericError and leaves everything untouched
/// when a gradient is non-finite.
inline void adam_update(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
                        const AdamConfig& cfg) {
  cfg.validate();
  if (state.m.empty() && state.step == 0) state = AdamState::zeros_like(params);
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(grads[i].shape() == params[i]->shape()) || !(state.m[i].shape() == params[i]->shape()) ||
        !(state.v[i].shape() == params[i]->shape())) {
      detail::shape_mismatch("adam", *params[i], grads[i]);
    }
    if (!grads[i].all_finite()) {
      throw NumericError("adam: non-finite gradient in parameter " + std::to_string(i) + "; step rejected");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      p[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const Tensor& g : grads) {
    for (double x : g.data()) s += x * x;
  }
  return std::sqrt(s);
}

/// Rescales grads so their global norm is at most max_norm; returns the
/// norm before clipping. max_norm <= 0 disables clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& x : g.data()) x *= s;
    }
  }
  return norm;
}

inline std::vector<Tensor> leaf_gradients(const Tape& tape, const BoundModel& bm) {
  std::vector<Tensor> out;
  for (Var v : bm.leaves) out.push_back(tape.gradient(v));
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy

struct XeLoss {
  Var total;                   // batch mean of the summed per-stage losses
  std::vector<Var> per_stage;  // batch mean of each stage's loss
};

/// Sum over stages and gold positions of -log p(gold), PAD positions past a
/// row's gold length excluded, averaged over rows. log_probs is [t][stage].
inline XeLoss xe_loss(const std::vector<std::vector<Var>>& log_probs, const std::vector<TokenSeq>& golds) {
  if (golds.empty()) throw std::invalid_argument("xe_loss: empty batch");
  std::size_t longest = 0;
  for (const auto& g : golds) longest = std::max(longest, g.size());
  if (log_probs.size() != longest) {
    throw std::invalid_argument("xe_loss: " + std::to_string(log_probs.size()) +
                                " timesteps of distributions for gold of length " + std::to_string(longest));
  }
  const std::size_t batch = golds.size(), stages = log_probs.front().size();
  Tape& tape = *log_probs.front().front().tape();
  XeLoss out;
  for (std::size_t i = 0; i < stages; ++i) {
    Var acc;
    for (std::size_t t = 0; t < longest; ++t) {
      const Var& lp = log_probs[t][i];
      if (lp.value().rows() != batch) throw std::invalid_argument("xe_loss: batch size mismatch");
      std::vector<std::size_t> cols(batch, 0);
      Tensor mask({batch, 1}, 0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        if (t < golds[b].size()) {
          cols[b] = golds[b][t];
          mask[b] = 1.0;
        }
      }
      Var term = sum(mul(pick(lp, cols), tape.constant(std::move(mask))));
      acc = acc.valid() ? add(acc, term) : term;
    }
    out.per_stage.push_back(scale(acc, -1.0 / static_cast<double>(batch)));
  }
  out.total = out.per_stage.front();
  for (std::size_t i = 1; i < stages; ++i) out.total = add(out.total, out.per_stage[i]);
  return out;
}

/// Gold sequence for teacher forcing: reference tokens plus EOS.
inline TokenSeq with_eos(TokenSeq seq, const SpecialTokens& sp) {
  seq.push_back(sp.eos);
  return seq;
}

struct XeStepResult {
  std::vector<Tensor> grads;
  std::vector<double> per_stage_loss;
  double loss = 0.0;
};

inline XeStepResult xe_gradient(const ModelParams& params, std::span<const SpatialFeatures> images,
                                const std::vector<TokenSeq>& golds, DecoderOptions options = {}) {
  Tape tape;
  BoundModel bm = bind(tape, params, true);
  StageStack stack(bm, tape.constant(stack_regions(images)), options);
  XeLoss loss = xe_loss(rollout_teacher_forced(stack, golds), golds);
  tape.backward(loss.total);
  XeStepResult r;
  r.grads = leaf_gradients(tape, bm);
  r.loss = loss.total.value().item();
  for (Var v : loss.per_stage) r.per_stage_loss.push_back(v.value().item());
  return r;
}

/// Finite-difference check of the full unrolled XE loss on a tiny model.
/// Parameters are redrawn in [-0.5, 0.5] so no gradient sits at an init
/// value of exactly zero; the batch has two rows with different gold lengths.
inline GradCheckReport xe_gradcheck(const ModelDims& dims, std::uint64_t seed, double step, double tol) {
  dims.validate();
  ModelParams m = init_model(dims, derive_seed(seed, "gradcheck-init"));
  Rng rng(derive_seed(seed, "gradcheck-data"));
  m.for_each([&](const std::string&, Tensor& t) { t = uniform_tensor(t.shape(), rng, 0.5); });

  std::vector<SpatialFeatures> images(2);
  for (auto& img : images) {
    img.grid = dims.grid;
    img.regions = uniform_tensor({dims.regions(), dims.feature_dim}, rng, 1.0);
  }
  std::vector<TokenSeq> golds;
  for (std::size_t len : {dims.max_len, std::max<std::size_t>(1, dims.max_len - 1)}) {
    TokenSeq g;
    while (g.size() + 1 < len) {
      const TokenId tok = rng.below(dims.vocab_size);
      if (!dims.special.is_reserved(tok) || dims.vocab_size <= 4) g.push_back(tok);
    }
    golds.push_back(with_eos(std::move(g), dims.special));
  }
  const Tensor regions = stack_regions(images);

  TapeProgram program = [&](Tape& tape, std::span<const Var> leaves) {
    BoundModel bm = bind_leaves(dims, leaves);
    StageStack stack(bm, tape.constant(regions));
    return xe_loss(rollout_teacher_forced(stack, golds), golds).total;
  };
  return grad_check(program, m.tensors(), m.names(), step, tol);
}

// ---------------------------------------------------------------------------
// Relative rewards and the policy gradient

/// Which baselines enter the advantage of a fine stage.
enum class BaselineMode {
  dual,         // (r_s - r_greedy) + (r_s - r_prev)
  greedy_only,  // r_s - r_greedy
  none,         // r_s
};

/// Source of the preceding-stage reward r_prev.
enum class PrevSource { sample, greedy };

inline BaselineMode parse_baseline_mode(const std::string& s) {
  if (s == "dual") return BaselineMode::dual;
  if (s == "greedy_only") return BaselineMode::greedy_only;
  if (s == "none") return BaselineMode::none;
  throw std::invalid_argument("unknown baseline mode '" + s + "' (expected dual, greedy_only or none)");
}

inline std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::dual: return "dual";
    case BaselineMode::greedy_only: return "greedy_only";
    case BaselineMode::none: return "none";
  }
  return "?";
}

inline PrevSource parse_prev_source(const std::string& s) {
  if (s == "sample") return PrevSource::sample;
  if (s == "greedy") return PrevSource::greedy;
  throw std::invalid_argument("unknown previous-stage reward source '" + s + "' (expected sample or greedy)");
}

inline std::string to_string(PrevSource p) { return p == PrevSource::sample ? "sample" : "greedy"; }

struct RewardTriple {
  double r_sample = 0.0;
  double r_greedy = 0.0;
  double r_prev = 0.0;
  double delta = 0.0;
};

inline double advantage(double r_sample, double r_greedy, double r_prev, BaselineMode mode) {
  switch (mode) {
    case BaselineMode::dual: return (r_sample - r_greedy) + (r_sample - r_prev);
    case BaselineMode::greedy_only: return r_sample - r_greedy;
    case BaselineMode::none: return r_sample;
  }
  return 0.0;
}

/// Scores a raw stage output (EOS and PAD still present) for one batch row.
using RewardFn = std::function<double(std::size_t row, const TokenSeq& tokens)>;

/// Reward triples for fine stages 1..N_f of one image. Rollouts are indexed
/// by stage, coarse first.
inline std::vector<RewardTriple> compute_relative_rewards(const MultiStageRollout& sampled,
                                                          const MultiStageRollout& greedy,
                                                          const std::function<double(const TokenSeq&)>& score,
                                                          BaselineMode mode = BaselineMode::dual,
                                                          PrevSource prev = PrevSource::sample) {
  if (sampled.size() < 2 || greedy.size() != sampled.size()) {
    throw std::invalid_argument("relative rewards: need sampled and greedy rollouts for every stage");
  }
  // greedy rollouts are left empty when nothing reads them
  const bool use_greedy = mode != BaselineMode::none || prev == PrevSource::greedy;
  std::vector<double> rs, rg;
  for (const auto& r : sampled) rs.push_back(score(r.tokens));
  for (const auto& r : greedy) rg.push_back(use_greedy ? score(r.tokens) : 0.0);
  std::vector<RewardTriple> out;
  for (std::size_t i = 1; i < sampled.size(); ++i) {
    RewardTriple t;
    t.r_sample = rs[i];
    t.r_greedy = rg[i];
    t.r_prev = prev == PrevSource::sample ? rs[i - 1] : rg[i - 1];
    t.delta = advantage(t.r_sample, t.r_greedy, t.r_prev, mode);
    out.push_back(t);
  }
  return out;
}

struct RlOptions {
  BaselineMode baseline = BaselineMode::dual;
  PrevSource prev = PrevSource::sample;
  DecoderOptions decoder;
};

struct RlStepResult {
  std::vector<Tensor> grads;                       // of the surrogate loss
  std::vector<std::vector<RewardTriple>> rewards;  // [row][fine stage - 1]
  std::vector<double> coarse_reward;               // r(sampled coarse) per row
  std::vector<MultiStageRollout> samples;
};

/// One-sample REINFORCE gradient with relative rewards:
///   grad = -(1/B) sum_b sum_{i>=1} delta_{b,i} grad log p(sampled sequence of stage i).
/// rngs[b] drives the sampling of row b. The greedy pass is skipped when the
/// baseline mode does not use it.
inline RlStepResult rl_gradient(const ModelParams& params, std::span<const SpatialFeatures> images,
                                std::vector<Rng>& rngs, const RewardFn& reward, const RlOptions& options) {
  if (images.empty()) throw std::invalid_argument("rl step: empty batch");
  const std::size_t batch = images.size(), stages = params.dims.num_stages();
  const Tensor regions = stack_regions(images);

  std::vector<MultiStageRollout> greedy(batch, MultiStageRollout(stages));
  if (options.baseline == BaselineMode::dual || options.baseline == BaselineMode::greedy_only ||
      options.prev == PrevSource::greedy) {
    Tape gt;
    BoundModel gbm = bind(gt, params, false);
    StageStack gs(gbm, gt.constant(regions));
    greedy = run_policy(gs, DecodeMode::greedy).rollouts;
  }

  Tape tape;
  BoundModel bm = bind(tape, params, true);
  StageStack stack(bm, tape.constant(regions), options.decoder);
  PolicyTrace trace = run_policy(stack, DecodeMode::sample, &rngs, true);

  RlStepResult res;
  res.samples = trace.rollouts;
  for (std::size_t b = 0; b < batch; ++b) {
    auto score = [&](const TokenSeq& seq) { return reward(b, seq); };
    res.rewards.push_back(compute_relative_rewards(trace.rollouts[b], greedy[b], score, options.baseline,
                                                   options.prev));
    res.coarse_reward.push_back(score(trace.rollouts[b][0].tokens));
  }

  Var surrogate;
  for (std::size_t t = 0; t < trace.picked.size(); ++t) {
    for (std::size_t i = 1; i < stages; ++i) {
      Tensor weight({batch, 1}, 0.0);
      bool any = false;
      for (std::size_t b = 0; b < batch; ++b) {
        weight[b] = -trace.active[t][i][b] * res.rewards[b][i - 1].delta / static_cast<double>(batch);
        any = any || weight[b] != 0.0;
      }
      if (!any) continue;
      Var term = sum(mul(trace.picked[t][i], tape.constant(std::move(weight))));
      surrogate = surrogate.valid() ? add(surrogate, term) : term;
    }
  }
  if (surrogate.valid()) {
    tape.backward(surrogate);
    res.grads = leaf_gradients(tape, bm);
  } else {
    for (Var v : bm.leaves) res.grads.emplace_back(v.value().shape(), 0.0);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct CaptionScores {
  std::array<double, 4> bleu{};  // BLEU-1..4, mean over images
  double cider = 0.0;            // raw, mean over images
  double exact_match = 0.0;      // fraction equal to one of the references
};

struct EvalReport {
  std::vector<CaptionScores> stages;  // greedy, per stage
  std::optional<CaptionScores> beam;  // final stage, beam search
  std::size_t beam_width = 0;
  std::size_t images = 0;
};

class ScoreAccumulator {
 public:
  ScoreAccumulator(const CiderCorpus<TokenId>& corpus) : corpus_(&corpus) {}

  void add(const TokenSeq& raw, const std::vector<TokenSeq>& refs) {
    const TokenSeq cand = corpus_->filter().apply(raw);
    for (std::size_t n = 1; n <= 4; ++n) sums_.bleu[n - 1] += bleu(cand, refs, n);
    sums_.cider += corpus_->score(cand, refs);
    sums_.exact_match += std::find(refs.begin(), refs.end(), cand) != refs.end() ? 1.0 : 0.0;
    ++count_;
  }

  CaptionScores mean() const {
    CaptionScores s = sums_;
    const double n = static_cast<double>(std::max<std::size_t>(count_, 1));
    for (double& b : s.bleu) b /= n;
    s.cider /= n;
    s.exact_match /= n;
    return s;
  }

 private:
  const CiderCorpus<TokenId>* corpus_;
  CaptionScores sums_;
  std::size_t count_ = 0;
};

inline constexpr std::size_t kEvalBatch = 32;

/// Greedy rollouts for a list of examples, batched.
inline std::vector<MultiStageRollout> greedy_rollouts(const ModelParams& params,
                                                      const std::vector<shapeworld::Example>& examples) {
  std::vector<MultiStageRollout> out;
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    std::vector<SpatialFeatures> imgs;
    for (std::size_t j = start; j < std::min(examples.size(), start + kEvalBatch); ++j) {
      imgs.push_back(examples[j].features);
    }
    for (auto& r : greedy_batch(params, imgs)) out.push_back(std::move(r));
  }
  return out;
}

/// Per-stage greedy scores; final-stage beam scores when beam_width > 0.
inline EvalReport evaluate(const ModelParams& params, const std::vector<shapeworld::Example>& examples,
                           const CiderCorpus<TokenId>& corpus, std::size_t beam_width = 0) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalReport rep;
  rep.images = examples.size();
  const auto rollouts = greedy_rollouts(params, examples);
  for (std::size_t i = 0; i < params.dims.num_stages(); ++i) {
    ScoreAccumulator acc(corpus);
    for (std::size_t b = 0; b < examples.size(); ++b) acc.add(rollouts[b][i].tokens, examples[b].refs);
    rep.stages.push_back(acc.mean());
  }
  if (beam_width > 0) {
    ScoreAccumulator acc(corpus);
    for (const auto& e : examples) acc.add(beam_search(params, e.features, beam_width).tokens, e.refs);
    rep.beam = acc.mean();
    rep.beam_width = beam_width;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training loops

struct XeConfig {
  AdamConfig adam{4e-4};
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
};

struct RlConfig {
  AdamConfig adam{5e-5};
  RewardMetric metric = RewardMetric::cider;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t samples_per_image = 1;
  double clip_norm = 5.0;
  RlOptions options;
  std::uint64_t seed = 1;
};

struct StageRewardStats {
  double r_sample = 0.0, r_greedy = 0.0, r_prev = 0.0, delta = 0.0;
};

struct EpochRecord {
  std::string phase;  // "xe" or "rl"
  std::size_t epoch = 0;
  std::vector<double> per_stage_losses;            // xe: stages 0..N_f
  double coarse_sample_reward = 0.0;               // rl
  std::vector<StageRewardStats> per_stage_rewards;  // rl: stages 1..N_f
  double val_cider = 0.0;
  double val_bleu4 = 0.0;
  std::size_t rejected_steps = 0;
  double wall_time = 0.0;
};

/// State carried across epochs; the CLI persists it in checkpoints.
struct TrainState {
  ModelParams params;
  AdamState adam;
  std::size_t epoch = 0;  // last completed epoch, 0 before training
  double best_val_cider = -1.0;
  std::optional<ModelParams> best;
};

using EpochHook = std::function<void(const EpochRecord&, const TrainState&, bool improved)>;

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  return order;
}

namespace detail {

inline void finish_epoch(EpochRecord& rec, TrainState& st, const shapeworld::Dataset& data,
                         std::chrono::steady_clock::time_point start, const EpochHook& hook) {
  const EvalReport ev = evaluate(st.params, data.val, data.corpus);
  rec.val_cider = ev.stages.back().cider;
  rec.val_bleu4 = ev.stages.back().bleu[3];
  st.epoch = rec.epoch;
  const bool improved = rec.val_cider > st.best_val_cider;
  if (improved) {
    st.best_val_cider = rec.val_cider;
    st.best = st.params;
  }
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (hook) hook(rec, st, improved);
}

inline void apply_step(TrainState& st, std::vector<Tensor>& grads, const AdamConfig& adam, double clip,
                       EpochRecord& rec) {
  clip_global_norm(grads, clip);
  try {
    adam_update(parameter_refs(st.params), grads, st.adam, adam);
  } catch (const NumericError&) {
    ++rec.rejected_steps;
  }
}

}  // namespace detail

/// Teacher-forced training on all stages. Epochs continue from st.epoch up
/// to cfg.epochs; each epoch is followed by greedy validation.
/// The gold caption of a scene rotates through its references by epoch.
inline void train_xe(TrainState& st, const shapeworld::Dataset& data, const XeConfig& cfg,
                     const EpochHook& hook = {}) {
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train_xe: empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("train_xe: batch size must be positive");
  cfg.adam.validate();
  const auto start = std::chrono::steady_clock::now();
  const SpecialTokens sp = st.params.dims.special;
  const std::size_t stages = st.params.dims.num_stages();
  for (std::size_t epoch = st.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = "xe";
    rec.epoch = epoch;
    rec.per_stage_losses.assign(stages, 0.0);
    const auto order = shuffled_order(data.train.size(), derive_seed(cfg.seed, "xe-shuffle", epoch));
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<SpatialFeatures> imgs;
      std::vector<TokenSeq> golds;
      for (std::size_t j = b0; j < std::min(order.size(), b0 + cfg.batch_size); ++j) {
        const auto& ex = data.train[order[j]];
        imgs.push_back(ex.features);
        golds.push_back(with_eos(ex.refs[(epoch + ex.scene.id) % ex.refs.size()], sp));
      }
      XeStepResult r = xe_gradient(st.params, imgs, golds);
      for (std::size_t i = 0; i < stages; ++i) {
        rec.per_stage_losses[i] += r.per_stage_loss[i] * static_cast<double>(imgs.size());
      }
      detail::apply_step(st, r.grads, cfg.adam, cfg.clip_norm, rec);
    }
    for (double& l : rec.per_stage_losses) l /= static_cast<double>(order.size());
    detail::finish_epoch(rec, st, data, start, hook);
  }
}

/// Reward closure over the task corpus for a batch of examples.
inline RewardFn corpus_reward(const shapeworld::Dataset& data, std::vector<const shapeworld::Example*> rows,
                              RewardMetric metric) {
  return [&data, rows = std::move(rows), metric](std::size_t row, const TokenSeq& tokens) {
    return reward(tokens, rows.at(row)->refs, data.corpus, metric);
  };
}

/// REINFORCE fine-tuning with relative rewards; the best checkpoint is
/// chosen among RL epochs only.
inline void train_rl(TrainState& st, const shapeworld::Dataset& data, const RlConfig& cfg,
                     const EpochHook& hook = {}) {
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train_rl: empty dataset");
  if (cfg.batch_size == 0 || cfg.samples_per_image == 0) {
    throw std::invalid_argument("train_rl: batch size and samples per image must be positive");
  }
  cfg.adam.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t fine = st.params.dims.fine_stages;
  for (std::size_t epoch = st.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = "rl";
    rec.epoch = epoch;
    rec.per_stage_rewards.assign(fine, {});
    std::size_t rows_seen = 0;
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, "rl-sample", epoch);
    const auto order = shuffled_order(data.train.size(), derive_seed(cfg.seed, "rl-shuffle", epoch));
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<SpatialFeatures> imgs;
      std::vector<const shapeworld::Example*> rows;
      std::vector<Rng> rngs;
      for (std::size_t j = b0; j < std::min(order.size(), b0 + cfg.batch_size); ++j) {
        const auto& ex = data.train[order[j]];
        for (std::size_t s = 0; s < cfg.samples_per_image; ++s) {
          imgs.push_back(ex.features);
          rows.push_back(&ex);
          rngs.emplace_back(derive_seed(epoch_seed, "scene", ex.scene.id * cfg.samples_per_image + s));
        }
      }
      RlStepResult r = rl_gradient(st.params, imgs, rngs, corpus_reward(data, rows, cfg.metric), cfg.options);
      for (std::size_t b = 0; b < r.rewards.size(); ++b) {
        rec.coarse_sample_reward += r.coarse_reward[b];
        for (std::size_t i = 0; i < fine; ++i) {
          const auto& t = r.rewards[b][i];
          rec.per_stage_rewards[i].r_sample += t.r_sample;
          rec.per_stage_rewards[i].r_greedy += t.r_greedy;
          rec.per_stage_rewards[i].r_prev += t.r_prev;
          rec.per_stage_rewards[i].delta += t.delta;
        }
      }
      rows_seen += r.rewards.size();
      detail::apply_step(st, r.grads, cfg.adam, cfg.clip_norm, rec);
    }
    const double n = static_cast<double>(rows_seen);
    rec.coarse_sample_reward /= n;
    for (auto& s : rec.per_stage_rewards) {
      s.r_sample /= n;
      s.r_greedy /= n;
      s.r_prev /= n;
      s.delta /= n;
    }
    detail::finish_epoch(rec, st, data, start, hook);
  }
}

}  // namespace stackcap
