#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stackcap/attention.hpp"
#include "stackcap/nn.hpp"

namespace stackcap {

struct ModelDims {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t attention_dim = 64;
  std::size_t feature_dim = 16;
  std::size_t grid = 4;
  std::size_t fine_stages = 2;
  std::size_t max_len = 12;
  SpecialTokens special;

  std::size_t regions() const { return grid * grid; }
  std::size_t num_stages() const { return fine_stages + 1; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("model dims: " + msg); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (embed_dim == 0 || hidden_dim == 0 || feature_dim == 0 || grid == 0) fail("dimensions must be positive");
    if (fine_stages < 1) fail("fine_stages must be >= 1");
    if (max_len < 1) fail("max_len must be >= 1");
    if (attention_dim != hidden_dim) fail("attention_dim must equal hidden_dim (hidden fusion adds them)");
    for (TokenId id : {special.pad, special.bos, special.eos}) {
      if (id >= vocab_size) fail("special token id out of range");
    }
  }
};

/// Parameters of decoder stage i. Stage 0 (coarse) has no scorer; its value
/// projection only feeds the fusion step of stage 1.
struct StageParams {
  LstmParams lstm;
  OutputHead head;
  ValueProjection values;
  std::optional<AttentionScorer> scorer;
};

struct ModelParams {
  ModelDims dims;
  Embedding embedding;
  std::vector<StageParams> stages;

  /// Visits every tensor with its stable name, in checkpoint order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("embedding.table", self.embedding.table);
    for (std::size_t i = 0; i < self.stages.size(); ++i) {
      auto& s = self.stages[i];
      const std::string p = "stage" + std::to_string(i) + ".";
      f(p + "lstm.input_weights", s.lstm.input_weights);
      f(p + "lstm.recurrent_weights", s.lstm.recurrent_weights);
      f(p + "lstm.bias", s.lstm.bias);
      f(p + "head.weights", s.head.weights);
      f(p + "head.bias", s.head.bias);
      f(p + "values.weights", s.values.weights);
      f(p + "values.bias", s.values.bias);
      if (s.scorer) {
        f(p + "scorer.region_weights", s.scorer->region_weights);
        f(p + "scorer.hidden_weights", s.scorer->hidden_weights);
        f(p + "scorer.score_weights", s.scorer->score_weights);
        f(p + "scorer.score_bias", s.scorer->score_bias);
      }
    }
  }

  template <typename F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for_each([&](const std::string& n, const Tensor&) { out.push_back(n); });
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
  }

  void assign(const std::vector<Tensor>& values) {
    std::size_t k = 0;
    for_each([&](const std::string& n, Tensor& t) {
      if (k >= values.size() || !(values[k].shape() == t.shape())) {
        throw ShapeError("assign: tensor " + n + " expects shape " + shape_string(t.shape()));
      }
      t = values[k++];
    });
    if (k != values.size()) throw ShapeError("assign: tensor count mismatch");
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

inline std::size_t coarse_input_dim(const ModelDims& d) { return d.embed_dim + d.feature_dim + d.hidden_dim; }
inline std::size_t fine_input_dim(const ModelDims& d) { return d.embed_dim + d.attention_dim + d.hidden_dim; }

inline ModelParams init_model(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed);
  ModelParams m;
  m.dims = dims;
  m.embedding.table = uniform_tensor({dims.vocab_size, dims.embed_dim}, rng, kInitRange);
  for (std::size_t i = 0; i <= dims.fine_stages; ++i) {
    StageParams s;
    s.lstm = init_lstm(i == 0 ? coarse_input_dim(dims) : fine_input_dim(dims), dims.hidden_dim, rng);
    s.head = init_head(dims.hidden_dim, dims.vocab_size, rng);
    s.values = init_value_projection(dims.feature_dim, dims.attention_dim, rng);
    if (i > 0) s.scorer = init_scorer(dims.feature_dim, dims.hidden_dim, dims.attention_dim, dims.regions(), rng);
    m.stages.push_back(std::move(s));
  }
  return m;
}

struct BoundStage {
  LstmVars lstm;
  HeadVars head;
  ValueVars values;
  std::optional<ScorerVars> scorer;
};

/// Model parameters placed on a tape. `leaves` follows ModelParams::for_each order.
struct BoundModel {
  ModelDims dims;
  Var embedding;
  std::vector<BoundStage> stages;
  std::vector<Var> leaves;
};

/// Rebuilds the stage structure from leaves given in ModelParams::for_each order.
inline BoundModel bind_leaves(const ModelDims& dims, std::span<const Var> leaves) {
  BoundModel b;
  b.dims = dims;
  b.leaves.assign(leaves.begin(), leaves.end());
  std::size_t k = 0;
  auto next = [&] {
    if (k >= leaves.size()) throw ShapeError("bind: too few parameter tensors for the model dims");
    return leaves[k++];
  };
  b.embedding = next();
  for (std::size_t i = 0; i <= dims.fine_stages; ++i) {
    BoundStage bs;
    bs.lstm = {next(), next(), next()};
    bs.head = {next(), next()};
    bs.values = {next(), next()};
    if (i > 0) bs.scorer = ScorerVars{next(), next(), next(), next()};
    b.stages.push_back(std::move(bs));
  }
  if (k != leaves.size()) throw ShapeError("bind: too many parameter tensors for the model dims");
  return b;
}

inline BoundModel bind(Tape& tape, const ModelParams& m, bool grad) {
  std::vector<Var> leaves;
  m.for_each([&](const std::string&, const Tensor& t) { leaves.push_back(tape.leaf(t, grad)); });
  return bind_leaves(m.dims, leaves);
}

/// Stacks region grids of a batch into one [B*R, d_v] tensor.
inline Tensor stack_regions(std::span<const SpatialFeatures> batch) {
  if (batch.empty()) throw std::invalid_argument("stack_regions: empty batch");
  const std::size_t r = batch.front().num_regions(), d = batch.front().dim();
  Tensor out({batch.size() * r, d});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    batch[b].validate();
    if (batch[b].num_regions() != r || batch[b].dim() != d) {
      detail::shape_mismatch("stack_regions", batch.front().regions, batch[b].regions);
    }
    std::copy_n(batch[b].regions.ptr(), r * d, out.ptr() + b * r * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// One lockstep timestep across all stages.

/// Per-stage recurrent state for a batch of rows. attention[0] is the uniform
/// map handed to the first fine stage.
struct DecoderState {
  std::vector<Var> hidden;
  std::vector<Var> cell;
  std::vector<Var> attention;
  std::size_t t = 0;
};

struct StepResult {
  std::vector<Var> log_probs;  // per stage, [B, |D|]
  std::vector<Var> attention;  // per stage, [B, R]; entry 0 is the uniform prior
};

struct DecoderOptions {
  /// Cut gradients through the hidden/attention feeds between stages.
  bool detach_cross_stage = false;
};

/// Image-dependent precomputation for a batch plus the lockstep step.
class StageStack {
 public:
  StageStack(const BoundModel& model, Var regions, DecoderOptions options = {})
      : model_(&model), options_(options) {
    const ModelDims& d = model.dims;
    if (regions.value().cols() != d.feature_dim || regions.value().rows() % d.regions() != 0) {
      throw ShapeError("stage stack: regions of shape " + shape_string(regions.value().shape()) +
                       " do not match grid " + std::to_string(d.grid) + " with feature dim " +
                       std::to_string(d.feature_dim));
    }
    batch_ = regions.value().rows() / d.regions();
    global_ = mean_rows(regions, d.regions());
    for (std::size_t i = 0; i <= d.fine_stages; ++i) {
      projected_.push_back(project_values(model.stages[i].values, regions));
      keys_.push_back(i == 0 ? Var{} : matmul(regions, model.stages[i].scorer->region_weights));
    }
  }

  std::size_t batch() const { return batch_; }
  const BoundModel& model() const { return *model_; }
  Tape& tape() const { return *global_.tape(); }

  /// Same image rows repeated `copies` times; requires a single-image stack.
  StageStack tiled(std::size_t copies) const {
    if (batch_ != 1) throw std::logic_error("tiled: stack must hold one image");
    StageStack out = *this;
    const std::size_t r = model_->dims.regions();
    std::vector<std::size_t> rows, single(copies, 0);
    for (std::size_t c = 0; c < copies; ++c) {
      for (std::size_t n = 0; n < r; ++n) rows.push_back(n);
    }
    out.batch_ = copies;
    out.global_ = index_select(global_, single);
    for (std::size_t i = 0; i < projected_.size(); ++i) {
      out.projected_[i] = index_select(projected_[i], rows);
      if (i > 0) out.keys_[i] = index_select(keys_[i], rows);
    }
    return out;
  }

  DecoderState initial_state() const {
    const ModelDims& d = model_->dims;
    Tape& t = tape();
    DecoderState s;
    for (std::size_t i = 0; i <= d.fine_stages; ++i) {
      s.hidden.push_back(t.constant(Tensor({batch_, d.hidden_dim}, 0.0)));
      s.cell.push_back(t.constant(Tensor({batch_, d.hidden_dim}, 0.0)));
      s.attention.push_back(uniform_attention(t, batch_, d.regions()));
    }
    return s;
  }

  /// Advances every stage by one timestep. prev_tokens[i][b] is the token
  /// stage i emitted (or was fed) at t-1 for row b.
  StepResult step(DecoderState& state, const std::vector<TokenSeq>& prev_tokens) const {
    const ModelDims& d = model_->dims;
    if (state.t >= d.max_len) {
      throw std::out_of_range("step: timestep " + std::to_string(state.t) + " >= max length " +
                              std::to_string(d.max_len));
    }
    if (prev_tokens.size() != d.num_stages()) throw std::invalid_argument("step: need one token row per stage");
    for (const auto& row : prev_tokens) {
      if (row.size() != batch_) throw std::invalid_argument("step: token row size does not match batch");
      for (TokenId tok : row) {
        if (tok >= d.vocab_size) throw std::out_of_range("step: token id " + std::to_string(tok) + " out of range");
      }
    }
    auto feed = [&](Var v) { return options_.detach_cross_stage ? detach(v) : v; };

    StepResult res;
    DecoderState next;
    next.t = state.t + 1;

    // Coarse stage reads the last fine stage's hidden state from t-1.
    const BoundStage& coarse = model_->stages[0];
    Var x0 = concat({embed(model_->embedding, prev_tokens[0]), global_, feed(state.hidden[d.fine_stages])});
    LstmOutput out0 = lstm_step(coarse.lstm, state.hidden[0], state.cell[0], x0);
    next.hidden.push_back(out0.hidden);
    next.cell.push_back(out0.cell);
    next.attention.push_back(state.attention[0]);
    res.log_probs.push_back(log_softmax(word_logits(coarse.head, out0.output)));
    res.attention.push_back(state.attention[0]);

    for (std::size_t i = 1; i <= d.fine_stages; ++i) {
      const BoundStage& st = model_->stages[i];
      Var h_below = feed(next.hidden[i - 1]);
      Var alpha_below = i == 1 ? state.attention[0] : feed(next.attention[i - 1]);
      Var h_bar = fuse_hidden(h_below, alpha_below, projected_[i - 1]);
      Var alpha = attend_keys(*st.scorer, keys_[i], h_bar);
      Var context = attended_context(alpha, projected_[i]);
      Var x = concat({embed(model_->embedding, prev_tokens[i]), context, h_below});
      LstmOutput out = lstm_step(st.lstm, state.hidden[i], state.cell[i], x);
      next.hidden.push_back(out.hidden);
      next.cell.push_back(out.cell);
      next.attention.push_back(alpha);
      res.log_probs.push_back(log_softmax(word_logits(st.head, out.output)));
      res.attention.push_back(alpha);
    }
    state = std::move(next);
    return res;
  }

 private:
  const BoundModel* model_;
  DecoderOptions options_;
  std::size_t batch_ = 0;
  Var global_;
  std::vector<Var> projected_;
  std::vector<Var> keys_;
};

/// Keeps only `rows` of every state tensor, in the given order.
inline DecoderState select_rows(const DecoderState& s, const std::vector<std::size_t>& rows) {
  DecoderState out;
  out.t = s.t;
  for (Var v : s.hidden) out.hidden.push_back(index_select(v, rows));
  for (Var v : s.cell) out.cell.push_back(index_select(v, rows));
  for (Var v : s.attention) out.attention.push_back(index_select(v, rows));
  return out;
}

// ---------------------------------------------------------------------------
// Rollouts

struct StageRollout {
  TokenSeq tokens;                               // ends with EOS unless it hit max length
  std::vector<double> log_probs;                 // log p of each emitted token
  std::vector<std::vector<double>> attention_maps;  // map used at each step
  bool finished = false;                         // emitted EOS
};

/// One rollout per stage, index 0 = coarse.
using MultiStageRollout = std::vector<StageRollout>;

enum class DecodeMode { teacher_forced, greedy, sample };

inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
  auto r = t.row_span(row);
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

/// Free-running lockstep decode with per-step log-prob nodes kept for
/// policy-gradient use.
struct PolicyTrace {
  std::vector<MultiStageRollout> rollouts;          // [row][stage]
  std::vector<std::vector<Var>> picked;             // [t][stage] -> [B,1] log p of emitted token
  std::vector<std::vector<std::vector<double>>> active;  // [t][stage][row] 1 while the stage is live
};

/// Greedy or sampled decoding for every row of `stack`. A stage that has
/// emitted EOS keeps emitting PAD until all stages of all rows are done or
/// max_len is reached. In sample mode `rngs` holds one generator per row.
inline PolicyTrace run_policy(const StageStack& stack, DecodeMode mode, std::vector<Rng>* rngs = nullptr,
                              bool keep_picks = false) {
  if (mode == DecodeMode::teacher_forced) throw std::invalid_argument("run_policy: use rollout_teacher_forced");
  const ModelDims& d = stack.model().dims;
  const std::size_t batch = stack.batch(), stages = d.num_stages();
  if (mode == DecodeMode::sample && (!rngs || rngs->size() != batch)) {
    throw std::invalid_argument("run_policy: sampling needs one rng per row");
  }
  PolicyTrace trace;
  trace.rollouts.assign(batch, MultiStageRollout(stages));
  std::vector<TokenSeq> prev(stages, TokenSeq(batch, d.special.bos));
  DecoderState state = stack.initial_state();
  std::size_t live = batch * stages;

  for (std::size_t t = 0; t < d.max_len && live > 0; ++t) {
    StepResult res = stack.step(state, prev);
    std::vector<TokenSeq> chosen(stages, TokenSeq(batch, d.special.pad));
    std::vector<std::vector<double>> active(stages, std::vector<double>(batch, 0.0));
    for (std::size_t b = 0; b < batch; ++b) {
      // fixed draw order per row: stage 0, 1, ..., N_f
      for (std::size_t i = 0; i < stages; ++i) {
        StageRollout& ro = trace.rollouts[b][i];
        if (ro.finished) continue;
        const Tensor& lp = res.log_probs[i].value();
        TokenId tok;
        if (mode == DecodeMode::greedy) {
          tok = argmax_row(lp, b);
        } else {
          std::vector<double> probs(d.vocab_size);
          for (std::size_t j = 0; j < probs.size(); ++j) probs[j] = std::exp(lp(b, j));
          tok = (*rngs)[b].categorical(probs);
        }
        chosen[i][b] = tok;
        active[i][b] = 1.0;
        ro.tokens.push_back(tok);
        ro.log_probs.push_back(lp(b, tok));
        auto alpha = res.attention[i].value().row_span(b);
        ro.attention_maps.emplace_back(alpha.begin(), alpha.end());
        if (tok == d.special.eos) {
          ro.finished = true;
          --live;
        }
      }
    }
    if (keep_picks) {
      std::vector<Var> picks;
      for (std::size_t i = 0; i < stages; ++i) picks.push_back(pick(res.log_probs[i], chosen[i]));
      trace.picked.push_back(std::move(picks));
      trace.active.push_back(std::move(active));
    }
    prev = std::move(chosen);
  }
  return trace;
}

/// Teacher-forced log-probabilities: every stage is fed the same gold prefix.
/// Result is [t][stage] -> [B, |D|] for t < longest gold sequence.
inline std::vector<std::vector<Var>> rollout_teacher_forced(const StageStack& stack,
                                                            const std::vector<TokenSeq>& golds) {
  const ModelDims& d = stack.model().dims;
  if (golds.size() != stack.batch()) throw std::invalid_argument("teacher forcing: one gold sequence per row");
  std::size_t steps = 0;
  for (const auto& g : golds) {
    if (g.empty() || g.back() != d.special.eos) throw std::invalid_argument("teacher forcing: gold must end with EOS");
    if (g.size() > d.max_len) throw std::invalid_argument("teacher forcing: gold longer than max length");
    for (TokenId tok : g) {
      if (tok >= d.vocab_size) throw std::out_of_range("teacher forcing: gold token out of vocabulary");
    }
    steps = std::max(steps, g.size());
  }
  std::vector<std::vector<Var>> out;
  DecoderState state = stack.initial_state();
  TokenSeq prev(golds.size(), d.special.bos);
  for (std::size_t t = 0; t < steps; ++t) {
    StepResult res = stack.step(state, std::vector<TokenSeq>(d.num_stages(), prev));
    out.push_back(std::move(res.log_probs));
    for (std::size_t b = 0; b < golds.size(); ++b) prev[b] = t < golds[b].size() ? golds[b][t] : d.special.pad;
  }
  return out;
}

// Convenience entry points that own their tape.

inline std::vector<MultiStageRollout> greedy_batch(const ModelParams& params,
                                                   std::span<const SpatialFeatures> images) {
  Tape tape;
  BoundModel bm = bind(tape, params, false);
  StageStack stack(bm, tape.constant(stack_regions(images)));
  return run_policy(stack, DecodeMode::greedy).rollouts;
}

inline MultiStageRollout rollout_greedy(const ModelParams& params, const SpatialFeatures& image) {
  return greedy_batch(params, std::span<const SpatialFeatures>(&image, 1)).front();
}

inline MultiStageRollout rollout_sampled(const ModelParams& params, const SpatialFeatures& image,
                                         std::uint64_t seed) {
  Tape tape;
  BoundModel bm = bind(tape, params, false);
  StageStack stack(bm, tape.constant(stack_regions(std::span<const SpatialFeatures>(&image, 1))));
  std::vector<Rng> rngs{Rng(seed)};
  return run_policy(stack, DecodeMode::sample, &rngs).rollouts.front();
}

// ---------------------------------------------------------------------------
// Beam search over the final stage

struct BeamResult {
  TokenSeq tokens;  // final-stage caption, EOS included when emitted
  double score = 0.0;  // summed final-stage log-probability
};

inline constexpr std::size_t kDefaultBeamWidth = 5;

/// Beam search on the final stage's distributions. Every hypothesis carries
/// its own copy of all stages; the lower stages decode greedily inside it.
inline BeamResult beam_search(const ModelParams& params, const SpatialFeatures& image,
                              std::size_t width = kDefaultBeamWidth) {
  if (width < 1) throw std::invalid_argument("beam_search: width must be >= 1");
  const ModelDims& d = params.dims;
  const std::size_t stages = d.num_stages(), last = d.fine_stages;

  struct Hyp {
    TokenSeq tokens;
    double score = 0.0;
    std::vector<TokenId> prev;  // per stage
    std::vector<bool> done;     // lower stages only
  };

  Tape tape;
  BoundModel bm = bind(tape, params, false);
  StageStack base(bm, tape.constant(stack_regions(std::span<const SpatialFeatures>(&image, 1))));
  std::map<std::size_t, StageStack> tiles;
  auto tiled = [&](std::size_t n) -> const StageStack& {
    auto it = tiles.find(n);
    if (it == tiles.end()) it = tiles.emplace(n, base.tiled(n)).first;
    return it->second;
  };

  std::vector<Hyp> live{Hyp{{}, 0.0, std::vector<TokenId>(stages, d.special.bos), std::vector<bool>(stages, false)}};
  std::vector<BeamResult> complete;
  DecoderState state = base.initial_state();

  for (std::size_t t = 0; t < d.max_len && !live.empty(); ++t) {
    std::vector<TokenSeq> prev(stages, TokenSeq(live.size()));
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (std::size_t i = 0; i < stages; ++i) prev[i][h] = live[h].prev[i];
    }
    StepResult res = tiled(live.size()).step(state, prev);

    // lower stages: greedy within each hypothesis
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (std::size_t i = 0; i < last; ++i) {
        if (live[h].done[i]) {
          live[h].prev[i] = d.special.pad;
          continue;
        }
        const TokenId tok = argmax_row(res.log_probs[i].value(), h);
        live[h].prev[i] = tok;
        if (tok == d.special.eos) live[h].done[i] = true;
      }
    }

    struct Cand {
      double score, lp;
      std::size_t parent;
      TokenId tok;
    };
    std::vector<Cand> cands;
    const Tensor& lp = res.log_probs[last].value();
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (TokenId j = 0; j < d.vocab_size; ++j) cands.push_back({live[h].score + lp(h, j), lp(h, j), h, j});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      if (a.lp != b.lp) return a.lp > b.lp;
      return a.tok < b.tok;
    });

    std::vector<Hyp> next;
    std::vector<std::size_t> parents;
    for (std::size_t k = 0; k < std::min(width, cands.size()); ++k) {
      const Cand& c = cands[k];
      Hyp h = live[c.parent];
      h.tokens.push_back(c.tok);
      h.score = c.score;
      h.prev[last] = c.tok;
      if (c.tok == d.special.eos || t + 1 == d.max_len) {
        complete.push_back({std::move(h.tokens), h.score});
      } else {
        next.push_back(std::move(h));
        parents.push_back(c.parent);
      }
    }
    if (!next.empty()) state = select_rows(state, parents);
    live = std::move(next);
  }

  auto best = std::max_element(complete.begin(), complete.end(), [](const BeamResult& a, const BeamResult& b) {
    return a.score < b.score;
  });
  return *best;
}

}  // namespace stackcap
