#include <gtest/gtest.h>

#include <cmath>

#include "stackcap/trainer.hpp"
#include "harness.hpp"

using namespace stackcap;
using harness::max_abs_diff;
using harness::replay_gradient;
using harness::rngs_for;

namespace {

ModelDims tiny_dims(std::size_t vocab = 7, std::size_t max_len = 4) {
  ModelDims d;
  d.vocab_size = vocab;
  d.embed_dim = 3;
  d.hidden_dim = 4;
  d.attention_dim = 4;
  d.feature_dim = 5;
  d.grid = 2;
  d.fine_stages = 2;
  d.max_len = max_len;
  return d;
}

ModelParams random_model(const ModelDims& d, std::uint64_t seed, double scale = 1.0) {
  ModelParams m = init_model(d, seed);
  Rng rng(seed + 1000);
  m.for_each([&](const std::string&, Tensor& t) { t = uniform_tensor(t.shape(), rng, scale); });
  return m;
}

std::vector<SpatialFeatures> random_images(const ModelDims& d, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SpatialFeatures> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({d.grid, uniform_tensor({d.regions(), d.feature_dim}, rng, 1.0)});
  return out;
}

/// Reward from token content so different samples score differently.
RewardFn token_reward() {
  return [](std::size_t row, const TokenSeq& tokens) {
    double r = 0.1 * static_cast<double>(row);
    for (std::size_t t = 0; t < tokens.size(); ++t) r += std::sin(1.0 + static_cast<double>(tokens[t] * (t + 1)));
    return r;
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, MatchesHandComputedSteps) {
  Tensor p = Tensor::row({1.0, -2.0});
  AdamState st;
  AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  const std::vector<std::vector<double>> grads = {{0.5, -1.0}, {0.25, 2.0}, {-1.0, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  for (std::size_t k = 0; k < grads.size(); ++k) {
    adam_update({&p}, {Tensor::row(grads[k])}, st, cfg);
    for (int j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * grads[k][j];
      v[j] = 0.999 * v[j] + 0.001 * grads[k][j] * grads[k][j];
      const double mh = m[j] / (1 - std::pow(0.9, k + 1)), vh = v[j] / (1 - std::pow(0.999, k + 1));
      x[j] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p[j], x[j], 1e-12) << "step " << k << " coord " << j;
    }
  }
  EXPECT_EQ(st.step, 3u);
  // first step moves each coordinate by lr against its gradient sign
  Tensor q = Tensor::row({0.0});
  AdamState s2;
  adam_update({&q}, {Tensor::row({-3.0})}, s2, cfg);
  EXPECT_NEAR(q[0], 0.1, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor::row({0.3, -0.7, 1.1});
  const Tensor before = p;
  AdamState st;
  for (int k = 0; k < 5; ++k) adam_update({&p}, {Tensor({1, 3}, 0.0)}, st, AdamConfig{});
  EXPECT_EQ(p, before);
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  Tensor p = Tensor::row({0.0});
  AdamState st;
  AdamConfig cfg{1e-3};
  double last = 0.0;
  for (int k = 0; k < 2000; ++k) {
    const double before = p[0];
    adam_update({&p}, {Tensor::row({0.37})}, st, cfg);
    last = before - p[0];
  }
  EXPECT_NEAR(last, 1e-3, 1e-6);
}

TEST(Adam, RejectsNonFiniteGradientWithoutSideEffects) {
  Tensor p = Tensor::row({1.0, 2.0});
  AdamState st;
  adam_update({&p}, {Tensor::row({0.1, 0.1})}, st, AdamConfig{});
  const Tensor before = p;
  const AdamState saved = st;
  EXPECT_THROW(adam_update({&p}, {Tensor::row({0.1, std::nan("")})}, st, AdamConfig{}), NumericError);
  EXPECT_THROW(adam_update({&p}, {Tensor::row({INFINITY, 0.1})}, st, AdamConfig{}), NumericError);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, saved.step);
  EXPECT_EQ(st.m[0], saved.m[0]);
  EXPECT_EQ(st.v[0], saved.v[0]);
}

TEST(Adam, ValidatesConfig) {
  Tensor p = Tensor::row({1.0});
  AdamState st;
  EXPECT_THROW(adam_update({&p}, {Tensor::row({1.0})}, st, AdamConfig{0.0}), std::invalid_argument);
  EXPECT_THROW(adam_update({&p}, {Tensor::row({1.0})}, st, AdamConfig{1e-3, 1.0}), std::invalid_argument);
  EXPECT_THROW(adam_update({&p}, {Tensor::row({1.0, 2.0})}, st, AdamConfig{}), ShapeError);
}

TEST(Clip, RescalesToTheGlobalNorm) {
  std::vector<Tensor> g = {Tensor::row({3.0}), Tensor::row({4.0, 0.0})};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 2.5), 5.0);
  EXPECT_NEAR(global_norm(g), 2.5, 1e-15);
  EXPECT_NEAR(g[0][0], 1.5, 1e-15);
  std::vector<Tensor> small = {Tensor::row({0.3})};
  clip_global_norm(small, 5.0);
  EXPECT_EQ(small[0][0], 0.3);
}

// ---------------------------------------------------------------------------
// Cross-entropy

TEST(XeLoss, UniformModelGivesLengthTimesLogVocab) {
  auto d = tiny_dims(32, 6);
  ModelParams m = init_model(d, 1);
  for (auto& s : m.stages) {
    s.head.weights.fill(0.0);
    s.head.bias.fill(0.0);
  }
  const auto imgs = random_images(d, 2, 3);
  const std::vector<TokenSeq> golds = {{4, 5, 6, 7, 2}, {8, 9, 10, 11, 2}};
  const auto r = xe_gradient(m, imgs, golds);
  EXPECT_NEAR(r.loss, 3 * 5 * std::log(32.0), 1e-10);
  for (double l : r.per_stage_loss) EXPECT_NEAR(l, 5 * std::log(32.0), 1e-10);
}

TEST(XeLoss, TotalIsStageSumAndBatchMean) {
  const auto d = tiny_dims();
  const auto m = random_model(d, 2);
  const auto imgs = random_images(d, 2, 4);
  const std::vector<TokenSeq> golds = {{4, 5, 2}, {6, 2}};
  const auto both = xe_gradient(m, imgs, golds);
  EXPECT_NEAR(both.loss, std::accumulate(both.per_stage_loss.begin(), both.per_stage_loss.end(), 0.0), 1e-12);
  const auto a = xe_gradient(m, std::span(imgs).subspan(0, 1), {golds[0]});
  const auto b = xe_gradient(m, std::span(imgs).subspan(1, 1), {golds[1]});
  EXPECT_NEAR(both.loss, 0.5 * (a.loss + b.loss), 1e-12);
  for (std::size_t i = 0; i < both.grads.size(); ++i) {
    for (std::size_t j = 0; j < both.grads[i].size(); ++j) {
      EXPECT_NEAR(both.grads[i][j], 0.5 * (a.grads[i][j] + b.grads[i][j]), 1e-12);
    }
  }
}

TEST(XeLoss, RejectsMismatchedInputs) {
  const auto d = tiny_dims();
  const auto m = random_model(d, 2);
  const auto imgs = random_images(d, 2, 4);
  EXPECT_THROW(xe_gradient(m, imgs, {{4, 2}}), std::invalid_argument);
  EXPECT_THROW(xe_gradient(m, imgs, {{4, 2}, {5}}), std::invalid_argument);
}

TEST(XeLoss, FullModelGradientMatchesFiniteDifferences) {
  ModelDims d = tiny_dims(8, 3);
  d.hidden_dim = d.attention_dim = 8;
  d.embed_dim = 4;
  d.feature_dim = 16;
  const auto rep = xe_gradcheck(d, 1, 1e-5, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.worst().name << " " << rep.max_rel_error();
  EXPECT_EQ(rep.entries.size(), init_model(d, 1).names().size());
}

// ---------------------------------------------------------------------------
// Relative rewards

TEST(Rewards, AdvantageModes) {
  EXPECT_NEAR(advantage(0.8, 0.5, 0.6, BaselineMode::dual), 0.5, 1e-15);
  EXPECT_NEAR(advantage(0.8, 0.5, 0.6, BaselineMode::greedy_only), 0.3, 1e-15);
  EXPECT_EQ(advantage(0.8, 0.5, 0.6, BaselineMode::none), 0.8);
  EXPECT_EQ(advantage(0.4, 0.4, 0.4, BaselineMode::dual), 0.0);
  for (auto m : {BaselineMode::dual, BaselineMode::greedy_only, BaselineMode::none}) {
    EXPECT_EQ(parse_baseline_mode(to_string(m)), m);
  }
  EXPECT_EQ(parse_prev_source("greedy"), PrevSource::greedy);
  EXPECT_THROW(parse_baseline_mode("both"), std::invalid_argument);
  EXPECT_THROW(parse_prev_source("beam"), std::invalid_argument);
}

TEST(Rewards, TriplesPerFineStage) {
  auto ro = [](std::vector<TokenId> a, std::vector<TokenId> b, std::vector<TokenId> c) {
    MultiStageRollout r(3);
    r[0].tokens = std::move(a);
    r[1].tokens = std::move(b);
    r[2].tokens = std::move(c);
    return r;
  };
  const auto sampled = ro({1}, {1, 1}, {1, 1, 1});
  const auto greedy = ro({1, 1, 1, 1}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1, 1});
  auto len = [](const TokenSeq& s) { return static_cast<double>(s.size()); };
  const auto t = compute_relative_rewards(sampled, greedy, len);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].r_sample, 2);
  EXPECT_EQ(t[0].r_greedy, 5);
  EXPECT_EQ(t[0].r_prev, 1);
  EXPECT_EQ(t[0].delta, (2 - 5) + (2 - 1));
  EXPECT_EQ(t[1].r_prev, 2);
  EXPECT_EQ(t[1].delta, (3 - 6) + (3 - 2));
  const auto g = compute_relative_rewards(sampled, greedy, len, BaselineMode::dual, PrevSource::greedy);
  EXPECT_EQ(g[1].r_prev, 5);
  EXPECT_THROW(compute_relative_rewards(ro({1}, {1}, {1}), MultiStageRollout(2), len), std::invalid_argument);
}

TEST(RlGradient, ZeroAdvantageGivesZeroGradientAndNoMovement) {
  const auto d = tiny_dims();
  ModelParams m = random_model(d, 5);
  const auto imgs = random_images(d, 3, 6);
  auto rngs = rngs_for(3, 1);
  const auto r = rl_gradient(m, imgs, rngs, [](std::size_t, const TokenSeq&) { return 0.7; }, RlOptions{});
  for (const auto& g : r.grads) {
    for (double x : g.data()) EXPECT_EQ(x, 0.0);
  }
  const ModelParams before = m;
  AdamState st;
  adam_update(parameter_refs(m), r.grads, st, AdamConfig{});
  EXPECT_EQ(m.tensors(), before.tensors());
}

TEST(RlGradient, ScalingRewardsScalesTheGradient) {
  const auto d = tiny_dims();
  const auto m = random_model(d, 7);
  const auto imgs = random_images(d, 4, 8);
  const auto base = token_reward();
  for (double c : {2.0, -0.5, 3.0}) {
    auto r1 = rngs_for(4, 9), r2 = rngs_for(4, 9);
    const auto a = rl_gradient(m, imgs, r1, base, RlOptions{});
    const auto b = rl_gradient(m, imgs, r2, [&](std::size_t row, const TokenSeq& t) { return c * base(row, t); },
                               RlOptions{});
    double scale_ref = 0.0;
    for (std::size_t i = 0; i < a.grads.size(); ++i) {
      for (std::size_t j = 0; j < a.grads[i].size(); ++j) {
        EXPECT_NEAR(b.grads[i][j], c * a.grads[i][j], 1e-12 * (1 + std::abs(a.grads[i][j])));
        scale_ref = std::max(scale_ref, std::abs(a.grads[i][j]));
      }
    }
    EXPECT_GT(scale_ref, 0.0);
  }
}

TEST(RlGradient, MatchesIndependentReplay) {
  const auto d = tiny_dims(7, 5);
  const auto m = random_model(d, 11);
  const auto imgs = random_images(d, 3, 12);
  auto rngs = rngs_for(3, 13);
  const auto r = rl_gradient(m, imgs, rngs, token_reward(), RlOptions{});
  const auto ref = replay_gradient(m, imgs, r.samples, [&](std::size_t b, std::size_t i) { return r.rewards[b][i - 1].delta; });
  EXPECT_LT(max_abs_diff(r.grads, ref), 1e-12);
}

// dual - greedy_only = -(1/B) sum (r_sample - r_prev) grad log p, on one batch
TEST(RlGradient, DualMinusSingleBaselineIsThePreviousStageTerm) {
  const auto d = tiny_dims(7, 5);
  const auto m = random_model(d, 14);
  const auto imgs = random_images(d, 4, 15);
  auto r1 = rngs_for(4, 16), r2 = rngs_for(4, 16);
  RlOptions dual, single;
  single.baseline = BaselineMode::greedy_only;
  const auto a = rl_gradient(m, imgs, r1, token_reward(), dual);
  const auto b = rl_gradient(m, imgs, r2, token_reward(), single);
  std::vector<Tensor> diff = a.grads;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    for (std::size_t j = 0; j < diff[i].size(); ++j) diff[i][j] -= b.grads[i][j];
  }
  const auto ref = replay_gradient(m, imgs, a.samples, [&](std::size_t row, std::size_t i) {
    return a.rewards[row][i - 1].r_sample - a.rewards[row][i - 1].r_prev;
  });
  EXPECT_LT(max_abs_diff(diff, ref), 1e-10);
  EXPECT_GT(global_norm(ref), 1e-3);
}

TEST(RlGradient, DetachedFeedsLeaveCoarseStageUntouched) {
  const auto d = tiny_dims(7, 5);
  const auto m = random_model(d, 17);
  const auto imgs = random_images(d, 3, 18);
  auto rngs = rngs_for(3, 19);
  RlOptions opt;
  opt.decoder.detach_cross_stage = true;
  const auto r = rl_gradient(m, imgs, rngs, token_reward(), opt);
  const auto names = m.names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("stage0.lstm", 0) == 0 || names[i].rfind("stage0.head", 0) == 0) {
      for (double x : r.grads[i].data()) EXPECT_EQ(x, 0.0) << names[i];
    }
  }
}

// Single-step policy over two live tokens with both baselines off: the mean
// of many one-sample gradients approaches the exact expectation.
TEST(RlGradient, BanditEstimatorIsUnbiased) {
  ModelDims d = tiny_dims(6, 1);
  ModelParams m = random_model(d, 20);
  for (auto& s : m.stages) {
    for (std::size_t j = 0; j < 4; ++j) s.head.bias[j] = -60.0;
  }
  const auto img = random_images(d, 1, 21);
  const std::vector<double> r = {0, 0, 0, 0, 1.0, 0.25};
  RewardFn reward = [&](std::size_t, const TokenSeq& t) { return r[t.at(0)]; };
  RlOptions opt;
  opt.baseline = BaselineMode::none;

  // exact expectation: -(sum_i sum_a p_i(a) r(a) grad log p_i(a))
  Tape tape;
  BoundModel bm = bind(tape, m, true);
  StageStack stack(bm, tape.constant(img[0].regions));
  DecoderState st = stack.initial_state();
  auto res = stack.step(st, std::vector<TokenSeq>(d.num_stages(), TokenSeq{d.special.bos}));
  Var total;
  for (std::size_t i = 1; i < d.num_stages(); ++i) {
    for (TokenId a = 4; a < 6; ++a) {
      const double p = std::exp(res.log_probs[i].value()[a]);
      Var term = scale(pick(res.log_probs[i], {a}), -p * r[a]);
      total = total.valid() ? add(total, term) : term;
    }
  }
  tape.backward(total);
  const auto expected = leaf_gradients(tape, bm);
  const double norm = global_norm(expected);
  ASSERT_GT(norm, 1e-4);

  const std::size_t per_batch = 500, batches = 40;
  std::vector<double> proj;
  for (std::size_t k = 0; k < batches; ++k) {
    std::vector<SpatialFeatures> imgs(per_batch, img[0]);
    auto rngs = rngs_for(per_batch, derive_seed(22, "batch", k));
    const auto g = rl_gradient(m, imgs, rngs, reward, opt).grads;
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t j = 0; j < g[i].size(); ++j) dot += g[i][j] * expected[i][j] / norm;
    }
    proj.push_back(dot);
  }
  const double mean = std::accumulate(proj.begin(), proj.end(), 0.0) / static_cast<double>(batches);
  double var = 0.0;
  for (double x : proj) var += (x - mean) * (x - mean);
  const double se = std::sqrt(var / static_cast<double>(batches - 1) / static_cast<double>(batches));
  EXPECT_NEAR(mean, norm, 3 * se) << "se " << se;
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

struct SmallRun {
  shapeworld::Dataset data = shapeworld::generate_dataset(10, 4, 3);
  TrainState st;

  SmallRun() {
    ModelDims d;
    d.vocab_size = data.vocab.size();
    d.hidden_dim = d.attention_dim = 16;
    d.embed_dim = 8;
    st.params = init_model(d, 1);
  }
};

}  // namespace

TEST(TrainXe, OneEpochSmokeRunReportsPerStageLosses) {
  SmallRun run;
  XeConfig cfg;
  cfg.epochs = 1;
  std::vector<EpochRecord> log;
  train_xe(run.st, run.data, cfg, [&](const EpochRecord& r, const TrainState&, bool) { log.push_back(r); });
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].phase, "xe");
  EXPECT_EQ(log[0].per_stage_losses.size(), 3u);
  for (double l : log[0].per_stage_losses) EXPECT_GT(l, 0.0);
  EXPECT_EQ(run.st.epoch, 1u);
  EXPECT_TRUE(run.st.best.has_value());
  EXPECT_GE(run.st.best_val_cider, 0.0);
  EXPECT_EQ(run.st.adam.step, 1u);  // 10 examples, batch 16
}

TEST(TrainXe, ContinuesFromTheStoredEpoch) {
  SmallRun run;
  XeConfig cfg;
  cfg.epochs = 3;
  std::vector<std::size_t> epochs;
  run.st.epoch = 1;
  train_xe(run.st, run.data, cfg, [&](const EpochRecord& r, const TrainState&, bool) { epochs.push_back(r.epoch); });
  EXPECT_EQ(epochs, (std::vector<std::size_t>{2, 3}));
}

TEST(TrainXe, LossTrendsDownOverFiveEpochs) {
  const auto data = shapeworld::generate_dataset(300, 20, 1);
  ModelDims d;
  d.vocab_size = data.vocab.size();
  TrainState st;
  st.params = init_model(d, derive_seed(1, "init"));
  XeConfig cfg;
  cfg.epochs = 5;
  std::vector<double> losses;
  train_xe(st, data, cfg, [&](const EpochRecord& r, const TrainState&, bool) {
    losses.push_back(std::accumulate(r.per_stage_losses.begin(), r.per_stage_losses.end(), 0.0));
  });
  std::size_t violations = 0;
  for (std::size_t e = 1; e < losses.size(); ++e) violations += losses[e] > losses[e - 1] ? 1 : 0;
  EXPECT_LE(violations, 1u);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(TrainRl, OneEpochSmokeRunReportsRewards) {
  SmallRun run;
  XeConfig xe;
  xe.epochs = 1;
  train_xe(run.st, run.data, xe);
  TrainState rl;
  rl.params = run.st.params;
  RlConfig cfg;
  cfg.epochs = 1;
  std::vector<EpochRecord> log;
  train_rl(rl, run.data, cfg, [&](const EpochRecord& r, const TrainState&, bool) { log.push_back(r); });
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].phase, "rl");
  ASSERT_EQ(log[0].per_stage_rewards.size(), 2u);
  for (const auto& s : log[0].per_stage_rewards) {
    EXPECT_GE(s.r_sample, 0.0);
    EXPECT_GE(s.r_greedy, 0.0);
  }
  EXPECT_TRUE(rl.best.has_value());
}

TEST(TrainRl, IsDeterministicForAFixedSeed) {
  auto run_once = [] {
    SmallRun run;
    TrainState rl;
    rl.params = run.st.params;
    RlConfig cfg;
    cfg.epochs = 2;
    cfg.samples_per_image = 2;
    train_rl(rl, run.data, cfg);
    return rl.params.tensors();
  };
  EXPECT_EQ(run_once(), run_once());
}

TEST(Evaluate, ReportsEveryStageAndOptionalBeam) {
  SmallRun run;
  const auto greedy_only = evaluate(run.st.params, run.data.val, run.data.corpus);
  EXPECT_EQ(greedy_only.stages.size(), 3u);
  EXPECT_FALSE(greedy_only.beam.has_value());
  const auto with_beam = evaluate(run.st.params, run.data.val, run.data.corpus, 1);
  ASSERT_TRUE(with_beam.beam.has_value());
  EXPECT_NEAR(with_beam.beam->cider, with_beam.stages.back().cider, 1e-12);
  EXPECT_THROW(evaluate(run.st.params, {}, run.data.corpus), std::invalid_argument);
}
