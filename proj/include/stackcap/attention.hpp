#pragma once

#include <optional>

#include "stackcap/autodiff.hpp"
#include "stackcap/nn.hpp"

namespace stackcap {

/// k x k grid of d_v-dimensional region vectors, region n = row * k + col.
struct SpatialFeatures {
  std::size_t grid = 0;
  Tensor regions;  // [k*k, d_v]

  std::size_t num_regions() const { return grid * grid; }
  std::size_t dim() const { return regions.cols(); }

  void validate() const {
    if (grid == 0 || regions.rows() != grid * grid) {
      throw ShapeError("spatial features: expected " + std::to_string(grid * grid) +
                       " regions, got shape " + shape_string(regions.shape()));
    }
    require_finite(regions, "spatial features");
  }
};

/// Region value projection W V_n + b. A stage's projection feeds its own
/// context sum and the hidden fusion of the stage after it.
struct ValueProjection {
  Tensor weights;  // [d_v, d_a]
  Tensor bias;     // [1, d_a]
};

/// Score network of a fine stage: alpha = softmax(tanh(V W_va + h_bar W_ha) w + b).
struct AttentionScorer {
  Tensor region_weights;  // [d_v, d_a]
  Tensor hidden_weights;  // [d_h, d_a]
  Tensor score_weights;   // [d_a, 1]
  Tensor score_bias;      // [1, k*k], one logit offset per region
};

struct ValueVars {
  Var weights, bias;
};

struct ScorerVars {
  Var region_weights, hidden_weights, score_weights, score_bias;
};

inline ValueVars bind(Tape& tape, const ValueProjection& p, bool grad) {
  return {tape.leaf(p.weights, grad), tape.leaf(p.bias, grad)};
}

inline ScorerVars bind(Tape& tape, const AttentionScorer& p, bool grad) {
  return {tape.leaf(p.region_weights, grad), tape.leaf(p.hidden_weights, grad),
          tape.leaf(p.score_weights, grad), tape.leaf(p.score_bias, grad)};
}

inline ValueProjection init_value_projection(std::size_t feature_dim, std::size_t attn_dim, Rng& rng) {
  return {uniform_tensor({feature_dim, attn_dim}, rng, kInitRange), Tensor({1, attn_dim}, 0.0)};
}

inline AttentionScorer init_scorer(std::size_t feature_dim, std::size_t hidden_dim, std::size_t attn_dim,
                                   std::size_t regions, Rng& rng) {
  return {uniform_tensor({feature_dim, attn_dim}, rng, kInitRange),
          uniform_tensor({hidden_dim, attn_dim}, rng, kInitRange),
          uniform_tensor({attn_dim, 1}, rng, kInitRange), Tensor({1, regions}, 0.0)};
}

/// Projected regions for a batch: [B*R, d_v] -> [B*R, d_a].
inline Var project_values(const ValueVars& p, Var regions) {
  return add(matmul(regions, p.weights), p.bias);
}

/// Uniform attention map for `batch` rows over `regions` cells.
inline Var uniform_attention(Tape& tape, std::size_t batch, std::size_t regions) {
  return tape.constant(Tensor({batch, regions}, 1.0 / static_cast<double>(regions)));
}

/// h_bar = h_prev + sum_n alpha_prev[n] * projected_prev[n].
inline Var fuse_hidden(Var h_prev, Var alpha_prev, Var projected_prev) {
  Var pooled = weighted_sum(alpha_prev, projected_prev);
  if (!same_shape(pooled.value(), h_prev.value())) {
    detail::shape_mismatch("fuse_hidden", h_prev.value(), pooled.value());
  }
  return add(h_prev, pooled);
}

/// alpha = softmax over regions of w . tanh(keys_n + h_bar W_ha) + b_n, where
/// keys = V W_va has been precomputed for the batch ([B*R, d_a]).
inline Var attend_keys(const ScorerVars& p, Var keys, Var h_bar) {
  const std::size_t regions = p.score_bias.value().cols();
  const std::size_t batch = h_bar.value().rows();
  if (keys.value().rows() != batch * regions) detail::shape_mismatch("attend", keys.value(), h_bar.value());
  Var query = matmul(h_bar, p.hidden_weights);
  Var scores = tanh(add_repeated(keys, query));
  Var logits = reshape(matmul(scores, p.score_weights), {batch, regions});
  return softmax(add(logits, p.score_bias));
}

inline Var attend(const ScorerVars& p, Var regions, Var h_bar) {
  return attend_keys(p, matmul(regions, p.region_weights), h_bar);
}

/// sum_n alpha[n] * (W V_n + b), with the projection precomputed.
inline Var attended_context(Var alpha, Var projected) { return weighted_sum(alpha, projected); }

}  // namespace stackcap
