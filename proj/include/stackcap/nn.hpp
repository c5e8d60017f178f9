#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "stackcap/autodiff.hpp"
#include "stackcap/random.hpp"

namespace stackcap {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;

/// Ids the decoder treats specially. Numeric tests may alias them on tiny
/// vocabularies; a Vocabulary always keeps them distinct.
struct SpecialTokens {
  TokenId pad = 0;
  TokenId bos = 1;
  TokenId eos = 2;
  TokenId unk = 3;

  bool is_reserved(TokenId id) const { return id == pad || id == bos || id == eos || id == unk; }
};

/// Token <-> id bijection with reserved ids 0..3 for PAD, BOS, EOS, UNK.
class Vocabulary {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";

  Vocabulary() {
    for (const char* w : {kPad, kBos, kEos, kUnk}) add(w);
  }

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  TokenId add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    words_.push_back(word);
    index_.emplace(word, words_.size() - 1);
    return words_.size() - 1;
  }

  std::size_t size() const { return words_.size(); }
  const SpecialTokens& special() const { return special_; }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  TokenId id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? special_.unk : it->second;
  }

  const std::string& word(TokenId id) const {
    if (id >= words_.size()) throw std::out_of_range("vocabulary id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  TokenSeq encode(const std::vector<std::string>& words) const {
    TokenSeq out;
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  /// Words up to the first EOS, reserved tokens dropped.
  std::vector<std::string> decode(const TokenSeq& ids) const {
    std::vector<std::string> out;
    for (TokenId t : ids) {
      if (t == special_.eos) break;
      if (!special_.is_reserved(t)) out.push_back(word(t));
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  SpecialTokens special_;
};

/// Content tokens of a generated sequence: everything before the first EOS,
/// minus reserved ids.
inline TokenSeq strip_reserved(const TokenSeq& seq, const SpecialTokens& special) {
  TokenSeq out;
  for (TokenId t : seq) {
    if (t == special.eos) break;
    if (!special.is_reserved(t)) out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters. Each struct holds plain tensors; bind() puts them on a tape.

struct Embedding {
  Tensor table;  // [|D|, d_e]
};

/// Gate blocks are laid out (input, forget, output, candidate) along columns.
struct LstmParams {
  Tensor input_weights;      // [d_in, 4 d_h]
  Tensor recurrent_weights;  // [d_h, 4 d_h]
  Tensor bias;               // [1, 4 d_h]

  std::size_t input_dim() const { return input_weights.rows(); }
  std::size_t hidden_dim() const { return recurrent_weights.rows(); }
};

struct OutputHead {
  Tensor weights;  // [d_h, |D|]
  Tensor bias;     // [1, |D|]
};

struct LstmVars {
  Var input_weights, recurrent_weights, bias;
};

struct HeadVars {
  Var weights, bias;
};

inline LstmVars bind(Tape& tape, const LstmParams& p, bool grad) {
  return {tape.leaf(p.input_weights, grad), tape.leaf(p.recurrent_weights, grad), tape.leaf(p.bias, grad)};
}

inline HeadVars bind(Tape& tape, const OutputHead& p, bool grad) {
  return {tape.leaf(p.weights, grad), tape.leaf(p.bias, grad)};
}

inline Tensor uniform_tensor(Shape shape, Rng& rng, double limit) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

inline constexpr double kInitRange = 0.08;

inline LstmParams init_lstm(std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
  LstmParams p;
  p.input_weights = uniform_tensor({input_dim, 4 * hidden_dim}, rng, kInitRange);
  p.recurrent_weights = uniform_tensor({hidden_dim, 4 * hidden_dim}, rng, kInitRange);
  p.bias = Tensor({1, 4 * hidden_dim}, 0.0);
  for (std::size_t j = hidden_dim; j < 2 * hidden_dim; ++j) p.bias[j] = 1.0;  // forget gate
  return p;
}

inline OutputHead init_head(std::size_t hidden_dim, std::size_t vocab_size, Rng& rng) {
  return {uniform_tensor({hidden_dim, vocab_size}, rng, kInitRange), Tensor({1, vocab_size}, 0.0)};
}

// ---------------------------------------------------------------------------
// Layers. All take a batch of rows.

/// Rows of the embedding table for each id.
inline Var embed(Var table, const TokenSeq& ids) { return index_select(table, ids); }

struct LstmOutput {
  Var output;  // cell output fed to the word head; identical to `hidden`
  Var hidden;
  Var cell;
};

inline LstmOutput lstm_step(const LstmVars& p, Var h_prev, Var c_prev, Var x) {
  const std::size_t hd = p.recurrent_weights.value().rows();
  if (h_prev.value().cols() != hd || c_prev.value().cols() != hd) {
    detail::shape_mismatch("lstm_step(state)", h_prev.value(), p.recurrent_weights.value());
  }
  if (x.value().cols() != p.input_weights.value().rows()) {
    detail::shape_mismatch("lstm_step(input)", x.value(), p.input_weights.value());
  }
  Var gates = add(add(matmul(x, p.input_weights), matmul(h_prev, p.recurrent_weights)), p.bias);
  Var in = sigmoid(slice_cols(gates, 0, hd));
  Var forget = sigmoid(slice_cols(gates, hd, 2 * hd));
  Var out = sigmoid(slice_cols(gates, 2 * hd, 3 * hd));
  Var cand = tanh(slice_cols(gates, 3 * hd, 4 * hd));
  Var c = add(mul(forget, c_prev), mul(in, cand));
  Var h = mul(out, tanh(c));
  return {h, h, c};
}

inline Var word_logits(const HeadVars& head, Var o) {
  if (o.value().cols() != head.weights.value().rows()) {
    detail::shape_mismatch("word head", o.value(), head.weights.value());
  }
  return add(matmul(o, head.weights), head.bias);
}

/// softmax(o W_o + b_o), one distribution per row.
inline Var predict_word_dist(const HeadVars& head, Var o) { return softmax(word_logits(head, o)); }

}  // namespace stackcap
