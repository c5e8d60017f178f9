#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace stackcap {

// Sentence-level BLEU and CIDEr over any token type with operator<.
// Captions are compared as plain token sequences; no text normalization.

template <typename Token>
using Sentence = std::vector<Token>;

template <typename Token>
using NGram = std::vector<Token>;

template <typename Token>
using NGramCounts = std::map<NGram<Token>, std::size_t>;

inline constexpr std::size_t kMaxNGram = 4;

template <typename Token>
NGramCounts<Token> count_ngrams(const Sentence<Token>& s, std::size_t n) {
  NGramCounts<Token> counts;
  if (n == 0 || s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[NGram<Token>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

/// Tokens a scorer ignores: everything from `stop` onward and every token in `drop`.
template <typename Token>
struct TokenFilter {
  std::optional<Token> stop;
  std::set<Token> drop;

  Sentence<Token> apply(const Sentence<Token>& s) const {
    Sentence<Token> out;
    for (const Token& t : s) {
      if (stop && t == *stop) break;
      if (!drop.count(t)) out.push_back(t);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// BLEU

/// Clipped n-gram matches and candidate n-gram total for one order.
struct BleuPrecision {
  std::size_t matched = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total); }
};

template <typename Token>
BleuPrecision clipped_precision(const Sentence<Token>& cand, const std::vector<Sentence<Token>>& refs,
                                std::size_t n) {
  BleuPrecision p;
  const auto cc = count_ngrams(cand, n);
  std::vector<NGramCounts<Token>> rc;
  for (const auto& r : refs) rc.push_back(count_ngrams(r, n));
  for (const auto& [gram, count] : cc) {
    std::size_t best = 0;
    for (const auto& r : rc) {
      auto it = r.find(gram);
      if (it != r.end()) best = std::max(best, it->second);
    }
    p.matched += std::min(count, best);
    p.total += count;
  }
  return p;
}

/// Reference length closest to c; ties go to the shorter reference.
template <typename Token>
std::size_t closest_ref_length(std::size_t c, const std::vector<Sentence<Token>>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [c](std::size_t len) { return len > c ? len - c : c - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

inline double brevity_penalty(std::size_t c, std::size_t r) {
  if (c == 0) return 0.0;
  if (c >= r) return 1.0;
  return std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
}

/// BLEU-n_max of one candidate: geometric mean of clipped precisions for
/// n = 1..n_max times the brevity penalty. Any zero precision gives 0.
template <typename Token>
double bleu(const Sentence<Token>& cand, const std::vector<Sentence<Token>>& refs, std::size_t n_max = kMaxNGram) {
  if (refs.empty()) throw std::invalid_argument("bleu: empty reference list");
  if (n_max < 1 || n_max > kMaxNGram) throw std::invalid_argument("bleu: n_max must be in 1..4");
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    const double p = clipped_precision(cand, refs, n).value();
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  return brevity_penalty(cand.size(), closest_ref_length(cand.size(), refs)) *
         std::exp(log_sum / static_cast<double>(n_max));
}

// ---------------------------------------------------------------------------
// CIDEr

/// Document frequencies of reference n-grams (n = 1..4), one document per image.
template <typename Token>
class CiderCorpus {
 public:
  CiderCorpus() = default;

  explicit CiderCorpus(const std::vector<std::vector<Sentence<Token>>>& refs_per_image,
                       TokenFilter<Token> filter = {})
      : filter_(std::move(filter)), built_(true) {
    if (refs_per_image.empty()) throw std::invalid_argument("cider corpus: no images");
    num_images_ = refs_per_image.size();
    for (const auto& refs : refs_per_image) {
      std::set<NGram<Token>> seen;
      for (const auto& r : refs) {
        const auto clean = filter_.apply(r);
        for (std::size_t n = 1; n <= kMaxNGram; ++n) {
          for (const auto& kv : count_ngrams(clean, n)) seen.insert(kv.first);
        }
      }
      for (const auto& g : seen) ++df_[g];
    }
  }

  bool built() const { return built_; }
  std::size_t num_images() const { return num_images_; }
  const TokenFilter<Token>& filter() const { return filter_; }

  std::size_t document_frequency(const NGram<Token>& g) const {
    auto it = df_.find(g);
    return it == df_.end() ? 0 : it->second;
  }

  /// log(N / max(1, df)); n-grams absent from the references get log N.
  double idf(const NGram<Token>& g) const {
    require_built();
    return std::log(static_cast<double>(num_images_) /
                    static_cast<double>(std::max<std::size_t>(1, document_frequency(g))));
  }

  /// Raw CIDEr in [0, 1]: mean over n = 1..4 of the mean TF-IDF cosine
  /// similarity to each reference.
  double score(const Sentence<Token>& candidate, const std::vector<Sentence<Token>>& refs) const {
    require_built();
    if (refs.empty()) throw std::invalid_argument("cider: empty reference list");
    const auto cand = filter_.apply(candidate);
    if (cand.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t n = 1; n <= kMaxNGram; ++n) {
      const auto cv = tfidf(cand, n);
      double per_n = 0.0;
      for (const auto& r : refs) per_n += cosine(cv, tfidf(filter_.apply(r), n));
      total += per_n / static_cast<double>(refs.size());
    }
    return total / static_cast<double>(kMaxNGram);
  }

 private:
  using Vec = std::map<NGram<Token>, double>;

  void require_built() const {
    if (!built_) throw std::logic_error("cider: corpus has no document frequencies");
  }

  Vec tfidf(const Sentence<Token>& s, std::size_t n) const {
    Vec v;
    const auto counts = count_ngrams(s, n);
    std::size_t total = 0;
    for (const auto& kv : counts) total += kv.second;
    for (const auto& [g, c] : counts) v[g] = static_cast<double>(c) / static_cast<double>(total) * idf(g);
    return v;
  }

  static double cosine(const Vec& a, const Vec& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, x] : a) {
      na += x * x;
      auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& kv : b) nb += kv.second * kv.second;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  }

  TokenFilter<Token> filter_;
  bool built_ = false;
  std::size_t num_images_ = 0;
  std::map<NGram<Token>, std::size_t> df_;
};

/// CIDEr is reported x10 in tables; all internal values stay raw.
inline constexpr double kCiderReportScale = 10.0;

// ---------------------------------------------------------------------------
// Reward dispatch

enum class RewardMetric { cider, bleu4, mix };

inline RewardMetric parse_reward_metric(const std::string& name) {
  if (name == "cider") return RewardMetric::cider;
  if (name == "bleu4") return RewardMetric::bleu4;
  if (name == "mix") return RewardMetric::mix;
  throw std::invalid_argument("unknown reward metric '" + name + "' (expected cider, bleu4 or mix)");
}

inline std::string to_string(RewardMetric m) {
  switch (m) {
    case RewardMetric::cider: return "cider";
    case RewardMetric::bleu4: return "bleu4";
    case RewardMetric::mix: return "mix";
  }
  return "?";
}

/// mix = 0.5 CIDEr + 0.5 BLEU-4. BLEU sees the same filtered tokens as CIDEr.
template <typename Token>
double reward(const Sentence<Token>& cand, const std::vector<Sentence<Token>>& refs,
              const CiderCorpus<Token>& corpus, RewardMetric metric) {
  auto bleu4 = [&] {
    std::vector<Sentence<Token>> clean;
    for (const auto& r : refs) clean.push_back(corpus.filter().apply(r));
    return bleu(corpus.filter().apply(cand), clean, 4);
  };
  switch (metric) {
    case RewardMetric::cider: return corpus.score(cand, refs);
    case RewardMetric::bleu4: return bleu4();
    case RewardMetric::mix: return 0.5 * corpus.score(cand, refs) + 0.5 * bleu4();
  }
  throw std::invalid_argument("reward: unknown metric");
}

// ---------------------------------------------------------------------------
// Fixture corpus files: one JSON object per line, {"image_id": ..., "refs": [[tok, ...], ...]}.

struct ReferenceRecord {
  std::string image_id;
  std::vector<Sentence<std::string>> refs;
};

inline std::vector<ReferenceRecord> read_reference_jsonl(std::istream& in) {
  std::vector<ReferenceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ReferenceRecord r;
      r.image_id = j.at("image_id").is_string() ? j.at("image_id").get<std::string>() : j.at("image_id").dump();
      r.refs = j.at("refs").get<std::vector<Sentence<std::string>>>();
      if (r.refs.empty()) throw std::invalid_argument("empty refs");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::invalid_argument("reference file line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace stackcap
