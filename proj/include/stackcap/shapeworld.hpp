#pragma once

#include <algorithm>
#include <array>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stackcap/attention.hpp"
#include "stackcap/metrics.hpp"
#include "stackcap/nn.hpp"
#include "stackcap/random.hpp"

namespace stackcap::shapeworld {

enum class Shape { circle, square, triangle };
enum class Color { red, green, blue };

inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 3> kColorNames{"red", "green", "blue"};

inline const char* name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
inline const char* name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

inline Shape parse_shape(const std::string& s) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i) {
    if (s == kShapeNames[i]) return static_cast<Shape>(i);
  }
  throw std::invalid_argument("unknown shape '" + s + "'");
}

inline Color parse_color(const std::string& s) {
  for (std::size_t i = 0; i < kColorNames.size(); ++i) {
    if (s == kColorNames[i]) return static_cast<Color>(i);
  }
  throw std::invalid_argument("unknown color '" + s + "'");
}

inline constexpr std::size_t kDefaultGrid = 4;
inline constexpr std::size_t kFeatureDim = 16;
inline constexpr std::size_t kMaxObjects = 3;

// Feature layout per cell.
inline constexpr std::size_t kShapeOffset = 0;
inline constexpr std::size_t kColorOffset = 3;
inline constexpr std::size_t kPresenceDim = 6;
inline constexpr std::size_t kRowDim = 7;
inline constexpr std::size_t kColDim = 8;

struct SceneObject {
  std::size_t cell = 0;
  Shape shape = Shape::circle;
  Color color = Color::red;

  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  std::size_t grid = kDefaultGrid;
  std::vector<SceneObject> objects;  // sorted by cell index

  std::size_t row(const SceneObject& o) const { return o.cell / grid; }
  std::size_t col(const SceneObject& o) const { return o.cell % grid; }

  void validate() const {
    if (grid < 2) throw std::invalid_argument("scene: grid side must be >= 2");
    if (objects.empty() || objects.size() > kMaxObjects) {
      throw std::invalid_argument("scene " + std::to_string(id) + ": object count must be in [1, 3]");
    }
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (objects[i].cell >= grid * grid) throw std::invalid_argument("scene: object cell out of range");
      if (i > 0 && objects[i].cell <= objects[i - 1].cell) {
        throw std::invalid_argument("scene " + std::to_string(id) + ": object cells must be distinct and sorted");
      }
    }
  }
};

/// One scene from its own derived stream: 1-3 objects in distinct cells,
/// uniform shape and color.
inline Scene generate_scene(std::uint64_t id, std::uint64_t master_seed, std::size_t grid = kDefaultGrid) {
  Scene s;
  s.id = id;
  s.seed = derive_seed(master_seed, "scene", id);
  s.grid = grid;
  Rng rng(s.seed);
  const std::size_t count = 1 + rng.below(kMaxObjects);
  std::vector<std::size_t> cells(grid * grid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  cells.resize(count);
  std::sort(cells.begin(), cells.end());
  for (std::size_t c : cells) {
    SceneObject o;
    o.cell = c;
    o.shape = static_cast<Shape>(rng.below(3));
    o.color = static_cast<Color>(rng.below(3));
    s.objects.push_back(o);
  }
  return s;
}

inline SpatialFeatures encode_scene(const Scene& scene) {
  scene.validate();
  const std::size_t k = scene.grid;
  SpatialFeatures f;
  f.grid = k;
  f.regions = Tensor({k * k, kFeatureDim}, 0.0);
  for (std::size_t n = 0; n < k * k; ++n) {
    f.regions(n, kRowDim) = static_cast<double>(n / k) / static_cast<double>(k - 1);
    f.regions(n, kColDim) = static_cast<double>(n % k) / static_cast<double>(k - 1);
  }
  for (const auto& o : scene.objects) {
    f.regions(o.cell, kShapeOffset + static_cast<std::size_t>(o.shape)) = 1.0;
    f.regions(o.cell, kColorOffset + static_cast<std::size_t>(o.color)) = 1.0;
    f.regions(o.cell, kPresenceDim) = 1.0;
  }
  return f;
}

/// Inverse of encode_scene: objects recovered from the presence bit and
/// the one-hot blocks.
inline std::vector<SceneObject> read_features(const SpatialFeatures& f) {
  f.validate();
  if (f.dim() != kFeatureDim) throw ShapeError("read_features: expected 16 feature dims");
  auto argmax3 = [&](std::size_t n, std::size_t off) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (f.regions(n, off + j) > f.regions(n, off + best)) best = j;
    }
    return best;
  };
  std::vector<SceneObject> out;
  for (std::size_t n = 0; n < f.num_regions(); ++n) {
    if (f.regions(n, kPresenceDim) < 0.5) continue;
    out.push_back({n, static_cast<Shape>(argmax3(n, kShapeOffset)), static_cast<Color>(argmax3(n, kColorOffset))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Captions

enum class Relation { left_of, right_of, above, below };

/// Where `a` sits relative to `b` (row 0 is the top). The axis with the larger
/// displacement decides; equal displacements go to the row axis.
inline Relation relation(const Scene& s, const SceneObject& a, const SceneObject& b) {
  const long dr = static_cast<long>(s.row(b)) - static_cast<long>(s.row(a));
  const long dc = static_cast<long>(s.col(b)) - static_cast<long>(s.col(a));
  if (dr == 0 && dc == 0) throw std::invalid_argument("relation: objects share a cell");
  if (std::labs(dr) >= std::labs(dc)) return dr > 0 ? Relation::above : Relation::below;
  return dc > 0 ? Relation::left_of : Relation::right_of;
}

inline std::vector<std::string> relation_words(Relation r) {
  switch (r) {
    case Relation::left_of: return {"left", "of"};
    case Relation::right_of: return {"right", "of"};
    case Relation::above: return {"above"};
    case Relation::below: return {"below"};
  }
  return {};
}

enum class Granularity { coarse, fine };

using Words = std::vector<std::string>;

/// Template fill. Single-object scenes use "there is a ..."; otherwise the
/// first two objects (in cell order) are related. The coarse form drops the
/// colour of the second object, or the only colour for a single object.
inline Words oracle_caption(const Scene& s, Granularity g) {
  s.validate();
  const SceneObject& a = s.objects[0];
  Words w;
  if (s.objects.size() == 1) {
    w = {"there", "is", "a"};
    if (g == Granularity::fine) w.push_back(name(a.color));
    w.push_back(name(a.shape));
    return w;
  }
  const SceneObject& b = s.objects[1];
  w = {"a", name(a.color), name(a.shape)};
  for (auto& r : relation_words(relation(s, a, b))) w.push_back(r);
  w.push_back("a");
  if (g == Granularity::fine) w.push_back(name(b.color));
  w.push_back(name(b.shape));
  return w;
}

/// Three references per scene: coarse, fine, and fine with a closing period.
inline std::vector<Words> references(const Scene& s) {
  Words fine = oracle_caption(s, Granularity::fine);
  Words closed = fine;
  closed.push_back(".");
  return {oracle_caption(s, Granularity::coarse), std::move(fine), std::move(closed)};
}

/// The closed task vocabulary; reserved ids 0..3 come first.
inline Vocabulary make_vocabulary() {
  return Vocabulary({"a", "red", "green", "blue", "circle", "square", "triangle", "left", "right", "of", "above",
                     "below", "there", "is", "."});
}

inline bool is_shape_word(const std::string& w) {
  return std::find(kShapeNames.begin(), kShapeNames.end(), w) != kShapeNames.end();
}

// ---------------------------------------------------------------------------
// Dataset

struct Example {
  Scene scene;
  SpatialFeatures features;
  std::vector<TokenSeq> refs;  // no reserved tokens
};

struct Dataset {
  Vocabulary vocab;
  std::vector<Example> train;
  std::vector<Example> val;
  CiderCorpus<TokenId> corpus;

  const std::vector<Example>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    throw std::invalid_argument("unknown split '" + name + "' (expected train or val)");
  }

  const Example& find(std::uint64_t scene_id) const {
    for (const auto* s : {&train, &val}) {
      for (const auto& e : *s) {
        if (e.scene.id == scene_id) return e;
      }
    }
    throw std::out_of_range("unknown scene id " + std::to_string(scene_id));
  }
};

inline TokenFilter<TokenId> reserved_filter(const SpecialTokens& sp) {
  return TokenFilter<TokenId>{sp.eos, {sp.pad, sp.bos, sp.unk}};
}

inline Example make_example(const Scene& scene, const Vocabulary& vocab) {
  Example e{scene, encode_scene(scene), {}};
  for (const auto& r : references(scene)) e.refs.push_back(vocab.encode(r));
  return e;
}

/// IDF table over train and val references.
inline CiderCorpus<TokenId> build_corpus(const Dataset& d) {
  std::vector<std::vector<TokenSeq>> refs;
  for (const auto* s : {&d.train, &d.val}) {
    for (const auto& e : *s) refs.push_back(e.refs);
  }
  return CiderCorpus<TokenId>(refs, reserved_filter(d.vocab.special()));
}

/// Train ids are 0..n_train-1 and val ids follow, so splits never share an id.
inline Dataset generate_dataset(std::size_t n_train, std::size_t n_val, std::uint64_t seed,
                                std::size_t grid = kDefaultGrid) {
  if (n_train == 0 || n_val == 0) throw std::invalid_argument("generate_dataset: split sizes must be positive");
  Dataset d;
  d.vocab = make_vocabulary();
  for (std::uint64_t i = 0; i < n_train + n_val; ++i) {
    auto& split = i < n_train ? d.train : d.val;
    split.push_back(make_example(generate_scene(i, seed, grid), d.vocab));
  }
  d.corpus = build_corpus(d);
  return d;
}

// JSONL: {"scene_id", "split", "grid", "seed", "objects": [{"cell","row","col","shape","color"}], "refs": [[word...]]}

inline nlohmann::json scene_to_json(const Example& e, const Vocabulary& vocab, const std::string& split) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : e.scene.objects) {
    objs.push_back({{"cell", o.cell},
                    {"row", e.scene.row(o)},
                    {"col", e.scene.col(o)},
                    {"shape", name(o.shape)},
                    {"color", name(o.color)}});
  }
  nlohmann::json refs = nlohmann::json::array();
  for (const auto& r : e.refs) refs.push_back(vocab.decode(r));
  return {{"scene_id", e.scene.id}, {"split", split},  {"grid", e.scene.grid},
          {"seed", e.scene.seed},   {"objects", objs}, {"refs", refs}};
}

inline void write_dataset_jsonl(std::ostream& out, const Dataset& d) {
  for (const auto& e : d.train) out << scene_to_json(e, d.vocab, "train").dump() << '\n';
  for (const auto& e : d.val) out << scene_to_json(e, d.vocab, "val").dump() << '\n';
}

/// Reads a dataset file; features are recomputed from the objects. Words
/// outside the task vocabulary are rejected.
inline Dataset read_dataset_jsonl(std::istream& in) {
  Dataset d;
  d.vocab = make_vocabulary();
  std::string line;
  std::size_t lineno = 0;
  std::set<std::uint64_t> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Scene s;
      s.id = j.at("scene_id").get<std::uint64_t>();
      s.seed = j.value("seed", std::uint64_t{0});
      s.grid = j.at("grid").get<std::size_t>();
      for (const auto& o : j.at("objects")) {
        s.objects.push_back({o.at("cell").get<std::size_t>(), parse_shape(o.at("shape").get<std::string>()),
                             parse_color(o.at("color").get<std::string>())});
      }
      s.validate();
      if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate scene_id " + std::to_string(s.id));
      Example e{s, encode_scene(s), {}};
      for (const auto& r : j.at("refs")) {
        Words words = r.get<Words>();
        for (const auto& w : words) {
          if (!d.vocab.contains(w) || d.vocab.special().is_reserved(d.vocab.id(w))) {
            throw std::invalid_argument("word '" + w + "' not in vocabulary");
          }
        }
        e.refs.push_back(d.vocab.encode(words));
      }
      if (e.refs.empty()) throw std::invalid_argument("scene without references");
      const std::string split = j.at("split").get<std::string>();
      if (split == "train") {
        d.train.push_back(std::move(e));
      } else if (split == "val") {
        d.val.push_back(std::move(e));
      } else {
        throw std::invalid_argument("unknown split '" + split + "'");
      }
    } catch (const std::exception& ex) {
      throw std::invalid_argument("dataset line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (d.train.empty() || d.val.empty()) throw std::invalid_argument("dataset needs train and val scenes");
  d.corpus = build_corpus(d);
  return d;
}

}  // namespace stackcap::shapeworld
