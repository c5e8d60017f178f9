#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "stackcap/config.hpp"

namespace stackcap {

// Layout:
//   8 bytes  magic "SCAPCKPT"
//   u32      format version
//   u64      manifest length, then the manifest as UTF-8 JSON
//   tensors  in manifest order (see write_tensor), then Adam m and v tensors
//            in the same order when the manifest has an "adam" entry
// All integers little-endian.

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config_hash;
  std::string model_hash;
  std::string phase;  // "xe" or "rl"
  std::size_t epoch = 0;
  double best_val_cider = -1.0;
  nlohmann::json config;
  ModelParams params;
  std::optional<AdamState> adam;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  ck.params.for_each([&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
  });
  nlohmann::json manifest = {{"config_hash", ck.config_hash},
                             {"model_hash", ck.model_hash},
                             {"phase", ck.phase},
                             {"epoch", ck.epoch},
                             {"best_val_cider", ck.best_val_cider},
                             {"vocab_size", ck.params.dims.vocab_size},
                             {"config", ck.config},
                             {"tensors", tensors}};
  manifest["adam"] = ck.adam ? nlohmann::json{{"step", ck.adam->step}} : nlohmann::json(nullptr);
  const std::string text = manifest.dump();
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  ck.params.for_each([&](const std::string&, const Tensor& t) { write_tensor(os, t); });
  if (ck.adam) {
    for (const Tensor& t : ck.adam->m) write_tensor(os, t);
    for (const Tensor& t : ck.adam->v) write_tensor(os, t);
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

/// Reads a checkpoint and checks its tensors against the skeleton that
/// `dims` implies, name by name and shape by shape.
inline Checkpoint read_checkpoint(std::istream& is, const ModelDims& dims) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  Checkpoint ck;
  try {
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto len = detail::read_le<std::uint64_t>(is);
    if (len > (1u << 26)) throw CheckpointError("checkpoint: manifest too large");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("checkpoint: truncated manifest");
    const auto manifest = nlohmann::json::parse(text);
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    ck.model_hash = manifest.at("model_hash").get<std::string>();
    ck.phase = manifest.at("phase").get<std::string>();
    ck.epoch = manifest.at("epoch").get<std::size_t>();
    ck.best_val_cider = manifest.at("best_val_cider").get<double>();
    ck.config = manifest.at("config");
    if (manifest.at("vocab_size").get<std::size_t>() != dims.vocab_size) {
      throw CheckpointError("checkpoint: vocabulary size differs from the task vocabulary");
    }

    // Skeleton from dims, then overwrite with the stored tensors.
    ck.params = init_model(dims, 0);
    const auto& entries = manifest.at("tensors");
    const auto names = ck.params.names();
    if (entries.size() != names.size()) {
      throw CheckpointError("checkpoint: holds " + std::to_string(entries.size()) + " tensors, model expects " +
                            std::to_string(names.size()));
    }
    std::size_t k = 0;
    ck.params.for_each([&](const std::string& name, Tensor& t) {
      const auto& e = entries[k++];
      if (e.at("name").get<std::string>() != name) {
        throw CheckpointError("checkpoint: expected tensor " + name + ", found " + e.at("name").get<std::string>());
      }
      Tensor stored = read_tensor(is);
      if (!(stored.shape() == t.shape()) || e.at("shape").get<Shape>() != t.shape()) {
        throw CheckpointError("checkpoint: tensor " + name + " has shape " + shape_string(stored.shape()) +
                              ", model expects " + shape_string(t.shape()));
      }
      t = std::move(stored);
    });
    if (!manifest.at("adam").is_null()) {
      AdamState a;
      a.step = manifest.at("adam").at("step").get<std::uint64_t>();
      for (auto* moments : {&a.m, &a.v}) {
        ck.params.for_each([&](const std::string& name, const Tensor& t) {
          Tensor s = read_tensor(is);
          if (!(s.shape() == t.shape())) throw CheckpointError("checkpoint: Adam moment shape mismatch for " + name);
          moments->push_back(std::move(s));
        });
      }
      ck.adam = std::move(a);
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest: ") + e.what());
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot write " + path);
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelDims& dims) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  return read_checkpoint(is, dims);
}

}  // namespace stackcap
