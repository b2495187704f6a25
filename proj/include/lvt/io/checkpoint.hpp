#pragma once

// Checkpoint container: "LVTCKPT1", u32 format version, stage tag, u64 config
// digest, config text, u64 training step, u32 tensor count, then per tensor
// name, u8 trainable, u32 rank, u64 dims, u8 dtype tag, payload.
// Little-endian throughout.

#include <string>
#include <type_traits>

#include "lvt/core/nn.hpp"
#include "lvt/io/binary.hpp"
#include "lvt/io/config.hpp"

namespace lvt {

inline constexpr char kCheckpointMagic[] = "LVTCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <class S>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? DType::F32 : DType::F64;
}

template <class S>
struct LoadedCheckpoint {
  Stage stage;
  std::uint64_t step = 0;
  std::string config_text;
  ParamStore<S> params;
};

template <class S>
std::string encode_checkpoint(const ParamStore<S>& params, const Config& cfg, Stage stage, std::uint64_t step) {
  ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.str(stage_name(stage));
  w.u64(config_digest(cfg, stage));
  w.str(dump_config(cfg));
  w.u64(step);
  w.u32(static_cast<std::uint32_t>(params.items().size()));
  for (const auto& [name, p] : params.items()) {
    w.str(name);
    w.u8(p.trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u64(d);
    w.u8(static_cast<std::uint8_t>(dtype_of<S>()));
    for (S v : p.value.data()) {
      if constexpr (std::is_same_v<S, float>) w.f32(v);
      else w.f64(v);
    }
  }
  return w.buffer();
}

/// Parses a checkpoint and checks the stage tag and the digest of `cfg`.
template <class S>
LoadedCheckpoint<S> decode_checkpoint(std::string bytes, const Config& cfg, Stage stage) {
  ByteReader r(std::move(bytes), "checkpoint");
  const std::string magic = r.remaining() >= 8 ? r.bytes(8) : std::string();
  if (magic != std::string(kCheckpointMagic, 8))
    throw FormatError("checkpoint: bad magic, expected \"" + std::string(kCheckpointMagic) + "\"");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::string tag = r.str();
  if (tag != stage_name(stage))
    throw ValidationError("checkpoint: stage is '" + tag + "', expected '" + stage_name(stage) + "'");
  const auto digest = r.u64();
  if (digest != config_digest(cfg, stage))
    throw ValidationError("checkpoint: config digest mismatch for stage " + tag +
                          " (architecture keys differ from the supplied config)");
  LoadedCheckpoint<S> out{stage, 0, r.str(), {}};
  out.step = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    r.set_context("tensor " + std::to_string(i));
    const std::string name = r.str();
    const bool trainable = r.u8() != 0;
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor " + name + " has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || d > (1ull << 32)) throw FormatError("checkpoint: tensor " + name + " has invalid extent");
    }
    const auto tag_byte = r.u8();
    if (tag_byte != static_cast<std::uint8_t>(dtype_of<S>()))
      throw FormatError("checkpoint: tensor " + name + " dtype tag " + std::to_string(tag_byte) + " not supported");
    const std::size_t n = shape_numel(shape);
    if (r.remaining() < n * sizeof(S)) throw FormatError("checkpoint: truncated payload for tensor " + name);
    std::vector<S> data(n);
    for (auto& v : data) {
      if constexpr (std::is_same_v<S, float>) v = r.f32();
      else v = r.f64();
    }
    out.params.add(name, Tensor<S>(std::move(shape), std::move(data)), trainable);
  }
  r.set_context("");
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return out;
}

template <class S>
void save_checkpoint(const ParamStore<S>& params, const Config& cfg, Stage stage, std::uint64_t step,
                     const std::string& path) {
  write_file_atomic(path, encode_checkpoint(params, cfg, stage, step));
}

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path, const Config& cfg, Stage stage) {
  return decode_checkpoint<S>(read_file(path), cfg, stage);
}

/// Copies loaded values into an existing store with identical names and shapes.
template <class S>
void assign_params(ParamStore<S>& dst, const ParamStore<S>& src) {
  if (dst.items().size() != src.items().size())
    throw ValidationError("checkpoint: parameter count " + std::to_string(src.items().size()) + " differs from model " +
                          std::to_string(dst.items().size()));
  for (auto& [name, p] : dst.items()) {
    const auto& q = src.get(name);
    if (q.value.shape() != p.value.shape())
      throw DimensionError("checkpoint: parameter " + name + " shape " + shape_str(q.value.shape()) +
                           " differs from model " + shape_str(p.value.shape()));
    p.value = q.value;
  }
}

}  // namespace lvt
