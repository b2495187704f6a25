#pragma once

// Binary corpus files: "LVTCORP1", u32 item count, u32 D, then per item
// u64 id, u16 rows, u16 cols, u16 caption length, u16 caption ids,
// rows*cols*D f32 features. All little-endian.

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "lvt/data/synth.hpp"
#include "lvt/io/binary.hpp"
#include "lvt/io/config.hpp"

namespace lvt {

inline constexpr char kCorpusMagic[] = "LVTCORP1";

inline std::string encode_corpus(const Corpus& c) {
  constexpr auto u16max = std::numeric_limits<std::uint16_t>::max();
  ByteWriter w;
  w.bytes(std::string(kCorpusMagic, 8));
  w.u32(static_cast<std::uint32_t>(c.items.size()));
  w.u32(static_cast<std::uint32_t>(c.feature_dim));
  for (std::size_t i = 0; i < c.items.size(); ++i) {
    const auto& it = c.items[i];
    const auto& g = it.grid;
    if (g.rows > u16max || g.cols > u16max || it.caption.size() > u16max)
      throw ValidationError("corpus record " + std::to_string(i) + ": extent exceeds 16 bits");
    if (g.features.size() != g.rows * g.cols * c.feature_dim)
      throw DimensionError("corpus record " + std::to_string(i) + ": features " + shape_str(g.features.shape()) +
                           " do not match " + std::to_string(g.rows) + "x" + std::to_string(g.cols) + "x" +
                           std::to_string(c.feature_dim));
    w.u64(g.image_id);
    w.u16(static_cast<std::uint16_t>(g.rows));
    w.u16(static_cast<std::uint16_t>(g.cols));
    w.u16(static_cast<std::uint16_t>(it.caption.size()));
    for (auto t : it.caption) w.u16(t);
    for (float v : g.features.data()) w.f32(v);
  }
  return w.buffer();
}

/// Parses and validates corpus bytes. Errors name the offending record index.
inline Corpus decode_corpus(std::string bytes, std::optional<std::size_t> expected_dim = std::nullopt) {
  ByteReader r(std::move(bytes), "corpus");
  const std::string magic = r.remaining() >= 8 ? r.bytes(8) : std::string();
  if (magic != std::string(kCorpusMagic, 8))
    throw FormatError("corpus: bad magic, expected \"" + std::string(kCorpusMagic) + "\"");
  Corpus c;
  const std::uint32_t count = r.u32();
  c.feature_dim = r.u32();
  if (c.feature_dim == 0) throw FormatError("corpus: feature dimension is zero");
  if (expected_dim && *expected_dim != c.feature_dim)
    throw ValidationError("corpus: feature dimension " + std::to_string(c.feature_dim) +
                          " does not match configured " + std::to_string(*expected_dim));
  c.items.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string rec = "record " + std::to_string(i);
    r.set_context(rec);
    CorpusItem it;
    it.grid.image_id = r.u64();
    it.grid.rows = r.u16();
    it.grid.cols = r.u16();
    if (it.grid.rows == 0 || it.grid.cols == 0) throw FormatError("corpus " + rec + ": empty grid");
    const std::uint16_t cap = r.u16();
    for (std::uint16_t k = 0; k < cap; ++k) it.caption.push_back(r.u16());
    const std::size_t n = it.grid.rows * it.grid.cols;
    std::vector<float> feats(n * c.feature_dim);
    for (auto& v : feats) {
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError("corpus " + rec + ": non-finite feature value");
    }
    it.grid.features = Tensor<float>({n, c.feature_dim}, std::move(feats));
    c.items.push_back(std::move(it));
  }
  r.set_context("");
  if (!r.done()) throw FormatError("corpus: " + std::to_string(r.remaining()) + " trailing bytes after last record");
  return c;
}

inline void write_corpus(const std::string& path, const Corpus& c) { write_file_atomic(path, encode_corpus(c)); }

inline Corpus ingest_features(const std::string& path, std::optional<std::size_t> expected_dim = std::nullopt) {
  return decode_corpus(read_file(path), expected_dim);
}

struct CorpusPaths {
  std::string train;
  std::string val;
  std::string manifest;
};

/// Writes train.lvtc, val.lvtc and manifest.json into dir.
inline CorpusPaths gen_corpus(const Config& cfg, const std::string& dir) {
  const auto bank = bank_for(cfg);
  const auto splits = gen_splits(cfg, bank, cfg.data.noise_std);
  CorpusPaths p{dir + "/train.lvtc", dir + "/val.lvtc", dir + "/manifest.json"};
  write_corpus(p.train, to_corpus(splits.train, cfg.data.feature_dim));
  write_corpus(p.val, to_corpus(splits.val, cfg.data.feature_dim));
  nlohmann::json m;
  m["seed"] = cfg.seed;
  m["counts"] = {{"train", splits.train.size()}, {"val", splits.val.size()}};
  m["id_ranges"] = {{"train", {0, splits.train.size()}},
                    {"val", {splits.train.size(), splits.train.size() + splits.val.size()}}};
  m["feature_dim"] = cfg.data.feature_dim;
  m["config"] = config_map(cfg);
  write_file_atomic(p.manifest, m.dump(2) + "\n");
  return p;
}

}  // namespace lvt
