#pragma once

// Run configuration. Text form is INI-style ("[section]" headers, "key = value"
// lines); JSON with one object per section is accepted as an alternate.
// Unknown keys and out-of-range values are rejected at load.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/json_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lvt/core/error.hpp"

namespace lvt {

enum class AttnMode { Causal, Bidirectional };
enum class Tokenization { Dynamic, Fixed };
enum class InputMode { Continuous, Quantized };
enum class LmMode { Unlocked, Frozen };
enum class VisualObjective { Classification, Regression };
enum class LossScope { All, Response };

struct DataConfig {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t feature_dim = 16;
  std::size_t bank_size = 12;
  double separation = 0.5;
  double noise_std = 0.05;
  std::size_t train_items = 2048;
  std::size_t val_items = 256;
  std::string complexity = "2:0.5,8:0.5";  // complexity:probability pairs

  std::size_t patches() const { return grid_rows * grid_cols; }
};

struct TokenizerConfig {
  std::size_t codebook_size = 64;
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t selector_hidden = 32;
  std::size_t ffn_mult = 4;
  double init_std = 0.02;
  double rate_target = 1.0 / 3.0;
  double rate_weight = 2.0;
  double temperature = 1.0;
  double temperature_final = 1.0;  // linear anneal target; equal to temperature = constant
  double commitment = 0.25;
  double ema_decay = 0.99;
  std::size_t dead_code_steps = 200;
  double revival_threshold = 0.4;  // squared unit distance a feature needs to seed a dead code
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 5e-3;
  std::size_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
};

struct DenoiserConfig {
  std::size_t diffusion_steps = 50;
  double beta_start = 2e-3;
  double beta_end = 0.4;
  std::size_t hidden = 256;
  std::size_t time_dim = 32;
  double init_std = 0.02;
  std::size_t steps = 3000;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::size_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
};

struct LmConfig {
  std::size_t text_vocab = 16;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t context = 64;
  double init_std = 0.02;
  std::size_t steps = 2500;
  std::size_t batch = 16;
  double lr = 2e-3;
  std::size_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-6;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double mix_ratio = 0.2;        // probability that a batch is text-only
  double image_first_prob = 0.5; // order sampling for multimodal sequences
  std::size_t pairs = 256;
  LossScope loss_scope = LossScope::All;
  bool supervise_specials = true;
};

struct GenerationConfig {
  double cfg_scale = 1.5;
  std::size_t top_k = 16;
  double temperature = 1.0;
  std::size_t max_len = 32;
  std::size_t candidates = 4;
};

struct AblationConfig {
  AttnMode attn_mode = AttnMode::Causal;
  Tokenization tokenization = Tokenization::Dynamic;
  InputMode input_mode = InputMode::Continuous;
  LmMode lm = LmMode::Unlocked;
  bool merger = true;
  VisualObjective visual_objective = VisualObjective::Classification;
};

struct Config {
  std::uint64_t seed = 20231003;
  DataConfig data;
  TokenizerConfig tokenizer;
  DenoiserConfig denoiser;
  LmConfig lm;
  GenerationConfig generation;
  AblationConfig ablation;
};

namespace detail {

// Which checkpoint digests a key participates in.
enum StageMask : unsigned { kNone = 0, kTok = 1, kDen = 2, kLm = 4 };

struct Field {
  std::string key;  // "section.name"
  unsigned stages;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if constexpr (std::is_floating_point_v<T>) {
    std::istringstream is(s);
    is.imbue(std::locale::classic());
    is >> v;
    if (!is || !is.eof()) throw ValidationError("config " + key + ": not a number: '" + s + "'");
  } else {
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) throw ValidationError("config " + key + ": not an unsigned integer: '" + s + "'");
  }
  return v;
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class E>
Field enum_field(std::string key, unsigned stages, E& ref, std::vector<std::pair<std::string, E>> names) {
  auto set = [key, &ref, names](const std::string& s) {
    for (const auto& [n, v] : names)
      if (n == s) {
        ref = v;
        return;
      }
    std::string opts;
    for (const auto& [n, _] : names) opts += (opts.empty() ? "" : "|") + n;
    throw ValidationError("config " + key + ": expected one of " + opts + ", got '" + s + "'");
  };
  auto get = [&ref, names]() {
    for (const auto& [n, v] : names)
      if (v == ref) return n;
    return std::string("?");
  };
  return Field{std::move(key), stages, set, get};
}

inline Field size_field(std::string key, unsigned stages, std::size_t& ref, std::size_t lo, std::size_t hi) {
  return Field{key, stages,
               [key, &ref, lo, hi](const std::string& s) {
                 auto v = parse_number<std::size_t>(key, s);
                 if (v < lo || v > hi)
                   throw ValidationError("config " + key + ": " + s + " outside [" + std::to_string(lo) + ", " +
                                         std::to_string(hi) + "]");
                 ref = v;
               },
               [&ref] { return std::to_string(ref); }};
}

inline Field real_field(std::string key, unsigned stages, double& ref, double lo, double hi, bool lo_open = false) {
  return Field{key, stages,
               [key, &ref, lo, hi, lo_open](const std::string& s) {
                 auto v = parse_number<double>(key, s);
                 if (!(lo_open ? v > lo : v >= lo) || !(v <= hi))
                   throw ValidationError("config " + key + ": " + s + " outside " + (lo_open ? "(" : "[") +
                                         fmt_double(lo) + ", " + fmt_double(hi) + "]");
                 ref = v;
               },
               [&ref] { return fmt_double(ref); }};
}

inline Field bool_field(std::string key, unsigned stages, bool& ref) {
  return Field{key, stages,
               [key, &ref](const std::string& s) {
                 if (s == "true" || s == "on" || s == "1") ref = true;
                 else if (s == "false" || s == "off" || s == "0") ref = false;
                 else throw ValidationError("config " + key + ": expected true|false, got '" + s + "'");
               },
               [&ref] { return std::string(ref ? "true" : "false"); }};
}

inline std::vector<Field> fields(Config& c) {
  constexpr std::size_t big = 1u << 30;
  constexpr double inf = 1e300;
  std::vector<Field> f;
  f.push_back(Field{"run.seed", kNone, [&c](const std::string& s) { c.seed = parse_number<std::uint64_t>("run.seed", s); },
                    [&c] { return std::to_string(c.seed); }});
  auto& d = c.data;
  f.push_back(size_field("data.grid_rows", kTok | kDen, d.grid_rows, 1, 64));
  f.push_back(size_field("data.grid_cols", kTok | kDen, d.grid_cols, 1, 64));
  f.push_back(size_field("data.feature_dim", kTok | kDen | kLm, d.feature_dim, 2, 4096));
  f.push_back(size_field("data.bank_size", kNone, d.bank_size, 1, 65535));
  f.push_back(real_field("data.separation", kNone, d.separation, -1.0, 1.0, true));
  f.push_back(real_field("data.noise_std", kNone, d.noise_std, 0.0, 10.0));
  f.push_back(size_field("data.train_items", kNone, d.train_items, 1, big));
  f.push_back(size_field("data.val_items", kNone, d.val_items, 0, big));
  f.push_back(Field{"data.complexity", kNone, [&d](const std::string& s) { d.complexity = s; },
                    [&d] { return d.complexity; }});
  auto& t = c.tokenizer;
  f.push_back(size_field("tokenizer.codebook_size", kTok | kLm, t.codebook_size, 2, 1u << 20));
  f.push_back(size_field("tokenizer.blocks", kTok, t.blocks, 1, 64));
  f.push_back(size_field("tokenizer.heads", kTok, t.heads, 1, 64));
  f.push_back(size_field("tokenizer.selector_hidden", kTok, t.selector_hidden, 1, 65536));
  f.push_back(size_field("tokenizer.ffn_mult", kTok, t.ffn_mult, 1, 64));
  f.push_back(real_field("tokenizer.init_std", kNone, t.init_std, 0.0, 10.0, true));
  f.push_back(real_field("tokenizer.rate_target", kNone, t.rate_target, 0.0, 1.0, true));
  f.push_back(real_field("tokenizer.rate_weight", kNone, t.rate_weight, 0.0, inf));
  f.push_back(real_field("tokenizer.temperature", kNone, t.temperature, 0.0, inf, true));
  f.push_back(real_field("tokenizer.temperature_final", kNone, t.temperature_final, 0.0, inf, true));
  f.push_back(real_field("tokenizer.commitment", kNone, t.commitment, 0.0, inf));
  f.push_back(real_field("tokenizer.ema_decay", kNone, t.ema_decay, 0.0, 1.0));
  f.push_back(size_field("tokenizer.dead_code_steps", kNone, t.dead_code_steps, 0, big));
  f.push_back(real_field("tokenizer.revival_threshold", kNone, t.revival_threshold, 0.0, 4.0));
  f.push_back(size_field("tokenizer.steps", kNone, t.steps, 1, big));
  f.push_back(size_field("tokenizer.batch", kNone, t.batch, 1, 65536));
  f.push_back(real_field("tokenizer.lr", kNone, t.lr, 0.0, 10.0));
  f.push_back(size_field("tokenizer.warmup", kNone, t.warmup, 0, big));
  f.push_back(real_field("tokenizer.beta1", kNone, t.beta1, 0.0, 1.0));
  f.push_back(real_field("tokenizer.beta2", kNone, t.beta2, 0.0, 1.0));
  f.push_back(real_field("tokenizer.eps", kNone, t.eps, 0.0, 1.0, true));
  f.push_back(real_field("tokenizer.weight_decay", kNone, t.weight_decay, 0.0, 10.0));
  f.push_back(real_field("tokenizer.grad_clip", kNone, t.grad_clip, 0.0, inf));
  auto& n = c.denoiser;
  f.push_back(size_field("denoiser.diffusion_steps", kDen, n.diffusion_steps, 1, 100000));
  f.push_back(real_field("denoiser.beta_start", kDen, n.beta_start, 0.0, 1.0, true));
  f.push_back(real_field("denoiser.beta_end", kDen, n.beta_end, 0.0, 1.0, true));
  f.push_back(size_field("denoiser.hidden", kDen, n.hidden, 1, 65536));
  f.push_back(size_field("denoiser.time_dim", kDen, n.time_dim, 2, 4096));
  f.push_back(real_field("denoiser.init_std", kNone, n.init_std, 0.0, 10.0, true));
  f.push_back(size_field("denoiser.steps", kNone, n.steps, 1, big));
  f.push_back(size_field("denoiser.batch", kNone, n.batch, 1, 65536));
  f.push_back(real_field("denoiser.lr", kNone, n.lr, 0.0, 10.0));
  f.push_back(size_field("denoiser.warmup", kNone, n.warmup, 0, big));
  f.push_back(real_field("denoiser.beta1", kNone, n.beta1, 0.0, 1.0));
  f.push_back(real_field("denoiser.beta2", kNone, n.beta2, 0.0, 1.0));
  f.push_back(real_field("denoiser.eps", kNone, n.eps, 0.0, 1.0, true));
  f.push_back(real_field("denoiser.weight_decay", kNone, n.weight_decay, 0.0, 10.0));
  f.push_back(real_field("denoiser.grad_clip", kNone, n.grad_clip, 0.0, inf));
  auto& l = c.lm;
  f.push_back(size_field("lm.text_vocab", kLm, l.text_vocab, 1, 1u << 20));
  f.push_back(size_field("lm.d_model", kLm, l.d_model, 2, 65536));
  f.push_back(size_field("lm.layers", kLm, l.layers, 1, 256));
  f.push_back(size_field("lm.heads", kLm, l.heads, 1, 256));
  f.push_back(size_field("lm.context", kLm, l.context, 2, 1u << 20));
  f.push_back(real_field("lm.init_std", kNone, l.init_std, 0.0, 10.0, true));
  f.push_back(size_field("lm.steps", kNone, l.steps, 1, big));
  f.push_back(size_field("lm.batch", kNone, l.batch, 1, 65536));
  f.push_back(real_field("lm.lr", kNone, l.lr, 0.0, 10.0));
  f.push_back(size_field("lm.warmup", kNone, l.warmup, 0, big));
  f.push_back(real_field("lm.beta1", kNone, l.beta1, 0.0, 1.0));
  f.push_back(real_field("lm.beta2", kNone, l.beta2, 0.0, 1.0));
  f.push_back(real_field("lm.eps", kNone, l.eps, 0.0, 1.0, true));
  f.push_back(real_field("lm.weight_decay", kNone, l.weight_decay, 0.0, 10.0));
  f.push_back(real_field("lm.grad_clip", kNone, l.grad_clip, 0.0, inf));
  f.push_back(real_field("lm.mix_ratio", kNone, l.mix_ratio, 0.0, 1.0));
  f.push_back(real_field("lm.image_first_prob", kNone, l.image_first_prob, 0.0, 1.0));
  f.push_back(size_field("lm.pairs", kNone, l.pairs, 1, big));
  f.push_back(enum_field("lm.loss_scope", kNone, l.loss_scope,
                         {{"all", LossScope::All}, {"response", LossScope::Response}}));
  f.push_back(bool_field("lm.supervise_specials", kNone, l.supervise_specials));
  auto& g = c.generation;
  f.push_back(real_field("generation.cfg_scale", kNone, g.cfg_scale, -inf, inf));
  f.push_back(size_field("generation.top_k", kNone, g.top_k, 1, 1u << 20));
  f.push_back(real_field("generation.temperature", kNone, g.temperature, 0.0, inf, true));
  f.push_back(size_field("generation.max_len", kNone, g.max_len, 1, 1u << 20));
  f.push_back(size_field("generation.candidates", kNone, g.candidates, 1, 1024));
  auto& a = c.ablation;
  f.push_back(enum_field("ablation.attn_mode", kTok, a.attn_mode,
                         {{"causal", AttnMode::Causal}, {"bidirectional", AttnMode::Bidirectional}}));
  f.push_back(enum_field("ablation.tokenization", kNone, a.tokenization,
                         {{"dynamic", Tokenization::Dynamic}, {"fixed", Tokenization::Fixed}}));
  f.push_back(enum_field("ablation.input_mode", kNone, a.input_mode,
                         {{"continuous", InputMode::Continuous}, {"quantized", InputMode::Quantized}}));
  f.push_back(enum_field("ablation.lm", kNone, a.lm, {{"unlocked", LmMode::Unlocked}, {"frozen", LmMode::Frozen}}));
  f.push_back(bool_field("ablation.merger", kTok, a.merger));
  f.push_back(enum_field("ablation.visual_objective", kLm, a.visual_objective,
                         {{"classification", VisualObjective::Classification},
                          {"regression", VisualObjective::Regression}}));
  return f;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

enum class Stage { Tokenizer, Denoiser, Lm };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Tokenizer: return "tokenizer";
    case Stage::Denoiser: return "denoiser";
    case Stage::Lm: return "lm";
  }
  return "?";
}

/// Cross-field checks that single-key ranges cannot express.
inline void validate(const Config& c) {
  if (c.tokenizer.codebook_size < 2) throw ValidationError("tokenizer.codebook_size must be >= 2");
  if (c.data.feature_dim % c.tokenizer.heads != 0)
    throw ValidationError("tokenizer.heads must divide data.feature_dim");
  if (c.lm.d_model % c.lm.heads != 0) throw ValidationError("lm.heads must divide lm.d_model");
  if (c.data.bank_size > c.lm.text_vocab)
    throw ValidationError("data.bank_size must not exceed lm.text_vocab (one label token per prototype)");
  if (c.denoiser.beta_start > c.denoiser.beta_end)
    throw ValidationError("denoiser.beta_start must not exceed denoiser.beta_end");
  if (c.data.patches() + 4 > c.lm.context)
    throw ValidationError("lm.context too short for a full image span");
}

/// Applies "section.key" = value. Throws on unknown keys.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::fields(c))
    if (f.key == key) {
      f.set(value);
      return;
    }
  throw ValidationError("unknown config key '" + key + "'");
}

inline Config parse_config(const std::string& text, bool json = false) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    if (json) pt::read_json(is, tree);
    else pt::read_ini(is, tree);
  } catch (const pt::file_parser_error& e) {
    throw ValidationError(std::string("config parse error: ") + e.what());
  }
  Config c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ValidationError("config key '" + section + "' outside of a section");
    for (const auto& [key, val] : body) {
      if (!val.empty()) throw ValidationError("config: nested value under " + section + "." + key);
      set_config_value(c, section + "." + key, val.data());
    }
  }
  validate(c);
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const bool json = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
  return parse_config(ss.str(), json);
}

/// Canonical INI text of every key, in registry order.
inline std::string dump_config(const Config& cin) {
  Config c = cin;
  std::ostringstream os;
  std::string current;
  for (auto& f : detail::fields(c)) {
    const auto dot = f.key.find('.');
    const std::string section = f.key.substr(0, dot);
    if (section != current) {
      os << (current.empty() ? "" : "\n") << '[' << section << "]\n";
      current = section;
    }
    os << f.key.substr(dot + 1) << " = " << f.get() << '\n';
  }
  return os.str();
}

/// Flat key -> value map, for JSON echoes.
inline std::map<std::string, std::string> config_map(const Config& cin) {
  Config c = cin;
  std::map<std::string, std::string> out;
  for (auto& f : detail::fields(c)) out[f.key] = f.get();
  return out;
}

/// Digest of the keys that determine a stage's parameter shapes and meaning.
inline std::uint64_t config_digest(const Config& cin, Stage stage) {
  Config c = cin;
  const unsigned bit = stage == Stage::Tokenizer ? detail::kTok : stage == Stage::Denoiser ? detail::kDen : detail::kLm;
  std::uint64_t h = detail::fnv1a(stage_name(stage));
  for (auto& f : detail::fields(c))
    if (f.stages & bit) h = detail::fnv1a(f.key + "=" + f.get() + "\n", h);
  return h;
}

/// Parses "c:p,c:p" into (complexity, probability) pairs; probabilities are
/// normalized.
inline std::vector<std::pair<std::size_t, double>> parse_complexity(const std::string& spec, std::size_t bank) {
  std::vector<std::pair<std::size_t, double>> out;
  std::stringstream ss(spec);
  std::string item;
  double total = 0;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ValidationError("data.complexity: expected c:p pairs, got '" + item + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    const auto c = detail::parse_number<std::size_t>("data.complexity", trim(item.substr(0, colon)));
    const auto p = detail::parse_number<double>("data.complexity", trim(item.substr(colon + 1)));
    if (c < 1 || c > bank) throw ValidationError("data.complexity: " + std::to_string(c) + " outside [1, bank_size]");
    if (!(p > 0)) throw ValidationError("data.complexity: probabilities must be positive");
    out.emplace_back(c, p);
    total += p;
  }
  if (out.empty()) throw ValidationError("data.complexity: empty distribution");
  for (auto& [_, p] : out) p /= total;
  return out;
}

}  // namespace lvt
