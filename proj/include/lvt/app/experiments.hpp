#pragma once

// Training and evaluation recipes shared by the CLI, the ablation pairs and
// the acceptance harness.

#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "lvt/app/pipeline.hpp"
#include "lvt/io/checkpoint.hpp"

namespace lvt {

/// Where a run writes metrics, and in which format.
struct RunOutput {
  std::string dir;  // empty = keep metrics in memory only
  MetricsFormat format = MetricsFormat::Jsonl;

  std::string metrics_path(const std::string& name) const {
    return dir + "/" + name + (format == MetricsFormat::Jsonl ? ".jsonl" : ".csv");
  }
  MetricsSink sink(const std::string& name) const {
    if (dir.empty()) return MetricsSink();
    std::filesystem::create_directories(dir);
    return MetricsSink(metrics_path(name), format);
  }
};

/// Generated corpus for one config: bank plus train/val splits.
struct Workbench {
  Config cfg;
  PrototypeBank bank;
  SyntheticSplits splits;

  static Workbench make(const Config& cfg) { return make(cfg, cfg.data.noise_std); }
  static Workbench make(const Config& cfg, double noise_std) {
    Workbench w{cfg, bank_for(cfg), {}};
    w.splits = gen_splits(cfg, w.bank, noise_std);
    return w;
  }

  std::vector<const PatchGrid*> train_grids() const { return grids(splits.train); }
  std::vector<const PatchGrid*> val_grids(std::size_t limit = SIZE_MAX) const {
    auto g = grids(splits.val);
    if (g.size() > limit) g.resize(limit);
    return g;
  }

 private:
  static std::vector<const PatchGrid*> grids(const std::vector<SyntheticItem>& items) {
    std::vector<const PatchGrid*> g;
    for (const auto& it : items) g.push_back(&it.grid);
    return g;
  }
};

using ProgressFn = std::function<void(const std::string&)>;

inline void report(const ProgressFn& p, const std::string& msg) {
  if (p) p(msg);
}

template <class S>
std::unique_ptr<Tokenizer<S>> fit_tokenizer(const Config& cfg, const std::vector<const PatchGrid*>& data,
                                            MetricsSink& sink, const ProgressFn& progress = {}) {
  auto tk = std::make_unique<Tokenizer<S>>(cfg, cfg.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.tokenizer.steps / 4);
  train_tokenizer(*tk, data, cfg, sink, 0, [&](std::size_t step, const TokenizerStepStats& st) {
    if ((step + 1) % every == 0)
      report(progress, "tokenizer step " + std::to_string(step + 1) + " loss " + std::to_string(st.loss) +
                           " keep " + std::to_string(st.keep_fraction));
  });
  return tk;
}

template <class S>
std::unique_ptr<LanguageModel<S>> fit_lm(const Config& cfg, const LmData<S>& data, MetricsSink& sink,
                                         const ProgressFn& progress = {}) {
  auto lm = std::make_unique<LanguageModel<S>>(cfg, cfg.seed);
  const std::size_t every = std::max<std::size_t>(1, cfg.lm.steps / 4);
  train_lm(*lm, data, cfg, sink, 0, [&](std::size_t step, const LmStepStats& st) {
    if ((step + 1) % every == 0)
      report(progress, "lm step " + std::to_string(step + 1) + " loss " + std::to_string(st.loss));
  });
  return lm;
}

/// Mean retained tokens per complexity level over the given items.
template <class S>
std::map<std::size_t, double> tokens_by_complexity(const Tokenizer<S>& tk, const std::vector<SyntheticItem>& items) {
  std::vector<const PatchGrid*> grids;
  for (const auto& it : items) grids.push_back(&it.grid);
  const auto toks = tokenize_all(tk, grids);
  std::map<std::size_t, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& a = acc[items[i].complexity];
    a.first += static_cast<double>(toks[i].length());
    ++a.second;
  }
  std::map<std::size_t, double> out;
  for (const auto& [c, a] : acc) out[c] = a.first / static_cast<double>(a.second);
  return out;
}

/// Fraction of retained-token pairs within an image that share a source
/// prototype and also share a code.
template <class S>
std::pair<double, std::size_t> code_agreement(const Tokenizer<S>& tk, const std::vector<SyntheticItem>& items) {
  std::vector<const PatchGrid*> grids;
  for (const auto& it : items) grids.push_back(&it.grid);
  const auto toks = tokenize_all(tk, grids);
  std::size_t pairs = 0, same = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& t = toks[i];
    for (std::size_t a = 0; a < t.length(); ++a)
      for (std::size_t b = a + 1; b < t.length(); ++b)
        if (items[i].cell_source[t.positions[a]] == items[i].cell_source[t.positions[b]]) {
          ++pairs;
          same += t.codes[a] == t.codes[b];
        }
  }
  return {pairs ? static_cast<double>(same) / static_cast<double>(pairs) : 0.0, pairs};
}

struct LmEval {
  double response_ce = 0;   // caption + end marker, image-first, held out
  double matched_wins = 0;  // matched caption more likely than a mismatched one
  double recovered = 0;     // greedy caption equals the label multiset
  std::size_t items = 0;
};

/// A caption from another item with a different label multiset.
inline std::size_t mismatched_partner(const std::vector<SyntheticItem>& items, std::size_t i, std::size_t n) {
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t j = (i + k) % n;
    if (items[j].caption != items[i].caption) return j;
  }
  throw ValidationError("no item with a different caption");
}

template <class S>
LmEval evaluate_lm(const LanguageModel<S>& lm, const Tokenizer<S>& tk, const std::vector<SyntheticItem>& items,
                   std::size_t n) {
  n = std::min(n, items.size());
  if (n < 2) throw ValidationError("evaluate_lm: need at least two held-out items");
  std::vector<const PatchGrid*> grids;
  for (std::size_t i = 0; i < n; ++i) grids.push_back(&items[i].grid);
  const auto toks = tokenize_all(tk, grids);
  const auto& cfg = lm.config();
  const SequenceOptions resp{LossScope::Response, cfg.lm.supervise_specials, true};
  GenerationOptions greedy = GenerationOptions::from(cfg);
  greedy.top_k = 1;
  LmEval ev;
  ev.items = n;
  std::vector<MultimodalSequence<S>> matched;
  std::size_t wins = 0, rec = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = image_tokens(toks[i]);
    const auto cap = caption_tokens(items[i].caption);
    const auto other = caption_tokens(items[mismatched_partner(items, i, n)].caption);
    auto a = build_sequence<S>(lm.vocab(), &img, cap, Order::ImageFirst, cfg.ablation.input_mode, resp);
    auto b = build_sequence<S>(lm.vocab(), &img, other, Order::ImageFirst, cfg.ablation.input_mode, resp);
    const auto ll = sequence_log_likelihood(lm, {&a, &b});
    wins += ll[0] > ll[1];
    matched.push_back(std::move(a));
    Rng rng = derive_rng(cfg.seed, 0xCA9000ull + i);
    auto txt = generate_text(lm, img, greedy, rng);
    std::sort(txt.begin(), txt.end());
    rec += txt == cap;
  }
  ev.response_ce = mean_cross_entropy(lm, matched);
  ev.matched_wins = static_cast<double>(wins) / static_cast<double>(n);
  ev.recovered = static_cast<double>(rec) / static_cast<double>(n);
  return ev;
}

/// Comparison table of one ablation pair.
struct AblationTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string text() const {
    std::vector<std::size_t> w(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
      w[c] = columns[c].size();
      for (const auto& r : rows) w[c] = std::max(w[c], r[c].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t c = 0; c < cells.size(); ++c)
        os << (c ? "  " : "") << std::left << std::setw(static_cast<int>(w[c])) << cells[c];
      os << '\n';
    };
    line(columns);
    for (const auto& r : rows) line(r);
    return os.str();
  }

  nlohmann::json json() const {
    nlohmann::json j;
    j["ablation"] = name;
    j["columns"] = columns;
    j["rows"] = rows;
    return j;
  }
};

inline std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"fixed-vs-dynamic",        "causal-vs-bidirectional",
                                                 "merger-on-vs-off",        "continuous-vs-quantized",
                                                 "unlocked-vs-frozen",      "classification-vs-regression"};
  return names;
}

struct AblationSetting {
  std::string label;
  std::string key;
  std::string value;
};

inline std::vector<AblationSetting> ablation_settings(const std::string& name) {
  if (name == "fixed-vs-dynamic")
    return {{"fixed", "ablation.tokenization", "fixed"}, {"dynamic", "ablation.tokenization", "dynamic"}};
  if (name == "causal-vs-bidirectional")
    return {{"causal", "ablation.attn_mode", "causal"}, {"bidirectional", "ablation.attn_mode", "bidirectional"}};
  if (name == "merger-on-vs-off") return {{"merger on", "ablation.merger", "true"}, {"merger off", "ablation.merger", "false"}};
  if (name == "continuous-vs-quantized")
    return {{"continuous", "ablation.input_mode", "continuous"}, {"quantized", "ablation.input_mode", "quantized"}};
  if (name == "unlocked-vs-frozen") return {{"unlocked", "ablation.lm", "unlocked"}, {"frozen", "ablation.lm", "frozen"}};
  if (name == "classification-vs-regression")
    return {{"classification", "ablation.visual_objective", "classification"},
            {"regression", "ablation.visual_objective", "regression"}};
  std::string known;
  for (const auto& n : ablation_names()) known += (known.empty() ? "" : ", ") + n;
  throw ValidationError("unknown ablation '" + name + "' (known: " + known + ")");
}

inline bool tokenizer_ablation(const std::string& name) {
  return name == "fixed-vs-dynamic" || name == "causal-vs-bidirectional" || name == "merger-on-vs-off";
}

/// Trains both settings of a named pair and tabulates held-out results.
/// Tokenizer pairs report {setting, mean tokens, recon-cos}; LM pairs share
/// one tokenizer and report captioning metrics. `prefit` supplies an already
/// trained model for a setting label, skipping its training.
template <class S>
AblationTable run_ablation(const std::string& name, const Workbench& wb, const RunOutput& out,
                           const ProgressFn& progress = {},
                           const std::map<std::string, const Tokenizer<S>*>& prefit = {}) {
  const auto settings = ablation_settings(name);
  AblationTable tab;
  tab.name = name;
  const auto train = wb.train_grids();
  const auto val = wb.val_grids();
  if (tokenizer_ablation(name)) {
    tab.columns = {"setting", "mean tokens", "recon-cos"};
    for (const auto& s : settings) {
      Config cfg = wb.cfg;
      set_config_value(cfg, s.key, s.value);
      validate(cfg);
      std::unique_ptr<Tokenizer<S>> owned;
      const Tokenizer<S>* tk = nullptr;
      if (auto it = prefit.find(s.label); it != prefit.end()) {
        tk = it->second;
      } else {
        report(progress, name + ": training tokenizer (" + s.label + ")");
        auto sink = out.sink("ablate_" + name + "_" + s.label);
        owned = fit_tokenizer<S>(cfg, train, sink, progress);
        tk = owned.get();
      }
      const auto ev = evaluate_tokenizer(*tk, val);
      tab.rows.push_back({s.label, fmt(ev.mean_tokens, 2), fmt(ev.recon_cosine)});
    }
    return tab;
  }
  tab.columns = {"setting", "response CE", "matched wins", "caption recovery"};
  const Tokenizer<S>* tk = nullptr;
  std::unique_ptr<Tokenizer<S>> owned;
  if (auto it = prefit.find("tokenizer"); it != prefit.end()) {
    tk = it->second;
  } else {
    report(progress, name + ": training shared tokenizer");
    auto sink = out.sink("ablate_" + name + "_tokenizer");
    owned = fit_tokenizer<S>(wb.cfg, train, sink, progress);
    tk = owned.get();
  }
  for (const auto& s : settings) {
    Config cfg = wb.cfg;
    set_config_value(cfg, s.key, s.value);
    validate(cfg);
    report(progress, name + ": training LM (" + s.label + ")");
    const auto data = build_lm_data(*tk, to_corpus(wb.splits.train, cfg.data.feature_dim).items, cfg);
    auto sink = out.sink("ablate_" + name + "_" + s.label);
    auto lm = fit_lm<S>(cfg, data, sink, progress);
    const auto ev = evaluate_lm(*lm, *tk, wb.splits.val, 64);
    tab.rows.push_back({s.label, fmt(ev.response_ce), fmt(ev.matched_wins, 3), fmt(ev.recovered, 3)});
  }
  return tab;
}

}  // namespace lvt
