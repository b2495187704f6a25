#pragma once

// Command-line front end. run_cli returns the process exit code:
// 0 success, 1 validation or usage error, 2 runtime failure.

#include <CLI11.hpp>
#include <iostream>

#include "lvt/app/acceptance.hpp"
#include "lvt/data/corpus_io.hpp"

namespace lvt {

namespace cli_detail {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "lvt_out";
  std::string metrics = "jsonl";
  std::vector<std::string> overrides;  // key=value
};

inline Config resolve_config(const Globals& g) {
  Config cfg = g.config_path.empty() ? Config{} : load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  validate(cfg);
  return cfg;
}

inline RunOutput run_output(const Globals& g) {
  return RunOutput{g.out + "/metrics", parse_metrics_format(g.metrics)};
}

// Items of a corpus file, or of the generated train split when no file is
// given.
inline std::vector<CorpusItem> load_items(const Config& cfg, const std::string& path) {
  if (!path.empty()) return ingest_features(path, cfg.data.feature_dim).items;
  const auto bank = bank_for(cfg);
  return to_corpus(gen_splits(cfg, bank, cfg.data.noise_std).train, cfg.data.feature_dim).items;
}

inline std::vector<const PatchGrid*> grids_of(const std::vector<CorpusItem>& items) {
  std::vector<const PatchGrid*> g;
  for (const auto& it : items) g.push_back(&it.grid);
  return g;
}

inline const CorpusItem& find_item(const std::vector<CorpusItem>& items, std::uint64_t id) {
  for (const auto& it : items)
    if (it.grid.image_id == id) return it;
  throw ValidationError("no item with id " + std::to_string(id));
}

inline std::vector<std::size_t> parse_ids(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(0, tok.find_first_not_of(' '));
    tok.erase(tok.find_last_not_of(' ') + 1);
    if (tok.empty()) continue;
    out.push_back(detail::parse_number<std::size_t>("prompt", tok));
  }
  return out;
}

template <class V>
std::string join(const V& v, const char* sep = " ") {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? sep : "") << v[i];
  return os.str();
}

template <class S>
Tokenizer<S> load_tokenizer(const Config& cfg, const std::string& path) {
  Tokenizer<S> tk(cfg, cfg.seed);
  assign_params(tk.params(), load_checkpoint<S>(path, cfg, Stage::Tokenizer).params);
  return tk;
}

template <class S>
LanguageModel<S> load_lm(const Config& cfg, const std::string& path) {
  LanguageModel<S> lm(cfg, cfg.seed);
  assign_params(lm.params(), load_checkpoint<S>(path, cfg, Stage::Lm).params);
  return lm;
}

/// Generated codes carry no raster positions; tokens are spread evenly over
/// the grid in order.
inline std::vector<std::size_t> spread_positions(std::size_t T, std::size_t N) {
  std::vector<std::size_t> p(T);
  for (std::size_t k = 0; k < T; ++k) p[k] = k * N / T;
  return p;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  using S = float;
  CLI::App app{"Dynamic visual tokenizer, multimodal LM and denoiser on synthetic patch grids", "lvt"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "INI (or .json) config file");
  app.add_option("--seed", g.seed, "Override run.seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--metrics", g.metrics, "Metrics format: jsonl or csv")->capture_default_str();
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set lm.steps=100");
  app.fallthrough();

  std::string corpus, tok_path, lm_path, den_path, prompt, ablation;
  std::uint64_t item_id = 0;
  bool denoise = false;

  auto* gen = app.add_subcommand("gen-corpus", "Write train/val corpus files and a manifest");
  auto* ttok = app.add_subcommand("train-tokenizer", "Train the dynamic tokenizer");
  ttok->add_option("--corpus", corpus, "Training corpus (default: generated train split)");
  auto* tden = app.add_subcommand("train-denoiser", "Train the conditional denoiser");
  tden->add_option("--corpus", corpus, "Training corpus (default: generated train split)");
  tden->add_option("--tokenizer", tok_path, "Tokenizer checkpoint (default: OUT/tokenizer.ckpt)");
  auto* tlm = app.add_subcommand("train-lm", "Train the multimodal LM");
  tlm->add_option("--corpus", corpus, "Training corpus (default: generated train split)");
  tlm->add_option("--tokenizer", tok_path, "Tokenizer checkpoint (default: OUT/tokenizer.ckpt)");
  auto* tokz = app.add_subcommand("tokenize", "Print the code sequence of one item");
  tokz->add_option("--input", corpus, "Corpus file")->required();
  tokz->add_option("--id", item_id, "Item id")->required();
  tokz->add_option("--tokenizer", tok_path, "Tokenizer checkpoint (default: OUT/tokenizer.ckpt)");
  auto* gimg = app.add_subcommand("generate-image", "Text prompt to visual codes, optionally denoised");
  gimg->add_option("--prompt", prompt, "Comma-separated text ids")->required();
  gimg->add_option("--tokenizer", tok_path, "Tokenizer checkpoint (default: OUT/tokenizer.ckpt)");
  gimg->add_option("--lm", lm_path, "LM checkpoint (default: OUT/lm.ckpt)");
  gimg->add_option("--denoiser", den_path, "Denoiser checkpoint (default: OUT/denoiser.ckpt)");
  gimg->add_flag("--denoise", denoise, "Decode the codes and refine them with the denoiser");
  auto* gtxt = app.add_subcommand("generate-text", "Caption one corpus item");
  gtxt->add_option("--input", corpus, "Corpus file")->required();
  gtxt->add_option("--id", item_id, "Item id")->required();
  gtxt->add_option("--tokenizer", tok_path, "Tokenizer checkpoint (default: OUT/tokenizer.ckpt)");
  gtxt->add_option("--lm", lm_path, "LM checkpoint (default: OUT/lm.ckpt)");
  auto* abl = app.add_subcommand("ablate", "Train and compare a named ablation pair");
  abl->add_option("name", ablation, "One of: " + join(ablation_names(), ", "))->required();
  auto* acc = app.add_subcommand("accept", "Run the acceptance suite");
  auto* show = app.add_subcommand("config", "Print the resolved config as INI");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::Error& e) {
    app.exit(e, out, err);
    return 1;
  }

  auto path_or = [&](const std::string& p, const char* file) { return p.empty() ? g.out + "/" + file : p; };
  try {
    const Config cfg = resolve_config(g);
    const RunOutput ro = run_output(g);
    if (show->parsed()) {
      out << dump_config(cfg);
      return 0;
    }
    std::filesystem::create_directories(g.out);
    auto progress = [&err](const std::string& m) { err << m << std::endl; };

    if (gen->parsed()) {
      const auto p = gen_corpus(cfg, g.out);
      out << "wrote " << p.train << ", " << p.val << ", " << p.manifest << "\n";
    } else if (ttok->parsed()) {
      const auto items = load_items(cfg, corpus);
      auto sink = ro.sink("tokenizer");
      auto tk = fit_tokenizer<S>(cfg, grids_of(items), sink, progress);
      const auto path = g.out + "/tokenizer.ckpt";
      save_checkpoint(tk->params(), cfg, Stage::Tokenizer, cfg.tokenizer.steps, path);
      const auto ev = evaluate_tokenizer(*tk, grids_of(items));
      out << "saved " << path << "\nkeep fraction " << fmt(ev.keep_fraction) << ", recon cosine "
          << fmt(ev.recon_cosine) << ", mean tokens " << fmt(ev.mean_tokens, 2) << "\n";
    } else if (tden->parsed()) {
      const auto items = load_items(cfg, corpus);
      const auto tk = load_tokenizer<S>(cfg, path_or(tok_path, "tokenizer.ckpt"));
      const auto [z0, cond] = denoiser_pairs(tk, grids_of(items));
      Denoiser<S> den(z0.cols(), cond.cols(), cfg.denoiser, cfg.seed);
      auto sink = ro.sink("denoiser");
      train_denoiser(den, z0, cond, cfg, sink);
      const auto path = g.out + "/denoiser.ckpt";
      save_checkpoint(den.params(), cfg, Stage::Denoiser, cfg.denoiser.steps, path);
      out << "saved " << path << "\nfinal loss " << fmt(metric_number(sink.records().back(), "loss")) << "\n";
    } else if (tlm->parsed()) {
      const auto items = load_items(cfg, corpus);
      const auto tk = load_tokenizer<S>(cfg, path_or(tok_path, "tokenizer.ckpt"));
      const auto data = build_lm_data(tk, items, cfg);
      auto sink = ro.sink("lm");
      auto lm = fit_lm<S>(cfg, data, sink, progress);
      const auto path = g.out + "/lm.ckpt";
      save_checkpoint(lm->params(), cfg, Stage::Lm, cfg.lm.steps, path);
      out << "saved " << path << "\nfinal loss " << fmt(metric_number(sink.records().back(), "loss")) << "\n";
    } else if (tokz->parsed()) {
      const auto items = ingest_features(corpus, cfg.data.feature_dim).items;
      const auto tk = load_tokenizer<S>(cfg, path_or(tok_path, "tokenizer.ckpt"));
      const auto& it = find_item(items, item_id);
      const auto t = tk.tokenize(std::vector<const PatchGrid*>{&it.grid}).front();
      out << "T " << t.length() << "\ncodes " << join(t.codes) << "\npositions " << join(t.positions)
          << "\nkeep fraction " << fmt(double(t.length()) / double(tk.patches())) << "\n";
    } else if (gimg->parsed()) {
      const auto tk = load_tokenizer<S>(cfg, path_or(tok_path, "tokenizer.ckpt"));
      const auto lm = load_lm<S>(cfg, path_or(lm_path, "lm.ckpt"));
      const auto text = parse_ids(prompt);
      Rng rng = derive_rng(cfg.seed, 0x9E7E0ull);
      auto gopt = GenerationOptions::from(cfg);
      std::vector<std::vector<std::size_t>> cands;
      std::vector<bool> term;
      for (std::size_t c = 0; c < cfg.generation.candidates; ++c) {
        auto gi = generate_image_tokens(lm, text, gopt, rng);
        if (gi.codes.empty()) continue;
        cands.push_back(std::move(gi.codes));
        term.push_back(gi.terminated);
      }
      if (cands.empty()) throw NumericError("generate-image: every candidate ended before its first code");
      const std::size_t best = rerank_by_likelihood(lm, cands, text);
      const auto& codes = cands[best];
      out << "T " << codes.size() << (term[best] ? "" : " (truncated at max_len)") << "\ncodes " << join(codes)
          << "\n";
      if (denoise) {
        const auto recon = tk.decode_tokens(codes, spread_positions(codes.size(), tk.patches()));
        Denoiser<S> den(recon.size(), recon.size(), cfg.denoiser, cfg.seed);
        assign_params(den.params(), load_checkpoint<S>(path_or(den_path, "denoiser.ckpt"), cfg, Stage::Denoiser).params);
        const auto cond = recon.reshaped({1, recon.size()});
        const auto z = ddpm_sample<S>(den.predictor(), cond, recon.size(), schedule_for(cfg), rng);
        nlohmann::json j;
        j["codes"] = codes;
        j["rows"] = tk.patches();
        j["dim"] = tk.dim();
        j["signal"] = z.vec();
        const auto path = g.out + "/generated.json";
        write_file_atomic(path, j.dump() + "\n");
        out << "denoised signal written to " << path << "\n";
      }
    } else if (gtxt->parsed()) {
      const auto items = ingest_features(corpus, cfg.data.feature_dim).items;
      const auto tk = load_tokenizer<S>(cfg, path_or(tok_path, "tokenizer.ckpt"));
      const auto lm = load_lm<S>(cfg, path_or(lm_path, "lm.ckpt"));
      const auto& it = find_item(items, item_id);
      const auto img = image_tokens(tk.tokenize(std::vector<const PatchGrid*>{&it.grid}).front());
      Rng rng = derive_rng(cfg.seed, 0x7E47ull + item_id);
      const auto text = generate_text(lm, img, GenerationOptions::from(cfg), rng);
      out << "caption " << join(text) << "\n";
    } else if (abl->parsed()) {
      ablation_settings(ablation);  // validates the name before any work
      const auto wb = Workbench::make(cfg);
      const auto tab = run_ablation<S>(ablation, wb, ro, progress);
      out << tab.text();
      write_file_atomic(g.out + "/ablate_" + ablation + ".json", tab.json().dump(2) + "\n");
    } else if (acc->parsed()) {
      AcceptanceOptions ao;
      ao.out = RunOutput{g.out + "/accept", ro.format};
      ao.progress = progress;
      ao.on_result = [&out](const CriterionResult& r) { out << r.line() << std::endl; };
      const auto rep = run_acceptance(cfg, ao);
      write_file_atomic(g.out + "/accept/report.json", rep.json().dump(2) + "\n");
      const auto passed = std::count_if(rep.results.begin(), rep.results.end(), [](auto& r) { return r.pass; });
      out << passed << "/" << rep.results.size() << " criteria passed\n";
      return rep.all_passed() ? 0 : 2;
    }
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace lvt
