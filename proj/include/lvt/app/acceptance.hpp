#pragma once

// The acceptance suite: twelve criteria, each reported as one pass/fail line.
// Self-contained: generates its corpora, trains every stage, evaluates.

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "lvt/app/experiments.hpp"
#include "lvt/app/oracles.hpp"

namespace lvt {

struct CriterionResult {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;

  std::string line() const {
    return std::string(pass ? "PASS" : "FAIL") + " [" + (id < 10 ? " " : "") + std::to_string(id) + "] " + title +
           ": " + detail;
  }
};

struct AcceptanceReport {
  std::vector<CriterionResult> results;

  bool all_passed() const {
    return !results.empty() &&
           std::all_of(results.begin(), results.end(), [](const CriterionResult& r) { return r.pass; });
  }
  nlohmann::json json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : results) j.push_back({{"id", r.id}, {"title", r.title}, {"pass", r.pass}, {"detail", r.detail}});
    return j;
  }
};

namespace accept_detail {

inline std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

inline Config tiny_tokenizer_config() {
  Config c;
  c.data.grid_rows = 2;
  c.data.grid_cols = 2;
  c.data.feature_dim = 4;
  c.data.bank_size = 4;
  c.tokenizer.codebook_size = 4;
  c.tokenizer.blocks = 1;
  c.tokenizer.heads = 1;
  c.tokenizer.selector_hidden = 4;
  c.tokenizer.ffn_mult = 2;
  c.tokenizer.init_std = 0.5;
  c.lm.text_vocab = 4;
  c.lm.context = 16;
  return c;
}

inline Config tiny_lm_config() {
  Config c;
  c.data.grid_rows = 2;
  c.data.grid_cols = 2;
  c.data.feature_dim = 4;
  c.data.bank_size = 4;
  c.tokenizer.codebook_size = 16;
  c.tokenizer.heads = 1;
  c.lm.text_vocab = 12;
  c.lm.d_model = 8;
  c.lm.heads = 2;
  c.lm.layers = 1;
  c.lm.context = 32;
  c.lm.init_std = 0.3;
  return c;
}

inline CriterionResult gradient_oracle() {
  double ops = 0, tok = 0, lmw = 0, eps = 0;
  std::string worst_op;
  for (const auto& c : oracle::op_cases())
    for (int p = 0; p < 10; ++p) {
      const double e = oracle::check_op(c, p).max_rel_error;
      if (e > ops || worst_op.empty()) {
        ops = e;
        worst_op = c.name;
      }
    }
  using T = Tensor<double>;
  const Config tc = tiny_tokenizer_config();
  for (int p = 0; p < 10; ++p) {
    Tokenizer<double> tk(tc, 100 + p);
    Rng rng(200 + p);
    const T X = randn<double>({8, 4}, rng);
    const T G = gumbel_noise<double>({8, 2}, rng);
    auto f = [&](Tape<double>& t) {
      TokenizerForwardOptions<double> opt;
      opt.relaxed = true;
      opt.quantize = false;
      opt.gumbel = &G;
      opt.tau = 0.7;
      auto o = tk.forward(t, X, opt);
      return tokenizer_loss(t.constant(X), o.recon, o.keep, 1.0 / 3.0, 2.0);
    };
    tok = std::max(tok, check_param_gradients(tk.params(), f, 1e-5, 12).max_rel_error);
  }
  const Config lc = tiny_lm_config();
  for (int p = 0; p < 10; ++p) {
    LanguageModel<double> lm(lc, 40 + p);
    Rng rng(p);
    std::uniform_int_distribution<std::size_t> code(0, 15), word(0, 11);
    const ImageTokens<double> img{{code(rng), code(rng), code(rng)}, randn<double>({3, 4}, rng)};
    auto a = build_sequence<double>(lm.vocab(), &img, {word(rng), word(rng)}, Order::ImageFirst,
                                    InputMode::Continuous, {LossScope::All, true, true});
    auto b = build_sequence<double>(lm.vocab(), &img, {word(rng)}, Order::TextFirst, InputMode::Continuous);
    lmw = std::max(lmw, check_param_gradients(
                            lm.params(), [&](Tape<double>& t) { return lm_loss(t, lm, {&a, &b}); }, 1e-5, 8)
                            .max_rel_error);
  }
  DenoiserConfig dc;
  dc.diffusion_steps = 10;
  dc.hidden = 6;
  dc.time_dim = 4;
  dc.init_std = 0.5;
  const auto sched = NoiseSchedule::linear(dc.diffusion_steps, dc.beta_start, dc.beta_end);
  for (int p = 0; p < 10; ++p) {
    Denoiser<double> den(3, 2, dc, 100 + p);
    Rng rng(p);
    const auto z0 = randn<double>({4, 3}, rng), cond = randn<double>({4, 2}, rng), e = randn<double>({4, 3}, rng);
    std::uniform_int_distribution<std::size_t> step(1, dc.diffusion_steps);
    std::vector<std::size_t> ts(4);
    for (auto& x : ts) x = step(rng);
    const auto pred = den.predictor();
    eps = std::max(eps, check_param_gradients(
                            den.params(),
                            [&](Tape<double>& t) { return epsilon_loss_at(t, pred, z0, cond, ts, e, sched); }, 1e-5,
                            16)
                            .max_rel_error);
  }
  const double worst = std::max({ops, tok, lmw, eps});
  return {1, "gradient oracle", worst < 1e-4,
          "max rel err ops " + sci(ops) + " (" + worst_op + "), tokenizer loss " + sci(tok) + ", LM loss " +
              sci(lmw) + ", noise loss " + sci(eps) + " (< 1e-4, " + std::to_string(oracle::op_cases().size()) +
              " ops x 10 points)"};
}

inline CriterionResult quantizer_oracle() {
  using T = Tensor<double>;
  Rng rng(7);
  T codes = randn<double>({64, 16}, rng);
  T queries = randn<double>({1000, 16}, rng);
  // exact ties: code 40 duplicates the direction of code 5
  for (std::size_t d = 0; d < 16; ++d) codes.at(40, d) = 2.0 * codes.at(5, d);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t d = 0; d < 16; ++d) queries.at(i, d) = codes.at(5, d);
  const auto q = quantize(queries, codes);
  std::size_t match = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto r = queries.row(i);
    match += q.codes[i] == oracle::brute_force_code(codes, std::vector<double>(r.begin(), r.end()));
  }
  return {2, "quantizer oracle", match == 1000,
          std::to_string(match) + "/1000 ids equal brute force (K = 64, 20 exact ties)"};
}

inline CriterionResult gumbel_softmax() {
  Rng rng(11);
  double worst = 0;
  int sharp = 0;  // random draws whose tau 0.01 row max exceeds 0.99
  for (int draw = 0; draw < 1000; ++draw) {
    Tape<double> t;
    auto pi = t.constant(randn<double>({1, 2}, rng, 3.0));
    const auto g = gumbel_noise<double>({1, 2}, rng);
    const double tau = 0.05 + 5.0 * uniform_open<double>(rng);
    const auto y = gumbel_relax(pi, g, tau).value();
    worst = std::max(worst, std::abs(y[0] + y[1] - 1.0));
    const auto c = gumbel_relax(pi, g, 0.01).value();
    if (std::max(c[0], c[1]) > 0.99) ++sharp;
  }
  Tape<double> t;
  const auto y = gumbel_relax(t.constant(Tensor<double>::matrix({{0.3, -0.2}})),
                              Tensor<double>::matrix({{0.1, 0.4}}), 0.01)
                     .value();
  const double peak = std::max(y[0], y[1]);
  return {3, "Gumbel-Softmax", worst <= 1e-6 && peak > 0.99,
          "max |row sum - 1| " + sci(worst) + " over 1000 draws (<= 1e-6); tau 0.01 max entry " + fmt(peak, 6) +
              " (> 0.99); same draws at tau 0.01: " + std::to_string(sharp) + "/1000 above 0.99"};
}

template <class S>
double merger_causality(const Tokenizer<S>& tk, const std::vector<const PatchGrid*>& grids, Rng& rng) {
  const std::size_t n = tk.patches(), d = tk.dim();
  double worst = 0;
  for (int trial = 0; trial < 16; ++trial) {
    const auto* g = grids[static_cast<std::size_t>(trial) % grids.size()];
    const Tensor<S> X = tk.stack(std::vector<const PatchGrid*>{g});
    const auto tok = tk.tokenize(std::vector<const PatchGrid*>{g}).front();
    Tensor<S> keep({n});
    for (std::size_t i = 0; i < n; ++i) keep[i] = tok.mask.keep[i] ? S{1} : S{0};
    // a retained position with at least one retained predecessor
    std::vector<std::size_t> later(tok.positions.begin() + (tok.positions.size() > 1 ? 1 : 0), tok.positions.end());
    const std::size_t j = later[std::uniform_int_distribution<std::size_t>(0, later.size() - 1)(rng)];
    Tensor<S> Xp = X;
    for (std::size_t k = 0; k < d; ++k) Xp.at(j, k) += static_cast<S>(0.7);
    Tape<S> t;
    const auto y0 = tk.merge(t, t.constant(X), t.constant(keep), 1).value();
    const auto y1 = tk.merge(t, t.constant(Xp), t.constant(keep), 1).value();
    for (std::size_t i = 0; i < j; ++i)
      if (keep[i] != S{0})
        for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::abs(double(y0.at(i, k)) - double(y1.at(i, k))));
  }
  return worst;
}

template <class S>
double lm_causality(const LanguageModel<S>& lm, const std::vector<ImageTokens<S>>& images,
                    const std::vector<std::vector<std::size_t>>& captions, Rng& rng) {
  const auto& v = lm.vocab();
  double worst = 0;
  for (int trial = 0; trial < 16; ++trial) {
    const std::size_t i = static_cast<std::size_t>(trial) % images.size();
    const Order order = trial % 2 ? Order::TextFirst : Order::ImageFirst;
    auto base = build_sequence<S>(v, &images[i], captions[i], order, lm.config().ablation.input_mode);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(1, base.size() - 1)(rng);
    auto pert = base;
    if (v.is_visual(pert.ids[j])) {
      pert.ids[j] = v.visual_id((v.code_of(pert.ids[j]) + 1) % v.codebook);
      const auto& ov = pert.visual_positions;
      for (std::size_t k = 0; k < ov.size(); ++k)
        if (ov[k] == j)
          for (std::size_t d = 0; d < pert.visual_features.cols(); ++d) pert.visual_features.at(k, d) += S{1};
    } else {
      pert.ids[j] = pert.ids[j] == v.text_id(0) ? v.text_id(1) : v.text_id(0);
    }
    Tape<S> t;
    const auto a = lm.forward(t, {&base}).logits.value();
    const auto b = lm.forward(t, {&pert}).logits.value();
    for (std::size_t p = 0; p < j; ++p)
      for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(double(a.at(p, c)) - double(b.at(p, c))));
  }
  return worst;
}

/// First `n` data lines of a metrics file (plus the header for CSV).
inline std::string metrics_prefix(const std::string& path, std::size_t n, MetricsFormat fmt) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metrics file " + path);
  std::string out, line;
  const std::size_t want = n + (fmt == MetricsFormat::Csv ? 1 : 0);
  for (std::size_t i = 0; i < want && std::getline(in, line); ++i) out += line + "\n";
  return out;
}

inline std::string file_bytes(const std::string& path) { return read_file(path); }

/// Saves, reloads and compares every tensor bit for bit.
template <class S>
bool checkpoint_round_trip(const ParamStore<S>& params, const Config& cfg, Stage stage, std::uint64_t step,
                           const std::string& path) {
  save_checkpoint(params, cfg, stage, step, path);
  const auto loaded = load_checkpoint<S>(path, cfg, stage);
  if (loaded.step != step || loaded.params.items().size() != params.items().size()) return false;
  for (const auto& [name, p] : params.items()) {
    const auto& q = loaded.params.get(name);
    if (q.value.shape() != p.value.shape() || q.trainable != p.trainable) return false;
    if (std::memcmp(q.value.data().data(), p.value.data().data(), p.value.size() * sizeof(S)) != 0) return false;
  }
  return encode_checkpoint(loaded.params, cfg, stage, step) == file_bytes(path);
}

}  // namespace accept_detail

struct AcceptanceOptions {
  RunOutput out;                   // metrics and checkpoints go under out.dir
  std::size_t replay_steps = 50;   // steps re-run for the determinism check
  ProgressFn progress;
  std::function<void(const CriterionResult&)> on_result;
};

/// Runs all twelve criteria on `cfg`. Never throws for a failing criterion;
/// exceptions from a stage are reported as that criterion's failure.
inline AcceptanceReport run_acceptance(const Config& cfg, const AcceptanceOptions& opt) {
  using namespace accept_detail;
  using S = float;
  validate(cfg);
  AcceptanceReport rep;
  const auto t_start = std::chrono::steady_clock::now();
  auto progress = [&](const std::string& m) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    report(opt.progress, "[" + fmt(s, 0) + "s] " + m);
  };
  auto record = [&](CriterionResult r) {
    if (opt.on_result) opt.on_result(r);
    rep.results.push_back(std::move(r));
  };
  auto guarded = [&](int id, const std::string& title, const std::function<CriterionResult()>& fn) {
    try {
      record(fn());
    } catch (const std::exception& e) {
      record({id, title, false, std::string("error: ") + e.what()});
    }
  };
  const RunOutput& out = opt.out;
  const std::string ckpt_dir = out.dir.empty() ? std::string() : out.dir + "/checkpoints";
  if (!ckpt_dir.empty()) std::filesystem::create_directories(ckpt_dir);

  progress("oracle checks");
  guarded(1, "gradient oracle", gradient_oracle);
  guarded(2, "quantizer oracle", quantizer_oracle);
  guarded(3, "Gumbel-Softmax", gumbel_softmax);

  progress("generating corpus");
  const Workbench wb = Workbench::make(cfg);
  const auto train = wb.train_grids();
  const auto val = wb.val_grids();

  progress("training tokenizer");
  std::unique_ptr<Tokenizer<S>> tk;
  {
    auto sink = out.sink("tokenizer");
    tk = fit_tokenizer<S>(cfg, train, sink, progress);
  }
  const auto tev = evaluate_tokenizer(*tk, val);

  progress("training LM");
  const auto lm_data = build_lm_data(*tk, to_corpus(wb.splits.train, cfg.data.feature_dim).items, cfg);
  std::unique_ptr<LanguageModel<S>> lm;
  {
    auto sink = out.sink("lm");
    lm = fit_lm<S>(cfg, lm_data, sink, progress);
  }

  guarded(4, "causality", [&] {
    Rng rng = derive_rng(cfg.seed, 0xCA05A1ull);
    const double m = merger_causality(*tk, val, rng);
    const double l = lm_causality(*lm, lm_data.images, lm_data.captions, rng);
    return CriterionResult{4, "causality", m <= 1e-6 && l <= 1e-6,
                           "max change before the perturbed position: merger " + sci(m) + ", LM " + sci(l) +
                               " (<= 1e-6, 16 positions each)"};
  });

  const double rho = cfg.tokenizer.rate_target;
  guarded(5, "rate control", [&] {
    const bool ok = std::abs(tev.keep_fraction - rho) <= 0.1 && tev.recon_cosine >= 0.9;
    return CriterionResult{5, "rate control", ok,
                           "held-out retained fraction " + fmt(tev.keep_fraction) + " (target " + fmt(rho) +
                               " +- 0.1), recon cosine " + fmt(tev.recon_cosine) + " (>= 0.9)"};
  });

  guarded(6, "dynamic allocation", [&] {
    const auto by_c = tokens_by_complexity(*tk, wb.splits.val);
    const std::size_t lo = by_c.begin()->first, hi = by_c.rbegin()->first;
    progress("ablation fixed-vs-dynamic");
    const auto tab = run_ablation<S>("fixed-vs-dynamic", wb, out, progress, {{"dynamic", tk.get()}});
    const double fixed_t = std::stod(tab.rows[0][1]), dyn_t = std::stod(tab.rows[1][1]);
    const double n = static_cast<double>(cfg.data.patches());
    const bool ok = lo != hi && by_c.at(hi) > by_c.at(lo) && fixed_t == n && dyn_t < n * (rho + 0.1);
    return CriterionResult{6, "dynamic allocation", ok,
                           "mean T complexity-" + std::to_string(hi) + " " + fmt(by_c.at(hi), 2) + " > complexity-" +
                               std::to_string(lo) + " " + fmt(by_c.at(lo), 2) + "; fixed T " + fmt(fixed_t, 2) +
                               " (= " + fmt(n, 0) + "), dynamic T " + fmt(dyn_t, 2) + " (< " +
                               fmt(n * (rho + 0.1), 2) + ")"};
  });

  guarded(7, "codebook semantics", [&] {
    progress("training tokenizer on the zero-noise corpus");
    Config zc = cfg;
    zc.data.noise_std = 0.0;
    const Workbench zwb = Workbench::make(zc);
    auto sink = out.sink("tokenizer_zero_noise");
    const auto ztk = fit_tokenizer<S>(zc, zwb.train_grids(), sink, progress);
    const auto [agree, pairs] = code_agreement(*ztk, zwb.splits.val);
    return CriterionResult{7, "codebook semantics", agree >= 0.9 && pairs > 0,
                           "same-prototype token pairs sharing a code " + fmt(agree) + " over " +
                               std::to_string(pairs) + " pairs (>= 0.9)"};
  });

  guarded(8, "LM overfit + protocol", [&] {
    const SequenceOptions resp{LossScope::Response, cfg.lm.supervise_specials, true};
    const auto sopt = sequence_options(cfg);
    std::vector<MultimodalSequence<S>> response, all;
    std::set<std::vector<std::size_t>> distinct;
    double supervised = 0;
    for (std::size_t i = 0; i < lm_data.images.size(); ++i) {
      response.push_back(build_sequence<S>(lm->vocab(), &lm_data.images[i], lm_data.captions[i], Order::ImageFirst,
                                           cfg.ablation.input_mode, resp));
      for (auto order : {Order::ImageFirst, Order::TextFirst}) {
        all.push_back(build_sequence<S>(lm->vocab(), &lm_data.images[i], lm_data.captions[i], order,
                                        cfg.ablation.input_mode, sopt));
        if (order == Order::ImageFirst) distinct.insert(all.back().ids);
        for (std::size_t k = 1; k < all.back().size(); ++k) supervised += all.back().loss_mask[k];
      }
    }
    const double ce = mean_cross_entropy(*lm, response);
    const double ce_all = mean_cross_entropy(*lm, all);
    // a model that memorizes the pairs still has to identify which one it is
    const double floor = std::log(static_cast<double>(distinct.size())) / (supervised / static_cast<double>(all.size()));
    const auto gopt = GenerationOptions::from(cfg);
    Rng grng = derive_rng(cfg.seed, 0x6E4E5ull);
    std::size_t term = 0, outside = 0;
    const std::size_t prompts = std::min<std::size_t>(100, wb.splits.val.size());
    for (std::size_t i = 0; i < prompts; ++i) {
      const auto g = generate_image_tokens(*lm, caption_tokens(wb.splits.val[i].caption), gopt, grng);
      term += g.terminated;
      for (auto c : g.codes) outside += c >= cfg.tokenizer.codebook_size;
    }
    const double term_rate = static_cast<double>(term) / static_cast<double>(prompts);
    const bool ok = ce < 0.2 && term_rate >= 0.95 && outside == 0 && prompts == 100;
    return CriterionResult{8, "LM overfit + protocol", ok,
                           "caption CE " + fmt(ce) + " on " + std::to_string(response.size()) +
                               " pairs (< 0.2; all-position CE " + fmt(ce_all) + ", memorization floor " +
                               fmt(floor) + "); terminated " + std::to_string(term) + "/" + std::to_string(prompts) +
                               " (>= 95%); ids outside visual range " + std::to_string(outside)};
  });

  guarded(9, "CFG endpoints", [&] {
    const auto& v = lm->vocab();
    MultimodalSequence<S> cond, uncond;
    cond.ids = {Vocabulary::kBos};
    for (auto w : caption_tokens(wb.splits.val[0].caption)) cond.ids.push_back(v.text_id(w));
    cond.ids.push_back(Vocabulary::kImg);
    uncond.ids = {Vocabulary::kBos, Vocabulary::kImg};
    cond.loss_mask.assign(cond.size(), 0);
    uncond.loss_mask.assign(uncond.size(), 0);
    const auto c = last_logits(*lm, {&cond}).front();
    const auto u = last_logits(*lm, {&uncond}).front();
    const auto at0 = cfg_logits(c, u, 0.0), at1 = cfg_logits(c, u, 1.0);
    double e0 = 0, e1 = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      e0 = std::max(e0, std::abs(at0[i] - u[i]));
      e1 = std::max(e1, std::abs(at1[i] - c[i]));
    }
    const auto ex = cfg_logits({3, 0}, {1, 2}, 1.5);
    const bool ok = e0 <= 1e-6 && e1 <= 1e-6 && std::abs(ex[0] - 4.0) <= 1e-12 && std::abs(ex[1] + 1.0) <= 1e-12;
    return CriterionResult{9, "CFG endpoints", ok,
                           "alpha 0 vs unconditional " + sci(e0) + ", alpha 1 vs conditional " + sci(e1) +
                               " (<= 1e-6); blend of c = [3, 0], u = [1, 2] at 1.5 gives [" + fmt(ex[0], 1) + ", " +
                               fmt(ex[1], 1) + "] (expected [4, -1])"};
  });

  guarded(10, "cross-modal alignment", [&] {
    const auto ev = evaluate_lm(*lm, *tk, wb.splits.val, 64);
    const bool ok = ev.items == 64 && ev.matched_wins >= 0.9 && ev.recovered >= 0.8;
    return CriterionResult{10, "cross-modal alignment", ok,
                           "matched caption more likely on " + fmt(ev.matched_wins, 3) + " of " +
                               std::to_string(ev.items) + " held-out pairs (>= 0.9); label multiset recovered " +
                               fmt(ev.recovered, 3) + " (>= 0.8)"};
  });

  std::unique_ptr<Denoiser<S>> den;
  guarded(11, "diffusion", [&] {
    const auto sched = schedule_for(cfg);
    Rng rng = derive_rng(cfg.seed, 0xD1FFACCull);
    double rt = 0;
    {
      const auto z0 = randn<double>({8, 64}, rng);
      for (std::size_t t = 1; t <= sched.steps(); ++t) {
        const auto e = randn<double>({8, 64}, rng);
        const auto back = diffusion_invert(diffusion_forward(z0, t, e, sched), t, e, sched);
        for (std::size_t i = 0; i < z0.size(); ++i) rt = std::max(rt, std::abs(back[i] - z0[i]));
      }
    }
    double zero_loss = 0;
    const std::size_t Z = cfg.data.patches() * cfg.data.feature_dim;
    {
      const auto z0 = randn<double>({20000, Z}, rng, 1.0 / std::sqrt(double(cfg.data.feature_dim)));
      EpsPredictor<double> zero = [](Tape<double>& t, const Var<double>& z, const std::vector<std::size_t>&,
                                     const Var<double>&) { return t.constant(Tensor<double>(z.value().shape())); };
      Tape<double> t;
      zero_loss = epsilon_loss(t, zero, z0, Tensor<double>({20000, 1}), sched, rng).value().item();
    }
    progress("training denoiser on one fixed pair");
    const auto [z0, cond] = denoiser_pairs(*tk, std::vector<const PatchGrid*>{val.front()});
    den = std::make_unique<Denoiser<S>>(Z, Z, cfg.denoiser, cfg.seed);
    {
      auto sink = out.sink("denoiser");
      train_denoiser(*den, z0, cond, cfg, sink);
    }
    Tensor<S> c100({100, Z});
    for (std::size_t r = 0; r < 100; ++r) std::copy(cond.row(0).begin(), cond.row(0).end(), c100.row(r).begin());
    Rng srng = derive_rng(cfg.seed, 0x5A3B1Eull);
    const auto samples = ddpm_sample<S>(den->predictor(), c100, Z, sched, srng);
    double worst = 0;
    for (std::size_t j = 0; j < Z; ++j) {
      double m = 0;
      for (std::size_t r = 0; r < 100; ++r) m += samples.at(r, j);
      worst = std::max(worst, std::abs(m / 100.0 - z0.at(0, j)));
    }
    const double rel = std::abs(zero_loss - double(Z)) / double(Z);
    const bool ok = rt <= 1e-6 && worst <= 0.1 && rel <= 0.05;
    return CriterionResult{11, "diffusion", ok,
                           "round trip " + sci(rt) + " (<= 1e-6); single-pair sample mean max error " + fmt(worst) +
                               " (<= 0.1); zero predictor loss " + fmt(zero_loss, 2) + " vs " + std::to_string(Z) +
                               " (" + fmt(100 * rel, 2) + "% <= 5%)"};
  });

  guarded(12, "determinism + persistence", [&] {
    progress("determinism replay and checkpoint round trips");
    std::string notes;
    bool ok = true;
    const std::size_t R = opt.replay_steps;
    if (out.dir.empty()) {
      notes += "replay skipped (no output dir); ";
      ok = false;
    } else {
      RunOutput replay{out.dir + "/replay", out.format};
      {
        Tokenizer<S> t2(cfg, cfg.seed);
        auto sink = replay.sink("tokenizer");
        train_tokenizer(t2, train, cfg, sink, R);
      }
      {
        LanguageModel<S> l2(cfg, cfg.seed);
        auto sink = replay.sink("lm");
        train_lm(l2, lm_data, cfg, sink, R);
      }
      std::vector<std::string> stages = {"tokenizer", "lm"};
      if (den) {
        const auto [z0, cond] = denoiser_pairs(*tk, std::vector<const PatchGrid*>{val.front()});
        Denoiser<S> d2(z0.cols(), cond.cols(), cfg.denoiser, cfg.seed);
        auto sink = replay.sink("denoiser");
        train_denoiser(d2, z0, cond, cfg, sink, R);
        stages.push_back("denoiser");
      }
      std::size_t same = 0;
      for (const auto& s : stages) {
        const bool eq = metrics_prefix(out.metrics_path(s), R, out.format) == file_bytes(replay.metrics_path(s));
        same += eq;
        if (!eq) notes += s + " metrics differ; ";
      }
      ok = ok && same == stages.size() && den != nullptr;
      notes += std::to_string(same) + "/" + std::to_string(stages.size()) + " stage metrics byte-identical over " +
               std::to_string(R) + " replayed steps; ";
    }
    std::size_t rt = 0, total = 0;
    auto check = [&](bool b) {
      rt += b;
      ++total;
    };
    const std::string dir = ckpt_dir.empty() ? std::filesystem::temp_directory_path().string() : ckpt_dir;
    check(checkpoint_round_trip(tk->params(), cfg, Stage::Tokenizer, cfg.tokenizer.steps, dir + "/tokenizer.ckpt"));
    check(checkpoint_round_trip(lm->params(), cfg, Stage::Lm, cfg.lm.steps, dir + "/lm.ckpt"));
    if (den) check(checkpoint_round_trip(den->params(), cfg, Stage::Denoiser, cfg.denoiser.steps, dir + "/denoiser.ckpt"));
    ok = ok && rt == total && total == 3;
    notes += std::to_string(rt) + "/" + std::to_string(total) + " checkpoint round trips bit-exact";
    return CriterionResult{12, "determinism + persistence", ok, notes};
  });

  progress("done");
  return rep;
}

}  // namespace lvt
