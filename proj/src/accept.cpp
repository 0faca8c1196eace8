#include "cbna/accept.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "cbna/eval.hpp"
#include "cbna/io.hpp"
#include "cbna/rng.hpp"
#include "cbna/trainer.hpp"

namespace cbna {

namespace {

// Fixed benchmark configuration. Everything downstream is a pure function of
// these constants.
constexpr uint64_t kModelSeed = 7;
constexpr uint64_t kTrainSeed = 11;
constexpr uint64_t kSourceSeed = 101;   // training scenes
constexpr uint64_t kHoldoutSeed = 202;  // validation/target scenes (same geometry)
constexpr int kTrainImages = 160;
constexpr int kEvalImages = 48;
constexpr int kNumClasses = 4;

TrainConfig benchmark_train_config() {
  TrainConfig cfg;
  cfg.epochs = 16;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.lr_final = 2e-4;
  cfg.momentum_bn = 0.1;
  cfg.seed = kTrainSeed;
  return cfg;
}

const std::vector<double> kEtaGrid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                      0.6, 0.7, 0.8, 0.9, 1.0};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_input(SplitMix64& rng, int h, int w) {
  Tensor x(1, h, w, 3);
  for (float& v : x.data) v = static_cast<float>(rng.uniform01());
  return x;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  return m;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

// --- independent oracles ----------------------------------------------------

// Long-double two-pass moments, channel-major traversal (deliberately a
// different accumulation order than the implementation).
void oracle_mean_var(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
  mean.assign(static_cast<size_t>(x.c), 0.0);
  var.assign(static_cast<size_t>(x.c), 0.0);
  const long double n = static_cast<long double>(x.b) * x.h * x.w;
  for (int ci = 0; ci < x.c; ++ci) {
    long double s = 0.0L;
    for (int bi = 0; bi < x.b; ++bi)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) s += x.at(bi, y, xx, ci);
    const long double m = s / n;
    long double q = 0.0L;
    for (int bi = 0; bi < x.b; ++bi)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          const long double d = static_cast<long double>(x.at(bi, y, xx, ci)) - m;
          q += d * d;
        }
    mean[static_cast<size_t>(ci)] = static_cast<double>(m);
    var[static_cast<size_t>(ci)] = static_cast<double>(q / n);
  }
}

// Set-based IoU: explicit pixel-position sets per class.
double oracle_set_miou(const ClassMap& pred, const ClassMap& truth, int num_classes) {
  double sum = 0.0;
  int used = 0;
  for (int s = 0; s < num_classes; ++s) {
    std::set<size_t> ps, ts;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred.data[i] == s) ps.insert(i);
      if (truth.data[i] == s) ts.insert(i);
    }
    std::set<size_t> uni = ps;
    uni.insert(ts.begin(), ts.end());
    if (uni.empty()) continue;
    size_t inter = 0;
    for (size_t i : ps) inter += ts.count(i);
    sum += static_cast<double>(inter) / static_cast<double>(uni.size());
    ++used;
  }
  return used ? sum / used : 0.0;
}

// --- cached artifacts --------------------------------------------------------

Dataset load_or_generate(const std::filesystem::path& dir, const SceneSpec& spec,
                         const DomainShift& shift, int n, bool reuse) {
  if (reuse && std::filesystem::exists(dir / "manifest.json")) {
    try {
      Dataset ds = read_dataset(dir);
      if (static_cast<int>(ds.size()) == n && ds.spec.seed == spec.seed &&
          ds.generator_version == kSceneGeneratorVersion &&
          ds.shift.brightness_offset == shift.brightness_offset &&
          ds.shift.contrast_gain == shift.contrast_gain &&
          ds.shift.noise_sigma == shift.noise_sigma)
        return ds;
    } catch (const Error&) {
      // fall through and regenerate
    }
  }
  Dataset ds = generate(spec, shift, n);
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);
  return ds;
}

std::string train_settings_fingerprint(const TrainConfig& cfg) {
  std::ostringstream os;
  os << kSceneGeneratorVersion << '|' << kModelSeed << '|' << kSourceSeed << '|' << kTrainImages
     << '|' << cfg.epochs << '|' << cfg.batch_size << '|' << cfg.lr << '|' << cfg.lr_final << '|'
     << cfg.momentum_bn << '|' << cfg.seed;
  return os.str();
}

struct BenchmarkState {
  SegModel model;
  Dataset source_val;
  Dataset target;
  double train_seconds = 0.0;
  bool model_from_cache = false;
  std::vector<SweepPoint> sweep;
  double eta_star = 0.2;
  double val_miou = 0.0;
  double target_none_miou = 0.0;
};

}  // namespace

std::vector<CriterionResult> run_acceptance(const AcceptOptions& options) {
  std::vector<CriterionResult> results;
  // `limit_s` <= 0 means the criterion has no runtime bound of its own.
  const auto run = [&results](int id, const std::string& name, double limit_s, auto&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult r;
    r.id = id;
    r.name = name;
    try {
      body(r);
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = seconds_since(t0);
    if (r.pass && limit_s > 0.0 && r.seconds > limit_s) {
      r.pass = false;
      r.detail += " [exceeded " + fmt_g6(limit_s) + "s runtime bound]";
    }
    std::printf("[%s] %d. %s — %s (%.1fs)\n", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.detail.c_str(), r.seconds);
    std::fflush(stdout);
    results.push_back(std::move(r));
  };

  std::filesystem::create_directories(options.work_dir);

  // 1. Algebraic limit suite --------------------------------------------------
  run(1, "algebraic limit equivalences", 10.0, [&](CriterionResult& r) {
    const SegModel model = build_toy_model(kNumClasses, 42);
    SplitMix64 rng(1234);
    double worst_exact = 0.0;  // eta=0 laps must be bit-identical
    double worst_close = 0.0;
    bool bit_exact = true;
    for (int i = 0; i < 50; ++i) {
      const Tensor x = random_input(rng, 32, 32);
      const auto none = adapt_forward(model, x, {AdaptMode::NoAdapt, 0.0, 1}).first;
      const auto cli = adapt_forward(model, x, {AdaptMode::CLi, 0.0, 1}).first;
      const auto cbna0 = adapt_forward(model, x, {AdaptMode::Cbna, 0.0, 1}).first;
      const auto cbna1 = adapt_forward(model, x, {AdaptMode::Cbna, 1.0, 1}).first;
      const auto ck0 = adapt_forward(model, x, {AdaptMode::CKlingner, 0.0, 1}).first;
      const auto ck1 = adapt_forward(model, x, {AdaptMode::CKlingner, 1.0, 1}).first;
      if (cbna0.posteriors.data != none.posteriors.data) bit_exact = false;
      worst_exact = std::max(worst_exact, max_abs_diff(cbna0.posteriors, none.posteriors));
      worst_close = std::max(worst_close, max_abs_diff(cbna1.posteriors, cli.posteriors));
      worst_close = std::max(worst_close, max_abs_diff(ck1.posteriors, cli.posteriors));
      worst_close = std::max(worst_close, max_abs_diff(ck0.posteriors, none.posteriors));
    }
    r.pass = bit_exact && worst_close <= 1e-6;
    std::ostringstream os;
    os << "eta=0 bit-exact=" << (bit_exact ? "yes" : "NO") << ", max limit diff "
       << worst_close;
    r.detail = os.str();
  });

  // 2. Statelessness ----------------------------------------------------------
  run(2, "model state untouched by adaptation", 10.0, [&](CriterionResult& r) {
    const SegModel model = build_toy_model(kNumClasses, 42);
    const std::vector<uint8_t> before = save_checkpoint(model);
    SplitMix64 rng(99);
    const AdaptMode modes[4] = {AdaptMode::NoAdapt, AdaptMode::CLi, AdaptMode::CKlingner,
                                AdaptMode::Cbna};
    for (int i = 0; i < 100; ++i) {
      const Tensor x = random_input(rng, 16, 16);
      adapt_forward(model, x, {modes[i % 4], 0.3, 1});
    }
    const std::vector<uint8_t> after = save_checkpoint(model);
    r.pass = before == after;
    r.detail = r.pass ? "checkpoint bytes identical after 100 adapted inferences"
                      : "checkpoint bytes CHANGED";
  });

  // 3. Statistics oracles -----------------------------------------------------
  run(3, "statistics against brute-force oracles", 5.0, [&](CriterionResult& r) {
    SplitMix64 rng(5150);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
      const int b = 1 + rng.uniform_int(0, 8);
      const int h = 1 + rng.uniform_int(0, 16);
      const int w = 1 + rng.uniform_int(0, 16);
      const int c = 1 + rng.uniform_int(0, 8);
      Tensor x(b, h, w, c);
      for (float& v : x.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
      std::vector<double> rm, rv;
      oracle_mean_var(x, rm, rv);
      const BatchStats got = compute_batch_stats(x);
      const BatchStats pooled = pooled_target_stats(x, b);
      for (int ci = 0; ci < c; ++ci) {
        const double dm = std::abs(got.mean[ci] - rm[ci]) / std::max(1.0, std::abs(rm[ci]));
        const double dv = std::abs(got.var[ci] - rv[ci]) / std::max(1.0, std::abs(rv[ci]));
        const double pm =
            std::abs(pooled.mean[ci] - rm[ci]) / std::max(1.0, std::abs(rm[ci]));
        worst = std::max({worst, dm, dv, pm});
      }
    }
    // Running statistics: K-step tracking against the closed geometric form
    //   (1-eta)^K * m0 + (1 - (1-eta)^K) * m.
    double worst_run = 0.0;
    for (int t = 0; t < 50; ++t) {
      const int c = 1 + rng.uniform_int(0, 4);
      const double eta = rng.uniform(0.1, 1.0);
      const int steps = 1 + rng.uniform_int(0, 60);
      BnLayer layer = BnLayer::identity(c);
      layer.momentum = static_cast<float>(eta);
      BatchStats batch;
      std::vector<double> m0(static_cast<size_t>(c)), mt(static_cast<size_t>(c)),
          v0(static_cast<size_t>(c)), vt(static_cast<size_t>(c));
      for (int ci = 0; ci < c; ++ci) {
        m0[ci] = rng.uniform(-1.0, 1.0);
        mt[ci] = rng.uniform(-1.0, 1.0);
        v0[ci] = rng.uniform(0.0, 1.0);
        vt[ci] = rng.uniform(0.0, 1.0);
        layer.running_mean[ci] = static_cast<float>(m0[ci]);
        layer.running_var[ci] = static_cast<float>(v0[ci]);
        batch.mean.push_back(static_cast<float>(mt[ci]));
        batch.var.push_back(static_cast<float>(vt[ci]));
      }
      for (int s = 0; s < steps; ++s) layer = update_running_stats(layer, batch);
      const double decay = std::pow(1.0 - eta, steps);
      for (int ci = 0; ci < c; ++ci) {
        const double em = decay * m0[ci] + (1.0 - decay) * mt[ci];
        const double ev = decay * v0[ci] + (1.0 - decay) * vt[ci];
        worst_run = std::max(worst_run, std::abs(layer.running_mean[ci] - em) /
                                            std::max(1.0, std::abs(em)));
        worst_run = std::max(worst_run,
                             std::abs(layer.running_var[ci] - ev) / std::max(1.0, std::abs(ev)));
      }
    }
    r.pass = worst <= 1e-6 && worst_run <= 1e-6;
    std::ostringstream os;
    os << "moment err " << worst << ", running-stats err " << worst_run;
    r.detail = os.str();
  });

  // 4. Gradient check ---------------------------------------------------------
  run(4, "analytic gradients vs finite differences", 30.0, [&](CriterionResult& r) {
    SplitMix64 rng(31337);
    // Fragment A: conv -> BN -> relu -> head; covers every parameterized
    // layer type including training-mode BN.
    SegModel a = build_toy_model(3, 17);
    a.layers.clear();
    {
      SplitMix64 wrng(17);
      auto mk = [&wrng](int kh, int kw, int ci, int co) {
        ConvKernel k;
        k.kh = kh;
        k.kw = kw;
        k.c_in = ci;
        k.c_out = co;
        k.weights.resize(static_cast<size_t>(kh) * kw * ci * co);
        const double s = std::sqrt(3.0 / (kh * kw * ci));
        for (float& v : k.weights) v = static_cast<float>(wrng.uniform(-s, s));
        k.bias.assign(static_cast<size_t>(co), 0.1f);
        return k;
      };
      a.num_classes = 3;
      a.encoder_depth = 0;
      a.layers.emplace_back(ConvLayer{mk(3, 3, 3, 4)});
      a.layers.emplace_back(BnLayer::identity(4));
      a.layers.emplace_back(ReluLayer{});
      a.layers.emplace_back(HeadLayer{mk(1, 1, 4, 3)});
      a.layers.emplace_back(SoftmaxLayer{});
    }
    // Fragment B: a miniature encoder/decoder with pooling, upsampling and the
    // skip concatenation, so gradients flow through every routing op.
    SegModel b = a;
    {
      SplitMix64 wrng(23);
      auto mk = [&wrng](int kh, int kw, int ci, int co) {
        ConvKernel k;
        k.kh = kh;
        k.kw = kw;
        k.c_in = ci;
        k.c_out = co;
        k.weights.resize(static_cast<size_t>(kh) * kw * ci * co);
        const double s = std::sqrt(3.0 / (kh * kw * ci));
        for (float& v : k.weights) v = static_cast<float>(wrng.uniform(-s, s));
        k.bias.assign(static_cast<size_t>(co), 0.05f);
        return k;
      };
      b.layers.clear();
      b.num_classes = 3;
      b.encoder_depth = 1;
      b.layers.emplace_back(ConvLayer{mk(3, 3, 3, 4)});
      b.layers.emplace_back(BnLayer::identity(4));
      b.layers.emplace_back(ReluLayer{});
      b.layers.emplace_back(DownsampleLayer{2});
      b.layers.emplace_back(ConvLayer{mk(3, 3, 4, 6)});
      b.layers.emplace_back(ReluLayer{});
      b.layers.emplace_back(UpsampleLayer{2});
      b.layers.emplace_back(ConcatSkipLayer{});
      b.layers.emplace_back(ConvLayer{mk(3, 3, 10, 4)});
      b.layers.emplace_back(ReluLayer{});
      b.layers.emplace_back(HeadLayer{mk(1, 1, 4, 3)});
      b.layers.emplace_back(SoftmaxLayer{});
    }
    double worst = 0.0;
    for (const SegModel* frag : {&a, &b}) {
      Tensor x(1, 8, 8, 3);
      for (float& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
      ClassMap labels(1, 8, 8);
      for (uint8_t& v : labels.data) v = static_cast<uint8_t>(rng.uniform_int(0, 3));
      worst = std::max(worst, check_gradients(*frag, x, labels));
    }
    r.pass = worst < 1e-3;
    std::ostringstream os;
    os << "max relative error " << worst;
    r.detail = os.str();
  });

  // 5-7 share the trained model and datasets ----------------------------------
  BenchmarkState st;

  run(5, "domain-shift recovery with an interior optimum", 0.0, [&](CriterionResult& r) {
    SceneSpec train_spec;
    train_spec.seed = kSourceSeed;
    SceneSpec holdout_spec;
    holdout_spec.seed = kHoldoutSeed;

    const Dataset source_train = load_or_generate(options.work_dir / "source_train", train_spec,
                                                  DomainShift::none(), kTrainImages,
                                                  options.reuse);
    st.source_val = load_or_generate(options.work_dir / "source_val", holdout_spec,
                                     DomainShift::none(), kEvalImages, options.reuse);
    st.target = load_or_generate(options.work_dir / "target", holdout_spec,
                                 DomainShift::night_preset(), kEvalImages, options.reuse);

    const TrainConfig cfg = benchmark_train_config();
    const auto ckpt_path = options.work_dir / "model.ckpt";
    const auto settings_path = options.work_dir / "train_settings.txt";
    const std::string fingerprint = train_settings_fingerprint(cfg);

    bool loaded = false;
    if (options.reuse && std::filesystem::exists(ckpt_path) &&
        std::filesystem::exists(settings_path)) {
      std::ifstream in(settings_path);
      std::string recorded;
      std::getline(in, recorded);
      if (recorded == fingerprint) {
        st.model = load_checkpoint_file(ckpt_path);
        st.model_from_cache = true;
        loaded = true;
      }
    }
    if (!loaded) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainLog log;
      st.model = train(build_toy_model(kNumClasses, kModelSeed), source_train, cfg, nullptr, &log);
      st.train_seconds = seconds_since(t0);
      save_checkpoint_file(st.model, ckpt_path);
      write_train_log_csv(log, options.work_dir / "train_log.csv");
      std::ofstream out(settings_path, std::ios::trunc);
      out << fingerprint << "\n";
    }

    st.val_miou = dataset_miou(st.model, st.source_val, {AdaptMode::NoAdapt, 0.0, 1},
                               options.jobs);
    st.target_none_miou =
        dataset_miou(st.model, st.target, {AdaptMode::NoAdapt, 0.0, 1}, options.jobs);
    st.sweep = sweep_eta(st.model, st.target, kEtaGrid, AdaptMode::Cbna, options.jobs);
    write_sweep_csv(st.sweep, options.work_dir / "sweep.csv");
    st.eta_star = select_eta({st.sweep}, kEtaGrid);

    const double degraded = st.val_miou - st.target_none_miou;
    double best = 0.0, best_interior = 0.0;
    for (const SweepPoint& p : st.sweep) {
      best = std::max(best, p.miou);
      if (p.eta > 0.0 && p.eta < 1.0) best_interior = std::max(best_interior, p.miou);
    }
    const double endpoint_max = std::max(st.sweep.front().miou, st.sweep.back().miou);
    const double improvement = best - st.target_none_miou;

    const bool degraded_ok = degraded >= 0.05;
    const bool improved_ok = improvement >= 0.02;
    const bool interior_ok = best_interior > endpoint_max;
    const bool train_time_ok = st.model_from_cache || st.train_seconds <= 300.0;
    r.pass = degraded_ok && improved_ok && interior_ok && train_time_ok;
    std::ostringstream os;
    os << "val " << pct(st.val_miou) << ", target " << pct(st.target_none_miou) << " (drop "
       << pct(degraded) << (degraded_ok ? "" : " <5.00!") << "), best grid point +"
       << pct(improvement) << (improved_ok ? "" : " <2.00!") << ", interior max "
       << pct(best_interior) << (interior_ok ? " > " : " NOT > ") << pct(endpoint_max)
       << " endpoints, eta*=" << st.eta_star;
    if (!st.model_from_cache)
      os << ", train " << static_cast<int>(st.train_seconds) << "s"
         << (train_time_ok ? "" : " >300s!");
    r.detail = os.str();
  });

  run(6, "window pooling leaves performance flat", 120.0, [&](CriterionResult& r) {
    if (st.sweep.empty()) {
      r.pass = false;
      r.detail = "skipped: trained setup unavailable";
      return;
    }
    const auto points = ablate_window(st.model, st.target, {1, 5}, AdaptMode::Cbna, st.eta_star,
                                      options.jobs);
    write_window_csv(points, options.work_dir / "window.csv");
    const double drift = std::abs(points[1].miou - points[0].miou);
    r.pass = drift <= 0.02;
    std::ostringstream os;
    os << "mIoU(dn=1) " << pct(points[0].miou) << ", mIoU(dn=5) " << pct(points[1].miou)
       << ", |drift| " << pct(drift);
    r.detail = os.str();
  });

  run(7, "per-image gains outnumber losses", 0.0, [&](CriterionResult& r) {
    if (st.sweep.empty()) {
      r.pass = false;
      r.detail = "skipped: trained setup unavailable";
      return;
    }
    const std::vector<AdaptPolicy> policies = {{AdaptMode::NoAdapt, 0.0, 1},
                                               {AdaptMode::Cbna, st.eta_star, 1}};
    const HistogramTable table =
        per_image_miou_histogram(st.model, st.target, policies, 0.02, 0.01, options.jobs);
    write_hist_csv(table, options.work_dir / "hist.csv", options.work_dir / "hist_delta.csv");
    r.pass = table.has_delta && table.positive_deltas > table.negative_deltas;
    std::ostringstream os;
    os << table.positive_deltas << " images improved, " << table.negative_deltas
       << " degraded, " << table.zero_deltas << " unchanged";
    r.detail = os.str();
  });

  // 8. FLOP accounting structure ----------------------------------------------
  run(8, "adaptation cost accounting", 0.0, [&](CriterionResult& r) {
    const SegModel model = build_toy_model(kNumClasses, 42);
    const int res = 64;
    const auto none = count_flops(model, {AdaptMode::NoAdapt, 0.0, 1}, res, res);
    const auto cli = count_flops(model, {AdaptMode::CLi, 0.0, 1}, res, res);
    const auto cbna = count_flops(model, {AdaptMode::Cbna, 0.2, 1}, res, res);
    const auto ck = count_flops(model, {AdaptMode::CKlingner, 0.2, 1}, res, res);

    uint64_t six_c = 0;
    for (const Layer& l : model.layers)
      if (const auto* bn = std::get_if<BnLayer>(&l))
        six_c += 6ull * static_cast<uint64_t>(bn->channels());

    const bool exact_gap = cbna.total() - cli.total() == six_c;
    const bool ratio_ok =
        cbna.mixing_flops > 0 &&
        static_cast<double>(cbna.stats_flops) / static_cast<double>(cbna.mixing_flops) > 100.0;
    const bool two_pass_ok = ck.total() >= 2 * none.forward_flops;
    r.pass = exact_gap && ratio_ok && two_pass_ok;
    std::ostringstream os;
    os << "cbna-cli gap " << cbna.total() - cli.total() << (exact_gap ? " == " : " != ")
       << six_c << ", stats/mixing "
       << static_cast<double>(cbna.stats_flops) / static_cast<double>(cbna.mixing_flops)
       << ", two-pass total " << ck.total() << " vs 2x forward " << 2 * none.forward_flops;
    r.detail = os.str();
  });

  // 9. mIoU oracle --------------------------------------------------------------
  run(9, "mIoU against a set-based oracle", 0.0, [&](CriterionResult& r) {
    SplitMix64 rng(4242);
    bool exact = true;
    for (int t = 0; t < 100 && exact; ++t) {
      const int k = 2 + rng.uniform_int(0, 4);
      ClassMap pred(1, 8, 8), truth(1, 8, 8);
      for (uint8_t& v : pred.data) v = static_cast<uint8_t>(rng.uniform_int(0, k));
      for (uint8_t& v : truth.data) v = static_cast<uint8_t>(rng.uniform_int(0, k));
      ConfusionAccumulator acc(k);
      accumulate(acc, pred, truth);
      if (miou(acc) != oracle_set_miou(pred, truth, k)) exact = false;
    }
    r.pass = exact;
    r.detail = exact ? "100/100 random label-map pairs match exactly"
                     : "MISMATCH against the set-based oracle";
  });

  return results;
}

bool all_passed(const std::vector<CriterionResult>& results) {
  for (const CriterionResult& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

}  // namespace cbna
