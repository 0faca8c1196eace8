#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbna/accept.hpp"
#include "cbna/eval.hpp"
#include "cbna/io.hpp"
#include "cbna/trainer.hpp"

namespace {

using namespace cbna;

using Flags = std::vector<std::pair<std::string, std::string>>;
using Seeds = std::map<std::string, uint64_t>;

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

DomainShift shift_from_flags(const std::string& preset, double brightness, double contrast,
                             const std::string& gain_csv, double noise) {
  DomainShift s;
  if (preset == "none")
    s = DomainShift::none();
  else if (preset == "preset-night")
    s = DomainShift::night_preset();
  else
    throw ArgumentError("unknown shift preset: " + preset);
  if (brightness != -10.0) s.brightness_offset = static_cast<float>(brightness);
  if (contrast > 0.0) s.contrast_gain = static_cast<float>(contrast);
  if (!gain_csv.empty()) {
    const auto g = parse_double_list(gain_csv);
    if (g.size() != 3) throw ArgumentError("--gain needs exactly three values");
    for (int i = 0; i < 3; ++i) s.channel_gain[static_cast<size_t>(i)] = static_cast<float>(g[i]);
  }
  if (noise >= 0.0) s.noise_sigma = static_cast<float>(noise);
  s.validate();
  return s;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::string trimmed(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Expands `--config FILE` into ordinary arguments. The file holds key=value
// lines (# comments allowed); keys already given on the command line keep
// their command-line values.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--config") {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<ptrdiff_t>(i),
                 args.begin() + static_cast<ptrdiff_t>(i) + 2);
      break;
    }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw FormatError("cannot open config file: " + config_path);
  std::string line;
  while (std::getline(in, line)) {
    line = trimmed(line);
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line without '=': " + line);
    const std::string flag = "--" + trimmed(line.substr(0, eq));
    const std::string value = trimmed(line.substr(eq + 1));
    if (std::find(args.begin(), args.end(), flag) == args.end()) {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

void finish(const std::filesystem::path& out, const std::string& command, const Flags& flags,
            const Seeds& seeds, const Timer& timer) {
  write_run_manifest(out, command, flags, seeds, timer.seconds());
}

// Writes the single-policy metrics CSV for `eval`.
void write_metrics_csv(const std::filesystem::path& path, const AdaptPolicy& policy, double m,
                       const std::vector<double>& class_iou) {
  std::vector<std::string> header = {"mode", "eta", "window", "miou"};
  std::vector<std::string> row = {mode_name(policy.mode), fmt_g6(policy.eta_s),
                                  std::to_string(policy.window), fmt_g6(m)};
  for (size_t s = 0; s < class_iou.size(); ++s) {
    header.push_back("iou_" + std::to_string(s));
    row.push_back(fmt_g6(class_iou[s]));
  }
  write_csv(path, header, {row});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual BN-statistics adaptation workbench for a toy segmentation model"};
  app.require_subcommand(1);

  // gen-data ------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic segmentation dataset");
  std::string gen_out;
  uint64_t gen_seed = 0;
  int gen_n = 100, gen_classes = 4;
  std::string gen_shift = "none", gen_gain;
  double gen_brightness = -10.0, gen_contrast = -1.0, gen_noise = -1.0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Scene seed");
  gen->add_option("--n", gen_n, "Number of samples");
  gen->add_option("--classes", gen_classes, "Class count (2-4)");
  gen->add_option("--shift", gen_shift, "none or preset-night");
  gen->add_option("--brightness", gen_brightness, "Override brightness offset");
  gen->add_option("--contrast", gen_contrast, "Override contrast gain");
  gen->add_option("--gain", gen_gain, "Override channel gains r,g,b");
  gen->add_option("--noise", gen_noise, "Override noise sigma");

  // train ---------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train the toy model on a dataset");
  std::string tr_data, tr_out, tr_mix;
  TrainConfig tr_cfg;
  uint64_t tr_model_seed = 7;
  bool tr_no_flip = false;
  tr->add_option("--data", tr_data, "Training dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--dg-mix", tr_mix, "Second dataset; batches draw half from each");
  tr->add_option("--epochs", tr_cfg.epochs, "Epochs");
  tr->add_option("--batch", tr_cfg.batch_size, "Batch size");
  tr->add_option("--lr", tr_cfg.lr, "Learning rate");
  tr->add_option("--lr-final", tr_cfg.lr_final, "Rate for the last quarter of epochs");
  tr->add_option("--bn-momentum", tr_cfg.momentum_bn, "Running-statistics momentum");
  tr->add_option("--seed", tr_cfg.seed, "Shuffle/augmentation seed");
  tr->add_option("--model-seed", tr_model_seed, "Weight initialization seed");
  tr->add_flag("--no-flip", tr_no_flip, "Disable horizontal flip augmentation");

  // eval ----------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Adapted evaluation of a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_out, ev_mode = "none", ev_subset;
  double ev_eta = 0.2;
  int ev_window = 1, ev_jobs = 1;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--mode", ev_mode, "none|cli|czhang|cklingner|cbna");
  ev->add_option("--eta", ev_eta, "Source/target mixing weight");
  ev->add_option("--window", ev_window, "Frames pooled per inference");
  ev->add_option("--jobs", ev_jobs, "Parallel image workers");
  ev->add_option("--class-subset", ev_subset, "Restrict mIoU to these classes, e.g. 0,1,2");

  // sweep ---------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "mIoU curve over the mixing-weight grid");
  std::string sw_ckpt, sw_data, sw_out, sw_mode = "cbna";
  std::string sw_grid = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
  int sw_jobs = 1;
  sw->add_option("--ckpt", sw_ckpt)->required();
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--out", sw_out)->required();
  sw->add_option("--mode", sw_mode, "cbna or cklingner");
  sw->add_option("--grid", sw_grid, "Comma-separated eta grid");
  sw->add_option("--jobs", sw_jobs);

  // ablate-window ---------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate-window", "mIoU across frame-window lengths");
  std::string ab_ckpt, ab_data, ab_out, ab_mode = "cbna", ab_dn = "1,2,3,4,5";
  double ab_eta = 0.2;
  int ab_jobs = 1;
  ab->add_option("--ckpt", ab_ckpt)->required();
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--out", ab_out)->required();
  ab->add_option("--mode", ab_mode);
  ab->add_option("--eta", ab_eta);
  ab->add_option("--dn", ab_dn, "Comma-separated window lengths");
  ab->add_option("--jobs", ab_jobs);

  // hist ----------------------------------------------------------------------
  auto* hi = app.add_subcommand("hist", "Per-image mIoU distributions and deltas");
  std::string hi_ckpt, hi_data, hi_out;
  double hi_eta = 0.2, hi_abs_bin = 0.02, hi_delta_bin = 0.01;
  int hi_window = 1, hi_jobs = 1;
  hi->add_option("--ckpt", hi_ckpt)->required();
  hi->add_option("--data", hi_data)->required();
  hi->add_option("--out", hi_out)->required();
  hi->add_option("--eta", hi_eta);
  hi->add_option("--window", hi_window);
  hi->add_option("--abs-bin", hi_abs_bin, "Bin width for absolute mIoU");
  hi->add_option("--delta-bin", hi_delta_bin, "Bin width for per-image deltas");
  hi->add_option("--jobs", hi_jobs);

  // flops ---------------------------------------------------------------------
  auto* fl = app.add_subcommand("flops", "Per-strategy cost report for a checkpoint");
  std::string fl_ckpt, fl_out;
  double fl_eta = 0.2;
  int fl_window = 1, fl_res = 64;
  fl->add_option("--ckpt", fl_ckpt)->required();
  fl->add_option("--out", fl_out)->required();
  fl->add_option("--eta", fl_eta);
  fl->add_option("--window", fl_window);
  fl->add_option("--res", fl_res, "Square input resolution");

  // accept ---------------------------------------------------------------------
  auto* ac = app.add_subcommand("accept", "Run the full benchmark suite");
  std::string ac_out = "accept-run";
  int ac_jobs = 1;
  bool ac_fresh = false;
  ac->add_option("--out", ac_out, "Work directory for datasets/checkpoint/reports");
  ac->add_option("--jobs", ac_jobs, "Parallel image workers for evaluation");
  ac->add_flag("--fresh", ac_fresh, "Ignore cached artifacts and regenerate everything");

  // Every subcommand also accepts `--config FILE`, a key=value file of flag
  // defaults (expanded below before parsing; explicit flags win).
  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    Timer timer;
    if (*gen) {
      const DomainShift shift =
          shift_from_flags(gen_shift, gen_brightness, gen_contrast, gen_gain, gen_noise);
      SceneSpec spec;
      spec.seed = gen_seed;
      spec.num_classes = gen_classes;
      const Dataset ds = generate(spec, shift, gen_n);
      write_dataset(ds, gen_out);
      finish(gen_out, "gen-data",
             {{"out", gen_out},
              {"n", std::to_string(gen_n)},
              {"classes", std::to_string(gen_classes)},
              {"shift", gen_shift},
              {"brightness", fmt_g6(ds.shift.brightness_offset)},
              {"contrast", fmt_g6(ds.shift.contrast_gain)},
              {"noise", fmt_g6(ds.shift.noise_sigma)}},
             {{"scene", gen_seed}}, timer);
      std::printf("wrote %d samples to %s\n", gen_n, gen_out.c_str());
    } else if (*tr) {
      tr_cfg.augment_flip = !tr_no_flip;
      const Dataset data = read_dataset(tr_data);
      Dataset mix;
      if (!tr_mix.empty()) mix = read_dataset(tr_mix);
      std::filesystem::create_directories(tr_out);
      TrainLog log;
      const SegModel model = train(build_toy_model(data.spec.num_classes, tr_model_seed), data,
                                   tr_cfg, tr_mix.empty() ? nullptr : &mix, &log);
      save_checkpoint_file(model, std::filesystem::path(tr_out) / "model.ckpt");
      write_train_log_csv(log, std::filesystem::path(tr_out) / "train_log.csv");
      finish(tr_out, "train",
             {{"data", tr_data},
              {"dg-mix", tr_mix},
              {"epochs", std::to_string(tr_cfg.epochs)},
              {"batch", std::to_string(tr_cfg.batch_size)},
              {"lr", fmt_g6(tr_cfg.lr)},
              {"lr-final", fmt_g6(tr_cfg.lr_final)},
              {"bn-momentum", fmt_g6(tr_cfg.momentum_bn)}},
             {{"train", tr_cfg.seed}, {"model", tr_model_seed}}, timer);
      std::printf("trained %d epochs; final loss %.4f\n", tr_cfg.epochs,
                  log.empty() ? 0.0 : log.back().loss);
    } else if (*ev) {
      const SegModel model = load_checkpoint_file(ev_ckpt);
      const Dataset data = read_dataset(ev_data);
      const AdaptPolicy policy{parse_mode(ev_mode), ev_eta, ev_window};
      std::filesystem::create_directories(ev_out);
      ConfusionAccumulator acc(data.spec.num_classes);
      dataset_miou(model, data, policy, ev_jobs, &acc);
      double m;
      if (!ev_subset.empty()) {
        const std::vector<int> subset = parse_int_list(ev_subset);
        m = miou(acc, &subset);
      } else {
        m = miou(acc);
      }
      write_metrics_csv(std::filesystem::path(ev_out) / "metrics.csv", policy, m,
                        per_class_iou(acc));
      const FlopReport rep = count_flops(model, policy, data.spec.height, data.spec.width);
      write_csv(std::filesystem::path(ev_out) / "flops.csv", {kFlopCsvHeader},
                {{flop_csv_row(policy, rep)}});
      finish(ev_out, "eval",
             {{"ckpt", ev_ckpt},
              {"data", ev_data},
              {"mode", ev_mode},
              {"eta", fmt_g6(ev_eta)},
              {"window", std::to_string(ev_window)}},
             {}, timer);
      std::printf("mIoU %.4f (%s, eta %.3g, window %d)\n", m, mode_name(policy.mode), ev_eta,
                  ev_window);
    } else if (*sw) {
      const SegModel model = load_checkpoint_file(sw_ckpt);
      const Dataset data = read_dataset(sw_data);
      std::filesystem::create_directories(sw_out);
      const auto points =
          sweep_eta(model, data, parse_double_list(sw_grid), parse_mode(sw_mode), sw_jobs);
      write_sweep_csv(points, std::filesystem::path(sw_out) / "sweep.csv");
      finish(sw_out, "sweep",
             {{"ckpt", sw_ckpt}, {"data", sw_data}, {"mode", sw_mode}, {"grid", sw_grid}}, {},
             timer);
      std::printf("swept %zu grid points; eta*=%g\n", points.size(),
                  select_eta({points}, parse_double_list(sw_grid)));
    } else if (*ab) {
      const SegModel model = load_checkpoint_file(ab_ckpt);
      const Dataset data = read_dataset(ab_data);
      std::filesystem::create_directories(ab_out);
      const auto points = ablate_window(model, data, parse_int_list(ab_dn), parse_mode(ab_mode),
                                        ab_eta, ab_jobs);
      write_window_csv(points, std::filesystem::path(ab_out) / "window.csv");
      finish(ab_out, "ablate-window",
             {{"ckpt", ab_ckpt},
              {"data", ab_data},
              {"mode", ab_mode},
              {"eta", fmt_g6(ab_eta)},
              {"dn", ab_dn}},
             {}, timer);
      std::printf("wrote %zu window points\n", points.size());
    } else if (*hi) {
      const SegModel model = load_checkpoint_file(hi_ckpt);
      const Dataset data = read_dataset(hi_data);
      std::filesystem::create_directories(hi_out);
      const std::vector<AdaptPolicy> policies = {{AdaptMode::NoAdapt, 0.0, hi_window},
                                                 {AdaptMode::CLi, 0.0, hi_window},
                                                 {AdaptMode::CKlingner, hi_eta, hi_window},
                                                 {AdaptMode::Cbna, hi_eta, hi_window}};
      const HistogramTable table =
          per_image_miou_histogram(model, data, policies, hi_abs_bin, hi_delta_bin, hi_jobs);
      write_hist_csv(table, std::filesystem::path(hi_out) / "hist.csv",
                     std::filesystem::path(hi_out) / "hist_delta.csv");
      finish(hi_out, "hist",
             {{"ckpt", hi_ckpt},
              {"data", hi_data},
              {"eta", fmt_g6(hi_eta)},
              {"window", std::to_string(hi_window)}},
             {}, timer);
      std::printf("deltas: %u up, %u down, %u unchanged\n", table.positive_deltas,
                  table.negative_deltas, table.zero_deltas);
    } else if (*fl) {
      const SegModel model = load_checkpoint_file(fl_ckpt);
      std::filesystem::create_directories(fl_out);
      std::vector<std::vector<std::string>> rows;
      for (AdaptMode mode :
           {AdaptMode::NoAdapt, AdaptMode::CLi, AdaptMode::CKlingner, AdaptMode::Cbna}) {
        const AdaptPolicy policy{mode, fl_eta, fl_window};
        rows.push_back({flop_csv_row(policy, count_flops(model, policy, fl_res, fl_res))});
      }
      write_csv(std::filesystem::path(fl_out) / "flops.csv", {kFlopCsvHeader}, rows);
      finish(fl_out, "flops",
             {{"ckpt", fl_ckpt}, {"res", std::to_string(fl_res)}, {"eta", fmt_g6(fl_eta)}}, {},
             timer);
      std::printf("wrote flops.csv at %dx%d\n", fl_res, fl_res);
    } else if (*ac) {
      AcceptOptions opt;
      opt.work_dir = ac_out;
      opt.jobs = ac_jobs;
      opt.reuse = !ac_fresh;
      const auto results = run_acceptance(opt);
      finish(ac_out, "accept", {{"out", ac_out}, {"jobs", std::to_string(ac_jobs)}},
             {{"model", 7}, {"train", 11}, {"source", 101}, {"holdout", 202}}, timer);
      int failed = 0;
      for (const auto& r : results)
        if (!r.pass) ++failed;
      std::printf("%zu criteria, %d failed, %.1fs total\n", results.size(), failed,
                  timer.seconds());
      if (!all_passed(results)) return 3;
    }
    return 0;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
