#include "rangeseg/cli.hpp"

#include "rangeseg/adaptation.hpp"
#include "rangeseg/config.hpp"
#include "rangeseg/losses.hpp"
#include "rangeseg/network.hpp"
#include "rangeseg/range_image.hpp"
#include "rangeseg/synthgen.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace rangeseg {

namespace fs = std::filesystem;

namespace {

std::string resolve_run_dir(const std::string& configured) {
  const char* root = std::getenv("RANGESEG_RUN_ROOT");
  if (root && root[0] != '\0' && !fs::path(configured).is_absolute())
    return (fs::path(root) / configured).string();
  return configured;
}

/// Exclusive lock on a run directory for the lifetime of the command.
class RunDirLock {
 public:
  explicit RunDirLock(const std::string& dir) : lock_path_(fs::path(dir) / "lock") {
    fs::create_directories(dir);
    if (fs::exists(lock_path_))
      throw std::runtime_error("run directory '" + dir +
                               "' is locked by another run (remove '" + lock_path_.string() +
                               "' if that run is dead)");
    std::ofstream out(lock_path_);
    out << "locked\n";
  }
  ~RunDirLock() {
    std::error_code ec;
    fs::remove(lock_path_, ec);
  }

 private:
  fs::path lock_path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

struct RunContext {
  RunConfig cfg;
  std::string run_dir;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void finish(const std::string& command) const {
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - started)
                             .count();
    // Wall time lives in its own file so the metric files stay
    // bit-reproducible across reruns.
    std::ofstream out(fs::path(run_dir) / "timing.txt");
    out << "command=" << command << " wall_ms=" << elapsed << "\n";
  }
};

RunContext open_run(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunContext ctx;
  ctx.cfg = load_run_config(config_path, overrides);
  ctx.run_dir = resolve_run_dir(ctx.cfg.run_dir);
  return ctx;
}

std::string metrics_text(const TrainHistory& history) {
  std::string out;
  char buf[192];
  for (const StepRecord& rec : history.steps) {
    std::snprintf(buf, sizeof(buf), "step=%d focal=%.17g geodesic=%.17g total=%.17g\n", rec.step,
                  rec.focal, rec.geodesic, rec.total);
    out += buf;
  }
  return out;
}

std::string iou_csv(const EvalResult& result) {
  static const char* kNames[kNumClasses] = {"background", "car", "pedestrian", "cyclist"};
  std::string out = "class,iou,intersection,union,empty_union\n";
  char buf[160];
  for (int cls = 0; cls < kNumClasses; ++cls) {
    const auto& c = result.per_class[cls];
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%ld,%ld,%d\n", kNames[cls], c.iou, c.intersection,
                  c.union_count, c.empty_union ? 1 : 0);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,%.17g,,,\n", result.mean_iou);
  out += buf;
  return out;
}

std::string pdc_csv(const CalibrationReport& report) {
  std::string out = "layer,pre_mean,pre_std,post_mean,post_std,zero_variance_channels\n";
  char buf[224];
  for (const auto& l : report.layers) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%d\n", l.name.c_str(), l.pre_mean,
                  l.pre_std, l.post_mean, l.post_std, l.zero_variance_channels);
    out += buf;
  }
  return out;
}

std::string pdc_report_text(const CalibrationReport& report) {
  std::string out = "progressive domain calibration report\n";
  out += "images used: " + std::to_string(report.images_used) + "\n";
  char buf[224];
  for (const auto& l : report.layers) {
    std::snprintf(buf, sizeof(buf),
                  "  %-20s pre mean % .4f std % .4f | post mean % .4f std % .4f%s\n",
                  l.name.c_str(), l.pre_mean, l.pre_std, l.post_mean, l.post_std,
                  l.zero_variance_channels ? " [zero-variance channels]" : "");
    out += buf;
  }
  return out;
}

TrainConfig train_config_from(const RunConfig& cfg) {
  TrainConfig tc;
  tc.lr = cfg.train_lr;
  tc.lr_decay = cfg.train_lr_decay;
  tc.momentum = cfg.train_momentum;
  tc.batch_size = cfg.train_batch_size;
  tc.steps = cfg.train_steps;
  tc.seed = cfg.seed;
  tc.loss.gamma = cfg.loss_gamma;
  tc.loss.lambda = cfg.loss_lambda;
  tc.loss.n_bins = cfg.loss_n_bins;
  tc.loss.bin_edges = uniform_bin_edges(cfg.loss_n_bins);
  tc.loss.bin_references = uniform_bin_references(cfg.loss_n_bins);
  tc.loss.epsilon_cov = cfg.loss_epsilon_cov;
  tc.loss.deviation_on_true_bin = cfg.loss_deviation_on_true_bin;
  tc.align_rows = cfg.align_rows;
  tc.align_layer = cfg.align_layer;
  return tc;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  DomainConfig source = source_domain_from_config(cfg);
  DomainConfig target = target_domain_from_config(cfg);
  fs::create_directories(cfg.data_dir);
  auto [src_train, tgt_train] = generate_domain_pair(source, target, cfg.data_count_train, 0);
  auto [src_test, tgt_test] =
      generate_domain_pair(source, target, cfg.data_count_test, cfg.data_count_train);
  write_dataset(cfg.data_dir + "/source_train.rsds", src_train);
  write_dataset(cfg.data_dir + "/source_test.rsds", src_test);
  write_dataset(cfg.data_dir + "/target_train.rsds", tgt_train);
  write_dataset(cfg.data_dir + "/target_test.rsds", tgt_test);
  std::printf("gen-data: wrote %d train + %d test scene pairs to %s\n", cfg.data_count_train,
              cfg.data_count_test, cfg.data_dir.c_str());
  return kExitOk;
}

int cmd_train(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto dataset = read_dataset(cfg.train_dataset);
  Model model = build_model(segmentation_spec(cfg.model_with_cam), cfg.seed);
  TrainConfig tc = train_config_from(cfg);
  TrainHistory history = train_source_only(dataset, model, tc);
  write_text(fs::path(ctx.run_dir) / "metrics.txt", metrics_text(history));
  save_model((fs::path(ctx.run_dir) / "model.ckpt").string(), model);
  std::printf("train: %d steps on %zu images, final loss %.6f\n", tc.steps, dataset.size(),
              history.steps.empty() ? 0.0 : history.steps.back().total);
  return kExitOk;
}

int cmd_pretrain_renderer(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto train = read_dataset(cfg.renderer_dataset);
  auto holdout = read_dataset(cfg.renderer_holdout);
  const bool hybrid = cfg.renderer_loss == "hybrid";
  Model renderer = build_model(
      hybrid ? renderer_spec(cfg.renderer_n_bins) : renderer_l2_spec(), cfg.seed);
  TrainConfig tc = train_config_from(cfg);
  tc.steps = cfg.renderer_steps;
  tc.loss.n_bins = cfg.renderer_n_bins;
  tc.loss.bin_edges = uniform_bin_edges(cfg.renderer_n_bins);
  tc.loss.bin_references = uniform_bin_references(cfg.renderer_n_bins);
  PretrainResult result = pretrain_renderer(
      train, holdout, renderer, tc, hybrid ? RendererLossKind::Hybrid : RendererLossKind::L2);
  write_text(fs::path(ctx.run_dir) / "metrics.txt", metrics_text(result.history));
  char buf[96];
  std::snprintf(buf, sizeof(buf), "metric,value\nholdout_mse,%.17g\n", result.holdout_mse);
  write_text(fs::path(ctx.run_dir) / "summary.csv", buf);
  save_model((fs::path(ctx.run_dir) / "renderer.ckpt").string(), renderer);
  std::printf("pretrain-renderer: %s loss, held-out MSE %.6f\n", cfg.renderer_loss.c_str(),
              result.holdout_mse);
  return kExitOk;
}

int cmd_render(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  if (cfg.renderer_checkpoint.empty())
    throw ConfigError("render requires renderer.checkpoint");
  Model renderer = load_model(cfg.renderer_checkpoint);
  auto input = read_dataset(cfg.render_input);
  auto output = render_intensity(input, renderer);
  write_dataset(cfg.render_output, output);
  std::printf("render: filled intensity for %zu images -> %s\n", output.size(),
              cfg.render_output.c_str());
  return kExitOk;
}

int cmd_adapt(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto sim = read_dataset(cfg.adapt_source);
  auto real = read_dataset(cfg.adapt_real);
  Model model = build_model(segmentation_spec(cfg.model_with_cam), cfg.seed);
  TrainConfig tc = train_config_from(cfg);
  TrainHistory history = tc.loss.lambda > 0.0 ? train_with_gca(sim, real, model, tc)
                                              : train_source_only(sim, model, tc);
  if (cfg.pdc_enabled) {
    CalibrationReport report =
        progressive_domain_calibration(model, real, cfg.pdc_images, cfg.pdc_batch);
    write_text(fs::path(ctx.run_dir) / "pdc_report.txt", pdc_report_text(report));
    write_text(fs::path(ctx.run_dir) / "pdc_report.csv", pdc_csv(report));
  }
  write_text(fs::path(ctx.run_dir) / "metrics.txt", metrics_text(history));
  save_model((fs::path(ctx.run_dir) / "model.ckpt").string(), model);
  std::printf("adapt: %d steps (lambda=%g, pdc=%s) on %zu sim + %zu real images\n", tc.steps,
              tc.loss.lambda, cfg.pdc_enabled ? "on" : "off", sim.size(), real.size());
  return kExitOk;
}

int cmd_calibrate(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  if (cfg.model_checkpoint.empty())
    throw ConfigError("calibrate requires model.checkpoint");
  Model model = load_model(cfg.model_checkpoint);
  auto calib = read_dataset(cfg.calibrate_dataset);
  CalibrationReport report =
      progressive_domain_calibration(model, calib, cfg.pdc_images, cfg.pdc_batch);
  write_text(fs::path(ctx.run_dir) / "pdc_report.txt", pdc_report_text(report));
  write_text(fs::path(ctx.run_dir) / "pdc_report.csv", pdc_csv(report));
  save_model((fs::path(ctx.run_dir) / "calibrated.ckpt").string(), model);
  std::printf("calibrate: %zu BN units recalibrated on %d images\n", report.layers.size(),
              report.images_used);
  return kExitOk;
}

int cmd_eval(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto gt = read_dataset(cfg.eval_dataset);
  EvalResult result;
  if (!cfg.eval_pred.empty()) {
    auto pred_set = read_dataset(cfg.eval_pred);
    if (pred_set.size() != gt.size())
      throw std::invalid_argument("eval: prediction dataset size does not match ground truth");
    std::vector<ImageXu8> preds;
    preds.reserve(pred_set.size());
    for (const auto& img : pred_set) preds.push_back(img.labels);
    result = evaluate_predictions(preds, gt);
  } else {
    if (cfg.model_checkpoint.empty())
      throw ConfigError("eval requires model.checkpoint (or eval.pred)");
    Model model = load_model(cfg.model_checkpoint);
    result = evaluate_model(model, gt);
  }
  write_text(fs::path(ctx.run_dir) / "iou.csv", iou_csv(result));
  std::fputs(iou_csv(result).c_str(), stdout);
  return kExitOk;
}

int cmd_noise_experiment(RunContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  std::vector<double> p_list;
  {
    std::string item;
    std::istringstream in(cfg.noise_p_list);
    while (std::getline(in, item, ',')) p_list.push_back(std::stod(item));
  }
  int n = 1, c = 16, h = 32, w = 64;
  if (std::sscanf(cfg.noise_shape.c_str(), "%dx%dx%dx%d", &n, &c, &h, &w) != 4)
    throw ConfigError("noise.shape must look like 1x16x32x64");
  Rng rng = Rng::derive(cfg.seed, 0x6b65726eULL);  // "kern"
  Tensor kernel = Tensor::zeros({c, c, cfg.noise_kernel, cfg.noise_kernel});
  const double stddev = std::sqrt(2.0 / (c * cfg.noise_kernel * cfg.noise_kernel));
  for (int i = 0; i < kernel.size(); ++i) kernel.data()[i] = rng.normal() * stddev;
  Tensor bias = Tensor::zeros({c});
  auto rows = noise_robustness_probe(kernel, bias, p_list, cfg.noise_trials, cfg.seed, n, c, h, w);
  std::string csv = "p,plain_err,plain_se,cam_err,cam_se\n";
  char buf[160];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g\n", row.p, row.plain_err,
                  row.plain_se, row.cam_err, row.cam_se);
    csv += buf;
  }
  write_text(fs::path(ctx.run_dir) / "noise.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"range-image LiDAR segmentation with synthetic-to-real domain adaptation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  struct Command {
    const char* name;
    const char* help;
    int (*fn)(RunContext&);
  };
  const Command commands[] = {
      {"gen-data", "generate paired source/target datasets", cmd_gen_data},
      {"train", "train the segmentation model on a labeled dataset", cmd_train},
      {"pretrain-renderer", "self-supervised intensity renderer pretraining",
       cmd_pretrain_renderer},
      {"render", "fill a synthetic dataset's intensity channel", cmd_render},
      {"adapt", "joint training with correlation alignment (+ optional PDC)", cmd_adapt},
      {"calibrate", "progressive domain calibration of a trained model", cmd_calibrate},
      {"eval", "per-class IoU of a model (or prediction dataset) against labels", cmd_eval},
      {"noise-experiment", "dropout-noise robustness probe (plain vs CAM-gated conv)",
       cmd_noise_experiment},
  };
  for (const Command& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("-c,--config", config_path, "config file (key = value lines)");
    sub->add_option("--set", overrides, "override a config key (key=value, repeatable)");
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return kExitOk;
    }
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    RunContext ctx = open_run(config_path, overrides);
    for (const Command& cmd : commands) {
      if (app.get_subcommand(cmd.name)->parsed()) {
        RunDirLock lock(ctx.run_dir);
        write_text(fs::path(ctx.run_dir) / "config.resolved", resolved_config_text(ctx.cfg));
        const int rc = cmd.fn(ctx);
        ctx.finish(cmd.name);
        return rc;
      }
    }
    std::cerr << "error: no subcommand selected\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitShape;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace rangeseg
