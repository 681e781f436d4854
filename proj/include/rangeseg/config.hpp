#pragma once

#include "rangeseg/synthgen.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rangeseg {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Full run configuration. Parsed from a plain-text key-value tree
/// ("section.key = value" lines, '#' comments) plus --set overrides.
/// Unknown keys are hard errors. Every run writes its fully resolved
/// configuration next to its outputs.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string run_dir = "runs/run";

  // grid.* (angles in degrees in the file, radians in GridConfig)
  int grid_height = 64;
  int grid_width = 512;
  double grid_elev_min_deg = -25.0;
  double grid_elev_max_deg = 3.0;
  double grid_azim_min_deg = -45.0;
  double grid_azim_max_deg = 45.0;

  // scene.*
  int scene_cars = 5;
  int scene_pedestrians = 3;
  int scene_cyclists = 2;
  double scene_range_min = 5.0;
  double scene_range_max = 22.0;
  double scene_sensor_height = 1.7;
  bool scene_ground_plane = true;

  // source.* / target.* sensor knobs
  double source_p_drop = 0.0;
  std::string source_intensity = "none";
  double source_jitter_deg = 0.0;
  double target_p_drop = 0.25;
  std::string target_intensity = "bimodal";
  double target_jitter_deg = 0.05;

  // data.*
  std::string data_dir = "data";
  int data_count_train = 96;
  int data_count_test = 32;

  // model.*
  bool model_with_cam = true;
  std::string model_checkpoint;

  // renderer.*
  int renderer_n_bins = 10;
  std::string renderer_loss = "hybrid";  // hybrid | l2
  int renderer_steps = 160;
  std::string renderer_checkpoint;
  std::string renderer_dataset;  // default: {data.dir}/target_train.rsds
  std::string renderer_holdout;  // default: {data.dir}/target_test.rsds

  // train.*
  double train_lr = 0.05;
  double train_lr_decay = 0.0;
  double train_momentum = 0.9;
  int train_batch_size = 4;
  int train_steps = 240;
  std::string train_dataset;  // default: {data.dir}/source_train.rsds

  // loss.*
  double loss_gamma = 2.0;
  double loss_lambda = 10.0;
  int loss_n_bins = 10;
  double loss_epsilon_cov = 1e-5;
  bool loss_deviation_on_true_bin = true;

  // align.*
  int align_rows = 1024;
  int align_layer = -1;

  // pdc.*
  bool pdc_enabled = true;
  int pdc_images = 256;
  int pdc_batch = 8;

  // adapt.*
  std::string adapt_source;  // default: {data.dir}/source_train_rendered.rsds
  std::string adapt_real;    // default: {data.dir}/target_train.rsds

  // calibrate.* / eval.* / render.*
  std::string calibrate_dataset;  // default: {data.dir}/target_train.rsds
  std::string eval_dataset;       // default: {data.dir}/target_test.rsds
  std::string eval_pred;          // optional: labels of this dataset are the predictions
  std::string render_input;       // default: {data.dir}/source_train.rsds
  std::string render_output;      // default: {data.dir}/source_train_rendered.rsds

  // noise.*
  std::string noise_p_list = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  int noise_trials = 100;
  std::string noise_shape = "1x16x32x64";
  int noise_kernel = 3;
};

/// Parses a config file (optional) and applies key=value overrides on top
/// of the defaults, then resolves derived paths. Throws ConfigError.
RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides);

/// Canonical resolved form, one "key = value" line per known key.
std::string resolved_config_text(const RunConfig& config);

GridConfig grid_from_config(const RunConfig& config);
DomainConfig source_domain_from_config(const RunConfig& config);
DomainConfig target_domain_from_config(const RunConfig& config);

}  // namespace rangeseg
