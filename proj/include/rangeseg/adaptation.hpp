#pragma once

#include "rangeseg/losses.hpp"
#include "rangeseg/network.hpp"
#include "rangeseg/range_image.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace rangeseg {

/// SGD-with-momentum training knobs. A fixed seed at thread count 1 gives
/// bit-reproducible runs; all batch composition derives from the seed.
struct TrainConfig {
  double lr = 0.05;
  double lr_decay = 0.0;  // linear decay: lr_t = lr * (1 - lr_decay * t/steps)
  double momentum = 0.9;
  int batch_size = 4;
  int steps = 200;
  std::uint64_t seed = 1;
  LossConfig loss = LossConfig::defaults();
  int align_rows = 1024;
  int align_layer = -1;  // -1 = classifier input
};

struct StepRecord {
  int step = 0;
  double focal = 0.0;
  double geodesic = 0.0;
  double total = 0.0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
};

/// Joint training: per step one labeled synthetic batch and one unlabeled
/// real batch, minimizing focal + lambda * geodesic. With lambda == 0 the
/// real dataset is never sampled, so the run equals source-only training
/// step for step under the same seed.
TrainHistory train_with_gca(const std::vector<RangeImage>& sim_labeled,
                            const std::vector<RangeImage>& real_unlabeled, Model& model,
                            const TrainConfig& config);

TrainHistory train_source_only(const std::vector<RangeImage>& sim_labeled, Model& model,
                               const TrainConfig& config);

enum class RendererLossKind { Hybrid, L2 };

struct PretrainResult {
  TrainHistory history;
  double holdout_mse = 0.0;
};

/// Self-supervised intensity pretraining: geometry channels in, the
/// intensity channel as the label. Returns the held-out MSE on existing
/// pixels after training.
PretrainResult pretrain_renderer(const std::vector<RangeImage>& real_train,
                                 const std::vector<RangeImage>& real_holdout, Model& renderer,
                                 const TrainConfig& config, RendererLossKind kind);

double renderer_holdout_mse(Model& renderer, const std::vector<RangeImage>& holdout,
                            RendererLossKind kind);

/// Fills the intensity channel of a synthetic dataset (which must be
/// all-zero) with renderer predictions on existing pixels. Every other
/// channel is byte-identical to the input.
std::vector<RangeImage> render_intensity(const std::vector<RangeImage>& synthetic,
                                         Model& renderer);

struct CalibrationLayerStat {
  std::string name;
  // Normalized (pre-affine) output statistics over the calibration set,
  // with the old statistics and with the recalibrated ones.
  double pre_mean = 0.0, pre_std = 0.0;
  double post_mean = 0.0, post_std = 0.0;
  int zero_variance_channels = 0;
};

struct CalibrationReport {
  std::vector<CalibrationLayerStat> layers;  // forward topological order
  int images_used = 0;
};

/// Progressive domain calibration: walk BN units in forward order, replace
/// each unit's running statistics with the empirical statistics of its
/// input over the calibration set, propagating recalibrated activations
/// before handling the next unit. Learnable parameters are frozen.
CalibrationReport progressive_domain_calibration(Model& model,
                                                 const std::vector<RangeImage>& real_unlabeled,
                                                 int max_images = 256, int batch_size = 8);

struct ClassIou {
  double iou = 0.0;
  long intersection = 0;
  long union_count = 0;
  bool empty_union = false;
};

struct EvalResult {
  std::array<ClassIou, kNumClasses> per_class;
  double mean_iou = 0.0;
};

/// Pooled IoU over a labeled dataset (sets accumulated across images).
EvalResult evaluate_model(Model& model, const std::vector<RangeImage>& data);
EvalResult evaluate_predictions(const std::vector<ImageXu8>& preds,
                                const std::vector<RangeImage>& gt);

}  // namespace rangeseg
