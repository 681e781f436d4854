#include "rangeseg/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rangeseg {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr std::uint64_t kBatchStream = 0x62617463ULL;  // "batc"
constexpr std::uint64_t kRowStream = 0x726f7773ULL;    // "rows"

class SgdMomentum {
 public:
  SgdMomentum(std::vector<std::pair<std::string, Tensor>> params, double momentum)
      : params_(std::move(params)), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (auto& [name, t] : params_) velocity_.push_back(Eigen::ArrayXd::Zero(t.size()));
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].second;
      velocity_[i] = momentum_ * velocity_[i] + t.grad();
      t.array() -= lr * velocity_[i];
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Eigen::ArrayXd> velocity_;
  double momentum_;
};

double lr_at(const TrainConfig& config, int step) {
  if (config.lr_decay <= 0.0 || config.steps <= 1) return config.lr;
  return config.lr * (1.0 - config.lr_decay * static_cast<double>(step) / config.steps);
}

std::vector<int> draw_indices(int count, int n, Rng& rng) {
  std::vector<int> idx(count);
  for (int i = 0; i < count; ++i) idx[i] = rng.uniform_int(n);
  return idx;
}

TrainHistory run_training(const std::vector<RangeImage>& sim,
                          const std::vector<RangeImage>* real, Model& model,
                          const TrainConfig& config) {
  check(!sim.empty(), "training requires a non-empty labeled dataset");
  check(config.lr > 0.0, "learning rate must be positive");
  check(config.batch_size >= 2, "batch size must be >= 2");
  check(config.steps >= 0, "step count must be >= 0");
  const bool use_gca = config.loss.lambda > 0.0;
  if (use_gca) check(real && !real->empty(), "GCA training requires a non-empty real dataset");

  compute_norm_stats(sim, false, model.norm_mean, model.norm_std);
  SgdMomentum opt(model_parameters(model), config.momentum);
  Rng batch_rng = Rng::derive(config.seed, kBatchStream);
  Rng row_rng = Rng::derive(config.seed, kRowStream);

  TrainHistory history;
  history.steps.reserve(config.steps);
  for (int step = 0; step < config.steps; ++step) {
    const std::vector<int> sim_idx = draw_indices(config.batch_size, (int)sim.size(), batch_rng);
    Batch sim_batch = make_batch(sim, sim_idx, model.norm_mean, model.norm_std, false);
    Batch real_batch;
    if (use_gca) {
      const std::vector<int> real_idx =
          draw_indices(config.batch_size, (int)real->size(), batch_rng);
      real_batch = make_batch(*real, real_idx, model.norm_mean, model.norm_std, false);
    }
    opt.zero_grad();
    AdaptationLoss loss = adaptation_loss(model, sim_batch, use_gca ? &real_batch : nullptr,
                                          config.loss, row_rng, config.align_rows,
                                          config.align_layer);
    loss.total.backward();
    opt.step(lr_at(config, step));
    StepRecord rec;
    rec.step = step;
    rec.focal = loss.focal.item();
    rec.geodesic = loss.geodesic.defined() ? loss.geodesic.item() : 0.0;
    rec.total = loss.total.item();
    history.steps.push_back(rec);
  }
  return history;
}

}  // namespace

TrainHistory train_with_gca(const std::vector<RangeImage>& sim_labeled,
                            const std::vector<RangeImage>& real_unlabeled, Model& model,
                            const TrainConfig& config) {
  check(!real_unlabeled.empty(), "train_with_gca: real dataset is empty");
  return run_training(sim_labeled, &real_unlabeled, model, config);
}

TrainHistory train_source_only(const std::vector<RangeImage>& sim_labeled, Model& model,
                               const TrainConfig& config) {
  TrainConfig cfg = config;
  cfg.loss.lambda = 0.0;
  return run_training(sim_labeled, nullptr, model, cfg);
}

// ---------------------------------------------------------------------------
// Learned intensity rendering
// ---------------------------------------------------------------------------

namespace {

bool has_intensity_signal(const std::vector<RangeImage>& images) {
  for (const RangeImage& img : images)
    if ((img.intensity != 0.0).any()) return true;
  return false;
}

ImageXd predict_intensity_image(const RangeImage& img, Model& renderer,
                                RendererLossKind kind, const LossConfig& loss_cfg) {
  if (kind == RendererLossKind::Hybrid) {
    auto [logits, deviations] = render_forward(img, renderer);
    return render_prediction(logits, deviations, loss_cfg.bin_references);
  }
  std::vector<RangeImage> one{img};
  Batch batch = make_batch(one, {0}, renderer.norm_mean, renderer.norm_std, true);
  Tensor out = model_forward(renderer, batch.input, BnMode::Eval);
  ImageXd pred(img.height, img.width);
  for (long p = 0; p < static_cast<long>(img.height) * img.width; ++p)
    pred.data()[p] = std::clamp(out.data()[p], 0.0, 1.0);
  return pred;
}

RendererLossKind renderer_kind(const Model& renderer) {
  return renderer.spec.out_channels == 1 ? RendererLossKind::L2 : RendererLossKind::Hybrid;
}

}  // namespace

PretrainResult pretrain_renderer(const std::vector<RangeImage>& real_train,
                                 const std::vector<RangeImage>& real_holdout, Model& renderer,
                                 const TrainConfig& config, RendererLossKind kind) {
  check(!real_train.empty() && !real_holdout.empty(),
        "pretrain_renderer: datasets must be non-empty");
  check(has_intensity_signal(real_train),
        "pretrain_renderer: training dataset has no intensity channel to learn from");
  check(renderer.spec.in_channels == 5, "pretrain_renderer: model does not take renderer inputs");
  if (kind == RendererLossKind::Hybrid)
    check(renderer.spec.out_channels == 2 * config.loss.n_bins,
          "pretrain_renderer: head width does not match 2*n_bins");
  else
    check(renderer.spec.out_channels == 1, "pretrain_renderer: l2 head must have one channel");

  compute_norm_stats(real_train, true, renderer.norm_mean, renderer.norm_std);
  SgdMomentum opt(model_parameters(renderer), config.momentum);
  Rng batch_rng = Rng::derive(config.seed, kBatchStream);

  PretrainResult result;
  result.history.steps.reserve(config.steps);
  const int n_bins = config.loss.n_bins;
  for (int step = 0; step < config.steps; ++step) {
    const std::vector<int> idx = draw_indices(config.batch_size, (int)real_train.size(), batch_rng);
    Batch batch = make_batch(real_train, idx, renderer.norm_mean, renderer.norm_std, true);
    opt.zero_grad();
    Tensor head = model_forward(renderer, batch.input, BnMode::Train);
    Tensor loss;
    if (kind == RendererLossKind::Hybrid) {
      Tensor logits = slice_channels(head, 0, n_bins);
      Tensor deviations = slice_channels(head, n_bins, n_bins);
      loss = hybrid_intensity_loss(logits, deviations, batch.intensity, batch.mask, config.loss);
    } else {
      long kept = 0;
      Tensor target = Tensor::zeros(head.shape());
      Tensor mask = Tensor::zeros(head.shape());
      for (std::size_t i = 0; i < batch.mask.size(); ++i) {
        if (!batch.mask[i]) continue;
        target.data()[i] = batch.intensity[i];
        mask.data()[i] = 1.0;
        ++kept;
      }
      if (kept == 0) {
        loss = Tensor::scalar(0.0);
      } else {
        Tensor diff = sub(head, target);
        loss = scale(sum(mul(mul(diff, diff), mask)), 1.0 / static_cast<double>(kept));
      }
    }
    loss.backward();
    opt.step(lr_at(config, step));
    StepRecord rec;
    rec.step = step;
    rec.total = loss.item();
    result.history.steps.push_back(rec);
  }
  result.holdout_mse = renderer_holdout_mse(renderer, real_holdout, kind);
  return result;
}

double renderer_holdout_mse(Model& renderer, const std::vector<RangeImage>& holdout,
                            RendererLossKind kind) {
  check(!holdout.empty(), "renderer_holdout_mse: empty dataset");
  NoGradGuard ng;
  LossConfig loss_cfg = LossConfig::defaults();
  if (kind == RendererLossKind::Hybrid) {
    const int n_bins = renderer.spec.out_channels / 2;
    loss_cfg.n_bins = n_bins;
    loss_cfg.bin_edges = uniform_bin_edges(n_bins);
    loss_cfg.bin_references = uniform_bin_references(n_bins);
  }
  double err = 0.0;
  long count = 0;
  for (const RangeImage& img : holdout) {
    ImageXd pred = predict_intensity_image(img, renderer, kind, loss_cfg);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        if (!img.mask(r, c)) continue;
        const double d = pred(r, c) - img.intensity(r, c);
        err += d * d;
        ++count;
      }
  }
  check(count > 0, "renderer_holdout_mse: holdout set has no existing pixels");
  return err / static_cast<double>(count);
}

std::vector<RangeImage> render_intensity(const std::vector<RangeImage>& synthetic,
                                         Model& renderer) {
  check(renderer.spec.in_channels == 5, "render_intensity: model does not take renderer inputs");
  for (const RangeImage& img : synthetic)
    check((img.intensity == 0.0).all(),
          "render_intensity: synthetic dataset already has a non-zero intensity channel");
  NoGradGuard ng;
  const RendererLossKind kind = renderer_kind(renderer);
  LossConfig loss_cfg = LossConfig::defaults();
  if (kind == RendererLossKind::Hybrid) {
    const int n_bins = renderer.spec.out_channels / 2;
    loss_cfg.n_bins = n_bins;
    loss_cfg.bin_edges = uniform_bin_edges(n_bins);
    loss_cfg.bin_references = uniform_bin_references(n_bins);
  }
  std::vector<RangeImage> out;
  out.reserve(synthetic.size());
  for (const RangeImage& img : synthetic) {
    RangeImage filled = img;
    if ((img.mask != 0).any()) {
      ImageXd pred = predict_intensity_image(img, renderer, kind, loss_cfg);
      for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
          if (img.mask(r, c)) filled.intensity(r, c) = pred(r, c);
    }
    out.push_back(std::move(filled));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Progressive domain calibration
// ---------------------------------------------------------------------------

namespace {

struct AggregateStats {
  double mean = 0.0;
  double stddev = 0.0;
};

// Collapses per-channel statistics into whole-tensor statistics (channels
// carry equal sample counts).
AggregateStats aggregate(const Eigen::ArrayXd& means, const Eigen::ArrayXd& vars) {
  AggregateStats s;
  s.mean = means.mean();
  const double second_moment = (vars + means.square()).mean();
  s.stddev = std::sqrt(std::max(second_moment - s.mean * s.mean, 0.0));
  return s;
}

// Statistics of (x - m) / sqrt(v + eps) given per-channel stats of x.
AggregateStats normalized_stats(const ChannelWelford& acc, const Eigen::ArrayXd& m,
                                const Eigen::ArrayXd& v, double eps) {
  const Eigen::ArrayXd rinv = (v + eps).sqrt().inverse();
  const Eigen::ArrayXd nm = (acc.mean - m) * rinv;
  const Eigen::ArrayXd nv = acc.variance() * rinv.square();
  return aggregate(nm, nv);
}

}  // namespace

CalibrationReport progressive_domain_calibration(Model& model,
                                                 const std::vector<RangeImage>& real_unlabeled,
                                                 int max_images, int batch_size) {
  check(!real_unlabeled.empty(), "progressive_domain_calibration: calibration set is empty");
  check(max_images >= 1 && batch_size >= 1, "progressive_domain_calibration: bad sizes");
  auto bns = model_bn_units(model);
  check(!bns.empty(), "progressive_domain_calibration: model has no batch-norm layers");
  const bool renderer_inputs = model.spec.in_channels == 5;
  const int use = std::min<int>(max_images, static_cast<int>(real_unlabeled.size()));

  NoGradGuard ng;
  CalibrationReport report;
  report.images_used = use;

  auto collect = [&](int target, ChannelWelford& acc) {
    BnProbe probe;
    probe.target = target;
    probe.acc = &acc;
    ForwardHooks hooks;
    hooks.probe = &probe;
    for (int begin = 0; begin < use; begin += batch_size) {
      std::vector<int> idx;
      for (int i = begin; i < std::min(use, begin + batch_size); ++i) idx.push_back(i);
      Batch batch =
          make_batch(real_unlabeled, idx, model.norm_mean, model.norm_std, renderer_inputs);
      model_forward(model, batch.input, BnMode::Eval, hooks);
    }
  };

  // Forward order; each unit's statistics are computed with all earlier
  // units already recalibrated.
  for (std::size_t j = 0; j < bns.size(); ++j) {
    BatchNormState* bn = bns[j].second;
    ChannelWelford acc;
    acc.init(bn->channels());
    collect(static_cast<int>(j), acc);
    CalibrationLayerStat stat;
    stat.name = bns[j].first;
    const AggregateStats pre =
        normalized_stats(acc, bn->running_mean, bn->running_var, bn->epsilon);
    stat.pre_mean = pre.mean;
    stat.pre_std = pre.stddev;
    const Eigen::ArrayXd var = acc.variance();
    stat.zero_variance_channels = static_cast<int>((var < 1e-12).count());
    bn->running_mean = acc.mean;
    bn->running_var = var;
    report.layers.push_back(std::move(stat));
  }

  // Measurement pass with the final statistics.
  for (std::size_t j = 0; j < bns.size(); ++j) {
    BatchNormState* bn = bns[j].second;
    ChannelWelford acc;
    acc.init(bn->channels());
    collect(static_cast<int>(j), acc);
    const AggregateStats post =
        normalized_stats(acc, bn->running_mean, bn->running_var, bn->epsilon);
    report.layers[j].post_mean = post.mean;
    report.layers[j].post_std = post.stddev;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate_predictions(const std::vector<ImageXu8>& preds,
                                const std::vector<RangeImage>& gt) {
  check(preds.size() == gt.size(), "evaluate_predictions: prediction/ground-truth count mismatch");
  check(!gt.empty(), "evaluate_predictions: empty dataset");
  EvalResult result;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (int cls = 0; cls < kNumClasses; ++cls) {
      IouResult r = compute_iou(preds[i], gt[i], cls);
      result.per_class[cls].intersection += r.intersection;
      result.per_class[cls].union_count += r.union_count;
    }
  }
  double total = 0.0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    auto& c = result.per_class[cls];
    if (c.union_count == 0) {
      c.empty_union = true;
      c.iou = 1.0;
    } else {
      c.iou = static_cast<double>(c.intersection) / static_cast<double>(c.union_count);
    }
    total += c.iou;
  }
  result.mean_iou = total / kNumClasses;
  return result;
}

EvalResult evaluate_model(Model& model, const std::vector<RangeImage>& data) {
  check(!data.empty(), "evaluate_model: empty dataset");
  std::vector<ImageXu8> preds;
  preds.reserve(data.size());
  for (const RangeImage& img : data) preds.push_back(predict_labels(img, model));
  return evaluate_predictions(preds, data);
}

}  // namespace rangeseg
