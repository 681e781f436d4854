#include "rangeseg/losses.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rangeseg {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr double kProbFloor = 1e-12;

Tensor make_mask_tensor(const std::vector<std::uint8_t>& excluded, const std::vector<int>& shape) {
  Tensor m = Tensor::zeros(shape);
  for (std::size_t i = 0; i < excluded.size(); ++i) m.data()[i] = excluded[i] ? 0.0 : 1.0;
  return m;
}

}  // namespace

LossConfig LossConfig::defaults() {
  LossConfig cfg;
  cfg.bin_edges = uniform_bin_edges(cfg.n_bins);
  cfg.bin_references = uniform_bin_references(cfg.n_bins);
  return cfg;
}

std::vector<double> uniform_bin_edges(int n_bins) {
  std::vector<double> edges(n_bins + 1);
  for (int i = 0; i <= n_bins; ++i) edges[i] = static_cast<double>(i) / n_bins;
  return edges;
}

std::vector<double> uniform_bin_references(int n_bins) {
  std::vector<double> refs(n_bins);
  for (int i = 0; i < n_bins; ++i) refs[i] = (i + 0.5) / n_bins;
  return refs;
}

int intensity_bin(double value, const LossConfig& config) {
  check(value >= 0.0 && value <= 1.0,
        "intensity_bin: target " + std::to_string(value) + " outside [0,1]");
  check(static_cast<int>(config.bin_edges.size()) == config.n_bins + 1,
        "intensity_bin: config edges do not match n_bins");
  check(config.bin_edges.front() == 0.0 && config.bin_edges.back() == 1.0,
        "intensity_bin: bin edges must cover [0,1]");
  for (int i = 0; i < config.n_bins; ++i)
    check(config.bin_edges[i] < config.bin_edges[i + 1],
          "intensity_bin: bin edges must be strictly increasing");
  // Bins are [e_i, e_{i+1}); the last bin includes its right edge.
  const auto& e = config.bin_edges;
  for (int i = 0; i < config.n_bins; ++i) {
    if (value < e[i + 1]) return i;
  }
  return config.n_bins - 1;
}

Tensor focal_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                  const std::vector<std::uint8_t>& ignore, const LossConfig& config,
                  bool* all_ignored) {
  check(probs.ndim() == 4, "focal_loss: probs must be [N,C,H,W]");
  check(config.gamma >= 0.0, "focal_loss: gamma must be >= 0");
  const int n = probs.dim(0), c = probs.dim(1);
  const long hw = static_cast<long>(probs.dim(2)) * probs.dim(3);
  const std::size_t pixels = static_cast<std::size_t>(n) * hw;
  check(labels.size() == pixels && ignore.size() == pixels,
        "focal_loss: label/ignore arrays must have one entry per pixel");

  long kept = 0;
  std::vector<int> label_index(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    check(labels[i] < c, "focal_loss: label id " + std::to_string(labels[i]) +
                             " outside the class range");
    label_index[i] = labels[i];
    if (!ignore[i]) ++kept;
  }
  if (all_ignored) *all_ignored = (kept == 0);
  if (kept == 0) return Tensor::scalar(0.0);

  Tensor pt = clamp_min(gather_channel(probs, label_index), kProbFloor);
  Tensor nll = scale(log(pt), -1.0);
  Tensor modulator = pow(add_scalar(scale(pt, -1.0), 1.0), config.gamma);
  Tensor per_pixel = mul(modulator, nll);
  Tensor masked = mul(per_pixel, make_mask_tensor(ignore, per_pixel.shape()));
  return scale(sum(masked), 1.0 / static_cast<double>(kept));
}

Tensor hybrid_intensity_loss(const Tensor& bin_logits, const Tensor& deviations,
                             const std::vector<double>& target_intensity,
                             const std::vector<std::uint8_t>& mask, const LossConfig& config) {
  check(bin_logits.ndim() == 4 && deviations.ndim() == 4,
        "hybrid_intensity_loss: inputs must be [N,n_bins,H,W]");
  check(bin_logits.shape() == deviations.shape(),
        "hybrid_intensity_loss: logits and deviations must have the same shape");
  check(bin_logits.dim(1) == config.n_bins, "hybrid_intensity_loss: bin count mismatch");
  check(static_cast<int>(config.bin_references.size()) == config.n_bins,
        "hybrid_intensity_loss: config references do not match n_bins");
  const int n = bin_logits.dim(0);
  const long hw = static_cast<long>(bin_logits.dim(2)) * bin_logits.dim(3);
  const std::size_t pixels = static_cast<std::size_t>(n) * hw;
  check(target_intensity.size() == pixels && mask.size() == pixels,
        "hybrid_intensity_loss: target/mask arrays must have one entry per pixel");

  long kept = 0;
  std::vector<int> true_bin(pixels, 0);
  std::vector<std::uint8_t> excluded(pixels, 1);
  for (std::size_t i = 0; i < pixels; ++i) {
    if (!mask[i]) continue;
    true_bin[i] = intensity_bin(target_intensity[i], config);
    excluded[i] = 0;
    ++kept;
  }
  if (kept == 0) return Tensor::scalar(0.0);
  const double inv_kept = 1.0 / static_cast<double>(kept);
  Tensor mask_t = make_mask_tensor(excluded, {n, 1, bin_logits.dim(2), bin_logits.dim(3)});

  // Classification: cross entropy against the true bin.
  Tensor bin_probs = softmax_channels(bin_logits);
  Tensor p_true = clamp_min(gather_channel(bin_probs, true_bin), kProbFloor);
  Tensor ce = scale(sum(mul(scale(log(p_true), -1.0), mask_t)), inv_kept);

  // Regression: (reference + deviation - target)^2 on the supervised bin.
  std::vector<int> reg_bin = true_bin;
  if (!config.deviation_on_true_bin) {
    for (int i = 0; i < n; ++i) {
      for (long p = 0; p < hw; ++p) {
        const long pix = static_cast<long>(i) * hw + p;
        int best = 0;
        double best_v = bin_logits.data()[(static_cast<long>(i) * config.n_bins) * hw + p];
        for (int b = 1; b < config.n_bins; ++b) {
          const double v = bin_logits.data()[(static_cast<long>(i) * config.n_bins + b) * hw + p];
          if (v > best_v) {
            best_v = v;
            best = b;
          }
        }
        reg_bin[pix] = best;
      }
    }
  }
  Tensor offset = Tensor::zeros({n, 1, bin_logits.dim(2), bin_logits.dim(3)});
  for (std::size_t i = 0; i < pixels; ++i) {
    if (excluded[i]) continue;
    offset.data()[i] = config.bin_references[reg_bin[i]] - target_intensity[i];
  }
  Tensor residual = add(gather_channel(deviations, reg_bin), offset);
  Tensor reg = scale(sum(mul(mul(residual, residual), mask_t)), inv_kept);
  return add(ce, reg);
}

// ---------------------------------------------------------------------------
// Geodesic correlation alignment
// ---------------------------------------------------------------------------

namespace {

using Mat = Eigen::MatrixXd;

struct LogmSide {
  Mat centered;  // [B,D]
  Mat q;         // eigenvectors of the regularized covariance
  Eigen::VectorXd lambda;
  Mat logm;
};

LogmSide covariance_logm(const Mat& feats, double epsilon_cov) {
  const int b = static_cast<int>(feats.rows());
  const int d = static_cast<int>(feats.cols());
  LogmSide side;
  side.centered = feats.rowwise() - feats.colwise().mean();
  Mat cov = side.centered.transpose() * side.centered / static_cast<double>(b - 1);
  cov += epsilon_cov * Mat::Identity(d, d);
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("geodesic_loss: eigendecomposition failed");
  side.q = es.eigenvectors();
  side.lambda = es.eigenvalues();
  for (int i = 0; i < d; ++i) {
    if (!std::isfinite(side.lambda(i)) || side.lambda(i) <= 0.0)
      throw std::runtime_error(
          "geodesic_loss: non-positive or non-finite covariance eigenvalue " +
          std::to_string(side.lambda(i)) + " (min " + std::to_string(side.lambda.minCoeff()) +
          ", max " + std::to_string(side.lambda.maxCoeff()) + ")");
  }
  side.logm = side.q * side.lambda.array().log().matrix().asDiagonal() * side.q.transpose();
  return side;
}

// Pulls an upstream gradient on logm(C) back to the features through the
// eigendecomposition (Daleckii-Krein) and the covariance.
Mat logm_backward_to_features(const LogmSide& side, const Mat& grad_logm, double scale_b) {
  const int d = static_cast<int>(side.lambda.size());
  Mat s = side.q.transpose() * grad_logm * side.q;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      const double li = side.lambda(i), lj = side.lambda(j);
      double k;
      if (std::abs(li - lj) > 1e-12 * std::max(std::abs(li), std::abs(lj))) {
        k = (std::log(li) - std::log(lj)) / (li - lj);
      } else {
        k = 2.0 / (li + lj);
      }
      s(i, j) *= k;
    }
  }
  Mat grad_cov = side.q * s * side.q.transpose();
  grad_cov = 0.5 * (grad_cov + grad_cov.transpose());
  // C = Xc^T Xc / (B-1): dX_c = 2 Xc grad_C / (B-1); centering removes column means.
  Mat grad_centered = 2.0 * scale_b * side.centered * grad_cov;
  return grad_centered.rowwise() - grad_centered.colwise().mean();
}

}  // namespace

Tensor geodesic_loss(const Tensor& feat_a, const Tensor& feat_b, double epsilon_cov) {
  check(feat_a.ndim() == 2 && feat_b.ndim() == 2, "geodesic_loss: features must be [B,D]");
  check(feat_a.dim(1) == feat_b.dim(1), "geodesic_loss: feature widths differ");
  check(feat_a.dim(0) >= 2 && feat_b.dim(0) >= 2, "geodesic_loss: need at least two rows per batch");
  check(epsilon_cov > 0.0, "geodesic_loss: covariance regularizer must be positive");
  const int ba = feat_a.dim(0), bb = feat_b.dim(0), d = feat_a.dim(1);

  auto na = feat_a.node(), nb = feat_b.node();
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Mat fa = Eigen::Map<const RowMat>(na->value.data(), ba, d);
  const Mat fb = Eigen::Map<const RowMat>(nb->value.data(), bb, d);

  LogmSide sa = covariance_logm(fa, epsilon_cov);
  LogmSide sb = covariance_logm(fb, epsilon_cov);
  const Mat diff = sa.logm - sb.logm;
  const double inv_scale = 1.0 / (4.0 * static_cast<double>(d) * static_cast<double>(d));
  Eigen::ArrayXd y(1);
  y(0) = diff.squaredNorm() * inv_scale;

  Tensor node = Tensor::from_array({1}, std::move(y));
  // Build the op node manually to attach the eigendecomposition backward.
  if (grad_enabled() && (na->requires_grad || nb->requires_grad)) {
    auto out = node.node();
    out->requires_grad = true;
    out->parents = {na, nb};
    out->backward_fn = [na, nb, sa = std::move(sa), sb = std::move(sb), diff, inv_scale, ba, bb,
                        d](TensorNode& self) {
      const double g = self.grad(0);
      const Mat grad_logm = (2.0 * inv_scale * g) * diff;
      if (na->requires_grad) {
        Mat gx = logm_backward_to_features(sa, grad_logm, 1.0 / static_cast<double>(ba - 1));
        for (int r = 0; r < ba; ++r)
          for (int cidx = 0; cidx < d; ++cidx)
            na->grad(static_cast<long>(r) * d + cidx) += gx(r, cidx);
      }
      if (nb->requires_grad) {
        Mat gx = logm_backward_to_features(sb, -grad_logm, 1.0 / static_cast<double>(bb - 1));
        for (int r = 0; r < bb; ++r)
          for (int cidx = 0; cidx < d; ++cidx)
            nb->grad(static_cast<long>(r) * d + cidx) += gx(r, cidx);
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Joint adaptation objective
// ---------------------------------------------------------------------------

namespace {

std::vector<int> sample_rows(int total, int want, Rng& rng) {
  if (total <= want) {
    std::vector<int> all(total);
    for (int i = 0; i < total; ++i) all[i] = i;
    return all;
  }
  // Partial Fisher-Yates over an index array.
  std::vector<int> idx(total);
  for (int i = 0; i < total; ++i) idx[i] = i;
  std::vector<int> out(want);
  for (int i = 0; i < want; ++i) {
    const int j = i + rng.uniform_int(total - i);
    std::swap(idx[i], idx[j]);
    out[i] = idx[i];
  }
  return out;
}

}  // namespace

AdaptationLoss adaptation_loss(Model& model, const Batch& sim, const Batch* real,
                               const LossConfig& config, Rng& row_rng, int align_rows,
                               int align_layer) {
  check(config.lambda >= 0.0, "adaptation_loss: lambda must be >= 0");
  AdaptationLoss result;
  Tensor align_sim;
  ForwardHooks hooks;
  hooks.align_out = config.lambda > 0.0 ? &align_sim : nullptr;
  hooks.align_layer = align_layer;
  Tensor logits = model_forward(model, sim.input, BnMode::Train, hooks);
  Tensor probs = softmax_channels(logits);
  result.focal = focal_loss(probs, sim.labels, sim.ignore, config);

  if (config.lambda > 0.0) {
    check(real != nullptr, "adaptation_loss: lambda > 0 requires a real batch");
    check(real->input.shape() == sim.input.shape(),
          "adaptation_loss: batches must have the same shape");
    Tensor align_real;
    ForwardHooks real_hooks;
    real_hooks.align_out = &align_real;
    real_hooks.align_layer = align_layer;
    model_forward(model, real->input, BnMode::Train, real_hooks);

    Tensor rows_sim = channels_to_rows(align_sim);
    Tensor rows_real = channels_to_rows(align_real);
    rows_sim = gather_rows(rows_sim, sample_rows(rows_sim.dim(0), align_rows, row_rng));
    rows_real = gather_rows(rows_real, sample_rows(rows_real.dim(0), align_rows, row_rng));
    result.geodesic = geodesic_loss(rows_sim, rows_real, config.epsilon_cov);
    result.total = add(result.focal, scale(result.geodesic, config.lambda));
  } else {
    result.total = result.focal;
  }
  return result;
}

}  // namespace rangeseg
