#pragma once

#include "rangeseg/network.hpp"
#include "rangeseg/rng.hpp"
#include "rangeseg/tensor.hpp"

#include <cstdint>
#include <vector>

namespace rangeseg {

/// Loss hyperparameters. gamma=0 reduces the focal loss to cross entropy
/// exactly; bin edges partition [0,1] with a reference value per bin.
struct LossConfig {
  double gamma = 2.0;
  double lambda = 10.0;
  int n_bins = 10;
  std::vector<double> bin_edges;       // n_bins+1 strictly increasing values covering [0,1]
  std::vector<double> bin_references;  // one per bin
  double epsilon_cov = 1e-5;
  bool deviation_on_true_bin = true;   // supervise the true bin's deviation (vs the predicted bin's)

  static LossConfig defaults();
};

/// Uniform partition of [0,1] into n bins with centered references.
std::vector<double> uniform_bin_edges(int n_bins);
std::vector<double> uniform_bin_references(int n_bins);

/// Bin index of an intensity value under the config's edges; the final bin
/// is closed on the right.
int intensity_bin(double value, const LossConfig& config);

/// Mean over non-ignored pixels of -(1-p_t)^gamma * log(p_t), with p_t the
/// probability of the true class floored at 1e-12. probs is [N,C,H,W];
/// labels/ignore are flat (n,h,w) arrays. With every pixel ignored the
/// loss is 0 and *all_ignored is set.
Tensor focal_loss(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                  const std::vector<std::uint8_t>& ignore, const LossConfig& config,
                  bool* all_ignored = nullptr);

/// Classification (cross entropy over bins) plus regression (squared error
/// of reference+deviation against the target) averaged over existing
/// pixels. Only the supervised bin's deviation channel receives gradient.
Tensor hybrid_intensity_loss(const Tensor& bin_logits, const Tensor& deviations,
                             const std::vector<double>& target_intensity,
                             const std::vector<std::uint8_t>& mask, const LossConfig& config);

/// Log-Euclidean distance between regularized feature covariances:
/// ||logm(C_a) - logm(C_b)||_F^2 / (4 D^2) with C = cov + eps*I.
/// Differentiable with respect to both feature matrices [B,D].
Tensor geodesic_loss(const Tensor& feat_a, const Tensor& feat_b, double epsilon_cov);

struct AdaptationLoss {
  Tensor total;
  Tensor focal;
  Tensor geodesic;  // undefined when lambda == 0
};

/// Joint objective: focal loss on the labeled synthetic batch plus
/// lambda * geodesic loss between alignment-layer feature rows of the two
/// batches. With lambda == 0 the real batch is never touched, so a run
/// degenerates to source-only training step for step.
AdaptationLoss adaptation_loss(Model& model, const Batch& sim, const Batch* real,
                               const LossConfig& config, Rng& row_rng, int align_rows,
                               int align_layer = -1);

}  // namespace rangeseg
