#pragma once

#include "rangeseg/rng.hpp"
#include "rangeseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace rstest {

struct GradCheckResult {
  double max_rel_err = 0.0;
  long checked = 0;
};

/// Central finite differences over every entry of every leaf. The loss
/// builder is re-invoked per probe so each evaluation sees the perturbed
/// leaf values through a fresh graph.
inline GradCheckResult check_gradients(std::vector<rangeseg::Tensor> leaves,
                                       const std::function<rangeseg::Tensor()>& make_loss,
                                       double h = 1e-5) {
  rangeseg::Tensor loss = make_loss();
  loss.backward();
  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  GradCheckResult res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    for (int i = 0; i < leaf.size(); ++i) {
      const double orig = leaf.data()[i];
      leaf.data()[i] = orig + h;
      const double fp = make_loss().item();
      leaf.data()[i] = orig - h;
      const double fm = make_loss().item();
      leaf.data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[li](i);
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

inline void fill_uniform(rangeseg::Tensor& t, rangeseg::Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
  for (int i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
}

/// Uniform fill rejecting values within `margin` of zero, for ops with a
/// kink at the origin (relu).
inline void fill_uniform_away_from_zero(rangeseg::Tensor& t, rangeseg::Rng& rng,
                                        double margin = 1e-3) {
  for (int i = 0; i < t.size(); ++i) {
    double v = 0.0;
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < margin);
    t.data()[i] = v;
  }
}

}  // namespace rstest
