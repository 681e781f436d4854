// Acceptance suite: one pass/fail line per criterion. The training-based
// criteria (6-8) dominate the runtime; everything is seeded and runs at
// thread count 1.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.hpp"
#include "rangeseg/adaptation.hpp"
#include "rangeseg/cli.hpp"
#include "rangeseg/config.hpp"
#include "rangeseg/losses.hpp"
#include "rangeseg/network.hpp"
#include "rangeseg/range_image.hpp"
#include "rangeseg/synthgen.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace rangeseg;
namespace fs = std::filesystem;

namespace {

void report(int criterion, const char* name, bool pass, const std::string& detail) {
  std::printf("[criterion %02d] %s  %s (%s)\n", criterion, pass ? "PASS" : "FAIL", name,
              detail.c_str());
  std::fflush(stdout);
}

double now_seconds() {
  using namespace std::chrono;
  return duration_cast<duration<double>>(steady_clock::now().time_since_epoch()).count();
}

// Values with pairwise gaps of ~6e-3, keeping max-pooling windows away
// from ties under the 1e-5 probe.
void fill_distinct(Tensor& t, Rng& rng) {
  std::vector<int> order(t.size());
  for (int i = 0; i < t.size(); ++i) order[i] = i;
  for (int i = t.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  for (int i = 0; i < t.size(); ++i) t.data()[i] = 0.01 * order[i] + rng.uniform(0.0, 0.004);
}

struct FdTracker {
  double worst = 0.0;
  long cases = 0;
  void add(const rstest::GradCheckResult& r) {
    worst = std::max(worst, r.max_rel_err);
    ++cases;
  }
};

// The synthetic pair used by the training criteria.
struct AcceptanceDomains {
  DomainConfig source;
  DomainConfig target;
  std::vector<RangeImage> sim_train, sim_test, real_train, real_test;
};

AcceptanceDomains make_domains(std::uint64_t seed) {
  AcceptanceDomains d;
  d.source.seed = seed;
  d.source.grid.height = 32;
  d.source.grid.width = 96;
  d.source.grid.elev_min = -22.0 * M_PI / 180.0;
  d.source.grid.elev_max = 2.0 * M_PI / 180.0;
  d.source.grid.azim_min = -45.0 * M_PI / 180.0;
  d.source.grid.azim_max = 45.0 * M_PI / 180.0;
  d.source.scene.cars = 4;
  d.source.scene.pedestrians = 6;
  d.source.scene.cyclists = 3;
  d.target = d.source;
  d.target.p_drop = 0.25;
  d.target.intensity = IntensityModel::Bimodal;
  d.target.jitter = 0.002;
  auto train = generate_domain_pair(d.source, d.target, 96, 0);
  auto test = generate_domain_pair(d.source, d.target, 32, 96);
  d.sim_train = std::move(train.first);
  d.real_train = std::move(train.second);
  d.sim_test = std::move(test.first);
  d.real_test = std::move(test.second);
  return d;
}

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("rangeseg_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

// ---------------------------------------------------------------------------
// Criterion 1: gradient integrity for every differentiable op and loss.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 1: gradient integrity") {
  const double t0 = now_seconds();
  const double tol = 1e-4;
  Rng rng(90001);
  FdTracker tracker;

  for (int c = 0; c < 100; ++c) {  // elementwise, reductions, reshape
    Tensor a = Tensor::zeros({2, 3, 2}, true);
    Tensor b = Tensor::zeros({2, 3, 2}, true);
    rstest::fill_uniform(a, rng, 0.2, 1.8);
    rstest::fill_uniform(b, rng, 0.3, 1.6);
    tracker.add(rstest::check_gradients({a, b}, [&]() {
      Tensor t = add(mul(a, b), scale(sub(a, b), 0.7));
      t = add_scalar(t, 1.5);
      Tensor u = mul(log(t), pow(sigmoid(t), 2.5));
      Tensor v = clamp_min(sub(a, b), 0.05);
      return add(add(sum(u), mean(mul(v, v))), sum(mul(reshape(u, {12}), reshape(u, {12}))));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // relu away from the kink
    Tensor a = Tensor::zeros({3, 4}, true);
    rstest::fill_uniform_away_from_zero(a, rng, 1e-3);
    tracker.add(rstest::check_gradients({a}, [&]() { return sum(mul(relu(a), relu(a))); }));
  }
  for (int c = 0; c < 100; ++c) {  // softmax + matmul
    Tensor a = Tensor::zeros({3, 4}, true);
    Tensor b = Tensor::zeros({4, 2}, true);
    rstest::fill_uniform(a, rng, -2.0, 2.0);
    rstest::fill_uniform(b, rng, -1.0, 1.0);
    tracker.add(rstest::check_gradients({a, b}, [&]() {
      Tensor sm = softmax_channels(matmul(a, b));
      return sum(mul(sm, sm));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // conv2d, symmetric and asymmetric strides
    Tensor x = Tensor::zeros({1, 2, 4, 5}, true);
    Tensor w = Tensor::zeros({3, 2, 3, 3}, true);
    Tensor b = Tensor::zeros({3}, true);
    rstest::fill_uniform(x, rng);
    rstest::fill_uniform(w, rng);
    rstest::fill_uniform(b, rng, -0.2, 0.2);
    const int sw = 1 + (c % 2);
    tracker.add(rstest::check_gradients({x, w, b}, [&]() {
      Tensor y = conv2d(x, w, b, 1, sw, 1, 1);
      return sum(mul(y, y));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // conv_transpose2d
    Tensor x = Tensor::zeros({1, 3, 3, 4}, true);
    Tensor w = Tensor::zeros({3, 2, 1, 4}, true);
    Tensor b = Tensor::zeros({2}, true);
    rstest::fill_uniform(x, rng);
    rstest::fill_uniform(w, rng);
    rstest::fill_uniform(b, rng, -0.2, 0.2);
    tracker.add(rstest::check_gradients({x, w, b}, [&]() {
      Tensor y = conv_transpose2d(x, w, b, 1, 2, 0, 1);
      return sum(mul(y, y));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // maxpool2d on tie-free windows
    Tensor x = Tensor::zeros({1, 2, 5, 5}, true);
    fill_distinct(x, rng);
    tracker.add(rstest::check_gradients({x}, [&]() {
      Tensor y = maxpool2d(x, 3, 1, 1);
      return sum(mul(y, y));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // batchnorm, train and eval modes
    Tensor x = Tensor::zeros({2, 3, 2, 3}, true);
    rstest::fill_uniform(x, rng, -1.5, 2.0);
    BatchNormState state(3);
    for (int ch = 0; ch < 3; ++ch) {
      state.running_mean(ch) = rng.uniform(-0.5, 0.5);
      state.running_var(ch) = rng.uniform(0.5, 1.5);
    }
    const BnMode mode = (c % 2 == 0) ? BnMode::Train : BnMode::Eval;
    tracker.add(rstest::check_gradients({x, state.gamma, state.beta}, [&]() {
      Tensor y = batchnorm(x, state, mode);
      return sum(mul(y, y));
    }));
  }
  for (int c = 0; c < 100; ++c) {  // channel plumbing
    Tensor a = Tensor::zeros({1, 2, 3, 3}, true);
    Tensor b = Tensor::zeros({1, 3, 3, 3}, true);
    rstest::fill_uniform(a, rng);
    rstest::fill_uniform(b, rng);
    std::vector<int> pick(9);
    for (auto& v : pick) v = rng.uniform_int(5);
    std::vector<int> rows(4);
    for (auto& v : rows) v = rng.uniform_int(9);
    tracker.add(rstest::check_gradients({a, b}, [&]() {
      Tensor cat = concat_channels(a, b);
      Tensor g = gather_channel(cat, pick);
      Tensor s = slice_channels(cat, 1, 3);
      Tensor r = gather_rows(channels_to_rows(cat), rows);
      return add(add(sum(mul(g, g)), sum(mul(s, s))), sum(mul(r, r)));
    }));
  }

  // Losses.
  for (int c = 0; c < 100; ++c) {  // focal
    Tensor logits = Tensor::zeros({1, 4, 2, 3}, true);
    rstest::fill_uniform(logits, rng, -2.0, 2.0);
    std::vector<std::uint8_t> labels(6), ignore(6, 0);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(4));
    ignore[rng.uniform_int(6)] = 1;
    LossConfig fc = LossConfig::defaults();
    fc.gamma = (c % 3 == 0) ? 0.0 : 2.0;
    tracker.add(rstest::check_gradients({logits}, [&]() {
      return focal_loss(softmax_channels(logits), labels, ignore, fc);
    }));
  }
  LossConfig hc = LossConfig::defaults();
  hc.n_bins = 4;
  hc.bin_edges = uniform_bin_edges(4);
  hc.bin_references = uniform_bin_references(4);
  for (int c = 0; c < 100; ++c) {  // hybrid intensity
    Tensor logits = Tensor::zeros({1, 4, 2, 2}, true);
    Tensor deviations = Tensor::zeros({1, 4, 2, 2}, true);
    rstest::fill_uniform(logits, rng, -1.0, 1.0);
    rstest::fill_uniform(deviations, rng, -0.2, 0.2);
    std::vector<double> targets(4);
    std::vector<std::uint8_t> mask(4, 1);
    for (auto& t : targets) t = rng.uniform(0.0, 1.0);
    mask[rng.uniform_int(4)] = 0;
    tracker.add(rstest::check_gradients({logits, deviations}, [&]() {
      return hybrid_intensity_loss(logits, deviations, targets, mask, hc);
    }));
  }
  for (int c = 0; c < 100; ++c) {  // geodesic
    Tensor a = Tensor::zeros({6, 3}, true);
    Tensor b = Tensor::zeros({6, 3}, true);
    rstest::fill_uniform(a, rng);
    rstest::fill_uniform(b, rng, -2.0, 1.0);
    tracker.add(rstest::check_gradients({a, b}, [&]() { return geodesic_loss(a, b, 1e-4); }));
  }
  {  // adaptation loss through a tiny model
    ModelSpec spec;
    spec.in_channels = 6;
    spec.out_channels = 4;
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.out_channels = 4;
    spec.layers.push_back(conv);
    LayerSpec cam;
    cam.kind = LayerKind::Cam;
    cam.pool_kernel = 3;
    cam.reduction = 4;
    spec.layers.push_back(cam);
    LayerSpec head;
    head.kind = LayerKind::Classifier;
    head.out_channels = 4;
    spec.layers.push_back(head);

    DomainConfig dom;
    dom.seed = 91;
    dom.grid.height = 6;
    dom.grid.width = 8;
    dom.scene.cars = 1;
    dom.scene.pedestrians = 1;
    dom.scene.cyclists = 1;
    DomainConfig tgt = dom;
    tgt.p_drop = 0.3;
    tgt.intensity = IntensityModel::Bimodal;
    auto [sim_imgs, real_imgs] = generate_domain_pair(dom, tgt, 4);

    for (int c = 0; c < 100; ++c) {
      Model model = build_model(spec, 1000 + c);
      auto params = model_parameters(model);
      // Nudge parameters off the zero-bias relu kinks.
      for (auto& [name, t] : params)
        for (int i = 0; i < t.size(); ++i) t.data()[i] += rng.uniform(0.01, 0.05);
      compute_norm_stats(sim_imgs, false, model.norm_mean, model.norm_std);
      Batch sim =
          make_batch(sim_imgs, {c % 4, (c + 1) % 4}, model.norm_mean, model.norm_std, false);
      Batch real =
          make_batch(real_imgs, {(c + 2) % 4, (c + 3) % 4}, model.norm_mean, model.norm_std, false);
      LossConfig alc = LossConfig::defaults();
      alc.lambda = (c % 4 == 0) ? 0.0 : 10.0;

      // One parameter tensor per case keeps the sweep inside the runtime
      // budget while every parameter is covered across the 100 cases.
      Tensor leaf = params[rng.uniform_int(static_cast<int>(params.size()))].second;
      const std::uint64_t row_seed = 5000 + c;
      tracker.add(rstest::check_gradients({leaf}, [&]() {
        Rng rows(row_seed);
        return adaptation_loss(model, sim, alc.lambda > 0 ? &real : nullptr, alc, rows, 24).total;
      }));
    }
  }

  const double elapsed = now_seconds() - t0;
  char detail[160];
  std::snprintf(detail, sizeof(detail), "max rel err %.3g over %ld cases, %.1fs (< 120s)",
                tracker.worst, tracker.cases, elapsed);
  const bool pass = tracker.worst < tol && elapsed < 120.0;
  report(1, "gradient integrity", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 2: focal loss exactness.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 2: focal loss exactness") {
  Rng rng(90002);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor logits = Tensor::zeros({2, 4, 3, 5});
    rstest::fill_uniform(logits, rng, -3.0, 3.0);
    Tensor probs = softmax_channels(logits);
    std::vector<std::uint8_t> labels(30), ignore(30, 0);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(4));
    for (auto& ig : ignore) ig = rng.bernoulli(0.25) ? 1 : 0;
    ignore[0] = 0;
    LossConfig cfg = LossConfig::defaults();
    cfg.gamma = 0.0;
    const double focal = focal_loss(probs, labels, ignore, cfg).item();
    double ce = 0.0;
    long kept = 0;
    const long hw = 15;
    for (int n = 0; n < 2; ++n)
      for (long p = 0; p < hw; ++p) {
        const long pix = n * hw + p;
        if (ignore[pix]) continue;
        ce += -std::log(std::max(probs.data()[(n * 4 + labels[pix]) * hw + p], 1e-12));
        ++kept;
      }
    ce /= static_cast<double>(kept);
    worst = std::max(worst, std::abs(focal - ce));
  }
  Tensor half = Tensor::from_data({1, 2, 1, 1}, {0.5, 0.5});
  const double single = focal_loss(half, {0}, {0}, LossConfig::defaults()).item();
  const double single_err = std::abs(single - 0.25 * std::log(2.0));

  char detail[128];
  std::snprintf(detail, sizeof(detail), "gamma=0 max |focal-CE| %.3g; |FL(0.5)-ln(2)/4| %.3g",
                worst, single_err);
  const bool pass = worst < 1e-12 && single_err < 1e-12;
  report(2, "focal loss exactness", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 3: dropout-noise robustness ordering.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 3: noise robustness ordering") {
  const double t0 = now_seconds();
  Rng rng(90003);
  Tensor kernel = Tensor::zeros({16, 16, 3, 3});
  const double stddev = std::sqrt(2.0 / (16 * 9));
  for (int i = 0; i < kernel.size(); ++i) kernel.data()[i] = rng.normal() * stddev;
  Tensor bias = Tensor::zeros({16});
  std::vector<double> p_list = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  auto rows = noise_robustness_probe(kernel, bias, p_list, 100, 90003, 1, 16, 32, 64);

  bool cam_below = true;
  bool non_decreasing = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].cam_err >= rows[i].plain_err) cam_below = false;
    if (i > 0) {
      const double slack = 2.0 * std::sqrt(rows[i].plain_se * rows[i].plain_se +
                                           rows[i - 1].plain_se * rows[i - 1].plain_se);
      if (rows[i].plain_err < rows[i - 1].plain_err - slack) non_decreasing = false;
    }
  }
  const double elapsed = now_seconds() - t0;
  char detail[192];
  std::snprintf(detail, sizeof(detail),
                "plain %.2f..%.2f cam %.2f..%.2f, monotone=%d cam<plain=%d, %.1fs (< 60s)",
                rows.front().plain_err, rows.back().plain_err, rows.front().cam_err,
                rows.back().cam_err, non_decreasing ? 1 : 0, cam_below ? 1 : 0, elapsed);
  const bool pass = cam_below && non_decreasing && elapsed < 60.0;
  report(3, "noise robustness ordering", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 4: geodesic loss oracle.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 4: geodesic loss oracle") {
  const double eps = 1e-5;
  const double a = 1.0 / std::sqrt(2.0);
  const double b = std::exp(1.0) / std::sqrt(2.0);
  Tensor fa = Tensor::from_data({2, 1}, {a, -a});
  Tensor fb = Tensor::from_data({2, 1}, {b, -b});
  const double gl = geodesic_loss(fa, fb, eps).item();
  const double closed = std::pow(std::log(1.0 + eps) - std::log(std::exp(2.0) + eps), 2) / 4.0;
  const double scalar_err = std::abs(gl - closed);

  Rng rng(90004);
  const int bsz = 16, d = 4;
  Tensor xa = Tensor::zeros({bsz, d});
  Tensor xb = Tensor::zeros({bsz, d});
  rstest::fill_uniform(xa, rng);
  rstest::fill_uniform(xb, rng, -1.5, 0.5);
  const double base = geodesic_loss(xa, xb, eps).item();
  double rot_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    auto rotate = [&](const Tensor& t) {
      Tensor out = Tensor::zeros(t.shape());
      for (int r = 0; r < bsz; ++r)
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int k = 0; k < d; ++k) acc += t.data()[r * d + k] * q(k, j);
          out.data()[r * d + j] = acc;
        }
      return out;
    };
    rot_err = std::max(rot_err, std::abs(geodesic_loss(rotate(xa), rotate(xb), eps).item() - base));
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail), "|GL - closed form| %.3g; rotation drift %.3g", scalar_err,
                rot_err);
  const bool pass = scalar_err < 1e-8 && rot_err < 1e-8;
  report(4, "geodesic loss oracle", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 5: progressive domain calibration on a toy model.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 5: progressive domain calibration") {
  const double t0 = now_seconds();
  ModelSpec spec;
  spec.in_channels = 6;
  spec.out_channels = 4;
  LayerSpec conv;
  conv.kind = LayerKind::Conv;
  conv.out_channels = 8;
  spec.layers.push_back(conv);
  spec.layers.push_back(conv);
  LayerSpec head;
  head.kind = LayerKind::Classifier;
  head.out_channels = 4;
  spec.layers.push_back(head);
  Model model = build_model(spec, 90005);

  // A shifted input distribution the running statistics have never seen;
  // inputs stay unstandardized on purpose.
  DomainConfig dom;
  dom.seed = 90005;
  dom.grid.height = 16;
  dom.grid.width = 32;
  dom.p_drop = 0.3;
  dom.intensity = IntensityModel::Bimodal;
  std::vector<RangeImage> calib;
  for (int i = 0; i < 12; ++i) calib.push_back(project(generate_scene(dom, i), dom.grid));

  std::vector<double> weights_before;
  for (auto& [name, t] : model_parameters(model))
    weights_before.insert(weights_before.end(), t.data(), t.data() + t.size());

  CalibrationReport report1 = progressive_domain_calibration(model, calib, 12, 4);
  bool stats_ok = true;
  for (const auto& layer : report1.layers) {
    if (std::abs(layer.post_mean) >= 0.05 || std::abs(layer.post_std - 1.0) >= 0.05)
      stats_ok = false;
  }

  std::vector<Eigen::ArrayXd> means, vars;
  for (auto& [name, bn] : model_bn_units(model)) {
    means.push_back(bn->running_mean);
    vars.push_back(bn->running_var);
  }
  progressive_domain_calibration(model, calib, 12, 4);
  double drift = 0.0;
  auto bns = model_bn_units(model);
  for (std::size_t i = 0; i < bns.size(); ++i) {
    drift = std::max(drift, (bns[i].second->running_mean - means[i]).abs().maxCoeff());
    drift = std::max(drift, (bns[i].second->running_var - vars[i]).abs().maxCoeff());
  }

  bool weights_ok = true;
  std::size_t k = 0;
  for (auto& [name, t] : model_parameters(model))
    for (int i = 0; i < t.size(); ++i)
      if (t.data()[i] != weights_before[k++]) weights_ok = false;

  const double elapsed = now_seconds() - t0;
  char detail[192];
  std::snprintf(detail, sizeof(detail),
                "post stats ok=%d, idempotence drift %.2g (< 1e-9), weights untouched=%d, "
                "%.1fs (< 30s)",
                stats_ok ? 1 : 0, drift, weights_ok ? 1 : 0, elapsed);
  const bool pass = stats_ok && drift < 1e-9 && weights_ok && elapsed < 30.0;
  report(5, "progressive domain calibration", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 6: hybrid-loss renderer beats the pure-l2 renderer.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 6: hybrid intensity loss advantage") {
  DomainConfig dom;
  dom.seed = 1;
  dom.grid.height = 32;
  dom.grid.width = 96;
  dom.grid.elev_min = -22.0 * M_PI / 180.0;
  dom.grid.elev_max = 2.0 * M_PI / 180.0;
  dom.grid.azim_min = -45.0 * M_PI / 180.0;
  dom.grid.azim_max = 45.0 * M_PI / 180.0;
  dom.scene.cars = 4;
  dom.scene.pedestrians = 6;
  dom.scene.cyclists = 3;
  dom.intensity = IntensityModel::Bimodal;
  std::vector<RangeImage> train, holdout;
  for (int i = 0; i < 96; ++i) train.push_back(project(generate_scene(dom, i), dom.grid));
  for (int i = 96; i < 128; ++i) holdout.push_back(project(generate_scene(dom, i), dom.grid));

  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {101, 202, 303}) {
    TrainConfig tc;
    tc.steps = 600;
    tc.lr = 0.03;
    tc.lr_decay = 0.7;
    tc.batch_size = 6;
    tc.seed = seed;
    Model hybrid = build_model(renderer_spec(10), seed);
    Model l2 = build_model(renderer_l2_spec(), seed);
    const double mse_h =
        pretrain_renderer(train, holdout, hybrid, tc, RendererLossKind::Hybrid).holdout_mse;
    const double mse_l =
        pretrain_renderer(train, holdout, l2, tc, RendererLossKind::L2).holdout_mse;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "seed %llu: %.4f/%.4f=%.2f ",
                  static_cast<unsigned long long>(seed), mse_h, mse_l, mse_h / mse_l);
    detail += buf;
    if (!(mse_h <= 0.75 * mse_l)) pass = false;
  }
  report(6, "hybrid intensity loss advantage (ratio <= 0.75, 3 seeds)", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end adaptation ordering.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 7: end-to-end adaptation ordering") {
  const double t0 = now_seconds();
  double sum_a = 0.0, sum_b = 0.0, sum_c = 0.0, sum_d = 0.0;
  std::string detail;
  for (std::uint64_t seed : {21, 42, 63}) {
    AcceptanceDomains d = make_domains(seed);

    TrainConfig seg;
    seg.steps = 240;
    seg.lr = 0.05;
    seg.batch_size = 4;
    seg.seed = seed;

    // (a) source-only, no CAM.
    Model ma = build_model(segmentation_spec(false), seed);
    TrainConfig seg_src = seg;
    seg_src.loss.lambda = 0.0;
    train_source_only(d.sim_train, ma, seg_src);
    const double iou_a = evaluate_model(ma, d.real_test).per_class[kCar].iou;

    // Learned intensity rendering from unlabeled target data.
    TrainConfig rc;
    rc.steps = 400;
    rc.lr = 0.03;
    rc.batch_size = 6;
    rc.seed = seed;
    Model renderer = build_model(renderer_spec(10), seed);
    pretrain_renderer(d.real_train, d.real_test, renderer, rc, RendererLossKind::Hybrid);
    auto sim_rendered = render_intensity(d.sim_train, renderer);

    // (b) +LIR.
    Model mb = build_model(segmentation_spec(false), seed);
    train_source_only(sim_rendered, mb, seg_src);
    const double iou_b = evaluate_model(mb, d.real_test).per_class[kCar].iou;

    // (c) +LIR+GCA.
    Model mc = build_model(segmentation_spec(false), seed);
    train_with_gca(sim_rendered, d.real_train, mc, seg);
    const double iou_c = evaluate_model(mc, d.real_test).per_class[kCar].iou;

    // (d) +LIR+GCA+PDC with CAM.
    Model md = build_model(segmentation_spec(true), seed);
    train_with_gca(sim_rendered, d.real_train, md, seg);
    progressive_domain_calibration(md, d.real_train, 48, 8);
    const double iou_d = evaluate_model(md, d.real_test).per_class[kCar].iou;

    sum_a += iou_a;
    sum_b += iou_b;
    sum_c += iou_c;
    sum_d += iou_d;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "[seed %llu: a=%.3f b=%.3f c=%.3f d=%.3f] ",
                  static_cast<unsigned long long>(seed), iou_a, iou_b, iou_c, iou_d);
    detail += buf;
  }
  const double a = sum_a / 3.0, b = sum_b / 3.0, c = sum_c / 3.0, dd = sum_d / 3.0;
  const double elapsed = now_seconds() - t0;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "means a=%.3f b=%.3f c=%.3f d=%.3f, %.0fs (< 1800s)", a, b, c,
                dd, elapsed);
  detail += buf;
  const bool pass = dd >= a + 0.05 && dd >= b - 0.01 && dd >= c - 0.01 && elapsed < 1800.0;
  report(7, "end-to-end adaptation ordering (car IoU)", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 8: CAM ablation trained on real-like data.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 8: CAM ablation on the noisy domain") {
  double sum_cam = 0.0, sum_plain = 0.0;
  std::string detail;
  for (std::uint64_t seed : {5, 6, 7}) {
    AcceptanceDomains d = make_domains(seed + 400);
    TrainConfig tc;
    tc.steps = 240;
    tc.lr = 0.05;
    tc.batch_size = 4;
    tc.seed = seed;
    tc.loss.lambda = 0.0;
    Model with_cam = build_model(segmentation_spec(true), seed);
    train_source_only(d.real_train, with_cam, tc);
    const double iou_cam = evaluate_model(with_cam, d.real_test).mean_iou;
    Model without_cam = build_model(segmentation_spec(false), seed);
    train_source_only(d.real_train, without_cam, tc);
    const double iou_plain = evaluate_model(without_cam, d.real_test).mean_iou;
    sum_cam += iou_cam;
    sum_plain += iou_plain;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "[seed %llu: cam=%.3f plain=%.3f] ",
                  static_cast<unsigned long long>(seed), iou_cam, iou_plain);
    detail += buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "means cam=%.3f plain=%.3f", sum_cam / 3.0, sum_plain / 3.0);
  detail += buf;
  const bool pass = sum_cam >= sum_plain;
  report(8, "CAM ablation (mean IoU, 3 seeds)", pass, detail);
  CHECK(pass);
}

// ---------------------------------------------------------------------------
// Criterion 9: bit-identical reruns of the CLI.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 9: determinism of subcommand reruns") {
  fs::path root = scratch_dir("determinism");
  auto with_data = [&](std::vector<std::string> args) {
    const std::vector<std::string> common = {
        "--set", "data.dir=" + (root / "data").string(),
        "--set", "grid.height=16",
        "--set", "grid.width=48",
        "--set", "data.count_train=8",
        "--set", "data.count_test=4",
        "--set", "scene.cars=3",
        "--set", "scene.pedestrians=2",
        "--set", "scene.cyclists=1",
        "--set", "train.steps=6",
        "--set", "train.batch_size=2",
        "--set", "renderer.steps=6",
        "--set", "pdc.images=4",
        "--set", "seed=9"};
    args.insert(args.end(), common.begin(), common.end());
    return args;
  };
  bool pass = true;
  std::string detail;
  REQUIRE(run_cli(with_data({"gen-data", "--set", "run.dir=" + (root / "gen").string()})) == 0);

  auto rerun_identical = [&](const char* name, std::vector<std::string> args,
                             std::vector<std::string> files) {
    const fs::path dir = root / name;
    REQUIRE(run_cli(with_data(args)) == 0);
    std::vector<std::string> first;
    for (const auto& f : files) first.push_back(slurp(dir / f));
    REQUIRE(run_cli(with_data(args)) == 0);
    for (std::size_t i = 0; i < files.size(); ++i) {
      if (slurp(dir / files[i]) != first[i]) {
        pass = false;
        detail += std::string(name) + "/" + files[i] + " differs; ";
      }
    }
  };

  rerun_identical("train", {"train", "--set", "run.dir=" + (root / "train").string()},
                  {"metrics.txt", "model.ckpt", "config.resolved"});
  rerun_identical("renderer",
                  {"pretrain-renderer", "--set", "run.dir=" + (root / "renderer").string()},
                  {"metrics.txt", "summary.csv", "renderer.ckpt"});
  rerun_identical("adapt",
                  {"adapt", "--set", "run.dir=" + (root / "adapt").string(), "--set",
                   "adapt.source=" + (root / "data" / "source_train.rsds").string()},
                  {"metrics.txt", "model.ckpt", "pdc_report.csv"});
  rerun_identical("noise",
                  {"noise-experiment", "--set", "run.dir=" + (root / "noise").string(), "--set",
                   "noise.trials=30", "--set", "noise.shape=1x4x8x8", "--set",
                   "noise.p_list=0.2,0.5"},
                  {"noise.csv"});
  rerun_identical("eval",
                  {"eval", "--set", "run.dir=" + (root / "eval").string(), "--set",
                   "model.checkpoint=" + (root / "train" / "model.ckpt").string()},
                  {"iou.csv"});

  if (detail.empty()) detail = "train/pretrain-renderer/adapt/noise-experiment/eval rerun clean";
  report(9, "determinism of subcommand reruns", pass, detail);
  CHECK(pass);
  fs::remove_all(root);
}

// ---------------------------------------------------------------------------
// Criterion 10: IoU oracle.
// ---------------------------------------------------------------------------
TEST_CASE("criterion 10: IoU matches brute-force set counting") {
  Rng rng(90010);
  long checked = 0;
  bool pass = true;
  for (int grid = 0; grid < 1000; ++grid) {
    const int h = 2 + rng.uniform_int(6);
    const int w = 2 + rng.uniform_int(10);
    RangeImage gt(h, w);
    ImageXu8 pred(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (rng.bernoulli(0.8)) {
          gt.mask(r, c) = 1;
          gt.ignore(r, c) = rng.bernoulli(0.15) ? 1 : 0;
          gt.x(r, c) = 1.0;
          gt.depth(r, c) = 1.0;
          gt.labels(r, c) = static_cast<std::uint8_t>(rng.uniform_int(kNumClasses));
        }
        pred(r, c) = static_cast<std::uint8_t>(rng.uniform_int(kNumClasses));
      }
    const int cls = rng.uniform_int(kNumClasses);
    IouResult res = compute_iou(pred, gt, cls);
    long inter = 0, uni = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (gt.ignore(r, c)) continue;
        const bool p = pred(r, c) == cls;
        const bool g = gt.labels(r, c) == cls;
        if (p && g) ++inter;
        if (p || g) ++uni;
      }
    const double expect = (uni == 0) ? 1.0 : static_cast<double>(inter) / uni;
    if (res.intersection != inter || res.union_count != uni || res.iou != expect) pass = false;
    ++checked;
  }
  report(10, "IoU oracle (1000 random grids)", pass, std::to_string(checked) + " grids checked");
  CHECK(pass);
}
