#include "rangeseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

namespace rangeseg {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor kaiming_conv(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor w = Tensor::zeros(std::move(shape), true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.normal() * stddev;
  return w;
}

ConvState make_conv(int in_c, int out_c, int kh, int kw, bool with_bn, Rng& rng) {
  ConvState s;
  s.weight = kaiming_conv({out_c, in_c, kh, kw}, in_c * kh * kw, rng);
  s.bias = Tensor::zeros({out_c}, true);
  if (with_bn) s.bn.emplace(out_c);
  return s;
}

CamState make_cam(int channels, int pool_kernel, int reduction, Rng& rng) {
  check(channels % reduction == 0,
        "cam: channel count " + std::to_string(channels) + " not divisible by reduction ratio " +
            std::to_string(reduction));
  check(pool_kernel % 2 == 1, "cam: pool kernel must be odd");
  CamState s;
  s.pool_kernel = pool_kernel;
  s.reduction = reduction;
  const int mid = channels / reduction;
  s.reduce_weight = kaiming_conv({mid, channels, 1, 1}, channels, rng);
  s.reduce_bias = Tensor::zeros({mid}, true);
  s.expand_weight = kaiming_conv({channels, mid, 1, 1}, mid, rng);
  s.expand_bias = Tensor::zeros({channels}, true);
  return s;
}

Tensor apply_conv_bn_relu(const Tensor& x, ConvState& conv, int sh, int sw, int ph, int pw,
                          BnMode mode, BnProbe* probe) {
  Tensor y = conv2d(x, conv.weight, conv.bias, sh, sw, ph, pw);
  if (conv.bn) {
    if (probe && !probe->done) {
      if (probe->counter == probe->target) {
        probe->acc->add(y);
        probe->done = true;
      }
      ++probe->counter;
    }
    y = batchnorm(y, *conv.bn, mode);
  }
  return relu(y);
}

}  // namespace

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

ModelSpec segmentation_spec(bool with_cam, int in_channels, int num_classes) {
  ModelSpec spec;
  spec.in_channels = in_channels;
  spec.out_channels = num_classes;
  auto conv = [](int out, int sh, int sw) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.out_channels = out;
    l.stride_h = sh;
    l.stride_w = sw;
    return l;
  };
  auto fire = [](int out, int squeeze) {
    LayerSpec l;
    l.kind = LayerKind::Fire;
    l.out_channels = out;
    l.squeeze = squeeze;
    return l;
  };
  auto cam = [] {
    LayerSpec l;
    l.kind = LayerKind::Cam;
    l.pool_kernel = 7;
    l.reduction = 4;
    return l;
  };

  spec.layers.push_back(conv(16, 1, 2));  // stem, halves width
  if (with_cam) spec.layers.push_back(cam());
  spec.layers.push_back(fire(16, 4));
  if (with_cam) spec.layers.push_back(cam());
  spec.layers.push_back(fire(32, 8));
  if (with_cam) spec.layers.push_back(cam());
  {
    LayerSpec pool;
    pool.kind = LayerKind::Pool;
    pool.kernel_h = 3;
    pool.kernel_w = 3;
    pool.stride_h = 1;
    pool.stride_w = 2;
    spec.layers.push_back(pool);  // quarter width
  }
  spec.layers.push_back(fire(32, 8));
  {
    LayerSpec fd;
    fd.kind = LayerKind::FireDeconv;
    fd.out_channels = 16;
    fd.squeeze = 8;
    spec.layers.push_back(fd);
    LayerSpec fd2;
    fd2.kind = LayerKind::FireDeconv;
    fd2.out_channels = 16;
    fd2.squeeze = 4;
    spec.layers.push_back(fd2);  // back to full width
  }
  {
    LayerSpec head;
    head.kind = LayerKind::Classifier;
    head.out_channels = num_classes;
    spec.layers.push_back(head);
  }
  return spec;
}

ModelSpec renderer_spec(int n_bins, int in_channels) {
  check(n_bins >= 2, "renderer_spec: need at least two intensity bins");
  ModelSpec spec;
  spec.in_channels = in_channels;
  spec.out_channels = 2 * n_bins;  // n bin logits + n deviations
  LayerSpec stem;
  stem.kind = LayerKind::Conv;
  stem.out_channels = 16;
  stem.kernel_h = 5;  // material cues need vertical context (object tops)
  stem.kernel_w = 5;
  stem.pad_h = 2;
  stem.pad_w = 2;
  spec.layers.push_back(stem);
  LayerSpec f1;
  f1.kind = LayerKind::Fire;
  f1.out_channels = 16;
  f1.squeeze = 4;
  spec.layers.push_back(f1);
  spec.layers.push_back(f1);
  LayerSpec head;
  head.kind = LayerKind::Classifier;
  head.out_channels = spec.out_channels;
  spec.layers.push_back(head);
  return spec;
}

ModelSpec renderer_l2_spec(int in_channels) {
  ModelSpec spec = renderer_spec(2, in_channels);
  spec.out_channels = 1;
  spec.layers.back().out_channels = 1;
  return spec;
}

std::vector<double> encode_spec(const ModelSpec& spec) {
  std::vector<double> out;
  out.push_back(1.0);  // encoding version
  out.push_back(spec.in_channels);
  out.push_back(spec.out_channels);
  out.push_back(static_cast<double>(spec.layers.size()));
  for (const LayerSpec& l : spec.layers) {
    out.push_back(static_cast<double>(static_cast<int>(l.kind)));
    out.push_back(l.out_channels);
    out.push_back(l.squeeze);
    out.push_back(l.kernel_h);
    out.push_back(l.kernel_w);
    out.push_back(l.stride_h);
    out.push_back(l.stride_w);
    out.push_back(l.pad_h);
    out.push_back(l.pad_w);
    out.push_back(l.pool_kernel);
    out.push_back(l.reduction);
  }
  return out;
}

ModelSpec decode_spec(const std::vector<double>& data) {
  check(data.size() >= 4 && data[0] == 1.0, "decode_spec: unsupported spec encoding");
  ModelSpec spec;
  spec.in_channels = static_cast<int>(data[1]);
  spec.out_channels = static_cast<int>(data[2]);
  const int n = static_cast<int>(data[3]);
  check(data.size() == 4 + static_cast<std::size_t>(n) * 11, "decode_spec: bad payload length");
  for (int i = 0; i < n; ++i) {
    const double* p = data.data() + 4 + i * 11;
    LayerSpec l;
    l.kind = static_cast<LayerKind>(static_cast<int>(p[0]));
    l.out_channels = static_cast<int>(p[1]);
    l.squeeze = static_cast<int>(p[2]);
    l.kernel_h = static_cast<int>(p[3]);
    l.kernel_w = static_cast<int>(p[4]);
    l.stride_h = static_cast<int>(p[5]);
    l.stride_w = static_cast<int>(p[6]);
    l.pad_h = static_cast<int>(p[7]);
    l.pad_w = static_cast<int>(p[8]);
    l.pool_kernel = static_cast<int>(p[9]);
    l.reduction = static_cast<int>(p[10]);
    spec.layers.push_back(l);
  }
  return spec;
}

std::uint64_t spec_hash(const ModelSpec& spec) {
  const std::vector<double> enc = encode_spec(spec);
  return fnv1a(enc.data(), enc.size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  check(spec.in_channels >= 1 && spec.out_channels >= 1, "build_model: bad channel counts");
  check(!spec.layers.empty(), "build_model: empty layer list");
  Rng rng = Rng::derive(seed, 0x696e6974ULL);  // "init"
  Model model;
  model.spec = spec;
  model.norm_mean = Eigen::ArrayXd::Zero(spec.in_channels);
  model.norm_std = Eigen::ArrayXd::Ones(spec.in_channels);
  int cur = spec.in_channels;
  for (const LayerSpec& l : spec.layers) {
    LayerState state;
    state.spec = l;
    switch (l.kind) {
      case LayerKind::Conv: {
        check(l.out_channels >= 1, "conv layer needs out_channels");
        state.conv = make_conv(cur, l.out_channels, l.kernel_h, l.kernel_w, true, rng);
        cur = l.out_channels;
        break;
      }
      case LayerKind::Classifier: {
        check(l.out_channels >= 1, "classifier layer needs out_channels");
        state.conv = make_conv(cur, l.out_channels, l.kernel_h, l.kernel_w, false, rng);
        cur = l.out_channels;
        break;
      }
      case LayerKind::Fire: {
        check(l.out_channels % 2 == 0, "fire layer output width must be even");
        check(l.squeeze >= 1, "fire layer needs a squeeze width");
        FireState f;
        f.squeeze = make_conv(cur, l.squeeze, 1, 1, true, rng);
        f.expand1 = make_conv(l.squeeze, l.out_channels / 2, 1, 1, true, rng);
        f.expand3 = make_conv(l.squeeze, l.out_channels / 2, 3, 3, true, rng);
        state.fire = std::move(f);
        cur = l.out_channels;
        break;
      }
      case LayerKind::FireDeconv: {
        check(l.out_channels % 2 == 0, "fire-deconv layer output width must be even");
        FireDeconvState f;
        f.squeeze = make_conv(cur, l.squeeze, 1, 1, true, rng);
        f.up_weight = kaiming_conv({l.squeeze, l.squeeze, 1, 4}, l.squeeze * 4, rng);
        f.up_bias = Tensor::zeros({l.squeeze}, true);
        f.up_bn.emplace(l.squeeze);
        f.expand1 = make_conv(l.squeeze, l.out_channels / 2, 1, 1, true, rng);
        f.expand3 = make_conv(l.squeeze, l.out_channels / 2, 3, 3, true, rng);
        state.fire_deconv = std::move(f);
        cur = l.out_channels;
        break;
      }
      case LayerKind::Pool:
        break;  // stateless
      case LayerKind::Cam: {
        state.cam = make_cam(cur, l.pool_kernel, l.reduction, rng);
        break;
      }
    }
    model.layers.push_back(std::move(state));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Welford accumulation
// ---------------------------------------------------------------------------

void ChannelWelford::init(int channels) {
  mean = Eigen::ArrayXd::Zero(channels);
  m2 = Eigen::ArrayXd::Zero(channels);
  count = 0;
}

void ChannelWelford::add(const Tensor& x) {
  check(x.ndim() == 4, "ChannelWelford: expected [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1);
  const long hw = static_cast<long>(x.dim(2)) * x.dim(3);
  check(c == mean.size(), "ChannelWelford: channel mismatch");
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<long>(i) * c + ch) * hw;
      for (long k = 0; k < hw; ++k) {
        // per-channel Welford update; count tracks per-channel samples
        const long cnt = count + i * hw + k + 1;
        const double delta = p[k] - mean(ch);
        mean(ch) += delta / static_cast<double>(cnt);
        m2(ch) += delta * (p[k] - mean(ch));
      }
    }
  }
  count += static_cast<long>(n) * hw;
}

Eigen::ArrayXd ChannelWelford::variance() const {
  check(count > 0, "ChannelWelford: no samples");
  return m2 / static_cast<double>(count);
}

Eigen::ArrayXd ChannelWelford::stddev() const { return variance().sqrt(); }

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor cam_forward(const Tensor& x, CamState& cam) {
  check(x.ndim() == 4, "cam_forward: input must be [N,C,H,W]");
  check(x.dim(1) == cam.reduce_weight.dim(1),
        "cam_forward: input channels do not match the gate parameters");
  const int pad = (cam.pool_kernel - 1) / 2;
  Tensor pooled = maxpool2d(x, cam.pool_kernel, 1, pad);
  Tensor mid = relu(conv2d(pooled, cam.reduce_weight, cam.reduce_bias, 1, 0));
  Tensor gate = sigmoid(conv2d(mid, cam.expand_weight, cam.expand_bias, 1, 0));
  return mul(x, gate);
}

Tensor model_forward(Model& model, const Tensor& x, BnMode mode, ForwardHooks hooks) {
  check(x.ndim() == 4, "model_forward: input must be [N,C,H,W]");
  check(x.dim(1) == model.spec.in_channels,
        "model_forward: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
            std::to_string(model.spec.in_channels));
  if (hooks.probe) {
    hooks.probe->counter = 0;
    hooks.probe->done = false;
  }
  BnProbe* probe = hooks.probe;
  Tensor cur = x;
  const int classifier_index = static_cast<int>(model.layers.size()) - 1;
  for (int li = 0; li < static_cast<int>(model.layers.size()); ++li) {
    LayerState& layer = model.layers[li];
    const LayerSpec& ls = layer.spec;
    if (hooks.align_out && hooks.align_layer == -1 && li == classifier_index) *hooks.align_out = cur;
    switch (ls.kind) {
      case LayerKind::Conv:
        cur = apply_conv_bn_relu(cur, *layer.conv, ls.stride_h, ls.stride_w, ls.pad_h, ls.pad_w,
                                 mode, probe);
        break;
      case LayerKind::Classifier:
        cur = conv2d(cur, layer.conv->weight, layer.conv->bias, ls.stride_h, ls.stride_w, ls.pad_h,
                     ls.pad_w);
        break;
      case LayerKind::Fire: {
        FireState& f = *layer.fire;
        Tensor s = apply_conv_bn_relu(cur, f.squeeze, 1, 1, 0, 0, mode, probe);
        Tensor e1 = apply_conv_bn_relu(s, f.expand1, 1, 1, 0, 0, mode, probe);
        Tensor e3 = apply_conv_bn_relu(s, f.expand3, 1, 1, 1, 1, mode, probe);
        cur = concat_channels(e1, e3);
        break;
      }
      case LayerKind::FireDeconv: {
        FireDeconvState& f = *layer.fire_deconv;
        Tensor s = apply_conv_bn_relu(cur, f.squeeze, 1, 1, 0, 0, mode, probe);
        Tensor up = conv_transpose2d(s, f.up_weight, f.up_bias, 1, 2, 0, 1);
        if (f.up_bn) {
          if (probe && !probe->done) {
            if (probe->counter == probe->target) {
              probe->acc->add(up);
              probe->done = true;
            }
            ++probe->counter;
          }
          up = batchnorm(up, *f.up_bn, mode);
        }
        up = relu(up);
        Tensor e1 = apply_conv_bn_relu(up, f.expand1, 1, 1, 0, 0, mode, probe);
        Tensor e3 = apply_conv_bn_relu(up, f.expand3, 1, 1, 1, 1, mode, probe);
        cur = concat_channels(e1, e3);
        break;
      }
      case LayerKind::Pool:
        cur = maxpool2d(cur, ls.kernel_h, ls.kernel_w, ls.stride_h, ls.stride_w, ls.pad_h,
                        ls.pad_w);
        break;
      case LayerKind::Cam:
        cur = cam_forward(cur, *layer.cam);
        break;
    }
    if (hooks.align_out && hooks.align_layer == li) *hooks.align_out = cur;
    if (probe && probe->done && li < classifier_index) {
      // Statistics collected; downstream layers cannot change them.
      break;
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Parameter enumeration and checkpoints
// ---------------------------------------------------------------------------

namespace {

void collect_conv(const std::string& prefix, ConvState& c,
                  std::vector<std::pair<std::string, Tensor>>& params,
                  std::vector<std::pair<std::string, BatchNormState*>>* bns) {
  params.emplace_back(prefix + ".weight", c.weight);
  params.emplace_back(prefix + ".bias", c.bias);
  if (c.bn) {
    params.emplace_back(prefix + ".bn.gamma", c.bn->gamma);
    params.emplace_back(prefix + ".bn.beta", c.bn->beta);
    if (bns) bns->emplace_back(prefix + ".bn", &*c.bn);
  }
}

void walk_model(Model& model, std::vector<std::pair<std::string, Tensor>>& params,
                std::vector<std::pair<std::string, BatchNormState*>>* bns) {
  char buf[32];
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    std::snprintf(buf, sizeof(buf), "L%02zu", li);
    const std::string base = buf;
    LayerState& l = model.layers[li];
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::Classifier:
        collect_conv(base + ".conv", *l.conv, params, bns);
        break;
      case LayerKind::Fire: {
        FireState& f = *l.fire;
        collect_conv(base + ".squeeze", f.squeeze, params, bns);
        collect_conv(base + ".expand1", f.expand1, params, bns);
        collect_conv(base + ".expand3", f.expand3, params, bns);
        break;
      }
      case LayerKind::FireDeconv: {
        FireDeconvState& f = *l.fire_deconv;
        collect_conv(base + ".squeeze", f.squeeze, params, bns);
        params.emplace_back(base + ".up.weight", f.up_weight);
        params.emplace_back(base + ".up.bias", f.up_bias);
        if (f.up_bn) {
          params.emplace_back(base + ".up.bn.gamma", f.up_bn->gamma);
          params.emplace_back(base + ".up.bn.beta", f.up_bn->beta);
          if (bns) bns->emplace_back(base + ".up.bn", &*f.up_bn);
        }
        collect_conv(base + ".expand1", f.expand1, params, bns);
        collect_conv(base + ".expand3", f.expand3, params, bns);
        break;
      }
      case LayerKind::Cam: {
        CamState& cam = *l.cam;
        params.emplace_back(base + ".cam.reduce.weight", cam.reduce_weight);
        params.emplace_back(base + ".cam.reduce.bias", cam.reduce_bias);
        params.emplace_back(base + ".cam.expand.weight", cam.expand_weight);
        params.emplace_back(base + ".cam.expand.bias", cam.expand_bias);
        break;
      }
      case LayerKind::Pool:
        break;
    }
  }
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> model_parameters(Model& model) {
  std::vector<std::pair<std::string, Tensor>> params;
  walk_model(model, params, nullptr);
  return params;
}

std::vector<std::pair<std::string, BatchNormState*>> model_bn_units(Model& model) {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, BatchNormState*>> bns;
  walk_model(model, params, &bns);
  return bns;
}

void save_model(const std::string& path, const Model& model) {
  Model& m = const_cast<Model&>(model);  // enumeration does not mutate
  std::vector<NamedTensorRecord> records;
  const std::vector<double> enc = encode_spec(model.spec);
  records.push_back({"__meta__/spec", {static_cast<int>(enc.size())}, enc});
  const std::uint64_t hash = spec_hash(model.spec);
  double hash_bits;
  std::memcpy(&hash_bits, &hash, sizeof(hash));
  records.push_back({"__meta__/spec_hash", {1}, {hash_bits}});
  records.push_back({"__meta__/norm_mean",
                     {static_cast<int>(model.norm_mean.size())},
                     {model.norm_mean.data(), model.norm_mean.data() + model.norm_mean.size()}});
  records.push_back({"__meta__/norm_std",
                     {static_cast<int>(model.norm_std.size())},
                     {model.norm_std.data(), model.norm_std.data() + model.norm_std.size()}});
  for (auto& [name, tensor] : model_parameters(m)) {
    records.push_back({name, tensor.shape(),
                       std::vector<double>(tensor.data(), tensor.data() + tensor.size())});
  }
  for (auto& [name, bn] : model_bn_units(m)) {
    records.push_back({name + ".running_mean",
                       {bn->channels()},
                       {bn->running_mean.data(), bn->running_mean.data() + bn->channels()}});
    records.push_back({name + ".running_var",
                       {bn->channels()},
                       {bn->running_var.data(), bn->running_var.data() + bn->channels()}});
  }
  write_checkpoint(path, records);
}

Model load_model(const std::string& path) {
  auto records = read_checkpoint(path);
  std::map<std::string, NamedTensorRecord*> by_name;
  for (auto& r : records) {
    if (!by_name.emplace(r.name, &r).second)
      throw std::runtime_error("checkpoint '" + path + "': duplicate record '" + r.name + "'");
  }
  auto take = [&](const std::string& name) -> NamedTensorRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint '" + path + "': missing record '" + name + "'");
    NamedTensorRecord* rec = it->second;
    by_name.erase(it);
    return *rec;
  };

  const ModelSpec spec = decode_spec(take("__meta__/spec").data);
  const auto& hash_rec = take("__meta__/spec_hash");
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, hash_rec.data.data(), sizeof(stored_hash));
  if (stored_hash != spec_hash(spec))
    throw std::runtime_error("checkpoint '" + path + "': topology hash mismatch");

  Model model = build_model(spec, 0);
  const auto& nm = take("__meta__/norm_mean");
  const auto& ns = take("__meta__/norm_std");
  check(static_cast<int>(nm.data.size()) == spec.in_channels &&
            static_cast<int>(ns.data.size()) == spec.in_channels,
        "checkpoint: normalization stats have the wrong width");
  model.norm_mean = Eigen::Map<const Eigen::ArrayXd>(nm.data.data(), spec.in_channels);
  model.norm_std = Eigen::Map<const Eigen::ArrayXd>(ns.data.data(), spec.in_channels);

  for (auto& [name, tensor] : model_parameters(model)) {
    const auto& rec = take(name);
    if (rec.shape != tensor.shape())
      throw std::runtime_error("checkpoint: record '" + name + "' has the wrong shape");
    std::copy(rec.data.begin(), rec.data.end(), tensor.data());
  }
  for (auto& [name, bn] : model_bn_units(model)) {
    const auto& rm = take(name + ".running_mean");
    const auto& rv = take(name + ".running_var");
    check(static_cast<int>(rm.data.size()) == bn->channels() &&
              static_cast<int>(rv.data.size()) == bn->channels(),
          "checkpoint: BN statistics have the wrong width");
    bn->running_mean = Eigen::Map<const Eigen::ArrayXd>(rm.data.data(), bn->channels());
    bn->running_var = Eigen::Map<const Eigen::ArrayXd>(rv.data.data(), bn->channels());
  }
  if (!by_name.empty())
    throw std::runtime_error("checkpoint '" + path + "': unexpected record '" +
                             by_name.begin()->first + "'");
  return model;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

void compute_norm_stats(const std::vector<RangeImage>& images, bool renderer_inputs,
                        Eigen::ArrayXd& mean_out, Eigen::ArrayXd& std_out) {
  check(!images.empty(), "compute_norm_stats: empty dataset");
  const int channels = renderer_inputs ? 5 : 6;
  mean_out = Eigen::ArrayXd::Zero(channels);
  std_out = Eigen::ArrayXd::Ones(channels);
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(channels);
  Eigen::ArrayXd sumsq = Eigen::ArrayXd::Zero(channels);
  long count = 0;
  for (const RangeImage& img : images) {
    auto acc = [&](int ch, const ImageXd& plane) {
      sum(ch) += plane.sum();
      sumsq(ch) += plane.square().sum();
    };
    acc(0, img.x);
    acc(1, img.y);
    acc(2, img.z);
    if (renderer_inputs) {
      acc(3, img.depth);
    } else {
      acc(3, img.intensity);
      acc(4, img.depth);
    }
    count += static_cast<long>(img.height) * img.width;
  }
  const int float_channels = channels - 1;  // mask stays raw
  for (int ch = 0; ch < float_channels; ++ch) {
    mean_out(ch) = sum(ch) / static_cast<double>(count);
    const double var = sumsq(ch) / static_cast<double>(count) - mean_out(ch) * mean_out(ch);
    std_out(ch) = std::sqrt(std::max(var, 0.0));
    if (std_out(ch) < 1e-6) std_out(ch) = 1.0;  // constant channel passes through
  }
  mean_out(channels - 1) = 0.0;
  std_out(channels - 1) = 1.0;
}

Batch make_batch(const std::vector<RangeImage>& images, const std::vector<int>& indices,
                 const Eigen::ArrayXd& norm_mean, const Eigen::ArrayXd& norm_std,
                 bool renderer_inputs) {
  check(!indices.empty(), "make_batch: empty index list");
  const int channels = renderer_inputs ? 5 : 6;
  check(norm_mean.size() == channels && norm_std.size() == channels,
        "make_batch: normalization stats have the wrong width");
  const RangeImage& first = images.at(indices[0]);
  const int h = first.height, w = first.width;
  const int n = static_cast<int>(indices.size());
  const long hw = static_cast<long>(h) * w;
  Batch batch;
  batch.n = n;
  batch.h = h;
  batch.w = w;
  batch.input = Tensor::zeros({n, channels, h, w});
  batch.labels.resize(static_cast<std::size_t>(n) * hw);
  batch.ignore.resize(static_cast<std::size_t>(n) * hw);
  batch.intensity.resize(static_cast<std::size_t>(n) * hw);
  batch.mask.resize(static_cast<std::size_t>(n) * hw);
  double* dst = batch.input.data();
  for (int i = 0; i < n; ++i) {
    const RangeImage& img = images.at(indices[i]);
    check(img.height == h && img.width == w, "make_batch: images have differing dimensions");
    auto put = [&](int ch, const ImageXd& plane) {
      double* p = dst + (static_cast<long>(i) * channels + ch) * hw;
      const double inv = 1.0 / norm_std(ch);
      for (long k = 0; k < hw; ++k) p[k] = (plane.data()[k] - norm_mean(ch)) * inv;
    };
    put(0, img.x);
    put(1, img.y);
    put(2, img.z);
    if (renderer_inputs) {
      put(3, img.depth);
    } else {
      put(3, img.intensity);
      put(4, img.depth);
    }
    double* pm = dst + (static_cast<long>(i) * channels + channels - 1) * hw;
    for (long k = 0; k < hw; ++k) pm[k] = static_cast<double>(img.mask.data()[k]);
    for (long k = 0; k < hw; ++k) {
      batch.labels[static_cast<std::size_t>(i) * hw + k] = img.labels.data()[k];
      batch.ignore[static_cast<std::size_t>(i) * hw + k] = img.ignore.data()[k];
      batch.intensity[static_cast<std::size_t>(i) * hw + k] = img.intensity.data()[k];
      batch.mask[static_cast<std::size_t>(i) * hw + k] = img.mask.data()[k];
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Image-level forwards
// ---------------------------------------------------------------------------

Tensor segment_forward(const RangeImage& img, Model& model, BnMode mode) {
  check(model.spec.in_channels == 6, "segment_forward: model does not take segmentation inputs");
  std::vector<RangeImage> one{img};
  Batch batch = make_batch(one, {0}, model.norm_mean, model.norm_std, false);
  Tensor logits = model_forward(model, batch.input, mode);
  check(logits.dim(2) == img.height && logits.dim(3) == img.width,
        "segment_forward: decoder did not restore the input resolution (input " +
            std::to_string(img.height) + "x" + std::to_string(img.width) + ", output " +
            std::to_string(logits.dim(2)) + "x" + std::to_string(logits.dim(3)) + ")");
  Tensor probs = softmax_channels(logits);
  return reshape(probs, {model.spec.out_channels, img.height, img.width});
}

std::pair<Tensor, Tensor> render_forward(const RangeImage& img, Model& model) {
  check(model.spec.in_channels == 5, "render_forward: model does not take renderer inputs");
  check(model.spec.out_channels % 2 == 0, "render_forward: head width must be 2*n_bins");
  const int n_bins = model.spec.out_channels / 2;
  std::vector<RangeImage> one{img};
  Batch batch = make_batch(one, {0}, model.norm_mean, model.norm_std, true);
  Tensor head = model_forward(model, batch.input, BnMode::Eval);
  Tensor logits = reshape(slice_channels(head, 0, n_bins), {n_bins, img.height, img.width});
  Tensor deviations =
      reshape(slice_channels(head, n_bins, n_bins), {n_bins, img.height, img.width});
  return {logits, deviations};
}

ImageXd render_prediction(const Tensor& bin_logits, const Tensor& deviations,
                          const std::vector<double>& references) {
  check(bin_logits.ndim() == 3 && deviations.ndim() == 3, "render_prediction: expected [n,H,W]");
  const int n = bin_logits.dim(0), h = bin_logits.dim(1), w = bin_logits.dim(2);
  check(static_cast<int>(references.size()) == n,
        "render_prediction: reference count does not match bins");
  const long hw = static_cast<long>(h) * w;
  ImageXd out(h, w);
  for (long p = 0; p < hw; ++p) {
    int best = 0;
    double best_v = bin_logits.data()[p];
    for (int b = 1; b < n; ++b) {
      const double v = bin_logits.data()[b * hw + p];
      if (v > best_v) {
        best_v = v;
        best = b;
      }
    }
    const double pred = references[best] + deviations.data()[best * hw + p];
    out.data()[p] = std::clamp(pred, 0.0, 1.0);
  }
  return out;
}

ImageXu8 predict_labels(const RangeImage& img, Model& model) {
  NoGradGuard ng;
  Tensor probs = segment_forward(img, model, BnMode::Eval);
  const int classes = probs.dim(0);
  const long hw = static_cast<long>(img.height) * img.width;
  ImageXu8 out(img.height, img.width);
  for (long p = 0; p < hw; ++p) {
    int best = 0;
    double best_v = probs.data()[p];
    for (int cl = 1; cl < classes; ++cl) {
      const double v = probs.data()[cl * hw + p];
      if (v > best_v) {
        best_v = v;
        best = cl;
      }
    }
    out.data()[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout-noise robustness probe
// ---------------------------------------------------------------------------

std::vector<NoiseProbeRow> noise_robustness_probe(const Tensor& kernel, const Tensor& bias,
                                                  const std::vector<double>& p_list, int trials,
                                                  std::uint64_t seed, int n, int c, int h, int w) {
  check(trials >= 30, "noise_robustness_probe: need at least 30 trials");
  for (double p : p_list)
    check(p >= 0.0 && p < 1.0, "noise_robustness_probe: probabilities must lie in [0,1)");
  check(kernel.ndim() == 4 && kernel.dim(1) == c, "noise_robustness_probe: kernel/channel mismatch");
  NoGradGuard ng;

  Rng rng = Rng::derive(seed, 0x70726f62ULL);  // "prob"
  Tensor x = Tensor::zeros({n, c, h, w});
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  CamState cam = make_cam(c, 7, 4, rng);

  const Tensor clean_plain = conv2d(x, kernel, bias, 1, 1);
  const Tensor clean_cam = conv2d(cam_forward(x, cam), kernel, bias, 1, 1);

  const long hw = static_cast<long>(h) * w;
  std::vector<NoiseProbeRow> rows;
  for (double p : p_list) {
    std::vector<double> errs_plain, errs_cam;
    errs_plain.reserve(trials);
    errs_cam.reserve(trials);
    for (int t = 0; t < trials; ++t) {
      Tensor corrupted = Tensor::from_array(x.shape(), x.array());
      for (int i = 0; i < n; ++i) {
        for (long pix = 0; pix < hw; ++pix) {
          if (rng.uniform() >= p) continue;
          for (int ch = 0; ch < c; ++ch)
            corrupted.data()[(static_cast<long>(i) * c + ch) * hw + pix] = 0.0;
        }
      }
      Tensor out_plain = conv2d(corrupted, kernel, bias, 1, 1);
      Tensor out_cam = conv2d(cam_forward(corrupted, cam), kernel, bias, 1, 1);
      errs_plain.push_back(std::sqrt((out_plain.array() - clean_plain.array()).square().sum()));
      errs_cam.push_back(std::sqrt((out_cam.array() - clean_cam.array()).square().sum()));
    }
    auto stats = [&](const std::vector<double>& v) {
      double mu = 0.0;
      for (double e : v) mu += e;
      mu /= static_cast<double>(v.size());
      double var = 0.0;
      for (double e : v) var += (e - mu) * (e - mu);
      var /= static_cast<double>(v.size() - 1);
      return std::make_pair(mu, std::sqrt(var / static_cast<double>(v.size())));
    };
    NoiseProbeRow row;
    row.p = p;
    std::tie(row.plain_err, row.plain_se) = stats(errs_plain);
    std::tie(row.cam_err, row.cam_se) = stats(errs_cam);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace rangeseg
