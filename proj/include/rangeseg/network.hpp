#pragma once

#include "rangeseg/range_image.hpp"
#include "rangeseg/rng.hpp"
#include "rangeseg/tensor.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace rangeseg {

enum class LayerKind : int {
  Conv = 0,        // conv + BN + ReLU
  Fire = 1,        // squeeze 1x1, parallel 1x1/3x3 expands, concat
  FireDeconv = 2,  // fire with a 1x2 transposed-conv upsample after the squeeze
  Pool = 3,        // max pooling
  Cam = 4,         // context aggregation gate
  Classifier = 5,  // plain conv head, no BN/ReLU
};

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int out_channels = 0;  // conv/fire/classifier output width
  int squeeze = 0;       // fire squeeze width
  int kernel_h = 3, kernel_w = 3;
  int stride_h = 1, stride_w = 1;
  int pad_h = 1, pad_w = 1;
  int pool_kernel = 7;  // cam
  int reduction = 4;    // cam channel reduction ratio
};

struct ModelSpec {
  int in_channels = 6;
  int out_channels = 4;
  std::vector<LayerSpec> layers;
};

/// Encoder-decoder segmentation topology. CAM gates sit after the stem
/// conv and the first two fire modules when enabled.
ModelSpec segmentation_spec(bool with_cam, int in_channels = 6, int num_classes = kNumClasses);
/// Intensity renderer: stride-1 trunk, head of n bin logits + n deviations.
ModelSpec renderer_spec(int n_bins = 10, int in_channels = 5);
/// Plain regression renderer head (single channel), same trunk.
ModelSpec renderer_l2_spec(int in_channels = 5);

std::vector<double> encode_spec(const ModelSpec& spec);
ModelSpec decode_spec(const std::vector<double>& data);
std::uint64_t spec_hash(const ModelSpec& spec);

struct ConvState {
  Tensor weight, bias;
  std::optional<BatchNormState> bn;
};

struct FireState {
  ConvState squeeze, expand1, expand3;
};

struct FireDeconvState {
  ConvState squeeze;
  Tensor up_weight, up_bias;  // transposed conv, [C,C,1,4], stride 1x2
  std::optional<BatchNormState> up_bn;
  ConvState expand1, expand3;
};

/// Context Aggregation Module parameters: large-kernel max pooling, a
/// channel bottleneck (C -> C/r -> C) and a sigmoid gate multiplied into
/// the input.
struct CamState {
  int pool_kernel = 7;
  int reduction = 4;
  Tensor reduce_weight, reduce_bias;
  Tensor expand_weight, expand_bias;
};

struct LayerState {
  LayerSpec spec;
  std::optional<ConvState> conv;
  std::optional<FireState> fire;
  std::optional<FireDeconvState> fire_deconv;
  std::optional<CamState> cam;
};

struct Model {
  ModelSpec spec;
  std::vector<LayerState> layers;
  Eigen::ArrayXd norm_mean, norm_std;  // input standardization, one entry per input channel
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

/// Streaming per-channel mean/variance accumulator.
struct ChannelWelford {
  Eigen::ArrayXd mean, m2;
  long count = 0;
  void init(int channels);
  void add(const Tensor& x);  // [N,C,H,W]
  Eigen::ArrayXd variance() const;
  Eigen::ArrayXd stddev() const;
};

/// Hook that captures the input of the target-indexed BN unit during one
/// forward pass (BN units counted in forward order).
struct BnProbe {
  int target = 0;
  ChannelWelford* acc = nullptr;
  int counter = 0;
  bool done = false;
};

struct ForwardHooks {
  Tensor* align_out = nullptr;  // filled with the alignment feature map
  int align_layer = -1;         // layer index; -1 = input of the classifier
  BnProbe* probe = nullptr;
};

Tensor model_forward(Model& model, const Tensor& x, BnMode mode, ForwardHooks hooks = {});

Tensor cam_forward(const Tensor& x, CamState& cam);

std::vector<std::pair<std::string, Tensor>> model_parameters(Model& model);
std::vector<std::pair<std::string, BatchNormState*>> model_bn_units(Model& model);

/// Checkpoints carry the encoded spec plus a topology hash so mismatched
/// topologies are rejected at load time.
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

// ---------------------------------------------------------------------------
// Batches and image-level forwards
// ---------------------------------------------------------------------------

/// A training batch: standardized input plus flat per-pixel annotations in
/// (n,h,w) row-major order.
struct Batch {
  Tensor input;                        // [N,C,H,W]
  std::vector<std::uint8_t> labels;    // class ids
  std::vector<std::uint8_t> ignore;    // 1 = excluded from losses
  std::vector<double> intensity;       // raw target intensity
  std::vector<std::uint8_t> mask;      // 1 = pixel exists
  int n = 0, h = 0, w = 0;
};

/// Segmentation inputs are (x,y,z,intensity,depth,mask); renderer inputs
/// drop intensity (it is the target): (x,y,z,depth,mask).
Batch make_batch(const std::vector<RangeImage>& images, const std::vector<int>& indices,
                 const Eigen::ArrayXd& norm_mean, const Eigen::ArrayXd& norm_std,
                 bool renderer_inputs);

/// Per-channel standardization statistics over a dataset; the mask channel
/// keeps (0,1) and near-constant channels fall back to unit scale.
void compute_norm_stats(const std::vector<RangeImage>& images, bool renderer_inputs,
                        Eigen::ArrayXd& mean_out, Eigen::ArrayXd& std_out);

/// Per-pixel class probabilities [num_classes, H, W].
Tensor segment_forward(const RangeImage& img, Model& model, BnMode mode);

/// Renderer head outputs: ([n,H,W] bin logits, [n,H,W] deviations).
std::pair<Tensor, Tensor> render_forward(const RangeImage& img, Model& model);

/// argmax-bin reference plus its deviation, clamped to [0,1].
ImageXd render_prediction(const Tensor& bin_logits, const Tensor& deviations,
                          const std::vector<double>& references);

/// Argmax class map of a segmentation forward in eval mode.
ImageXu8 predict_labels(const RangeImage& img, Model& model);

// ---------------------------------------------------------------------------
// Dropout-noise robustness probe
// ---------------------------------------------------------------------------

struct NoiseProbeRow {
  double p = 0.0;
  double plain_err = 0.0, plain_se = 0.0;
  double cam_err = 0.0, cam_se = 0.0;
};

/// Compares output perturbation of a bare conv vs a CAM-gated conv under
/// pixel dropout, with identical corruption masks per trial.
std::vector<NoiseProbeRow> noise_robustness_probe(const Tensor& kernel, const Tensor& bias,
                                                  const std::vector<double>& p_list, int trials,
                                                  std::uint64_t seed, int n = 1, int c = 16,
                                                  int h = 32, int w = 64);

}  // namespace rangeseg
