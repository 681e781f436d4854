#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace rangeseg {

/// Node of the reverse-mode graph. Holds the flat row-major value, the
/// gradient buffer, and a closure that scatters this node's gradient into
/// its parents. Tensors are cheap handles sharing a node.
struct TensorNode {
  std::vector<int> shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;
  bool requires_grad = false;
  bool grad_valid = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
};

/// Dense N-d double tensor with reverse-mode automatic differentiation.
/// Data is flat row-major; shape dims are positive. Graphs are DAGs built
/// eagerly by the free op functions below; backward() on a scalar fills
/// gradients of every requires_grad tensor that fed it.
///
/// A single graph is not thread-safe; distinct graphs and tensors may be
/// used concurrently from different threads.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor from_array(std::vector<int> shape, Eigen::ArrayXd data,
                           bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int i) const;
  int ndim() const;
  int size() const;

  double* data();
  const double* data() const;
  Eigen::ArrayXd& array();
  const Eigen::ArrayXd& array() const;
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  const Eigen::ArrayXd& grad() const;
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Rejects non-scalar tensors.
  void backward();

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Scoped suppression of graph building; forwards run value-only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise and reduction ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor clamp_min(const Tensor& a, double lo);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Softmax along axis 1 (works for [N,C,...] of any trailing rank).
Tensor softmax_channels(const Tensor& a);

/// Same data, new shape (element count must match).
Tensor reshape(const Tensor& a, std::vector<int> shape);

/// 2-D matrix product [M,K]x[K,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// Structured ops on [N,C,H,W] tensors.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding);
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride_h, int stride_w, int pad_h, int pad_w);
/// Transposed convolution; weight layout is [C_in, C_out, kh, kw].
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        int stride_h, int stride_w, int pad_h, int pad_w);
Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding);
Tensor maxpool2d(const Tensor& x, int kernel_h, int kernel_w,
                 int stride_h, int stride_w, int pad_h, int pad_w);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int begin, int count);
/// Per-pixel channel pick: index has one entry per (n,h,w), output [N,1,H,W].
Tensor gather_channel(const Tensor& x, const std::vector<int>& index);
/// [N,C,H,W] -> [N*H*W, C] (pixel-major feature rows).
Tensor channels_to_rows(const Tensor& x);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

enum class BnMode { Train, Eval };

/// Learnable scale/shift plus running statistics of one normalization
/// site. gamma/beta participate in the graph; the running buffers are
/// plain state updated as a train-mode side effect.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Eigen::ArrayXd running_mean;
  Eigen::ArrayXd running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormState(int channels, double momentum = 0.1, double epsilon = 1e-5);
  int channels() const { return static_cast<int>(running_mean.size()); }
};

Tensor batchnorm(const Tensor& x, BatchNormState& state, BnMode mode);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace rangeseg
