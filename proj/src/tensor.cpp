#include "rangeseg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace rangeseg {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

int product(const std::vector<int>& shape) {
  long long p = 1;
  for (int d : shape) p *= d;
  return static_cast<int>(p);
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void validate_shape(const std::vector<int>& shape) {
  check(!shape.empty(), "tensor shape must have at least one dimension");
  for (int d : shape) check(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
}

Tensor make_node(std::vector<int> shape, Eigen::ArrayXd value,
                 const std::vector<Tensor>& parents,
                 std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Tensor& p : parents) {
      if (p.node()->requires_grad) node->requires_grad = true;
    }
  }
  if (node->requires_grad) {
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void accumulate(const std::shared_ptr<TensorNode>& n, const Eigen::ArrayXd& g) {
  if (n->requires_grad) n->grad += g;
}

struct ConvDims {
  int n, c, h, w;       // input
  int k, kh, kw;        // kernel
  int sh, sw, ph, pw;   // stride / padding
  int ho, wo;           // output
};

// col is [C*kh*kw, Ho*Wo]; out-of-bounds taps are zero.
void im2col(const double* x, const ConvDims& d, RowMat& col) {
  col.setZero();
  for (int c = 0; c < d.c; ++c) {
    const double* xc = x + static_cast<long>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const int row = (c * d.kh + ki) * d.kw + kj;
        double* crow = col.data() + static_cast<long>(row) * d.ho * d.wo;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.sh - d.ph + ki;
          if (ih < 0 || ih >= d.h) continue;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.sw - d.pw + kj;
            if (iw < 0 || iw >= d.w) continue;
            crow[oh * d.wo + ow] = xc[ih * d.w + iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into the [C,H,W] image.
void col2im_add(const RowMat& col, const ConvDims& d, double* x) {
  for (int c = 0; c < d.c; ++c) {
    double* xc = x + static_cast<long>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const int row = (c * d.kh + ki) * d.kw + kj;
        const double* crow = col.data() + static_cast<long>(row) * d.ho * d.wo;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.sh - d.ph + ki;
          if (ih < 0 || ih >= d.h) continue;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.sw - d.pw + kj;
            if (iw < 0 || iw >= d.w) continue;
            xc[ih * d.w + iw] += crow[oh * d.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  validate_shape(shape);
  auto node = std::make_shared<TensorNode>();
  node->value = Eigen::ArrayXd::Zero(product(shape));
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  t.node()->value.setConstant(value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  check(product(shape) == static_cast<int>(data.size()),
        "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->value = Eigen::Map<const Eigen::ArrayXd>(data.data(), data.size());
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_array(std::vector<int> shape, Eigen::ArrayXd data, bool requires_grad) {
  validate_shape(shape);
  check(product(shape) == static_cast<int>(data.size()),
        "data length does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->value = std::move(data);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::dim(int i) const { return node_->shape.at(i); }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
int Tensor::size() const { return static_cast<int>(node_->value.size()); }
double* Tensor::data() { return node_->value.data(); }
const double* Tensor::data() const { return node_->value.data(); }
Eigen::ArrayXd& Tensor::array() { return node_->value; }
const Eigen::ArrayXd& Tensor::array() const { return node_->value; }

double Tensor::item() const {
  check(size() == 1, "item() requires a scalar tensor, got shape " + shape_str(shape()));
  return node_->value(0);
}

double Tensor::at(std::initializer_list<int> idx) const {
  check(static_cast<int>(idx.size()) == ndim(), "index rank mismatch");
  long flat = 0;
  int i = 0;
  for (int v : idx) {
    check(v >= 0 && v < node_->shape[i], "index out of bounds");
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->value(flat);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  check(node_->parents.empty(), "requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && node_->grad_valid; }

const Eigen::ArrayXd& Tensor::grad() const {
  check(node_->grad_valid, "gradient not populated; call backward() first");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad = Eigen::ArrayXd::Zero(size());
  node_->grad_valid = true;
}

void Tensor::backward() {
  check(node_ != nullptr, "backward() on an undefined tensor");
  check(size() == 1, "backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) {
    n->grad = Eigen::ArrayXd::Zero(n->value.size());
    n->grad_valid = true;
  }
  node_->grad(0) = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto na = a.node(), nb = b.node();
  return make_node(a.shape(), na->value + nb->value, {a, b}, [na, nb](TensorNode& self) {
    accumulate(na, self.grad);
    accumulate(nb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto na = a.node(), nb = b.node();
  return make_node(a.shape(), na->value - nb->value, {a, b}, [na, nb](TensorNode& self) {
    accumulate(na, self.grad);
    if (nb->requires_grad) nb->grad -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto na = a.node(), nb = b.node();
  return make_node(a.shape(), na->value * nb->value, {a, b}, [na, nb](TensorNode& self) {
    if (na->requires_grad) na->grad += self.grad * nb->value;
    if (nb->requires_grad) nb->grad += self.grad * na->value;
  });
}

Tensor scale(const Tensor& a, double s) {
  auto na = a.node();
  return make_node(a.shape(), na->value * s, {a}, [na, s](TensorNode& self) {
    if (na->requires_grad) na->grad += self.grad * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  auto na = a.node();
  return make_node(a.shape(), na->value + s, {a}, [na](TensorNode& self) {
    accumulate(na, self.grad);
  });
}

Tensor relu(const Tensor& a) {
  auto na = a.node();
  return make_node(a.shape(), na->value.max(0.0), {a}, [na](TensorNode& self) {
    if (na->requires_grad)
      na->grad += self.grad * (na->value > 0.0).cast<double>();
  });
}

Tensor sigmoid(const Tensor& a) {
  auto na = a.node();
  Eigen::ArrayXd y = 1.0 / (1.0 + (-na->value).exp());
  return make_node(a.shape(), std::move(y), {a}, [na](TensorNode& self) {
    if (na->requires_grad)
      na->grad += self.grad * self.value * (1.0 - self.value);
  });
}

Tensor log(const Tensor& a) {
  auto na = a.node();
  return make_node(a.shape(), na->value.log(), {a}, [na](TensorNode& self) {
    if (na->requires_grad) na->grad += self.grad / na->value;
  });
}

Tensor pow(const Tensor& a, double exponent) {
  auto na = a.node();
  const double frac = exponent - std::floor(exponent);
  if (frac != 0.0) {
    check((na->value >= 0.0).all(), "pow: negative base with non-integer exponent");
  }
  Eigen::ArrayXd y(na->value.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = std::pow(na->value(i), exponent);
  return make_node(a.shape(), std::move(y), {a}, [na, exponent](TensorNode& self) {
    if (!na->requires_grad) return;
    for (Eigen::Index i = 0; i < self.grad.size(); ++i) {
      const double x = na->value(i);
      double d = exponent * std::pow(x, exponent - 1.0);
      if (!std::isfinite(d)) d = 0.0;  // x == 0 with exponent < 1
      na->grad(i) += self.grad(i) * d;
    }
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  auto na = a.node();
  return make_node(a.shape(), na->value.max(lo), {a}, [na, lo](TensorNode& self) {
    if (na->requires_grad)
      na->grad += self.grad * (na->value > lo).cast<double>();
  });
}

Tensor sum(const Tensor& a) {
  auto na = a.node();
  Eigen::ArrayXd y(1);
  y(0) = na->value.sum();
  return make_node({1}, std::move(y), {a}, [na](TensorNode& self) {
    if (na->requires_grad) na->grad += self.grad(0);
  });
}

Tensor mean(const Tensor& a) {
  auto na = a.node();
  const double inv_n = 1.0 / static_cast<double>(na->value.size());
  Eigen::ArrayXd y(1);
  y(0) = na->value.mean();
  return make_node({1}, std::move(y), {a}, [na, inv_n](TensorNode& self) {
    if (na->requires_grad) na->grad += self.grad(0) * inv_n;
  });
}

Tensor softmax_channels(const Tensor& a) {
  check(a.ndim() >= 2, "softmax_channels: need at least 2 dims");
  const int outer = a.dim(0);
  const int channels = a.dim(1);
  int inner = 1;
  for (int i = 2; i < a.ndim(); ++i) inner *= a.dim(i);
  auto na = a.node();

  Eigen::ArrayXd y(na->value.size());
  for (int o = 0; o < outer; ++o) {
    for (int i = 0; i < inner; ++i) {
      const long base = static_cast<long>(o) * channels * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < channels; ++c) mx = std::max(mx, na->value(base + c * inner));
      double denom = 0.0;
      for (int c = 0; c < channels; ++c) {
        const double e = std::exp(na->value(base + c * inner) - mx);
        y(base + c * inner) = e;
        denom += e;
      }
      for (int c = 0; c < channels; ++c) y(base + c * inner) /= denom;
    }
  }
  return make_node(a.shape(), std::move(y), {a},
                   [na, outer, channels, inner](TensorNode& self) {
    if (!na->requires_grad) return;
    for (int o = 0; o < outer; ++o) {
      for (int i = 0; i < inner; ++i) {
        const long base = static_cast<long>(o) * channels * inner + i;
        double dot = 0.0;
        for (int c = 0; c < channels; ++c)
          dot += self.grad(base + c * inner) * self.value(base + c * inner);
        for (int c = 0; c < channels; ++c) {
          const long idx = base + c * inner;
          na->grad(idx) += self.value(idx) * (self.grad(idx) - dot);
        }
      }
    }
  });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  validate_shape(shape);
  check(product(shape) == a.size(), "reshape: element count mismatch (" + shape_str(a.shape()) +
                                        " -> " + shape_str(shape) + ")");
  auto na = a.node();
  return make_node(std::move(shape), na->value, {a}, [na](TensorNode& self) {
    accumulate(na, self.grad);
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: both operands must be 2-D");
  check(a.dim(1) == b.dim(0), "matmul: inner dimensions differ (" + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()) + ")");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto na = a.node(), nb = b.node();
  Eigen::ArrayXd y(static_cast<long>(m) * n);
  {
    CMapRM A(na->value.data(), m, k), B(nb->value.data(), k, n);
    MapRM Y(y.data(), m, n);
    Y.noalias() = A * B;
  }
  return make_node({m, n}, std::move(y), {a, b}, [na, nb, m, k, n](TensorNode& self) {
    CMapRM G(self.grad.data(), m, n);
    if (na->requires_grad) {
      CMapRM B(nb->value.data(), k, n);
      MapRM GA(na->grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (nb->requires_grad) {
      CMapRM A(na->value.data(), m, k);
      MapRM GB(nb->grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  return conv2d(x, weight, bias, stride, stride, padding, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride_h, int stride_w, int pad_h, int pad_w) {
  check(x.ndim() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  check(weight.ndim() == 4, "conv2d: weight must be [K,C,kh,kw], got " + shape_str(weight.shape()));
  check(stride_h >= 1 && stride_w >= 1, "conv2d: stride must be >= 1");
  check(pad_h >= 0 && pad_w >= 0, "conv2d: padding must be >= 0");
  ConvDims d;
  d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
  d.k = weight.dim(0); d.kh = weight.dim(2); d.kw = weight.dim(3);
  d.sh = stride_h; d.sw = stride_w; d.ph = pad_h; d.pw = pad_w;
  check(weight.dim(1) == d.c, "conv2d: input has " + std::to_string(d.c) +
                                  " channels but weight expects " + std::to_string(weight.dim(1)));
  check(bias.ndim() == 1 && bias.dim(0) == d.k, "conv2d: bias must be [K]");
  check(d.kh <= d.h + 2 * d.ph && d.kw <= d.w + 2 * d.pw,
        "conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * d.ph - d.kh) / d.sh + 1;
  d.wo = (d.w + 2 * d.pw - d.kw) / d.sw + 1;

  auto nx = x.node(), nw = weight.node(), nb = bias.node();
  const int patch = d.c * d.kh * d.kw;
  const long plane_in = static_cast<long>(d.c) * d.h * d.w;
  const long plane_out = static_cast<long>(d.k) * d.ho * d.wo;

  Eigen::ArrayXd y(static_cast<long>(d.n) * plane_out);
  {
    RowMat col(patch, d.ho * d.wo);
    CMapRM W(nw->value.data(), d.k, patch);
    for (int n = 0; n < d.n; ++n) {
      im2col(nx->value.data() + n * plane_in, d, col);
      MapRM Y(y.data() + n * plane_out, d.k, d.ho * d.wo);
      Y.noalias() = W * col;
      for (int k = 0; k < d.k; ++k) Y.row(k).array() += nb->value(k);
    }
  }

  return make_node({d.n, d.k, d.ho, d.wo}, std::move(y), {x, weight, bias},
                   [nx, nw, nb, d, patch, plane_in, plane_out](TensorNode& self) {
    RowMat col(patch, d.ho * d.wo);
    RowMat gcol(patch, d.ho * d.wo);
    CMapRM W(nw->value.data(), d.k, patch);
    for (int n = 0; n < d.n; ++n) {
      CMapRM G(self.grad.data() + n * plane_out, d.k, d.ho * d.wo);
      if (nw->requires_grad) {
        im2col(nx->value.data() + n * plane_in, d, col);
        MapRM GW(nw->grad.data(), d.k, patch);
        GW.noalias() += G * col.transpose();
      }
      if (nx->requires_grad) {
        gcol.noalias() = W.transpose() * G;
        col2im_add(gcol, d, nx->grad.data() + n * plane_in);
      }
      if (nb->requires_grad) {
        for (int k = 0; k < d.k; ++k) nb->grad(k) += G.row(k).sum();
      }
    }
  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        int stride_h, int stride_w, int pad_h, int pad_w) {
  check(x.ndim() == 4, "conv_transpose2d: input must be [N,C,H,W]");
  check(weight.ndim() == 4, "conv_transpose2d: weight must be [C_in,C_out,kh,kw]");
  check(x.dim(1) == weight.dim(0),
        "conv_transpose2d: input has " + std::to_string(x.dim(1)) +
            " channels but weight expects " + std::to_string(weight.dim(0)));
  const int n = x.dim(0), cin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  const int cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  check(bias.ndim() == 1 && bias.dim(0) == cout, "conv_transpose2d: bias must be [C_out]");
  const int hout = (hin - 1) * stride_h - 2 * pad_h + kh;
  const int wout = (win - 1) * stride_w - 2 * pad_w + kw;
  check(hout >= 1 && wout >= 1, "conv_transpose2d: empty output");

  // The forward pass is the data-gradient of a conv with weight [C_in,C_out,kh,kw]
  // whose "input" is the deconv output; reuse the same im2col geometry.
  ConvDims d;
  d.n = n; d.c = cout; d.h = hout; d.w = wout;
  d.k = cin; d.kh = kh; d.kw = kw;
  d.sh = stride_h; d.sw = stride_w; d.ph = pad_h; d.pw = pad_w;
  d.ho = hin; d.wo = win;

  auto nx = x.node(), nw = weight.node(), nb = bias.node();
  const int patch = cout * kh * kw;
  const long plane_in = static_cast<long>(cin) * hin * win;
  const long plane_out = static_cast<long>(cout) * hout * wout;

  Eigen::ArrayXd y = Eigen::ArrayXd::Zero(static_cast<long>(n) * plane_out);
  {
    RowMat col(patch, hin * win);
    CMapRM W(nw->value.data(), cin, patch);
    for (int i = 0; i < n; ++i) {
      CMapRM X(nx->value.data() + i * plane_in, cin, hin * win);
      col.noalias() = W.transpose() * X;
      col2im_add(col, d, y.data() + i * plane_out);
      MapRM Y(y.data() + i * plane_out, cout, hout * wout);
      for (int k = 0; k < cout; ++k) Y.row(k).array() += nb->value(k);
    }
  }

  return make_node({n, cout, hout, wout}, std::move(y), {x, weight, bias},
                   [nx, nw, nb, d, n, cin, cout, patch, plane_in, plane_out](TensorNode& self) {
    RowMat gcol(patch, d.ho * d.wo);
    CMapRM W(nw->value.data(), cin, patch);
    for (int i = 0; i < n; ++i) {
      im2col(self.grad.data() + i * plane_out, d, gcol);
      if (nx->requires_grad) {
        MapRM GX(nx->grad.data() + i * plane_in, cin, d.ho * d.wo);
        GX.noalias() += W * gcol;
      }
      if (nw->requires_grad) {
        CMapRM X(nx->value.data() + i * plane_in, cin, d.ho * d.wo);
        MapRM GW(nw->grad.data(), cin, patch);
        GW.noalias() += X * gcol.transpose();
      }
      if (nb->requires_grad) {
        CMapRM G(self.grad.data() + i * plane_out, cout, static_cast<long>(d.h) * d.w);
        for (int k = 0; k < cout; ++k) nb->grad(k) += G.row(k).sum();
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding) {
  return maxpool2d(x, kernel, kernel, stride, stride, padding, padding);
}

Tensor maxpool2d(const Tensor& x, int kernel_h, int kernel_w,
                 int stride_h, int stride_w, int pad_h, int pad_w) {
  check(x.ndim() == 4, "maxpool2d: input must be [N,C,H,W]");
  check(kernel_h >= 1 && kernel_w >= 1, "maxpool2d: kernel must be >= 1");
  check(stride_h >= 1 && stride_w >= 1, "maxpool2d: stride must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(kernel_h <= h + 2 * pad_h && kernel_w <= w + 2 * pad_w,
        "maxpool2d: kernel larger than padded input");
  // Padding acts as -inf; pad < kernel keeps every window non-empty.
  check(pad_h < kernel_h && pad_w < kernel_w, "maxpool2d: padding must be smaller than kernel");
  const int ho = (h + 2 * pad_h - kernel_h) / stride_h + 1;
  const int wo = (w + 2 * pad_w - kernel_w) / stride_w + 1;

  auto nx = x.node();
  Eigen::ArrayXd y(static_cast<long>(n) * c * ho * wo);
  std::vector<int> argmax(y.size());
  long out_idx = 0;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = nx->value.data() + (static_cast<long>(i) * c + ch) * h * w;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = -1;
          for (int ki = 0; ki < kernel_h; ++ki) {
            const int ih = oh * stride_h - pad_h + ki;
            if (ih < 0 || ih >= h) continue;
            for (int kj = 0; kj < kernel_w; ++kj) {
              const int iw = ow * stride_w - pad_w + kj;
              if (iw < 0 || iw >= w) continue;
              const double v = plane[ih * w + iw];
              if (v > best) {  // first occurrence wins ties
                best = v;
                best_idx = ih * w + iw;
              }
            }
          }
          y(out_idx) = best;
          argmax[out_idx] = best_idx;
          ++out_idx;
        }
      }
    }
  }

  return make_node({n, c, ho, wo}, std::move(y), {x},
                   [nx, argmax = std::move(argmax), n, c, h, w, ho, wo](TensorNode& self) {
    if (!nx->requires_grad) return;
    long out_idx = 0;
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const long plane_base = (static_cast<long>(i) * c + ch) * h * w;
        for (long p = 0; p < static_cast<long>(ho) * wo; ++p, ++out_idx) {
          nx->grad(plane_base + argmax[out_idx]) += self.grad(out_idx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: inputs must be [N,C,H,W]");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels: non-channel dims differ");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const long hw = static_cast<long>(h) * w;
  auto na = a.node(), nb = b.node();
  Eigen::ArrayXd y(static_cast<long>(n) * (ca + cb) * hw);
  for (int i = 0; i < n; ++i) {
    y.segment(static_cast<long>(i) * (ca + cb) * hw, ca * hw) =
        na->value.segment(static_cast<long>(i) * ca * hw, ca * hw);
    y.segment(static_cast<long>(i) * (ca + cb) * hw + ca * hw, cb * hw) =
        nb->value.segment(static_cast<long>(i) * cb * hw, cb * hw);
  }
  return make_node({n, ca + cb, h, w}, std::move(y), {a, b},
                   [na, nb, n, ca, cb, hw](TensorNode& self) {
    for (int i = 0; i < n; ++i) {
      if (na->requires_grad)
        na->grad.segment(static_cast<long>(i) * ca * hw, ca * hw) +=
            self.grad.segment(static_cast<long>(i) * (ca + cb) * hw, ca * hw);
      if (nb->requires_grad)
        nb->grad.segment(static_cast<long>(i) * cb * hw, cb * hw) +=
            self.grad.segment(static_cast<long>(i) * (ca + cb) * hw + ca * hw, cb * hw);
    }
  });
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
  check(x.ndim() == 4, "slice_channels: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(begin >= 0 && count >= 1 && begin + count <= c, "slice_channels: range out of bounds");
  const long hw = static_cast<long>(h) * w;
  auto nx = x.node();
  Eigen::ArrayXd y(static_cast<long>(n) * count * hw);
  for (int i = 0; i < n; ++i) {
    y.segment(static_cast<long>(i) * count * hw, count * hw) =
        nx->value.segment((static_cast<long>(i) * c + begin) * hw, count * hw);
  }
  return make_node({n, count, h, w}, std::move(y), {x},
                   [nx, n, c, begin, count, hw](TensorNode& self) {
    if (!nx->requires_grad) return;
    for (int i = 0; i < n; ++i) {
      nx->grad.segment((static_cast<long>(i) * c + begin) * hw, count * hw) +=
          self.grad.segment(static_cast<long>(i) * count * hw, count * hw);
    }
  });
}

Tensor gather_channel(const Tensor& x, const std::vector<int>& index) {
  check(x.ndim() == 4, "gather_channel: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const long hw = static_cast<long>(h) * w;
  check(static_cast<long>(index.size()) == static_cast<long>(n) * hw,
        "gather_channel: index must have one entry per (n,h,w)");
  for (int v : index) check(v >= 0 && v < c, "gather_channel: channel index out of range");
  auto nx = x.node();
  Eigen::ArrayXd y(static_cast<long>(n) * hw);
  for (int i = 0; i < n; ++i) {
    for (long p = 0; p < hw; ++p) {
      const long pix = static_cast<long>(i) * hw + p;
      y(pix) = nx->value((static_cast<long>(i) * c + index[pix]) * hw + p);
    }
  }
  return make_node({n, 1, h, w}, std::move(y), {x},
                   [nx, index, n, c, hw](TensorNode& self) {
    if (!nx->requires_grad) return;
    for (int i = 0; i < n; ++i) {
      for (long p = 0; p < hw; ++p) {
        const long pix = static_cast<long>(i) * hw + p;
        nx->grad((static_cast<long>(i) * c + index[pix]) * hw + p) += self.grad(pix);
      }
    }
  });
}

Tensor channels_to_rows(const Tensor& x) {
  check(x.ndim() == 4, "channels_to_rows: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const long hw = static_cast<long>(h) * w;
  auto nx = x.node();
  Eigen::ArrayXd y(static_cast<long>(n) * hw * c);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      for (long p = 0; p < hw; ++p) {
        y((static_cast<long>(i) * hw + p) * c + ch) =
            nx->value((static_cast<long>(i) * c + ch) * hw + p);
      }
    }
  }
  return make_node({n * h * w, c}, std::move(y), {x},
                   [nx, n, c, hw](TensorNode& self) {
    if (!nx->requires_grad) return;
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        for (long p = 0; p < hw; ++p) {
          nx->grad((static_cast<long>(i) * c + ch) * hw + p) +=
              self.grad((static_cast<long>(i) * hw + p) * c + ch);
        }
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  check(x.ndim() == 2, "gather_rows: input must be 2-D");
  const int r = x.dim(0), d = x.dim(1);
  check(!rows.empty(), "gather_rows: empty selection");
  for (int v : rows) check(v >= 0 && v < r, "gather_rows: row index out of range");
  auto nx = x.node();
  Eigen::ArrayXd y(static_cast<long>(rows.size()) * d);
  for (size_t i = 0; i < rows.size(); ++i)
    y.segment(static_cast<long>(i) * d, d) = nx->value.segment(static_cast<long>(rows[i]) * d, d);
  return make_node({static_cast<int>(rows.size()), d}, std::move(y), {x},
                   [nx, rows, d](TensorNode& self) {
    if (!nx->requires_grad) return;
    for (size_t i = 0; i < rows.size(); ++i)
      nx->grad.segment(static_cast<long>(rows[i]) * d, d) +=
          self.grad.segment(static_cast<long>(i) * d, d);
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

BatchNormState::BatchNormState(int channels, double momentum_, double epsilon_) {
  check(channels >= 1, "BatchNormState: channels must be >= 1");
  check(momentum_ > 0.0 && momentum_ < 1.0, "BatchNormState: momentum must be in (0,1)");
  check(epsilon_ > 0.0, "BatchNormState: epsilon must be positive");
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
  running_mean = Eigen::ArrayXd::Zero(channels);
  running_var = Eigen::ArrayXd::Ones(channels);
  momentum = momentum_;
  epsilon = epsilon_;
}

Tensor batchnorm(const Tensor& x, BatchNormState& state, BnMode mode) {
  check(x.ndim() == 4, "batchnorm: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(c == state.channels(), "batchnorm: input has " + std::to_string(c) +
                                   " channels, state has " + std::to_string(state.channels()));
  const long hw = static_cast<long>(h) * w;
  const long m = static_cast<long>(n) * hw;  // samples per channel
  auto nx = x.node();
  auto ngamma = state.gamma.node();
  auto nbeta = state.beta.node();
  const double eps = state.epsilon;

  if (mode == BnMode::Train) {
    check(m >= 2, "batchnorm: train mode needs N*H*W >= 2");
    Eigen::ArrayXd mu(c), var(c), inv(c);
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int i = 0; i < n; ++i)
        s += nx->value.segment((static_cast<long>(i) * c + ch) * hw, hw).sum();
      mu(ch) = s / static_cast<double>(m);
      double sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const auto seg = nx->value.segment((static_cast<long>(i) * c + ch) * hw, hw);
        sq += (seg - mu(ch)).square().sum();
      }
      var(ch) = sq / static_cast<double>(m);  // biased estimator
      inv(ch) = 1.0 / std::sqrt(var(ch) + eps);
    }
    state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mu;
    state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var;

    Eigen::ArrayXd xhat(nx->value.size());
    Eigen::ArrayXd y(nx->value.size());
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const long base = (static_cast<long>(i) * c + ch) * hw;
        xhat.segment(base, hw) = (nx->value.segment(base, hw) - mu(ch)) * inv(ch);
        y.segment(base, hw) = xhat.segment(base, hw) * ngamma->value(ch) + nbeta->value(ch);
      }
    }
    return make_node({n, c, h, w}, std::move(y), {x, state.gamma, state.beta},
                     [nx, ngamma, nbeta, xhat = std::move(xhat), inv = std::move(inv),
                      n, c, hw, m](TensorNode& self) {
      for (int ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int i = 0; i < n; ++i) {
          const long base = (static_cast<long>(i) * c + ch) * hw;
          sum_g += self.grad.segment(base, hw).sum();
          sum_gx += (self.grad.segment(base, hw) * xhat.segment(base, hw)).sum();
        }
        if (ngamma->requires_grad) ngamma->grad(ch) += sum_gx;
        if (nbeta->requires_grad) nbeta->grad(ch) += sum_g;
        if (nx->requires_grad) {
          const double g = ngamma->value(ch);
          const double k = g * inv(ch) / static_cast<double>(m);
          for (int i = 0; i < n; ++i) {
            const long base = (static_cast<long>(i) * c + ch) * hw;
            nx->grad.segment(base, hw) +=
                k * (static_cast<double>(m) * self.grad.segment(base, hw) - sum_g -
                     xhat.segment(base, hw) * sum_gx);
          }
        }
      }
    });
  }

  // Eval mode: normalize by running statistics.
  Eigen::ArrayXd rinv = (state.running_var + eps).sqrt().inverse();
  Eigen::ArrayXd rmean = state.running_mean;
  Eigen::ArrayXd y(nx->value.size());
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const long base = (static_cast<long>(i) * c + ch) * hw;
      y.segment(base, hw) = (nx->value.segment(base, hw) - rmean(ch)) * rinv(ch) *
                                ngamma->value(ch) + nbeta->value(ch);
    }
  }
  return make_node({n, c, h, w}, std::move(y), {x, state.gamma, state.beta},
                   [nx, ngamma, nbeta, rinv = std::move(rinv), rmean = std::move(rmean),
                    n, c, hw](TensorNode& self) {
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < n; ++i) {
        const long base = (static_cast<long>(i) * c + ch) * hw;
        if (ngamma->requires_grad)
          ngamma->grad(ch) += (self.grad.segment(base, hw) *
                               (nx->value.segment(base, hw) - rmean(ch)) * rinv(ch)).sum();
        if (nbeta->requires_grad) nbeta->grad(ch) += self.grad.segment(base, hw).sum();
        if (nx->requires_grad)
          nx->grad.segment(base, hw) += self.grad.segment(base, hw) * ngamma->value(ch) * rinv(ch);
      }
    }
  });
}

}  // namespace rangeseg
