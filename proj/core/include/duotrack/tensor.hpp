#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace duotrack {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One tape entry. Values are written once by the op that produces them;
// grad is filled lazily during backward().
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
};

std::vector<double>& ensure_grad(TensorNode& node);

}  // namespace detail

/// Dense row-major tensor of doubles with an optional reverse-mode tape
/// entry. Handles are cheap to copy and share the underlying node. A value
/// is never mutated after the op that produced it; leaf parameters are the
/// one exception (optimizer updates go through mutable_data between tapes).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int extent(int axis) const;
  std::int64_t numel() const;

  const std::vector<double>& data() const;
  /// Direct write access to the underlying storage. Only meaningful for leaf
  /// tensors (parameters) between forward passes.
  std::vector<double>& mutable_data();

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void clear_grad();

  /// Value of a rank-0/size-1 tensor.
  double value() const;
  double at(std::initializer_list<int> index) const;

  /// Reverse-mode sweep from a scalar root. Accumulates gradients into every
  /// reachable node with requires_grad set.
  void backward() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Eager NaN/Inf detection after every op. Defaults to on in debug builds,
/// off in release builds.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- elementwise ----
// Binary ops accept equal shapes, or a right operand whose shape is a
// trailing suffix of the left shape (broadcast over the leading axes);
// this covers bias rows, positional tables and per-channel noise vectors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

/// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);
Tensor scale(const Tensor& x, double s);
Tensor neg(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ---- structure ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Stack along a fresh axis inserted at position `axis`.
Tensor stack(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int count);
/// Gather arbitrary flat (row-major) positions into a rank-1 tensor.
Tensor take(const Tensor& x, const std::vector<std::int64_t>& flat_indices);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- linear algebra / nn ----
/// Matrix product for ranks (2,2), (3,2) and (3,3); the (3,2) form
/// broadcasts the right factor over the leading batch axis.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Numerically stabilized softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Normalization over the last axis with affine parameters of that width.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

/// Cross-correlation over the trailing time axis of x (batch x channels x
/// time). Kernel extent must be odd and padding (kernel-1)/2 so the time
/// extent is preserved. groups follows the usual grouped-conv convention.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int padding,
              int groups = 1);

/// 3x3-style spatial cross-correlation on batch x channels x H x W maps.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int padding);

/// Standard multi-head scaled dot-product attention. q/k/v are (B x N x C)
/// or (N x C); C must be divisible by heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

// ---- gradient checking ----

/// Central finite differences against reverse-mode gradients over every
/// scalar of `params`. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8). loss_fn must be deterministic and
/// scalar-valued.
// max_per_param > 0 checks at most that many scalars per tensor, evenly
// spaced over the flat index range; 0 checks every scalar.
double grad_check(const std::function<Tensor()>& loss_fn,
                  const std::vector<Tensor>& params, double eps = 1e-5,
                  int max_per_param = 0);

}  // namespace duotrack
