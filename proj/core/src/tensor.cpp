#include "duotrack/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace duotrack {

namespace {

using detail::TensorNode;
using detail::ensure_grad;

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument("duotrack::" + op + ": " + what);
}

void check_defined(const char* op, std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (!t->defined()) fail(op, "undefined tensor operand");
  }
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> value) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

// Wraps an op result. Drops the tape (parents + closure) when no input
// requires gradients, so inference builds no graph.
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backprop) {
  if (finite_checks_enabled()) {
    for (double v : value) {
      if (!std::isfinite(v)) {
        throw std::runtime_error(std::string("duotrack::") + op +
                                 ": non-finite value produced");
      }
    }
  }
  auto node = make_node(std::move(shape), std::move(value));
  bool needs_grad = false;
  for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

std::int64_t outer_size(const Shape& s, int axis) {
  std::int64_t n = 1;
  for (int i = 0; i < axis; ++i) n *= s[i];
  return n;
}

std::int64_t inner_size(const Shape& s, int axis) {
  std::int64_t n = 1;
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) n *= s[i];
  return n;
}

// Right operand must match a trailing suffix of the left shape.
void check_suffix_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size())
    fail(op, "cannot broadcast " + shape_str(b) + " against " + shape_str(a));
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i])
      fail(op, "shape " + shape_str(b) + " is not a trailing suffix of " +
                   shape_str(a));
  }
}

template <typename Fwd, typename Bwd>
Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b,
                        Fwd fwd, Bwd bwd) {
  check_defined(op, {&a, &b});
  check_suffix_broadcast(op, a.shape(), b.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::int64_t nb = b.numel();
  std::vector<double> out(av.size());
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(av.size()); ++i) {
    out[i] = fwd(av[i], bv[i % nb]);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op(op, a.shape(), std::move(out), {a, b},
                 [an, bn, nb, bwd](TensorNode& self) {
                   const auto& g = self.grad;
                   const bool da = an->requires_grad;
                   const bool db = bn->requires_grad;
                   auto* ga = da ? ensure_grad(*an).data() : nullptr;
                   auto* gb = db ? ensure_grad(*bn).data() : nullptr;
                   for (std::int64_t i = 0;
                        i < static_cast<std::int64_t>(g.size()); ++i) {
                     const double av_i = an->value[i];
                     const double bv_i = bn->value[i % nb];
                     double dai = 0.0, dbi = 0.0;
                     bwd(av_i, bv_i, g[i], dai, dbi);
                     if (da) ga[i] += dai;
                     if (db) gb[i % nb] += dbi;
                   }
                 });
}

template <typename Fwd, typename Grad>
Tensor unary_elementwise(const char* op, const Tensor& x, Fwd fwd, Grad grad) {
  check_defined(op, {&x});
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_op(op, x.shape(), std::move(out), {x},
                 [xn, grad](TensorNode& self) {
                   if (!xn->requires_grad) return;
                   auto& gx = ensure_grad(*xn);
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     gx[i] += self.grad[i] * grad(xn->value[i], self.value[i]);
                   }
                 });
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {
std::vector<double>& ensure_grad(TensorNode& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}
}  // namespace detail

Tensor::Tensor(std::shared_ptr<detail::TensorNode> node)
    : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (int e : shape) {
    if (e <= 0) fail("Tensor", "non-positive extent in " + shape_str(shape));
  }
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  for (int e : shape) {
    if (e <= 0) fail("Tensor", "non-positive extent in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    fail("Tensor", "shape " + shape_str(shape) + " does not match data size " +
                       std::to_string(data.size()));
  }
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) fail("Tensor", "axis out of range");
  return node_->shape[axis];
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(node_->value.size());
}

const std::vector<double>& Tensor::data() const { return node_->value; }
std::vector<double>& Tensor::mutable_data() { return node_->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw std::runtime_error("duotrack::Tensor: grad accessed before backward");
  }
  return node_->grad;
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

double Tensor::value() const {
  if (numel() != 1) fail("Tensor", "value() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank())
    fail("Tensor", "index rank mismatch");
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : index) {
    if (i < 0 || i >= node_->shape[axis]) fail("Tensor", "index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

void Tensor::backward() const {
  if (!node_) fail("backward", "undefined tensor");
  if (numel() != 1) fail("backward", "root must be scalar");
  if (!node_->requires_grad) return;

  // Post-order DFS so that reversing the list visits every consumer before
  // the node it feeds.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      TensorNode* parent = top.node->parents[top.next_parent++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  ensure_grad(*node_)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "minimum", a, b, [](double x, double y) { return x < y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x <= y)
          da = g;
        else
          db = g;
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "maximum", a, b, [](double x, double y) { return x > y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x >= y)
          da = g;
        else
          db = g;
      });
}

Tensor affine(const Tensor& x, double k, double c) {
  return unary_elementwise(
      "affine", x, [k, c](double v) { return k * v + c; },
      [k](double, double) { return k; });
}

Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_elementwise(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor log(const Tensor& x) {
  return unary_elementwise(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor pow(const Tensor& x, double p) {
  return unary_elementwise(
      "pow", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor abs(const Tensor& x) {
  return unary_elementwise(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) fail("clamp", "lo > hi");
  return unary_elementwise(
      "clamp", x,
      [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined("reshape", {&x});
  if (shape_numel(shape) != x.numel()) {
    fail("reshape", "cannot view " + shape_str(x.shape()) + " as " +
                        shape_str(shape));
  }
  auto xn = x.node();
  return make_op("reshape", std::move(shape), x.data(), {x},
                 [xn](TensorNode& self) {
                   if (!xn->requires_grad) return;
                   auto& gx = ensure_grad(*xn);
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     gx[i] += self.grad[i];
                 });
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> strides(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * s[i + 1];
  return strides;
}

// out[j] = in[perm_map(j)] for the axis permutation `axes`.
std::vector<double> permute_values(const std::vector<double>& in,
                                   const Shape& in_shape,
                                   const std::vector<int>& axes,
                                   Shape& out_shape) {
  const int r = static_cast<int>(in_shape.size());
  out_shape.resize(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = row_major_strides(in_shape);
  std::vector<std::int64_t> out_axis_stride(r);
  for (int i = 0; i < r; ++i) out_axis_stride[i] = in_strides[axes[i]];

  std::vector<double> out(in.size());
  std::vector<int> idx(r, 0);
  std::int64_t src = 0;
  for (std::int64_t dst = 0; dst < static_cast<std::int64_t>(in.size());
       ++dst) {
    out[dst] = in[src];
    for (int axis = r - 1; axis >= 0; --axis) {
      if (++idx[axis] < out_shape[axis]) {
        src += out_axis_stride[axis];
        break;
      }
      idx[axis] = 0;
      src -= out_axis_stride[axis] * (out_shape[axis] - 1);
    }
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  check_defined("permute", {&x});
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) fail("permute", "axes rank mismatch");
  std::vector<bool> used(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r || used[a]) fail("permute", "invalid axis permutation");
    used[a] = true;
  }
  Shape out_shape;
  std::vector<double> out = permute_values(x.data(), x.shape(), axes, out_shape);
  std::vector<int> inverse(r);
  for (int i = 0; i < r; ++i) inverse[axes[i]] = i;
  auto xn = x.node();
  Shape forward_out_shape = out_shape;
  return make_op(
      "permute", std::move(out_shape), std::move(out), {x},
      [xn, inverse, forward_out_shape](TensorNode& self) {
        if (!xn->requires_grad) return;
        Shape back_shape;
        std::vector<double> gx =
            permute_values(self.grad, forward_out_shape, inverse, back_shape);
        auto& acc = ensure_grad(*xn);
        for (std::size_t i = 0; i < gx.size(); ++i) acc[i] += gx[i];
      });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("concat", "empty input list");
  for (const Tensor& t : parts) check_defined("concat", {&t});
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) fail("concat", "axis out of range");
  Shape out_shape = parts[0].shape();
  int total_axis = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != r) fail("concat", "rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.shape()[i] != out_shape[i]) {
        fail("concat", "shape " + shape_str(t.shape()) +
                           " incompatible with " + shape_str(out_shape) +
                           " along axis " + std::to_string(axis));
      }
    }
    total_axis += t.shape()[axis];
  }
  out_shape[axis] = total_axis;

  const std::int64_t outer = outer_size(out_shape, axis);
  const std::int64_t inner = inner_size(out_shape, axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const std::int64_t block = parts[p].shape()[axis] * inner;
      const auto& src = parts[p].data();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * total_axis * inner + off,
                    src.data() + o * block, block * sizeof(double));
      }
      off += block;
    }
  }

  std::vector<std::shared_ptr<TensorNode>> pnodes;
  for (const Tensor& t : parts) pnodes.push_back(t.node());
  std::vector<int> axis_extents;
  for (const Tensor& t : parts) axis_extents.push_back(t.shape()[axis]);
  return make_op(
      "concat", std::move(out_shape), std::move(out), parts,
      [pnodes, offsets, axis_extents, outer, inner,
       total_axis](TensorNode& self) {
        for (std::size_t p = 0; p < pnodes.size(); ++p) {
          if (!pnodes[p]->requires_grad) continue;
          auto& gp = ensure_grad(*pnodes[p]);
          const std::int64_t block = axis_extents[p] * inner;
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src =
                self.grad.data() + o * total_axis * inner + offsets[p];
            double* dst = gp.data() + o * block;
            for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("stack", "empty input list");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const Tensor& t : parts) {
    Shape s = t.shape();
    if (axis < 0 || axis > static_cast<int>(s.size()))
      fail("stack", "axis out of range");
    s.insert(s.begin() + axis, 1);
    lifted.push_back(reshape(t, std::move(s)));
  }
  return concat(lifted, axis);
}

Tensor slice(const Tensor& x, int axis, int start, int count) {
  check_defined("slice", {&x});
  if (axis < 0 || axis >= x.rank()) fail("slice", "axis out of range");
  const int extent = x.shape()[axis];
  if (start < 0 || count <= 0 || start + count > extent) {
    fail("slice", "range [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") out of extent " +
                      std::to_string(extent));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = count;
  const std::int64_t outer = outer_size(x.shape(), axis);
  const std::int64_t inner = inner_size(x.shape(), axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const auto& src = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * count * inner,
                src.data() + (o * extent + start) * inner,
                count * inner * sizeof(double));
  }
  auto xn = x.node();
  return make_op("slice", std::move(out_shape), std::move(out), {x},
                 [xn, axis, start, count, outer, inner, extent](TensorNode& self) {
                   if (!xn->requires_grad) return;
                   auto& gx = ensure_grad(*xn);
                   for (std::int64_t o = 0; o < outer; ++o) {
                     const double* g = self.grad.data() + o * count * inner;
                     double* dst = gx.data() + (o * extent + start) * inner;
                     for (std::int64_t i = 0; i < count * inner; ++i)
                       dst[i] += g[i];
                   }
                 });
}

Tensor take(const Tensor& x, const std::vector<std::int64_t>& flat_indices) {
  check_defined("take", {&x});
  if (flat_indices.empty()) fail("take", "empty index list");
  std::vector<double> out(flat_indices.size());
  const auto& src = x.data();
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    const std::int64_t idx = flat_indices[i];
    if (idx < 0 || idx >= x.numel()) fail("take", "flat index out of range");
    out[i] = src[static_cast<std::size_t>(idx)];
  }
  auto xn = x.node();
  auto indices = flat_indices;
  return make_op("take", {static_cast<int>(flat_indices.size())},
                 std::move(out), {x}, [xn, indices](TensorNode& self) {
                   if (!xn->requires_grad) return;
                   auto& gx = ensure_grad(*xn);
                   for (std::size_t i = 0; i < indices.size(); ++i)
                     gx[static_cast<std::size_t>(indices[i])] += self.grad[i];
                 });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  check_defined("sum_all", {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return make_op("sum_all", {1}, {s}, {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    auto& gx = ensure_grad(*xn);
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  std::int64_t batch;  // 1 for rank-2 x rank-2
  int m, k, n;
  bool a_batched, b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  const int ra = a.rank(), rb = b.rank();
  MatmulDims d{};
  if (ra == 2 && rb == 2) {
    d = {1, a.extent(0), a.extent(1), b.extent(1), false, false};
    if (a.extent(1) != b.extent(0))
      fail("matmul", "inner extents disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  } else if (ra == 3 && rb == 2) {
    d = {a.extent(0), a.extent(1), a.extent(2), b.extent(1), true, false};
    if (a.extent(2) != b.extent(0))
      fail("matmul", "inner extents disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  } else if (ra == 3 && rb == 3) {
    if (a.extent(0) != b.extent(0))
      fail("matmul", "batch extents disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    d = {a.extent(0), a.extent(1), a.extent(2), b.extent(2), true, true};
    if (a.extent(2) != b.extent(1))
      fail("matmul", "inner extents disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  } else {
    fail("matmul", "unsupported ranks " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  }
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", {&a, &b});
  const MatmulDims d = matmul_dims(a, b);
  Shape out_shape = d.a_batched
                        ? Shape{static_cast<int>(d.batch), d.m, d.n}
                        : Shape{d.m, d.n};
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::int64_t t = 0; t < d.batch; ++t) {
    ConstMapRM A(av + t * static_cast<std::int64_t>(d.m) * d.k, d.m, d.k);
    ConstMapRM B(bv + (d.b_batched ? t * static_cast<std::int64_t>(d.k) * d.n
                                   : 0),
                 d.k, d.n);
    MapRM C(out.data() + t * static_cast<std::int64_t>(d.m) * d.n, d.m, d.n);
    C.noalias() = A * B;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [an, bn, d](TensorNode& self) {
        const double* g = self.grad.data();
        for (std::int64_t t = 0; t < d.batch; ++t) {
          ConstMapRM G(g + t * static_cast<std::int64_t>(d.m) * d.n, d.m, d.n);
          ConstMapRM A(an->value.data() + t * static_cast<std::int64_t>(d.m) * d.k,
                       d.m, d.k);
          ConstMapRM B(bn->value.data() +
                           (d.b_batched
                                ? t * static_cast<std::int64_t>(d.k) * d.n
                                : 0),
                       d.k, d.n);
          if (an->requires_grad) {
            MapRM GA(ensure_grad(*an).data() +
                         t * static_cast<std::int64_t>(d.m) * d.k,
                     d.m, d.k);
            GA.noalias() += G * B.transpose();
          }
          if (bn->requires_grad) {
            MapRM GB(ensure_grad(*bn).data() +
                         (d.b_batched
                              ? t * static_cast<std::int64_t>(d.k) * d.n
                              : 0),
                     d.k, d.n);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  check_defined("softmax", {&x});
  if (axis < 0 || axis >= x.rank()) fail("softmax", "axis out of range");
  const int extent = x.shape()[axis];
  if (extent <= 0) fail("softmax", "empty axis extent");
  const std::int64_t outer = outer_size(x.shape(), axis);
  const std::int64_t inner = inner_size(x.shape(), axis);
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      double mx = xv[base];
      for (int j = 1; j < extent; ++j)
        mx = std::max(mx, xv[base + j * inner]);
      double sum = 0.0;
      for (int j = 0; j < extent; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (int j = 0; j < extent; ++j) out[base + j * inner] /= sum;
    }
  }
  auto xn = x.node();
  return make_op(
      "softmax", x.shape(), std::move(out), {x},
      [xn, extent, outer, inner](TensorNode& self) {
        if (!xn->requires_grad) return;
        auto& gx = ensure_grad(*xn);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * extent * inner + i;
            double dot = 0.0;
            for (int j = 0; j < extent; ++j) {
              const std::int64_t p = base + j * inner;
              dot += self.grad[p] * self.value[p];
            }
            for (int j = 0; j < extent; ++j) {
              const std::int64_t p = base + j * inner;
              gx[p] += self.value[p] * (self.grad[p] - dot);
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  check_defined("layer_norm", {&x, &gamma, &beta});
  const int width = x.shape().back();
  if (gamma.rank() != 1 || gamma.extent(0) != width || beta.rank() != 1 ||
      beta.extent(0) != width) {
    fail("layer_norm", "affine parameters must be rank-1 of width " +
                           std::to_string(width));
  }
  const std::int64_t rows = x.numel() / width;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mean = 0.0;
    for (int j = 0; j < width; ++j) mean += row[j];
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) {
      const double u = row[j] - mean;
      var += u * u;
    }
    var /= width;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int j = 0; j < width; ++j) {
      const double h = (row[j] - mean) * inv;
      xhat[r * width + j] = h;
      out[r * width + j] = gv[j] * h + bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, rows, width, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode& self) {
        const auto& g = self.grad;
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* gy = g.data() + r * width;
          const double* h = xhat.data() + r * width;
          if (gn->requires_grad) {
            auto& gg = ensure_grad(*gn);
            for (int j = 0; j < width; ++j) gg[j] += gy[j] * h[j];
          }
          if (bn->requires_grad) {
            auto& gb = ensure_grad(*bn);
            for (int j = 0; j < width; ++j) gb[j] += gy[j];
          }
          if (xn->requires_grad) {
            auto& gx = ensure_grad(*xn);
            double mean_gyg = 0.0, mean_gyg_h = 0.0;
            for (int j = 0; j < width; ++j) {
              const double t = gy[j] * gn->value[j];
              mean_gyg += t;
              mean_gyg_h += t * h[j];
            }
            mean_gyg /= width;
            mean_gyg_h /= width;
            for (int j = 0; j < width; ++j) {
              const double t = gy[j] * gn->value[j];
              gx[r * width + j] +=
                  inv_std[r] * (t - mean_gyg - h[j] * mean_gyg_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int padding,
              int groups) {
  check_defined("conv1d", {&x, &w, &b});
  if (x.rank() != 3 || w.rank() != 3 || b.rank() != 1)
    fail("conv1d", "expected x[B,C,T], w[O,I,K], b[O]");
  const int batch = x.extent(0), in_ch = x.extent(1), time = x.extent(2);
  const int out_ch = w.extent(0), w_in = w.extent(1), kernel = w.extent(2);
  if (groups < 1 || in_ch % groups != 0 || out_ch % groups != 0)
    fail("conv1d", "invalid group count");
  if (w_in != in_ch / groups)
    fail("conv1d", "input channel mismatch: x has " + std::to_string(in_ch) +
                       " channels over " + std::to_string(groups) +
                       " groups, w expects " + std::to_string(w_in));
  if (b.extent(0) != out_ch) fail("conv1d", "bias extent mismatch");
  if (kernel % 2 == 0) fail("conv1d", "kernel extent must be odd");
  if (padding != (kernel - 1) / 2)
    fail("conv1d", "padding must preserve the time extent");

  const int in_per_group = in_ch / groups;
  const int out_per_group = out_ch / groups;
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  std::vector<double> out(
      static_cast<std::size_t>(batch) * out_ch * time);
  auto x_at = [&](int n, int c, int t) {
    return xv[(static_cast<std::int64_t>(n) * in_ch + c) * time + t];
  };
  auto w_at = [&](int o, int i, int k) {
    return wv[(static_cast<std::int64_t>(o) * in_per_group + i) * kernel + k];
  };
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < out_ch; ++o) {
      const int g = o / out_per_group;
      for (int t = 0; t < time; ++t) {
        double acc = bv[o];
        for (int i = 0; i < in_per_group; ++i) {
          const int c = g * in_per_group + i;
          for (int k = 0; k < kernel; ++k) {
            const int src = t + k - padding;
            if (src < 0 || src >= time) continue;
            acc += x_at(n, c, src) * w_at(o, i, k);
          }
        }
        out[(static_cast<std::int64_t>(n) * out_ch + o) * time + t] = acc;
      }
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op(
      "conv1d", {batch, out_ch, time}, std::move(out), {x, w, b},
      [xn, wn, bn, batch, in_ch, out_ch, time, kernel, padding, groups,
       in_per_group, out_per_group](TensorNode& self) {
        const auto& g = self.grad;
        auto g_at = [&](int n, int o, int t) {
          return g[(static_cast<std::int64_t>(n) * out_ch + o) * time + t];
        };
        for (int n = 0; n < batch; ++n) {
          for (int o = 0; o < out_ch; ++o) {
            const int grp = o / out_per_group;
            for (int t = 0; t < time; ++t) {
              const double go = g_at(n, o, t);
              if (bn->requires_grad) ensure_grad(*bn)[o] += go;
              for (int i = 0; i < in_per_group; ++i) {
                const int c = grp * in_per_group + i;
                for (int k = 0; k < kernel; ++k) {
                  const int src = t + k - padding;
                  if (src < 0 || src >= time) continue;
                  const std::int64_t xi =
                      (static_cast<std::int64_t>(n) * in_ch + c) * time + src;
                  const std::int64_t wi =
                      (static_cast<std::int64_t>(o) * in_per_group + i) *
                          kernel +
                      k;
                  if (xn->requires_grad)
                    ensure_grad(*xn)[xi] += go * wn->value[wi];
                  if (wn->requires_grad)
                    ensure_grad(*wn)[wi] += go * xn->value[xi];
                }
              }
            }
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int padding) {
  check_defined("conv2d", {&x, &w, &b});
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
    fail("conv2d", "expected x[B,C,H,W], w[O,I,Kh,Kw], b[O]");
  const int batch = x.extent(0), in_ch = x.extent(1);
  const int height = x.extent(2), width = x.extent(3);
  const int out_ch = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != in_ch)
    fail("conv2d", "input channel mismatch: " + std::to_string(in_ch) +
                       " vs " + std::to_string(w.extent(1)));
  if (b.extent(0) != out_ch) fail("conv2d", "bias extent mismatch");
  if (kh % 2 == 0 || kw % 2 == 0 || padding != (kh - 1) / 2 ||
      padding != (kw - 1) / 2)
    fail("conv2d", "kernel must be odd with extent-preserving padding");

  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  std::vector<double> out(static_cast<std::size_t>(batch) * out_ch * plane);
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < out_ch; ++o) {
      for (int y = 0; y < height; ++y) {
        for (int z = 0; z < width; ++z) {
          double acc = bv[o];
          for (int c = 0; c < in_ch; ++c) {
            for (int i = 0; i < kh; ++i) {
              const int sy = y + i - padding;
              if (sy < 0 || sy >= height) continue;
              for (int j = 0; j < kw; ++j) {
                const int sz = z + j - padding;
                if (sz < 0 || sz >= width) continue;
                acc += xv[((static_cast<std::int64_t>(n) * in_ch + c) * height +
                           sy) *
                              width +
                          sz] *
                       wv[((static_cast<std::int64_t>(o) * in_ch + c) * kh +
                           i) *
                              kw +
                          j];
              }
            }
          }
          out[((static_cast<std::int64_t>(n) * out_ch + o) * height + y) *
                  width +
              z] = acc;
        }
      }
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op(
      "conv2d", {batch, out_ch, height, width}, std::move(out), {x, w, b},
      [xn, wn, bn, batch, in_ch, out_ch, height, width, kh, kw,
       padding](TensorNode& self) {
        const auto& g = self.grad;
        for (int n = 0; n < batch; ++n) {
          for (int o = 0; o < out_ch; ++o) {
            for (int y = 0; y < height; ++y) {
              for (int z = 0; z < width; ++z) {
                const double go =
                    g[((static_cast<std::int64_t>(n) * out_ch + o) * height +
                       y) *
                          width +
                      z];
                if (bn->requires_grad) ensure_grad(*bn)[o] += go;
                for (int c = 0; c < in_ch; ++c) {
                  for (int i = 0; i < kh; ++i) {
                    const int sy = y + i - padding;
                    if (sy < 0 || sy >= height) continue;
                    for (int j = 0; j < kw; ++j) {
                      const int sz = z + j - padding;
                      if (sz < 0 || sz >= width) continue;
                      const std::int64_t xi =
                          ((static_cast<std::int64_t>(n) * in_ch + c) * height +
                           sy) *
                              width +
                          sz;
                      const std::int64_t wi =
                          ((static_cast<std::int64_t>(o) * in_ch + c) * kh +
                           i) *
                              kw +
                          j;
                      if (xn->requires_grad)
                        ensure_grad(*xn)[xi] += go * wn->value[wi];
                      if (wn->requires_grad)
                        ensure_grad(*wn)[wi] += go * xn->value[xi];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check_defined("attention", {&q, &k, &v});
  const bool lifted = q.rank() == 2;
  Tensor q3 = lifted ? reshape(q, {1, q.extent(0), q.extent(1)}) : q;
  Tensor k3 = lifted ? reshape(k, {1, k.extent(0), k.extent(1)}) : k;
  Tensor v3 = lifted ? reshape(v, {1, v.extent(0), v.extent(1)}) : v;
  if (q3.rank() != 3 || k3.rank() != 3 || v3.rank() != 3)
    fail("attention", "expected rank-2 or rank-3 operands");
  const int batch = q3.extent(0), n_q = q3.extent(1), width = q3.extent(2);
  const int n_k = k3.extent(1);
  if (k3.extent(0) != batch || v3.extent(0) != batch ||
      k3.extent(2) != width || v3.extent(2) != width ||
      v3.extent(1) != n_k)
    fail("attention", "operand shapes disagree: q" + shape_str(q3.shape()) +
                          " k" + shape_str(k3.shape()) + " v" +
                          shape_str(v3.shape()));
  if (heads < 1 || width % heads != 0)
    fail("attention", "feature extent " + std::to_string(width) +
                          " not divisible by " + std::to_string(heads) +
                          " heads");
  const int head_dim = width / heads;

  auto split_heads = [&](const Tensor& t, int n_tok) {
    Tensor r = reshape(t, {batch, n_tok, heads, head_dim});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {batch * heads, n_tok, head_dim});
  };
  Tensor qh = split_heads(q3, n_q);
  Tensor kh = split_heads(k3, n_k);
  Tensor vh = split_heads(v3, n_k);

  Tensor scores = scale(matmul(qh, permute(kh, {0, 2, 1})),
                        1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor weights = softmax(scores, 2);
  Tensor out = matmul(weights, vh);
  out = reshape(out, {batch, heads, n_q, head_dim});
  out = permute(out, {0, 2, 1, 3});
  out = reshape(out, {batch, n_q, width});
  return lifted ? reshape(out, {n_q, width}) : out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& loss_fn,
                  const std::vector<Tensor>& params, double eps,
                  int max_per_param) {
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.value()))
    throw std::runtime_error("duotrack::grad_check: non-finite loss");
  for (const Tensor& p : params) {
    Tensor cp = p;
    cp.clear_grad();
  }
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    analytic.push_back(p.has_grad()
                           ? p.grad()
                           : std::vector<double>(p.data().size(), 0.0));
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto& values = p.mutable_data();
    const std::size_t n = values.size();
    std::size_t checks = n;
    if (max_per_param > 0)
      checks = std::min(n, static_cast<std::size_t>(max_per_param));
    for (std::size_t k = 0; k < checks; ++k) {
      const std::size_t i = k * n / checks;
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_fn().value();
      values[i] = saved - eps;
      const double down = loss_fn().value();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::runtime_error("duotrack::grad_check: non-finite loss");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom =
          std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  for (const Tensor& p : params) {
    Tensor cp = p;
    cp.clear_grad();
  }
  return max_rel;
}

}  // namespace duotrack
