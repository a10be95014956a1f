#include "glab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace glab {

namespace {

using detail::GradSink;
using detail::Node;
using NodePtr = std::shared_ptr<Node>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite output");
    }
  }
}

/// Builds the output node of an op; records the tape entry only when some
/// input requires grad and recording is enabled.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<NodePtr> inputs, detail::BackwardFn backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = next_id();
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const NodePtr& need(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
  return t.node();
}

// Maps every output element onto its source element in a and b.
struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_idx;
  std::vector<std::size_t> b_idx;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b);
  if (a == b) {
    plan.same = true;
    return plan;
  }
  const auto sa = broadcast_strides(a, plan.out);
  const auto sb = broadcast_strides(b, plan.out);
  const std::size_t n = shape_numel(plan.out);
  plan.a_idx.resize(n);
  plan.b_idx.resize(n);
  std::vector<std::size_t> counter(plan.out.size(), 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.a_idx[i] = ia;
    plan.b_idx[i] = ib;
    for (std::size_t d = plan.out.size(); d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < plan.out[d]) break;
      ia -= sa[d] * counter[d];
      ib -= sb[d] * counter[d];
      counter[d] = 0;
    }
  }
  return plan;
}

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Tensor unary(const char* op, const Tensor& a, const std::function<double(double)>& f,
             std::function<double(double x, double y)> df) {
  const auto& na = need(a, op);
  std::vector<double> out(na->data.size());
  std::transform(na->data.begin(), na->data.end(), out.begin(), f);
  return make_result(op, na->shape, std::move(out), {na},
                     [df = std::move(df)](const Node& self, std::span<const double> g,
                                          GradSink& sink) {
                       auto* ga = sink.slot(self, 0);
                       if (!ga) return;
                       const auto& x = self.inputs[0]->data;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         (*ga)[i] += g[i] * df(x[i], self.data[i]);
                       }
                     });
}

Tensor binary(ElementwiseOp kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* op = names[static_cast<int>(kind)];
  const auto& na = need(a, op);
  const auto& nb = need(b, op);
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(na->shape, nb->shape));
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> out(n);
  const double* pa = na->data.data();
  const double* pb = nb->data.data();
  auto apply = [&](auto fn) {
    if (plan->same) {
      for (std::size_t i = 0; i < n; ++i) out[i] = fn(pa[i], pb[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = fn(pa[plan->a_idx[i]], pb[plan->b_idx[i]]);
    }
  };
  switch (kind) {
    case ElementwiseOp::add: apply([](double x, double y) { return x + y; }); break;
    case ElementwiseOp::sub: apply([](double x, double y) { return x - y; }); break;
    case ElementwiseOp::mul: apply([](double x, double y) { return x * y; }); break;
    case ElementwiseOp::div: apply([](double x, double y) { return x / y; }); break;
    default: throw std::logic_error("binary: not a binary op");
  }
  Shape out_shape = plan->out;
  return make_result(
      op, std::move(out_shape), std::move(out), {na, nb},
      [kind, plan](const Node& self, std::span<const double> g, GradSink& sink) {
        const auto& xa = self.inputs[0]->data;
        const auto& xb = self.inputs[1]->data;
        auto ia = [&](std::size_t i) { return plan->same ? i : plan->a_idx[i]; };
        auto ib = [&](std::size_t i) { return plan->same ? i : plan->b_idx[i]; };
        if (auto* ga = sink.slot(self, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            double d = 1.0;
            if (kind == ElementwiseOp::mul) d = xb[ib(i)];
            if (kind == ElementwiseOp::div) d = 1.0 / xb[ib(i)];
            (*ga)[ia(i)] += g[i] * d;
          }
        }
        if (auto* gb = sink.slot(self, 1)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            double d = 1.0;
            if (kind == ElementwiseOp::sub) d = -1.0;
            if (kind == ElementwiseOp::mul) d = xa[ia(i)];
            if (kind == ElementwiseOp::div) {
              const double y = xb[ib(i)];
              d = -xa[ia(i)] / (y * y);
            }
            (*gb)[ib(i)] += g[i] * d;
          }
        }
      });
}

// -- backward engine --------------------------------------------------------

class MapSink final : public GradSink {
 public:
  explicit MapSink(const std::unordered_map<const Node*, bool>& needed) : needed_(needed) {}

  std::vector<double>* slot(const Node& self, std::size_t input) override {
    const Node* in = self.inputs.at(input).get();
    auto it = needed_.find(in);
    if (it == needed_.end() || !it->second) return nullptr;
    return &buffer(in);
  }

  std::vector<double>& buffer(const Node* n) {
    auto [it, inserted] = buffers_.try_emplace(n);
    if (inserted) it->second.assign(n->data.size(), 0.0);
    return it->second;
  }

  std::vector<double>* find(const Node* n) {
    auto it = buffers_.find(n);
    return it == buffers_.end() ? nullptr : &it->second;
  }

 private:
  const std::unordered_map<const Node*, bool>& needed_;
  std::unordered_map<const Node*, std::vector<double>> buffers_;
};

/// Runs the reverse sweep from a scalar root. `is_target` marks the leaves
/// whose gradients are wanted; only nodes on a path to one are visited.
/// Returns the sink holding the gradient buffers.
template <typename IsTarget>
std::unique_ptr<MapSink> run_backward(const Tensor& root,
                                      std::unordered_map<const Node*, bool>& needed,
                                      IsTarget is_target) {
  const auto& rn = need(root, "backward");
  if (rn->data.size() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(rn->shape));
  }
  // Collect the recorded subgraph.
  std::vector<const Node*> order;
  std::vector<const Node*> stack{rn.get()};
  std::unordered_map<const Node*, bool> seen;
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.try_emplace(n, true).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  // Ids increase from producer to consumer, so ascending id is topological.
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id < b->id; });
  for (const Node* n : order) {
    bool on_path = is_target(n);
    for (const auto& in : n->inputs) {
      if (in->id >= n->id) throw std::logic_error("backward: tape is not topologically ordered");
      auto it = needed.find(in.get());
      on_path = on_path || (it != needed.end() && it->second);
    }
    needed[n] = on_path;
  }
  auto sink = std::make_unique<MapSink>(needed);
  if (!needed[rn.get()]) return sink;
  sink->buffer(rn.get())[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* n = *it;
    if (!needed[n] || !n->backward) continue;
    auto* g = sink->find(n);
    if (!g) continue;
    n->backward(*n, *g, *sink);
  }
  return sink;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->id = next_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return need(*this, "shape")->shape; }
std::size_t Tensor::numel() const { return need(*this, "numel")->data.size(); }
std::span<const double> Tensor::data() const { return need(*this, "data")->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }

std::vector<double> Tensor::grad() const {
  const auto& n = need(*this, "grad");
  if (n->grad.empty()) return std::vector<double>(n->data.size(), 0.0);
  return n->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

std::vector<double>& Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data: only leaves may be modified in place");
  return node_->data;
}

std::vector<double>& Tensor::mutable_grad() {
  if (!is_leaf()) throw std::logic_error("mutable_grad: only leaves hold gradients");
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const {
  const auto& n = need(*this, "detach");
  return Tensor(n->shape, n->data, false);
}

Tensor Tensor::clone() const {
  const auto& n = need(*this, "clone");
  return Tensor(n->shape, n->data, n->requires_grad && !n->backward);
}

// ---------------------------------------------------------------------------

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case ElementwiseOp::add:
    case ElementwiseOp::sub:
    case ElementwiseOp::mul:
    case ElementwiseOp::div:
      return binary(op, a, b);
    case ElementwiseOp::neg:
      return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
    case ElementwiseOp::exp:
      return unary("exp", a, [](double x) { return std::exp(x); },
                   [](double, double y) { return y; });
    case ElementwiseOp::log:
      for (double x : need(a, "log")->data) {
        if (!(x > 0.0)) throw NumericError("log: input must be strictly positive");
      }
      return unary("log", a, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
    case ElementwiseOp::sqrt:
      for (double x : need(a, "sqrt")->data) {
        if (!(x > 0.0)) throw NumericError("sqrt: input must be strictly positive");
      }
      return unary("sqrt", a, [](double x) { return std::sqrt(x); },
                   [](double, double y) { return 0.5 / y; });
    case ElementwiseOp::clamp_min: {
      if (!b.defined() || b.numel() != 1) throw ShapeError("clamp_min: bound must be a scalar");
      const double lo = b.item();
      return unary("clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
                   [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
    }
  }
  throw std::logic_error("elementwise: unknown op");
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(ElementwiseOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(ElementwiseOp::div, a, b); }
Tensor neg(const Tensor& a) { return elementwise(ElementwiseOp::neg, a); }
Tensor exp(const Tensor& a) { return elementwise(ElementwiseOp::exp, a); }
Tensor log(const Tensor& a) { return elementwise(ElementwiseOp::log, a); }
Tensor sqrt(const Tensor& a) { return elementwise(ElementwiseOp::sqrt, a); }
Tensor clamp_min(const Tensor& a, double lo) {
  return elementwise(ElementwiseOp::clamp_min, a, Tensor::scalar(lo));
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& na = need(a, "matmul");
  const auto& nb = need(b, "matmul");
  if (na->shape.size() != 2 || nb->shape.size() != 2 || na->shape[1] != nb->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(na->shape) + " and " +
                     shape_str(nb->shape));
  }
  const auto m = na->shape[0];
  const auto k = na->shape[1];
  const auto n = nb->shape[1];
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(na->data.data(), m, k) * ConstMatMap(nb->data.data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {na, nb},
                     [m, k, n](const Node& self, std::span<const double> g, GradSink& sink) {
                       ConstMatMap gm(g.data(), m, n);
                       if (auto* ga = sink.slot(self, 0)) {
                         MatMap(ga->data(), m, k).noalias() +=
                             gm * ConstMatMap(self.inputs[1]->data.data(), k, n).transpose();
                       }
                       if (auto* gb = sink.slot(self, 1)) {
                         MatMap(gb->data(), k, n).noalias() +=
                             ConstMatMap(self.inputs[0]->data.data(), m, k).transpose() * gm;
                       }
                     });
}

namespace {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, pad, dil, ho, wo;
  std::size_t rows() const { return cin * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

/// Output columns [lo, hi) whose input column ox + off lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_cols(std::ptrdiff_t off, const ConvGeometry& g) {
  const auto wo = static_cast<std::ptrdiff_t>(g.wo);
  const auto w = static_cast<std::ptrdiff_t>(g.w);
  const auto lo = std::clamp<std::ptrdiff_t>(-off, 0, wo);
  const auto hi = std::clamp<std::ptrdiff_t>(w - off, lo, wo);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void im2col(const double* img, const ConvGeometry& g, double* col) {
  const auto P = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        const auto off = static_cast<std::ptrdiff_t>(kx * g.dil) - pad;
        const auto [lo, hi] = valid_cols(off, g);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky * g.dil) - pad;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, 0.0);
          std::copy(src + static_cast<std::ptrdiff_t>(lo) + off,
                    src + static_cast<std::ptrdiff_t>(hi) + off, dst + lo);
          std::fill(dst + hi, dst + g.wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
  const auto P = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
        const auto off = static_cast<std::ptrdiff_t>(kx * g.dil) - pad;
        const auto [lo, hi] = valid_cols(off, g);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ky * g.dil) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox) + off] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t padding,
              std::size_t dilation) {
  const auto& ni = need(input, "conv2d");
  const auto& nk = need(kernel, "conv2d");
  const auto& is = ni->shape;
  const auto& ks = nk->shape;
  if ((is.size() != 3 && is.size() != 4) || ks.size() != 4) {
    throw ShapeError("conv2d: expected [C,H,W] or [B,C,H,W] input and [O,C,KH,KW] kernel, got " +
                     shape_str(is) + " and " + shape_str(ks));
  }
  if (dilation == 0) throw std::invalid_argument("conv2d: dilation must be positive");
  const bool batched = is.size() == 4;
  ConvGeometry g{};
  g.batch = batched ? is[0] : 1;
  g.cin = is[batched ? 1 : 0];
  g.h = is[batched ? 2 : 1];
  g.w = is[batched ? 3 : 2];
  g.cout = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  g.pad = padding;
  g.dil = dilation;
  if (ks[1] != g.cin) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(g.cin) +
                     " channels, kernel expects " + std::to_string(ks[1]));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  const auto span_h = dilation * (g.kh - 1);
  const auto span_w = dilation * (g.kw - 1);
  if (g.h + 2 * padding <= span_h || g.w + 2 * padding <= span_w) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.ho = g.h + 2 * padding - span_h;
  g.wo = g.w + 2 * padding - span_w;

  const auto K = g.rows();
  const auto P = g.cols();
  std::vector<double> out(g.batch * g.cout * P);
  const std::unique_ptr<double[]> col(new double[K * P]);
  ConstMatMap wmat(nk->data.data(), g.cout, K);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(ni->data.data() + b * g.cin * g.h * g.w, g, col.get());
    MatMap(out.data() + b * g.cout * P, g.cout, P).noalias() = wmat * ConstMatMap(col.get(), K, P);
  }
  Shape out_shape = batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  return make_result(
      "conv2d", std::move(out_shape), std::move(out), {ni, nk},
      [g](const Node& self, std::span<const double> grad_out, GradSink& sink) {
        auto* gi = sink.slot(self, 0);
        auto* gk = sink.slot(self, 1);
        const auto K = g.rows();
        const auto P = g.cols();
        const auto& in = self.inputs[0]->data;
        ConstMatMap wmat(self.inputs[1]->data.data(), g.cout, K);
        const std::unique_ptr<double[]> col(new double[K * P]);
        for (std::size_t b = 0; b < g.batch; ++b) {
          ConstMatMap go(grad_out.data() + b * g.cout * P, g.cout, P);
          if (gk) {
            im2col(in.data() + b * g.cin * g.h * g.w, g, col.get());
            MatMap(gk->data(), g.cout, K).noalias() +=
                go * ConstMatMap(col.get(), K, P).transpose();
          }
          if (gi) {
            MatMap(col.get(), K, P).noalias() = wmat.transpose() * go;
            col2im(col.get(), g, gi->data() + b * g.cin * g.h * g.w);
          }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary("silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto& na = need(a, "softmax");
  const auto s = split_axis(na->shape, axis, "softmax");
  std::vector<double> out(na->data.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = na->data[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, na->data[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double e = std::exp(na->data[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  return make_result("softmax", na->shape, std::move(out), {na},
                     [s](const Node& self, std::span<const double> g, GradSink& sink) {
                       auto* ga = sink.slot(self, 0);
                       if (!ga) return;
                       const auto& y = self.data;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.len * s.inner + i;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < s.len; ++k) {
                             dot += g[base + k * s.inner] * y[base + k * s.inner];
                           }
                           for (std::size_t k = 0; k < s.len; ++k) {
                             const auto j = base + k * s.inner;
                             (*ga)[j] += y[j] * (g[j] - dot);
                           }
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto& na = need(a, "log_softmax");
  const auto s = split_axis(na->shape, axis, "log_softmax");
  std::vector<double> out(na->data.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = na->data[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, na->data[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(na->data[base + k * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) {
        out[base + k * s.inner] = na->data[base + k * s.inner] - lse;
      }
    }
  }
  return make_result("log_softmax", na->shape, std::move(out), {na},
                     [s](const Node& self, std::span<const double> g, GradSink& sink) {
                       auto* ga = sink.slot(self, 0);
                       if (!ga) return;
                       const auto& y = self.data;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.len * s.inner + i;
                           double total = 0.0;
                           for (std::size_t k = 0; k < s.len; ++k) total += g[base + k * s.inner];
                           for (std::size_t k = 0; k < s.len; ++k) {
                             const auto j = base + k * s.inner;
                             (*ga)[j] += g[j] - std::exp(y[j]) * total;
                           }
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  const auto& na = need(a, "sum");
  const double total = std::accumulate(na->data.begin(), na->data.end(), 0.0);
  return make_result("sum", {1}, {total}, {na},
                     [](const Node& self, std::span<const double> g, GradSink& sink) {
                       if (auto* ga = sink.slot(self, 0)) {
                         for (auto& x : *ga) x += g[0];
                       }
                     });
}

Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto& na = need(a, "sum");
  const auto s = split_axis(na->shape, axis, "sum");
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.len; ++k) {
      const double* src = na->data.data() + (o * s.len + k) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  Shape shape = na->shape;
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape.push_back(1);
  }
  return make_result("sum_axis", std::move(shape), std::move(out), {na},
                     [s](const Node& self, std::span<const double> g, GradSink& sink) {
                       auto* ga = sink.slot(self, 0);
                       if (!ga) return;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t k = 0; k < s.len; ++k) {
                           double* dst = ga->data() + (o * s.len + k) * s.inner;
                           const double* src = g.data() + o * s.inner;
                           for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto len = split_axis(a.shape(), axis, "mean").len;
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor masked_mean(const Tensor& a, const Tensor& mask) {
  const auto& na = need(a, "masked_mean");
  const auto& nm = need(mask, "masked_mean");
  for (double m : nm->data) {
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("masked_mean: mask must be binary");
  }
  const Shape out = broadcast_shape(na->shape, nm->shape);
  if (out != na->shape) {
    throw ShapeError("masked_mean: mask " + shape_str(nm->shape) + " must broadcast to " +
                     shape_str(na->shape));
  }
  const auto plan = plan_broadcast(na->shape, nm->shape);
  double count = 0.0;
  std::vector<double> weights(na->data.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = nm->data[plan.same ? i : plan.b_idx[i]];
    count += weights[i];
  }
  if (count == 0.0) throw std::invalid_argument("masked_mean: empty mask");
  for (auto& w : weights) w /= count;
  return sum(mul(a, Tensor(na->shape, std::move(weights))));
}

Tensor reshape(const Tensor& a, Shape shape) {
  const auto& na = need(a, "reshape");
  if (shape_numel(shape) != na->data.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(na->shape) + " as " + shape_str(shape));
  }
  return make_result("reshape", std::move(shape), na->data, {na},
                     [](const Node& self, std::span<const double> g, GradSink& sink) {
                       if (auto* ga = sink.slot(self, 0)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                       }
                     });
}

Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return a;
  // Keep test on the top 53 bits of each draw, a uniform in [0,1).
  std::vector<double> mask(a.numel());
  const double s = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = static_cast<double>(rng() >> 11) * 0x1.0p-53 < 1.0 - rate ? s : 0.0;
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------

void backward(const Tensor& root) {
  std::unordered_map<const Node*, bool> needed;
  auto sink = run_backward(root, needed, [](const Node* n) { return !n->backward; });
  for (const auto& [node, on_path] : needed) {
    if (!on_path || node->backward) continue;
    auto* g = sink->find(node);
    if (!g) continue;
    auto* leaf = const_cast<Node*>(node);
    if (leaf->grad.empty()) leaf->grad.assign(leaf->data.size(), 0.0);
    for (std::size_t i = 0; i < g->size(); ++i) leaf->grad[i] += (*g)[i];
  }
}

std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& inputs) {
  std::unordered_map<const Node*, bool> targets;
  for (const auto& in : inputs) targets[need(in, "grad").get()] = true;
  std::unordered_map<const Node*, bool> needed;
  auto sink = run_backward(root, needed, [&](const Node* n) { return targets.count(n) > 0; });
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto* g = sink->find(in.node().get());
    out.emplace_back(in.shape(),
                     g ? *g : std::vector<double>(in.numel(), 0.0));
  }
  return out;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace glab
