#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN/Inf or an input is outside an op's domain.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node;
class GradSink;

using BackwardFn =
    std::function<void(const Node& self, std::span<const double> grad_out, GradSink& sink)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  // Accumulated gradient of a leaf, filled by glab::backward().
  std::vector<double> grad;
};

/// Per-pass gradient buffers. Hands out a zero-initialised buffer for each
/// input that lies on a path to a requested leaf, and nullptr otherwise.
class GradSink {
 public:
  virtual ~GradSink() = default;
  virtual std::vector<double>* slot(const Node& self, std::size_t input) = 0;
};

}  // namespace detail

/// Dense row-major float64 tensor taking part in a reverse-mode gradient tape.
///
/// A Tensor is a cheap handle onto an immutable node; ops produce new nodes and
/// record their inputs when any input requires a gradient. Leaves created with
/// requires_grad act as parameters: their grad is filled by backward().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;

  /// Gradient of a leaf after backward(); all zeros when none was accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  /// In-place access for optimizers and initialisers. Leaves only.
  std::vector<double>& mutable_data();
  std::vector<double>& mutable_grad();

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { add, sub, mul, div, neg, exp, log, sqrt, clamp_min };

/// Binary ops broadcast over trailing dimensions (numpy rules). Unary ops
/// ignore `b`. clamp_min clamps `a` from below at the scalar `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = Tensor());

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor square(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator-(const Tensor& a, double s);

Shape broadcast_shape(const Shape& a, const Shape& b);

// ---------------------------------------------------------------------------
// Linear algebra and convolution

Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation (no kernel flip). Input is [C,H,W] or [B,C,H,W], kernel
/// [O,C,KH,KW] with odd extents. Output spatial extent is
/// H + 2*padding - dilation*(KH-1).
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t padding,
              std::size_t dilation = 1);

// ---------------------------------------------------------------------------
// Activations and reductions

Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

/// Mean of `a` over positions where the broadcast `mask` is 1. The mask is a
/// constant; it must be binary and have at least one active element.
Tensor masked_mean(const Tensor& a, const Tensor& mask);

Tensor reshape(const Tensor& a, Shape shape);

/// Inverted dropout with an explicit generator; identity when rate == 0.
Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Gradients

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& root);

/// Returns d(root)/d(input) for each input without touching any leaf's stored
/// grad. Inputs the root does not depend on get an all-zero gradient.
std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& inputs);

/// RAII scope in which ops record no tape entries on the current thread.
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

}  // namespace glab
