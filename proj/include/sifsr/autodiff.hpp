#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sifsr/linops.hpp"

// Reverse-mode differentiation over a fixed set of NCHW tensor operations.
// A Tape records operations in execution order; backward() walks the record
// in reverse, so every node is visited once and after all of its consumers.
namespace sifsr::ad {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tape;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  const Tape* tape = nullptr;  // null for leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

// Shared handle; copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->shape.numel(); }
  std::span<const double> values() const { return node_->value; }
  std::vector<double>& mutable_values() { return node_->value; }
  // Zero-filled when no gradient has been accumulated.
  std::vector<double> grad() const;
  std::vector<double>& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
  friend class Tape;
};

class Tape {
 public:
  // Creates the output of an operation. Values must be finite. When no parent
  // requires a gradient the result is a constant and nothing is recorded.
  Tensor record(const char* op, Shape shape, std::vector<double> value,
                const std::vector<Tensor>& parents, std::function<void(Node&)> backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate across
  // calls until zeroed.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

// ---- operations --------------------------------------------------------------

// 3x3 convolution, stride 1, replicate padding 1. weight shape is
// (out_channels, in_channels, 3, 3); bias (1, out_channels, 1, 1) or undefined.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias = {});

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), 0.0),
        running_var(static_cast<std::size_t>(channels), 1.0) {}
};

// Train mode normalizes with biased batch statistics and folds the unbiased
// variance into the running estimate; eval mode uses the running estimate.
Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool train);

// Subgradient 0 at 0.
Tensor relu(Tape& tape, const Tensor& x);
Tensor avgpool2(Tape& tape, const Tensor& x);
// Per-plane separable resampling to (out_h, out_w), pixel-center aligned.
Tensor resize(Tape& tape, const Tensor& x, int out_h, int out_w, linops::Interp interp);
Tensor upsample_bilinear2(Tape& tape, const Tensor& x);
Tensor bicubic_down(Tape& tape, const Tensor& x, int r);
// Channel concatenation of tensors with equal n, h, w.
Tensor concat(Tape& tape, const Tensor& a, const Tensor& b);
// ca * a + cb * b for equal shapes.
Tensor lincomb(Tape& tape, const Tensor& a, double ca, const Tensor& b, double cb);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double s);
// Fixed-kernel replicate correlation. Output channel c * K + k holds kernel k
// applied to input channel c.
Tensor fixed_conv(Tape& tape, const Tensor& x, const std::vector<linops::Kernel2D>& kernels);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
// sum_i x_i * w_i with constant weights w.
Tensor dot_const(Tape& tape, const Tensor& x, std::vector<double> weights);
// Mean Huber penalty of (a - b) over all elements.
Tensor huber_loss(Tape& tape, const Tensor& a, const Tensor& b, double delta);
// Mean of (a - b)^2 over all elements.
Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b);

// ---- gradient checking -----------------------------------------------------

using OpUnderTest = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Compares analytic gradients with central differences for every input
// element. Non-scalar outputs are reduced by a fixed random projection. The
// error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const OpUnderTest& op, const std::vector<Shape>& input_shapes,
                  double eps = 1e-4, std::uint64_t seed = 0);
double grad_check(const OpUnderTest& op, std::vector<std::vector<double>> inputs,
                  const std::vector<Shape>& input_shapes, double eps = 1e-4,
                  std::uint64_t seed = 0);

// ---- optimizer -------------------------------------------------------------

enum class OptimizerKind { kAdam, kSgd };

struct AdamState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update (plain gradient descent for kSgd). Moments
// are allocated on the first call and must keep their shapes afterwards.
void adam_step(std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, AdamState& state);
// Updates tensor values in place from their accumulated gradients.
void adam_step(std::vector<Tensor>& params, AdamState& state);

// ---- checkpoints -----------------------------------------------------------

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

// JSON manifest at `path` plus a little-endian float64 payload next to it
// (same stem, ".bin").
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays,
                     const nlohmann::json& extra = nlohmann::json::object());
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path,
                                        nlohmann::json* extra = nullptr);

}  // namespace sifsr::ad
