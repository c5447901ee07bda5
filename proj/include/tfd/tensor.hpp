#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace tfd {

// Dense rank-4 tensor, row-major (batch, height, width, channels), double
// precision. Channels are the fastest-moving axis so per-channel temporal
// gathers are stride-1. Convolution kernels reuse the same container with
// the dims read as (kh, kw, cin, cout).
struct Shape {
  int b = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::int64_t numel() const { return static_cast<std::int64_t>(b) * h * w * c; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dimension mismatch carrying the name of the offending axis.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(std::string axis, const std::string& message);
  const std::string& axis() const { return axis_; }

 private:
  std::string axis_;
};

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(const Shape& s, bool requires_grad = false);

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double value);
  static Tensor from(const Shape& s, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->shape.numel(); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  std::int64_t index(int b, int y, int x, int c) const {
    const Shape& s = node_->shape;
    return ((static_cast<std::int64_t>(b) * s.h + y) * s.w + x) * s.c + c;
  }
  double at(int b, int y, int x, int c) const { return node_->data[index(b, y, x, c)]; }
  double& at(int b, int y, int x, int c) { return node_->data[index(b, y, x, c)]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<double>& grad();  // allocated as zeros on first use
  void zero_grad();

  Tensor clone() const;  // deep copy of data, grad not copied
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. Records are replayed strictly in reverse order of
// forward execution; gradients accumulate additively when a tensor feeds
// several consumers. Single-owner: one tape per training step, one thread.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Makes the tape the active recording target for the current thread.
  class Scope {
   public:
    explicit Scope(GradTape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    GradTape* previous_;
  };

  // Suspends recording (used inside finite-difference probes).
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    GradTape* previous_;
  };

  static GradTape* current();

  void record(const Tensor& output, std::function<void(const std::vector<double>&)> backward);
  void backward(const Tensor& loss);
  std::size_t num_records() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  struct Record {
    std::shared_ptr<detail::TensorNode> output;
    std::function<void(const std::vector<double>&)> backward;
  };
  std::vector<Record> records_;
};

enum class Padding { Same, Valid };

// kernel dims are (kh, kw, cin, cout); bias is (1, 1, 1, cout).
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              Padding padding);
Tensor relu(const Tensor& input);
Tensor maxpool2(const Tensor& input);
Tensor upsample_nearest2(const Tensor& input);
Tensor concat_channels(const std::vector<Tensor>& inputs);
// Output channel j holds channel `channel` of inputs[j], temporal order kept.
Tensor gather_channel(const std::vector<Tensor>& inputs, int channel);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& input, double factor);
Tensor reduce_sum(const Tensor& input);  // -> (1,1,1,1)

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// With max_coords > 0 a deterministic subset of coordinates is probed, which
// keeps the cost of checking large inputs bounded.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  int max_coords = 0);

}  // namespace tfd
