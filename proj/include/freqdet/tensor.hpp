// Dense rank-4 tensor with a recording tape for reverse-mode differentiation.
// Layout is always (batch, channels, height, width), row-major with width
// fastest. Storage is double precision; gradients live in an optional slot
// next to the data and accumulate additively across backward passes.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace freqdet {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double value);
  static Tensor from_values(const Shape& s, std::vector<double> values);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::int64_t numel() const { return s_->shape.numel(); }

  std::span<const double> data() const { return s_->data; }
  // In-place access for parameter updates and finite-difference probes.
  // Must not be used on a tensor already consumed by a recording graph.
  std::span<double> mutable_data() { return s_->data; }

  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
  double scalar() const;

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    s_->requires_grad = v;
    return *this;
  }

  // Gradient slot; materializes zeros for a requires_grad tensor that never
  // received a gradient (an unreachable leaf has zero gradient by contract).
  std::span<const double> grad() const;
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad() { s_->grad.clear(); }

  std::shared_ptr<detail::Storage> storage() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<detail::Storage> s_;
  friend Tensor wrap_storage(std::shared_ptr<detail::Storage>);
};

Tensor wrap_storage(std::shared_ptr<detail::Storage> s);

// Recording tape. Constructing a Graph makes it the active tape for the
// current thread; ops executed while it is active register backward rules.
// backward() may run exactly once and stops the recording.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Accumulates gradients of `loss` (scalar, shape (1,1,1,1)) into every
  // requires_grad tensor that participated in this tape.
  void backward(const Tensor& loss);

  void record(std::shared_ptr<detail::Storage> output, std::function<void()> pull);

  std::size_t size() const { return entries_.size(); }
  static Graph* active();

 private:
  void deactivate();

  struct Entry {
    std::shared_ptr<detail::Storage> output;
    std::function<void()> pull;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool on_stack_ = false;
};

// Scope guard that suspends recording (pushes a null tape).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// ---- elementwise arithmetic ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
// out = s * x where s is a learned scalar tensor of shape (1,1,1,1).
Tensor mul_scalar_t(const Tensor& x, const Tensor& s);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor pow(const Tensor& x, double p);
Tensor clamp_min(const Tensor& x, double lo);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x);   // -> (1,1,1,1)
Tensor mean(const Tensor& x);  // -> (1,1,1,1)

// ---- movement --------------------------------------------------------------

Tensor concat_channels(std::span<const Tensor> parts);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::int64_t> sizes);
Tensor reshape(const Tensor& x, const Shape& s);
// Picks rows along the height axis: out(n,c,k,w) = x(n,c,idx[k],w).
Tensor gather_h(const Tensor& x, std::span<const std::int64_t> idx);
Tensor slice_batch(const Tensor& x, std::int64_t i);
// out(n,c,h,w) = x(n,c,h,w) * gain(n,c,0,0); gain has shape (n,c,1,1).
Tensor scale_channels(const Tensor& x, const Tensor& gain);

}  // namespace freqdet
