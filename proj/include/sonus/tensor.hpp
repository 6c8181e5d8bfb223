// tensor.hpp: dense row-major tensors with reverse-mode differentiation.
//
// Design notes:
//  * Storage is always double; f32-mode tensors are rounded through IEEE
//    float after every op (values stay exactly f32-representable).
//  * Autograd is a tape of closures. Ops record onto the thread-local
//    active tape (see TapeScope); with no active tape everything runs in
//    pure inference mode.
//  * Backward closures work on raw buffers (first order only). The one
//    place that needs a differentiable gradient -- the R1 penalty -- builds
//    it explicitly from conv2d_vjp_input (see codec.hpp).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sonus/common.hpp"

namespace sonus {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;  // allocated on first accumulation
  DType dtype = DType::f32;
  bool requires_grad = false;

  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::f32);
  static Tensor full(Shape shape, double value, DType dt = DType::f32);
  static Tensor from(Shape shape, std::vector<double> values, DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32);
  static Tensor randn(Rng& rng, Shape shape, double stddev = 1.0, DType dt = DType::f32);
  static Tensor uniform(Rng& rng, Shape shape, double lo, double hi, DType dt = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int i) const;
  std::int64_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  double item() const;  // rank-0 or single-element only
  double at(std::initializer_list<std::int64_t> idx) const;
  std::span<const double> data() const;
  std::span<double> mutable_data();  // in-place parameter updates only

  bool has_grad() const;
  std::span<const double> grad() const;  // throws if absent; see has_grad
  void zero_grad();
  void accumulate_grad(std::span<const double> g);

  Tensor detach() const;    // shares nothing; requires_grad = false
  Tensor clone() const;     // deep copy, same flags
  Tensor to(DType dt) const;

  std::uint64_t bits_hash() const;  // over raw double bits, for bit-identity tests

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure exactly once,
  // in reverse order. The tape is cleared afterwards.
  void backward(const Tensor& loss);

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::size_t num_ops() const { return ops_.size(); }

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> ops_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Ops. All shapes are documented per op; every op validates them and, when
// finite checks are enabled, validates output finiteness.
// ---------------------------------------------------------------------------

// Elementwise. `add`/`sub`/`mul` accept equal shapes, or a rank-1 rhs whose
// length equals the lhs's last dimension (row broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor silu(const Tensor& a);

// Reductions.
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);  // [..., d] -> [...]

// Shape manipulation (always materialized copies).
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor split_heads(const Tensor& a, std::int64_t heads);  // [T, h*d] -> [h, T, d]
Tensor merge_heads(const Tensor& a);                      // [h, T, d] -> [T, h*d]

// Linear algebra / NN primitives.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& a, double eps = 1e-5);  // over last dim, no affine
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& idx);

// scaled dot-product attention; q,k,v are [h, T, d_h] (k/v share T_k).
// mask, if given, is [T_q, T_k] and added to the logits.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor& mask = Tensor());

// 1-D convolution (cross-correlation convention), x [C_in, T],
// w [C_out, C_in, k] -> [C_out, T'], T' = floor((T + 2p - k)/s) + 1.
Tensor conv1d(const Tensor& x, const Tensor& w, int stride, int padding);
// Transposed 1-D convolution, x [C_in, T], w [C_in, C_out, k] ->
// [C_out, (T-1)*s - 2p + k].
Tensor conv1d_transposed(const Tensor& x, const Tensor& w, int stride, int padding);
// Depthwise 1-D convolution with same-padding, x [C, T], w [C, k] -> [C, T].
Tensor depthwise_conv1d_same(const Tensor& x, const Tensor& w);

// 2-D convolution, x [C_in, H, W], w [C_out, C_in, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
// Differentiable input-VJP of conv2d: given go [C_out, Ho, Wo] returns
// d(conv2d(x,w))/dx contracted with go, shape [C_in, H, W]. Used to express
// input gradients (R1) as part of the forward graph.
Tensor conv2d_vjp_input(const Tensor& go, const Tensor& w, int stride, int padding,
                        std::int64_t in_h, std::int64_t in_w);

// Average pooling over the last (time) axis of [C, H, W] by an integer
// factor (floor semantics), and its linear adjoint.
Tensor avg_pool_w(const Tensor& x, int factor);
Tensor avg_unpool_w(const Tensor& g, int factor, std::int64_t out_w);

// Bias addition broadcast over all trailing dims: x [C, ...] + b [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

}  // namespace sonus
