#include "sonus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sonus {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (!grad) grad.emplace(data.size(), 0.0);
  return *grad;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dt) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->dtype = dt;
  return impl;
}

void round_f32(TensorImpl& t) {
  if (t.dtype != DType::f32) return;
  for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

void check_finite(const TensorImpl& t, const char* op) {
  if (!finite_checks_enabled()) return;
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

// Rounds to dtype and validates finiteness; call on every op output.
Tensor finalize(Tensor out, const char* op) {
  round_f32(*out.impl());
  check_finite(*out.impl(), op);
  return out;
}

DType promote(const Tensor& a, const Tensor& b) {
  return (a.dtype() == DType::f64 || b.dtype() == DType::f64) ? DType::f64 : DType::f32;
}

bool tape_wants(std::initializer_list<const Tensor*> ins) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : ins) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void need(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

thread_local Tape* t_active_tape = nullptr;

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, DType dt) { return wrap(make_impl(std::move(shape), dt)); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  auto t = zeros(std::move(shape), dt);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  round_f32(*t.impl_);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dt) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->dtype = dt;
  round_f32(*impl);
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::randn(Rng& rng, Shape shape, double stddev, DType dt) {
  auto t = zeros(std::move(shape), dt);
  for (auto& v : t.impl_->data) v = rng.normal() * stddev;
  round_f32(*t.impl_);
  return t;
}

Tensor Tensor::uniform(Rng& rng, Shape shape, double lo, double hi, DType dt) {
  auto t = zeros(std::move(shape), dt);
  for (auto& v : t.impl_->data) v = rng.uniform(lo, hi);
  round_f32(*t.impl_);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("shape() on undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) {
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

DType Tensor::dtype() const {
  if (!impl_) throw ContractError("dtype() on undefined tensor");
  return impl_->dtype;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!impl_) throw ContractError("set_requires_grad on undefined tensor");
  impl_->requires_grad = v;
  return *this;
}

double Tensor::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw ShapeError("item() requires a single-element tensor");
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : idx) {
    if (v < 0 || v >= s[i]) throw ShapeError("at(): index out of range");
    flat = flat * s[i] + v;
    ++i;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("data() on undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("mutable_data() on undefined tensor");
  return impl_->data;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.has_value(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw ContractError("grad() on undefined tensor");
  if (!impl_->requires_grad) throw ContractError("grad() on tensor without requires_grad");
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (impl_ && impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) {
  auto& gr = impl_->ensure_grad();
  if (g.size() != gr.size()) throw ShapeError("accumulate_grad: size mismatch");
  for (std::size_t i = 0; i < gr.size(); ++i) gr[i] += g[i];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  impl->dtype = impl_->dtype;
  impl->requires_grad = false;
  return wrap(std::move(impl));
}

Tensor Tensor::clone() const {
  auto t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::to(DType dt) const {
  auto t = detach();
  t.impl_->dtype = dt;
  round_f32(*t.impl_);
  return t;
}

std::uint64_t Tensor::bits_hash() const {
  if (!impl_) return 0;
  return fnv1a(impl_->data.data(), impl_->data.size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::active() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to this tape");
  }
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n,
             const double* A, const double* B, double* C) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    const double* arow = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double a = arow[p];
      const double* brow = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::int64_t m, std::int64_t k, std::int64_t n,
             const double* A, const double* B, double* C) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::int64_t m, std::int64_t k, std::int64_t n,
             const double* A, const double* B, double* C) {
  for (std::int64_t p = 0; p < k; ++p) {
    const double* arow = A + p * m;
    const double* brow = B + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double a = arow[i];
      double* crow = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

struct Conv2dDims {
  std::int64_t ci, h, w;    // input
  std::int64_t co, kh, kw;  // kernel
  std::int64_t ho, wo;      // output
  int stride, pad;
};

// y[co,ho,wo] += sum_{ci,kh,kw} x[ci, oy*s+ky-p, ox*s+kx-p] * w[co,ci,ky,kx]
void conv2d_fwd_kernel(const Conv2dDims& d, const double* x, const double* w, double* y) {
  for (std::int64_t co = 0; co < d.co; ++co) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      const double* wk = w + ((co * d.ci) + ci) * d.kh * d.kw;
      const double* xc = x + ci * d.h * d.w;
      double* yc = y + co * d.ho * d.wo;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t kx = 0; kx < d.kw; ++kx) {
          const double wv = wk[ky * d.kw + kx];
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            const double* xrow = xc + iy * d.w;
            double* yrow = yc + oy * d.wo;
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const std::int64_t ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              yrow[ox] += wv * xrow[ix];
            }
          }
        }
      }
    }
  }
}

// gx[ci,iy,ix] += sum go[co,oy,ox] * w[co,ci,ky,kx] over matching taps
void conv2d_igrad_kernel(const Conv2dDims& d, const double* go, const double* w, double* gx) {
  for (std::int64_t co = 0; co < d.co; ++co) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      const double* wk = w + ((co * d.ci) + ci) * d.kh * d.kw;
      const double* gc = go + co * d.ho * d.wo;
      double* xc = gx + ci * d.h * d.w;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t kx = 0; kx < d.kw; ++kx) {
          const double wv = wk[ky * d.kw + kx];
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            const double* grow = gc + oy * d.wo;
            double* xrow = xc + iy * d.w;
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const std::int64_t ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              xrow[ix] += wv * grow[ox];
            }
          }
        }
      }
    }
  }
}

// gw[co,ci,ky,kx] += sum_{oy,ox} go[co,oy,ox] * x[ci, oy*s+ky-p, ox*s+kx-p]
void conv2d_wgrad_kernel(const Conv2dDims& d, const double* x, const double* go, double* gw) {
  for (std::int64_t co = 0; co < d.co; ++co) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      double* wk = gw + ((co * d.ci) + ci) * d.kh * d.kw;
      const double* gc = go + co * d.ho * d.wo;
      const double* xc = x + ci * d.h * d.w;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t kx = 0; kx < d.kw; ++kx) {
          double acc = 0.0;
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride + ky - d.pad;
            if (iy < 0 || iy >= d.h) continue;
            const double* grow = gc + oy * d.wo;
            const double* xrow = xc + iy * d.w;
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const std::int64_t ix = ox * d.stride + kx - d.pad;
              if (ix < 0 || ix >= d.w) continue;
              acc += grow[ox] * xrow[ix];
            }
          }
          wk[ky * d.kw + kx] += acc;
        }
      }
    }
  }
}

using Unary = double (*)(double);
using UnaryPair = std::pair<double, double>;  // value, derivative

Tensor unary_op(const Tensor& a, const char* name,
                const std::function<UnaryPair(double)>& f) {
  if (!a.defined()) throw ContractError(std::string(name) + ": undefined input");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  std::vector<double> deriv;
  const bool rec = tape_wants({&a});
  if (rec) deriv.resize(a.impl()->data.size());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::size_t i = 0; i < in.size(); ++i) {
    auto [v, d] = f(in[i]);
    o[i] = v;
    if (rec) deriv[i] = d;
  }
  out = finalize(std::move(out), name);
  if (rec) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), dv = std::move(deriv)]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * dv[i];
    });
  }
  return out;
}

enum class BroadcastKind { same, row };

BroadcastKind binary_broadcast(const Tensor& a, const Tensor& b, const char* name) {
  if (a.shape() == b.shape()) return BroadcastKind::same;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.dim(-1)) return BroadcastKind::row;
  throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// sign: +1 for add, -1 for sub
Tensor addsub(const Tensor& a, const Tensor& b, double sign, const char* name) {
  const auto kind = binary_broadcast(a, b, name);
  Tensor out = Tensor::zeros(a.shape(), promote(a, b));
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  auto& o = out.impl()->data;
  const std::size_t n = av.size(), bn = bv.size();
  if (kind == BroadcastKind::same) {
    for (std::size_t i = 0; i < n; ++i) o[i] = av[i] + sign * bv[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = av[i] + sign * bv[i % bn];
  }
  out = finalize(std::move(out), name);
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), kind, sign]() {
      const auto& go = *oi->grad;
      if (ai->requires_grad) {
        auto& g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->ensure_grad();
        if (kind == BroadcastKind::same) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * go[i];
        } else {
          const std::size_t bn = g.size();
          for (std::size_t i = 0; i < go.size(); ++i) g[i % bn] += sign * go[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return addsub(a, b, +1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return addsub(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = binary_broadcast(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), promote(a, b));
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  auto& o = out.impl()->data;
  const std::size_t n = av.size(), bn = bv.size();
  if (kind == BroadcastKind::same) {
    for (std::size_t i = 0; i < n; ++i) o[i] = av[i] * bv[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = av[i] * bv[i % bn];
  }
  out = finalize(std::move(out), "mul");
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), kind]() {
      const auto& go = *oi->grad;
      const auto& av = ai->data;
      const auto& bv = bi->data;
      const std::size_t bn = bv.size();
      if (ai->requires_grad) {
        auto& g = ai->ensure_grad();
        if (kind == BroadcastKind::same) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i % bn];
        }
      }
      if (bi->requires_grad) {
        auto& g = bi->ensure_grad();
        if (kind == BroadcastKind::same) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
        } else {
          for (std::size_t i = 0; i < go.size(); ++i) g[i % bn] += go[i] * av[i];
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return UnaryPair{x + c, 1.0}; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, "scale", [c](double x) { return UnaryPair{x * c, c}; });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return UnaryPair{-x, -1.0}; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](double x) { return UnaryPair{x * x, 2.0 * x}; });
}

Tensor exp_t(const Tensor& a) {
  return unary_op(a, "exp", [](double x) {
    double e = std::exp(x);
    return UnaryPair{e, e};
  });
}

Tensor log_t(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return UnaryPair{std::log(x), 1.0 / x}; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) {
    return x > 0.0 ? UnaryPair{x, 1.0} : UnaryPair{0.0, 0.0};
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(a, "leaky_relu", [slope](double x) {
    return x > 0.0 ? UnaryPair{x, 1.0} : UnaryPair{slope * x, slope};
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, "sigmoid", [](double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return UnaryPair{s, s * (1.0 - s)};
  });
}

Tensor tanh_t(const Tensor& a) {
  return unary_op(a, "tanh", [](double x) {
    double t = std::tanh(x);
    return UnaryPair{t, 1.0 - t * t};
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(a, "gelu", [](double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
    return UnaryPair{x * cdf, cdf + x * pdf};
  });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, "silu", [](double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return UnaryPair{x * s, s * (1.0 + x * (1.0 - s))};
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::from({}, {acc}, a.dtype());
  out = finalize(std::move(out), "sum_all");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl()]() {
      if (!ai->requires_grad) return;
      const double go = (*oi->grad)[0];
      auto& g = ai->ensure_grad();
      for (auto& v : g) v += go;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  const std::int64_t n = a.numel();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::from({}, {acc / static_cast<double>(n)}, a.dtype());
  out = finalize(std::move(out), "mean_all");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), n]() {
      if (!ai->requires_grad) return;
      const double go = (*oi->grad)[0] / static_cast<double>(n);
      auto& g = ai->ensure_grad();
      for (auto& v : g) v += go;
    });
  }
  return out;
}

Tensor sum_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("sum_lastdim: needs rank >= 1");
  const std::int64_t d = a.dim(-1);
  if (d == 0) throw ShapeError("sum_lastdim: empty last dim");
  Shape os(a.shape().begin(), a.shape().end() - 1);
  Tensor out = Tensor::zeros(os, a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::size_t r = 0; r < o.size(); ++r) {
    double acc = 0.0;
    const double* row = in.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) acc += row[j];
    o[r] = acc;
  }
  out = finalize(std::move(out), "sum_lastdim");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), d]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::size_t r = 0; r < go.size(); ++r) {
        double* row = g.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) row[j] += go[r];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), {a.impl()->data.begin(), a.impl()->data.end()},
                            a.dtype());
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl()]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  need(a.rank() == 2, "transpose2d: rank-2 required, got " + shape_str(a.shape()));
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m}, a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) o[j * m + i] = in[i * n + j];
  }
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), m, n]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) g[i * n + j] += go[j * m + i];
      }
    });
  }
  return out;
}

namespace {

struct AxisSplit {
  std::int64_t outer, axis, inner;
};

AxisSplit axis_split(const Shape& s, int axis) {
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[static_cast<std::size_t>(axis)], inner};
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& base = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(base.size())) {
    throw ShapeError("concat: axis out of range");
  }
  Shape os = base;
  std::int64_t total = 0;
  DType dt = parts[0].dtype();
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != base.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != base[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(base));
      }
    }
    total += s[static_cast<std::size_t>(axis)];
    if (p.dtype() == DType::f64) dt = DType::f64;
  }
  os[static_cast<std::size_t>(axis)] = total;
  Tensor out = Tensor::zeros(os, dt);
  const auto sp = axis_split(os, axis);
  auto& o = out.impl()->data;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto psp = axis_split(p.shape(), axis);
    const auto& in = p.impl()->data;
    for (std::int64_t u = 0; u < sp.outer; ++u) {
      const double* src = in.data() + u * psp.axis * psp.inner;
      double* dst = o.data() + (u * sp.axis + offset) * sp.inner;
      std::memcpy(dst, src, static_cast<std::size_t>(psp.axis * psp.inner) * sizeof(double));
    }
    offset += psp.axis;
  }
  round_f32(*out.impl());
  bool rec = false;
  for (const auto& p : parts) {
    if (tape_wants({&p})) rec = true;
  }
  if (rec) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape::active()->record([impls, oi = out.impl(), sp, axis]() {
      const auto& go = *oi->grad;
      std::int64_t offset = 0;
      for (const auto& pi : impls) {
        const auto psp = axis_split(pi->shape, axis);
        if (pi->requires_grad) {
          auto& g = pi->ensure_grad();
          for (std::int64_t u = 0; u < sp.outer; ++u) {
            const double* src = go.data() + (u * sp.axis + offset) * sp.inner;
            double* dst = g.data() + u * psp.axis * psp.inner;
            for (std::int64_t i = 0; i < psp.axis * psp.inner; ++i) dst[i] += src[i];
          }
        }
        offset += psp.axis;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  if (axis < 0 || axis >= a.rank()) throw ShapeError("slice: axis out of range");
  const std::int64_t alen = a.dim(axis);
  if (start < 0 || len < 0 || start + len > alen) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of [0," + std::to_string(alen) + ")");
  }
  Shape os = a.shape();
  os[static_cast<std::size_t>(axis)] = len;
  Tensor out = Tensor::zeros(os, a.dtype());
  const auto asp = axis_split(a.shape(), axis);
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t u = 0; u < asp.outer; ++u) {
    const double* src = in.data() + (u * asp.axis + start) * asp.inner;
    double* dst = o.data() + u * len * asp.inner;
    std::memcpy(dst, src, static_cast<std::size_t>(len * asp.inner) * sizeof(double));
  }
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), asp, start, len]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t u = 0; u < asp.outer; ++u) {
        const double* src = go.data() + u * len * asp.inner;
        double* dst = g.data() + (u * asp.axis + start) * asp.inner;
        for (std::int64_t i = 0; i < len * asp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor split_heads(const Tensor& a, std::int64_t heads) {
  need(a.rank() == 2, "split_heads: rank-2 required");
  const std::int64_t t = a.dim(0), hd = a.dim(1);
  need(heads > 0 && hd % heads == 0, "split_heads: heads must divide feature dim");
  const std::int64_t d = hd / heads;
  Tensor out = Tensor::zeros({heads, t, d}, a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < t; ++i) {
      std::memcpy(o.data() + (h * t + i) * d, in.data() + i * hd + h * d,
                  static_cast<std::size_t>(d) * sizeof(double));
    }
  }
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), heads, t, d, hd]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t i = 0; i < t; ++i) {
          const double* src = go.data() + (h * t + i) * d;
          double* dst = g.data() + i * hd + h * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& a) {
  need(a.rank() == 3, "merge_heads: rank-3 required");
  const std::int64_t heads = a.dim(0), t = a.dim(1), d = a.dim(2);
  const std::int64_t hd = heads * d;
  Tensor out = Tensor::zeros({t, hd}, a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < t; ++i) {
      std::memcpy(o.data() + i * hd + h * d, in.data() + (h * t + i) * d,
                  static_cast<std::size_t>(d) * sizeof(double));
    }
  }
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), heads, t, d, hd]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t i = 0; i < t; ++i) {
          const double* src = go.data() + i * hd + h * d;
          double* dst = g.data() + (h * t + i) * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / softmax / layer_norm / embedding / attention
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  need(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  need(a.dim(1) == b.dim(0), "matmul: inner dims " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, promote(a, b));
  gemm_nn(m, k, n, a.impl()->data.data(), b.impl()->data.data(), out.impl()->data.data());
  out = finalize(std::move(out), "matmul");
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n]() {
      const auto& go = *oi->grad;
      if (ai->requires_grad) {
        gemm_nt(m, n, k, go.data(), bi->data.data(), ai->ensure_grad().data());
      }
      if (bi->requires_grad) {
        gemm_tn(k, m, n, ai->data.data(), go.data(), bi->ensure_grad().data());
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax: needs rank >= 1");
  const std::int64_t d = a.dim(-1);
  if (d == 0) throw ShapeError("softmax: empty last dim");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  const std::size_t rows = in.size() / static_cast<std::size_t>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * d;
    double* y = o.data() + r * d;
    double m = x[0];
    for (std::int64_t j = 1; j < d; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - m);
      z += y[j];
    }
    for (std::int64_t j = 0; j < d; ++j) y[j] /= z;
  }
  out = finalize(std::move(out), "softmax");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), d]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      const auto& p = oi->data;
      const std::size_t rows = p.size() / static_cast<std::size_t>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = p.data() + r * d;
        const double* gr = go.data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += pr[j] * gr[j];
        double* gx = g.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) gx[j] += pr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& a, double eps) {
  if (a.rank() < 1) throw ShapeError("layer_norm: needs rank >= 1");
  const std::int64_t d = a.dim(-1);
  if (d == 0) throw ShapeError("layer_norm: empty last dim");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  const auto& in = a.impl()->data;
  auto& o = out.impl()->data;
  const std::size_t rows = in.size() / static_cast<std::size_t>(d);
  std::vector<double> rstd;
  const bool rec = tape_wants({&a});
  if (rec) rstd.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * d;
    double* y = o.data() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = x[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < d; ++j) y[j] = (x[j] - mean) * rs;
    if (rec) rstd[r] = rs;
  }
  out = finalize(std::move(out), "layer_norm");
  if (rec) {
    out.set_requires_grad(true);
    Tape::active()->record([ai = a.impl(), oi = out.impl(), d, rstd = std::move(rstd)]() {
      if (!ai->requires_grad) return;
      auto& g = ai->ensure_grad();
      const auto& go = *oi->grad;
      const auto& y = oi->data;  // pre-rounding difference is negligible for grads
      const std::size_t rows = rstd.size();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * d;
        const double* gr = go.data() + r * d;
        double gmean = 0.0, gymean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          gmean += gr[j];
          gymean += gr[j] * yr[j];
        }
        gmean /= static_cast<double>(d);
        gymean /= static_cast<double>(d);
        double* gx = g.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
          gx[j] += rstd[r] * (gr[j] - gmean - yr[j] * gymean);
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& idx) {
  need(table.rank() == 2, "embedding: table must be [V, d]");
  const std::int64_t v = table.dim(0), d = table.dim(1);
  for (auto i : idx) {
    if (i < 0 || i >= v) {
      throw InputError("embedding: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(v) + ")");
    }
  }
  const std::int64_t n = static_cast<std::int64_t>(idx.size());
  Tensor out = Tensor::zeros({n, d}, table.dtype());
  const auto& in = table.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t r = 0; r < n; ++r) {
    std::memcpy(o.data() + r * d, in.data() + idx[static_cast<std::size_t>(r)] * d,
                static_cast<std::size_t>(d) * sizeof(double));
  }
  if (tape_wants({&table})) {
    out.set_requires_grad(true);
    Tape::active()->record([ti = table.impl(), oi = out.impl(), idx, d]() {
      if (!ti->requires_grad) return;
      auto& g = ti->ensure_grad();
      const auto& go = *oi->grad;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = go.data() + r * static_cast<std::size_t>(d);
        double* dst = g.data() + static_cast<std::size_t>(idx[r]) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask) {
  need(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: q/k/v must be [h, T, d]");
  const std::int64_t h = q.dim(0), tq = q.dim(1), d = q.dim(2);
  const std::int64_t tk = k.dim(1);
  if (d == 0) throw ShapeError("attention: zero head dim");
  need(k.dim(0) == h && v.dim(0) == h, "attention: head count mismatch");
  need(k.dim(2) == d && v.dim(2) == d, "attention: feature dim mismatch");
  need(v.dim(1) == tk, "attention: k/v sequence length mismatch");
  if (mask.defined()) {
    need(mask.rank() == 2 && mask.dim(0) == tq && mask.dim(1) == tk,
         "attention: mask must be [T_q, T_k]");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  DType dt = promote(q, k) == DType::f64 || v.dtype() == DType::f64 ? DType::f64 : DType::f32;
  Tensor out = Tensor::zeros({h, tq, d}, dt);

  // Probabilities are kept for the backward pass.
  std::vector<double> probs(static_cast<std::size_t>(h * tq * tk));
  const double* qd = q.impl()->data.data();
  const double* kd = k.impl()->data.data();
  const double* vd = v.impl()->data.data();
  const double* md = mask.defined() ? mask.impl()->data.data() : nullptr;
  double* od = out.impl()->data.data();
  for (std::int64_t hh = 0; hh < h; ++hh) {
    const double* qh = qd + hh * tq * d;
    const double* kh = kd + hh * tk * d;
    const double* vh = vd + hh * tk * d;
    double* ph = probs.data() + hh * tq * tk;
    double* oh = od + hh * tq * d;
    // logits + stable softmax, one query row at a time
    for (std::int64_t i = 0; i < tq; ++i) {
      double* prow = ph + i * tk;
      const double* qrow = qh + i * d;
      double mx = -1e300;
      for (std::int64_t j = 0; j < tk; ++j) {
        double s = 0.0;
        const double* krow = kh + j * d;
        for (std::int64_t c = 0; c < d; ++c) s += qrow[c] * krow[c];
        s *= inv_sqrt_d;
        if (md) s += md[i * tk + j];
        prow[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::int64_t j = 0; j < tk; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        z += prow[j];
      }
      for (std::int64_t j = 0; j < tk; ++j) prow[j] /= z;
    }
    gemm_nn(tq, tk, d, ph, vh, oh);
  }
  out = finalize(std::move(out), "attention");
  if (tape_wants({&q, &k, &v})) {
    out.set_requires_grad(true);
    Tape::active()->record([qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl(),
                            probs = std::move(probs), h, tq, tk, d, inv_sqrt_d]() {
      const auto& go = *oi->grad;
      const bool gq = qi->requires_grad, gk = ki->requires_grad, gv = vi->requires_grad;
      double* qg = gq ? qi->ensure_grad().data() : nullptr;
      double* kg = gk ? ki->ensure_grad().data() : nullptr;
      double* vg = gv ? vi->ensure_grad().data() : nullptr;
      std::vector<double> dp(static_cast<std::size_t>(tq * tk));
      std::vector<double> ds(static_cast<std::size_t>(tq * tk));
      for (std::int64_t hh = 0; hh < h; ++hh) {
        const double* ph = probs.data() + hh * tq * tk;
        const double* goh = go.data() + hh * tq * d;
        const double* vh = vi->data.data() + hh * tk * d;
        const double* qh = qi->data.data() + hh * tq * d;
        const double* kh = ki->data.data() + hh * tk * d;
        if (gv) gemm_tn(tk, tq, d, ph, goh, vg + hh * tk * d);
        if (gq || gk) {
          std::fill(dp.begin(), dp.end(), 0.0);
          gemm_nt(tq, d, tk, goh, vh, dp.data());  // dP = dY V^T
          for (std::int64_t i = 0; i < tq; ++i) {
            const double* prow = ph + i * tk;
            const double* dprow = dp.data() + i * tk;
            double dot = 0.0;
            for (std::int64_t j = 0; j < tk; ++j) dot += prow[j] * dprow[j];
            double* dsrow = ds.data() + i * tk;
            for (std::int64_t j = 0; j < tk; ++j) {
              dsrow[j] = prow[j] * (dprow[j] - dot) * inv_sqrt_d;
            }
          }
          if (gq) gemm_nn(tq, tk, d, ds.data(), kh, qg + hh * tq * d);
          if (gk) gemm_tn(tk, tq, d, ds.data(), qh, kg + hh * tk * d);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, int stride, int padding) {
  need(x.rank() == 2, "conv1d: x must be [C_in, T]");
  need(w.rank() == 3, "conv1d: w must be [C_out, C_in, k]");
  const std::int64_t ci = x.dim(0), t = x.dim(1);
  const std::int64_t co = w.dim(0), k = w.dim(2);
  need(w.dim(1) == ci, "conv1d: channel mismatch");
  if (k < 1 || stride < 1 || padding < 0) throw ShapeError("conv1d: bad k/stride/padding");
  const std::int64_t to = (t + 2 * padding - k) / stride + 1;
  if (t + 2 * padding < k || to < 1) {
    throw ShapeError("conv1d: output length < 1 for T=" + std::to_string(t));
  }
  Tensor out = Tensor::zeros({co, to}, promote(x, w));
  const double* xd = x.impl()->data.data();
  const double* wd = w.impl()->data.data();
  double* yd = out.impl()->data.data();
  for (std::int64_t c = 0; c < co; ++c) {
    double* yrow = yd + c * to;
    for (std::int64_t b = 0; b < ci; ++b) {
      const double* xrow = xd + b * t;
      const double* wk = wd + (c * ci + b) * k;
      for (std::int64_t j = 0; j < k; ++j) {
        const double wv = wk[j];
        for (std::int64_t o = 0; o < to; ++o) {
          const std::int64_t ti = o * stride + j - padding;
          if (ti < 0 || ti >= t) continue;
          yrow[o] += wv * xrow[ti];
        }
      }
    }
  }
  out = finalize(std::move(out), "conv1d");
  if (tape_wants({&x, &w})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), wi = w.impl(), oi = out.impl(), ci, t, co, k, to,
                            stride, padding]() {
      const auto& go = *oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (std::int64_t c = 0; c < co; ++c) {
          const double* grow = go.data() + c * to;
          for (std::int64_t b = 0; b < ci; ++b) {
            double* xrow = gx.data() + b * t;
            const double* wk = wi->data.data() + (c * ci + b) * k;
            for (std::int64_t j = 0; j < k; ++j) {
              const double wv = wk[j];
              for (std::int64_t o = 0; o < to; ++o) {
                const std::int64_t ti = o * stride + j - padding;
                if (ti < 0 || ti >= t) continue;
                xrow[ti] += wv * grow[o];
              }
            }
          }
        }
      }
      if (wi->requires_grad) {
        auto& gw = wi->ensure_grad();
        for (std::int64_t c = 0; c < co; ++c) {
          const double* grow = go.data() + c * to;
          for (std::int64_t b = 0; b < ci; ++b) {
            const double* xrow = xi->data.data() + b * t;
            double* wk = gw.data() + (c * ci + b) * k;
            for (std::int64_t j = 0; j < k; ++j) {
              double acc = 0.0;
              for (std::int64_t o = 0; o < to; ++o) {
                const std::int64_t ti = o * stride + j - padding;
                if (ti < 0 || ti >= t) continue;
                acc += grow[o] * xrow[ti];
              }
              wk[j] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv1d_transposed(const Tensor& x, const Tensor& w, int stride, int padding) {
  need(x.rank() == 2, "conv1d_transposed: x must be [C_in, T]");
  need(w.rank() == 3, "conv1d_transposed: w must be [C_in, C_out, k]");
  const std::int64_t ci = x.dim(0), t = x.dim(1);
  const std::int64_t co = w.dim(1), k = w.dim(2);
  need(w.dim(0) == ci, "conv1d_transposed: channel mismatch");
  if (k < 1 || stride < 1 || padding < 0) {
    throw ShapeError("conv1d_transposed: bad k/stride/padding");
  }
  const std::int64_t u = (t - 1) * stride - 2 * padding + k;
  if (t < 1 || u < 1) throw ShapeError("conv1d_transposed: output length < 1");
  Tensor out = Tensor::zeros({co, u}, promote(x, w));
  const double* xd = x.impl()->data.data();
  const double* wd = w.impl()->data.data();
  double* yd = out.impl()->data.data();
  for (std::int64_t b = 0; b < ci; ++b) {
    const double* xrow = xd + b * t;
    for (std::int64_t c = 0; c < co; ++c) {
      double* yrow = yd + c * u;
      const double* wk = wd + (b * co + c) * k;
      for (std::int64_t j = 0; j < k; ++j) {
        const double wv = wk[j];
        for (std::int64_t ti = 0; ti < t; ++ti) {
          const std::int64_t uo = ti * stride + j - padding;
          if (uo < 0 || uo >= u) continue;
          yrow[uo] += wv * xrow[ti];
        }
      }
    }
  }
  out = finalize(std::move(out), "conv1d_transposed");
  if (tape_wants({&x, &w})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), wi = w.impl(), oi = out.impl(), ci, t, co, k, u,
                            stride, padding]() {
      const auto& go = *oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (std::int64_t b = 0; b < ci; ++b) {
          double* xrow = gx.data() + b * t;
          for (std::int64_t c = 0; c < co; ++c) {
            const double* grow = go.data() + c * u;
            const double* wk = wi->data.data() + (b * co + c) * k;
            for (std::int64_t j = 0; j < k; ++j) {
              const double wv = wk[j];
              for (std::int64_t ti = 0; ti < t; ++ti) {
                const std::int64_t uo = ti * stride + j - padding;
                if (uo < 0 || uo >= u) continue;
                xrow[ti] += wv * grow[uo];
              }
            }
          }
        }
      }
      if (wi->requires_grad) {
        auto& gw = wi->ensure_grad();
        for (std::int64_t b = 0; b < ci; ++b) {
          const double* xrow = xi->data.data() + b * t;
          for (std::int64_t c = 0; c < co; ++c) {
            const double* grow = go.data() + c * u;
            double* wk = gw.data() + (b * co + c) * k;
            for (std::int64_t j = 0; j < k; ++j) {
              double acc = 0.0;
              for (std::int64_t ti = 0; ti < t; ++ti) {
                const std::int64_t uo = ti * stride + j - padding;
                if (uo < 0 || uo >= u) continue;
                acc += xrow[ti] * grow[uo];
              }
              wk[j] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor depthwise_conv1d_same(const Tensor& x, const Tensor& w) {
  need(x.rank() == 2, "depthwise_conv1d: x must be [C, T]");
  need(w.rank() == 2 && w.dim(0) == x.dim(0), "depthwise_conv1d: w must be [C, k]");
  const std::int64_t c = x.dim(0), t = x.dim(1), k = w.dim(1);
  const std::int64_t pad = k / 2;
  need(k >= 1 && k % 2 == 1, "depthwise_conv1d: odd kernel required for same-padding");
  Tensor out = Tensor::zeros({c, t}, promote(x, w));
  const double* xd = x.impl()->data.data();
  const double* wd = w.impl()->data.data();
  double* yd = out.impl()->data.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* xrow = xd + ch * t;
    const double* wk = wd + ch * k;
    double* yrow = yd + ch * t;
    for (std::int64_t o = 0; o < t; ++o) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t ti = o + j - pad;
        if (ti < 0 || ti >= t) continue;
        acc += wk[j] * xrow[ti];
      }
      yrow[o] = acc;
    }
  }
  out = finalize(std::move(out), "depthwise_conv1d");
  if (tape_wants({&x, &w})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), wi = w.impl(), oi = out.impl(), c, t, k, pad]() {
      const auto& go = *oi->grad;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double* grow = go.data() + ch * t;
        if (xi->requires_grad) {
          double* xrow = xi->ensure_grad().data() + ch * t;
          const double* wk = wi->data.data() + ch * k;
          for (std::int64_t o = 0; o < t; ++o) {
            for (std::int64_t j = 0; j < k; ++j) {
              const std::int64_t ti = o + j - pad;
              if (ti < 0 || ti >= t) continue;
              xrow[ti] += wk[j] * grow[o];
            }
          }
        }
        if (wi->requires_grad) {
          double* wk = wi->ensure_grad().data() + ch * k;
          const double* xrow = xi->data.data() + ch * t;
          for (std::int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::int64_t o = 0; o < t; ++o) {
              const std::int64_t ti = o + j - pad;
              if (ti < 0 || ti >= t) continue;
              acc += grow[o] * xrow[ti];
            }
            wk[j] += acc;
          }
        }
      }
    });
  }
  return out;
}

namespace {

Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, int stride, int padding,
                       const char* name) {
  need(x.rank() == 3, std::string(name) + ": x must be [C_in, H, W]");
  need(w.rank() == 4, std::string(name) + ": w must be [C_out, C_in, kh, kw]");
  Conv2dDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = padding;
  need(w.dim(1) == d.ci, std::string(name) + ": channel mismatch");
  if (d.kh < 1 || d.kw < 1 || stride < 1 || padding < 0) {
    throw ShapeError(std::string(name) + ": bad kernel/stride/padding");
  }
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw || d.ho < 1 || d.wo < 1) {
    throw ShapeError(std::string(name) + ": output smaller than 1x1");
  }
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  const Conv2dDims d = conv2d_dims(x, w, stride, padding, "conv2d");
  Tensor out = Tensor::zeros({d.co, d.ho, d.wo}, promote(x, w));
  conv2d_fwd_kernel(d, x.impl()->data.data(), w.impl()->data.data(), out.impl()->data.data());
  out = finalize(std::move(out), "conv2d");
  if (tape_wants({&x, &w})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), wi = w.impl(), oi = out.impl(), d]() {
      const auto& go = *oi->grad;
      if (xi->requires_grad) {
        conv2d_igrad_kernel(d, go.data(), wi->data.data(), xi->ensure_grad().data());
      }
      if (wi->requires_grad) {
        conv2d_wgrad_kernel(d, xi->data.data(), go.data(), wi->ensure_grad().data());
      }
    });
  }
  return out;
}

Tensor conv2d_vjp_input(const Tensor& go, const Tensor& w, int stride, int padding,
                        std::int64_t in_h, std::int64_t in_w) {
  need(go.rank() == 3, "conv2d_vjp_input: go must be [C_out, Ho, Wo]");
  need(w.rank() == 4, "conv2d_vjp_input: w must be [C_out, C_in, kh, kw]");
  Conv2dDims d;
  d.co = w.dim(0);
  d.ci = w.dim(1);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.h = in_h;
  d.w = in_w;
  d.ho = go.dim(1);
  d.wo = go.dim(2);
  d.stride = stride;
  d.pad = padding;
  need(go.dim(0) == d.co, "conv2d_vjp_input: channel mismatch");
  need((d.h + 2 * padding - d.kh) / stride + 1 == d.ho &&
           (d.w + 2 * padding - d.kw) / stride + 1 == d.wo,
       "conv2d_vjp_input: geometry mismatch");
  Tensor out = Tensor::zeros({d.ci, d.h, d.w}, promote(go, w));
  conv2d_igrad_kernel(d, go.impl()->data.data(), w.impl()->data.data(),
                      out.impl()->data.data());
  out = finalize(std::move(out), "conv2d_vjp_input");
  if (tape_wants({&go, &w})) {
    out.set_requires_grad(true);
    Tape::active()->record([gi = go.impl(), wi = w.impl(), oi = out.impl(), d]() {
      const auto& u = *oi->grad;  // upstream grad w.r.t. our output [C_in, H, W]
      if (gi->requires_grad) {
        conv2d_fwd_kernel(d, u.data(), wi->data.data(), gi->ensure_grad().data());
      }
      if (wi->requires_grad) {
        conv2d_wgrad_kernel(d, u.data(), gi->data.data(), wi->ensure_grad().data());
      }
    });
  }
  return out;
}

Tensor avg_pool_w(const Tensor& x, int factor) {
  need(x.rank() == 3, "avg_pool_w: x must be [C, H, W]");
  if (factor < 1) throw ShapeError("avg_pool_w: factor must be >= 1");
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t wo = w / factor;
  if (wo < 1) throw ShapeError("avg_pool_w: output width < 1");
  Tensor out = Tensor::zeros({c, h, wo}, x.dtype());
  const auto& in = x.impl()->data;
  auto& o = out.impl()->data;
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      const double* row = in.data() + (ch * h + y) * w;
      double* orow = o.data() + (ch * h + y) * wo;
      for (std::int64_t j = 0; j < wo; ++j) {
        double acc = 0.0;
        for (int f = 0; f < factor; ++f) acc += row[j * factor + f];
        orow[j] = acc * inv;
      }
    }
  }
  out = finalize(std::move(out), "avg_pool_w");
  if (tape_wants({&x})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), oi = out.impl(), c, h, w, wo, factor, inv]() {
      if (!xi->requires_grad) return;
      auto& g = xi->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          double* row = g.data() + (ch * h + y) * w;
          const double* grow = go.data() + (ch * h + y) * wo;
          for (std::int64_t j = 0; j < wo; ++j) {
            for (int f = 0; f < factor; ++f) row[j * factor + f] += grow[j] * inv;
          }
        }
      }
    });
  }
  return out;
}

Tensor avg_unpool_w(const Tensor& g, int factor, std::int64_t out_w) {
  need(g.rank() == 3, "avg_unpool_w: g must be [C, H, W]");
  if (factor < 1 || out_w < 1) throw ShapeError("avg_unpool_w: bad factor/out_w");
  const std::int64_t c = g.dim(0), h = g.dim(1), w = g.dim(2);
  Tensor out = Tensor::zeros({c, h, out_w}, g.dtype());
  const auto& in = g.impl()->data;
  auto& o = out.impl()->data;
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      const double* row = in.data() + (ch * h + y) * w;
      double* orow = o.data() + (ch * h + y) * out_w;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const std::int64_t src = j / factor;
        orow[j] = src < w ? row[src] * inv : 0.0;
      }
    }
  }
  out = finalize(std::move(out), "avg_unpool_w");
  if (tape_wants({&g})) {
    out.set_requires_grad(true);
    Tape::active()->record([gi = g.impl(), oi = out.impl(), c, h, w, out_w, factor, inv]() {
      if (!gi->requires_grad) return;
      auto& gg = gi->ensure_grad();
      const auto& go = *oi->grad;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          double* row = gg.data() + (ch * h + y) * w;
          const double* grow = go.data() + (ch * h + y) * out_w;
          for (std::int64_t j = 0; j < out_w; ++j) {
            const std::int64_t src = j / factor;
            if (src < w) row[src] += grow[j] * inv;
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  need(x.rank() >= 2, "add_channel_bias: x must have rank >= 2");
  need(b.rank() == 1 && b.dim(0) == x.dim(0), "add_channel_bias: b must be [C]");
  const std::int64_t c = x.dim(0);
  const std::int64_t inner = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape(), promote(x, b));
  const auto& xd = x.impl()->data;
  const auto& bd = b.impl()->data;
  auto& o = out.impl()->data;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double bv = bd[static_cast<std::size_t>(ch)];
    const double* xrow = xd.data() + ch * inner;
    double* orow = o.data() + ch * inner;
    for (std::int64_t i = 0; i < inner; ++i) orow[i] = xrow[i] + bv;
  }
  out = finalize(std::move(out), "add_channel_bias");
  if (tape_wants({&x, &b})) {
    out.set_requires_grad(true);
    Tape::active()->record([xi = x.impl(), bi = b.impl(), oi = out.impl(), c, inner]() {
      const auto& go = *oi->grad;
      if (xi->requires_grad) {
        auto& g = xi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->ensure_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          const double* grow = go.data() + ch * inner;
          for (std::int64_t i = 0; i < inner; ++i) acc += grow[i];
          g[static_cast<std::size_t>(ch)] += acc;
        }
      }
    });
  }
  return out;
}

}  // namespace sonus
