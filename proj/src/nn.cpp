#include "sonus/nn.hpp"

#include <cmath>

namespace sonus {

Tensor ParamMap::add(const std::string& name, Tensor t) {
  if (contains(name)) throw ContractError("ParamMap: duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  items_.push_back({name, t});
  return t;
}

Tensor ParamMap::find(const std::string& name) const {
  for (const auto& it : items_) {
    if (it.name == name) return it.tensor;
  }
  throw InputError("ParamMap: no parameter named '" + name + "'");
}

bool ParamMap::contains(const std::string& name) const {
  for (const auto& it : items_) {
    if (it.name == name) return true;
  }
  return false;
}

std::int64_t ParamMap::total_size() const {
  std::int64_t n = 0;
  for (const auto& it : items_) n += it.tensor.numel();
  return n;
}

void ParamMap::zero_grads() const {
  for (const auto& it : items_) {
    Tensor t = it.tensor;
    t.zero_grad();
  }
}

std::uint64_t ParamMap::bits_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& it : items_) {
    h = fnv1a(it.tensor.data().data(), static_cast<std::size_t>(it.tensor.numel()) * sizeof(double), h);
  }
  return h;
}

Tensor init_uniform_fanin(Rng& rng, Shape shape, std::int64_t fan_in, DType dt) {
  if (fan_in < 1) throw ContractError("init_uniform_fanin: fan_in must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(rng, std::move(shape), -bound, bound, dt);
}

Linear::Linear(Rng& rng, std::int64_t in, std::int64_t out, DType dt, bool zero_init) {
  if (zero_init) {
    w = Tensor::zeros({in, out}, dt);
    b = Tensor::zeros({out}, dt);
  } else {
    w = init_uniform_fanin(rng, {in, out}, in, dt);
    b = init_uniform_fanin(rng, {out}, in, dt);
  }
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() == 1) {
    Tensor row = reshape(x, {1, x.dim(0)});
    return reshape(add(matmul(row, w), b), {w.dim(1)});
  }
  return add(matmul(x, w), b);
}

void Linear::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", w);
  pm.add(prefix + ".b", b);
}

Conv1dLayer::Conv1dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride_,
                         int padding_, DType dt)
    : stride(stride_), padding(padding_) {
  const std::int64_t fan_in = c_in * k;
  w = init_uniform_fanin(rng, {c_out, c_in, k}, fan_in, dt);
  b = init_uniform_fanin(rng, {c_out}, fan_in, dt);
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
  return add_channel_bias(conv1d(x, w, stride, padding), b);
}

void Conv1dLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", w);
  pm.add(prefix + ".b", b);
}

ConvT1dLayer::ConvT1dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride_,
                           int padding_, DType dt)
    : stride(stride_), padding(padding_) {
  const std::int64_t fan_in = c_in * k;
  w = init_uniform_fanin(rng, {c_in, c_out, k}, fan_in, dt);
  b = init_uniform_fanin(rng, {c_out}, fan_in, dt);
}

Tensor ConvT1dLayer::forward(const Tensor& x) const {
  return add_channel_bias(conv1d_transposed(x, w, stride, padding), b);
}

void ConvT1dLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", w);
  pm.add(prefix + ".b", b);
}

Conv2dLayer::Conv2dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride_,
                         int padding_, DType dt)
    : stride(stride_), padding(padding_) {
  const std::int64_t fan_in = c_in * k * k;
  w = init_uniform_fanin(rng, {c_out, c_in, k, k}, fan_in, dt);
  b = init_uniform_fanin(rng, {c_out}, fan_in, dt);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return add_channel_bias(conv2d(x, w, stride, padding), b);
}

void Conv2dLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", w);
  pm.add(prefix + ".b", b);
}

EmbeddingTable::EmbeddingTable(Rng& rng, std::int64_t vocab, std::int64_t dim, DType dt) {
  table = Tensor::randn(rng, {vocab, dim}, 0.02, dt);
}

Tensor EmbeddingTable::forward(const std::vector<std::int64_t>& idx) const {
  return embedding(table, idx);
}

void EmbeddingTable::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".table", table);
}

Mlp::Mlp(Rng& rng, std::int64_t in, std::int64_t hidden, std::int64_t out, DType dt)
    : fc1(rng, in, hidden, dt), fc2(rng, hidden, out, dt) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(silu(fc1.forward(x))); }

void Mlp::register_params(ParamMap& pm, const std::string& prefix) {
  fc1.register_params(pm, prefix + ".fc1");
  fc2.register_params(pm, prefix + ".fc2");
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(const ParamMap& params, OptimConfig cfg) : cfg_(cfg) {
  for (const auto& it : params.items()) {
    Slot s;
    s.name = it.name;
    s.param = it.tensor;
    s.m = Tensor::zeros(it.tensor.shape(), it.tensor.dtype());
    s.v = Tensor::zeros(it.tensor.shape(), it.tensor.dtype());
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(double lr, const std::function<bool(const std::string&)>& trainable) {
  // Global grad norm over trainable params only.
  double sq = 0.0;
  for (auto& s : slots_) {
    if (trainable && !trainable(s.name)) continue;
    if (!s.param.has_grad()) continue;
    for (double g : s.param.grad()) sq += g * g;
  }
  last_grad_norm_ = std::sqrt(sq);
  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm) {
    clip_scale = cfg_.clip_norm / last_grad_norm_;
  }

  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));

  for (auto& s : slots_) {
    if (trainable && !trainable(s.name)) continue;
    const bool f32 = s.param.dtype() == DType::f32;
    auto p = s.param.mutable_data();
    auto m = s.m.mutable_data();
    auto v = s.v.mutable_data();
    const bool has_grad = s.param.has_grad();
    std::span<const double> g;
    if (has_grad) g = s.param.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = (has_grad ? g[i] : 0.0) * clip_scale;
      double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double pi = p[i] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      if (f32) {
        mi = static_cast<double>(static_cast<float>(mi));
        vi = static_cast<double>(static_cast<float>(vi));
        pi = static_cast<double>(static_cast<float>(pi));
      }
      m[i] = mi;
      v[i] = vi;
      p[i] = pi;
    }
    s.param.zero_grad();
  }
}

void AdamW::register_state(ParamMap& pm) const {
  for (const auto& s : slots_) {
    Tensor m = s.m, v = s.v;
    // Moments aren't differentiated; stored as plain named tensors.
    if (!pm.contains(s.name + ".adam_m")) {
      pm.add(s.name + ".adam_m", m);
      pm.add(s.name + ".adam_v", v);
    }
  }
}

}  // namespace sonus
