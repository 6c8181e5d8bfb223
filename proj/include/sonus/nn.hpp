// nn.hpp: layers over the tensor core, parameter registry, AdamW optimizer.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sonus/tensor.hpp"

namespace sonus {

// Insertion-ordered named parameter set. The order is the checkpoint blob
// layout and the optimizer update order, so it must be deterministic.
struct NamedParam {
  std::string name;
  Tensor tensor;
};

class ParamMap {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<NamedParam>& items() const { return items_; }
  Tensor find(const std::string& name) const;  // throws InputError if absent
  bool contains(const std::string& name) const;
  std::int64_t total_size() const;
  void zero_grads() const;
  std::uint64_t bits_hash() const;  // over all parameter values, in order

 private:
  std::vector<NamedParam> items_;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init per the repo convention.
Tensor init_uniform_fanin(Rng& rng, Shape shape, std::int64_t fan_in, DType dt);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(Rng& rng, std::int64_t in, std::int64_t out, DType dt, bool zero_init = false);
  // x: [T, in] -> [T, out]
  Tensor forward(const Tensor& x) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct Conv1dLayer {
  Tensor w;  // [C_out, C_in, k]
  Tensor b;  // [C_out]
  int stride = 1;
  int padding = 0;

  Conv1dLayer() = default;
  Conv1dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride, int padding,
              DType dt);
  Tensor forward(const Tensor& x) const;  // [C_in, T] -> [C_out, T']
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct ConvT1dLayer {
  Tensor w;  // [C_in, C_out, k]
  Tensor b;  // [C_out]
  int stride = 1;
  int padding = 0;

  ConvT1dLayer() = default;
  ConvT1dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride, int padding,
               DType dt);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct Conv2dLayer {
  Tensor w;  // [C_out, C_in, k, k]
  Tensor b;  // [C_out]
  int stride = 1;
  int padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(Rng& rng, std::int64_t c_in, std::int64_t c_out, int k, int stride, int padding,
              DType dt);
  Tensor forward(const Tensor& x) const;  // [C_in, H, W] -> [C_out, H', W']
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct EmbeddingTable {
  Tensor table;  // [V, d]

  EmbeddingTable() = default;
  EmbeddingTable(Rng& rng, std::int64_t vocab, std::int64_t dim, DType dt);
  Tensor forward(const std::vector<std::int64_t>& idx) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

// Two-layer MLP with SiLU, used for condition fusion and toy encoders.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(Rng& rng, std::int64_t in, std::int64_t hidden, std::int64_t out, DType dt);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm gradient clipping.
// Moments live in tensors of the parameter's dtype so checkpoint round-trips
// are bit-exact.
// ---------------------------------------------------------------------------

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // 0 disables clipping
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamMap& params, OptimConfig cfg);

  // Applies one update using current grads, then zeroes them. `trainable`
  // (when set) filters by parameter name; skipped params keep grads,
  // moments, and values untouched.
  void step(double lr, const std::function<bool(const std::string&)>& trainable = nullptr);

  // Pre-clip global gradient norm of the last step (reported in logs).
  double last_grad_norm() const { return last_grad_norm_; }
  std::int64_t step_count() const { return step_count_; }

  // Moment tensors for checkpointing, named "<param>.m" / "<param>.v".
  void register_state(ParamMap& pm) const;
  void set_step_count(std::int64_t c) { step_count_ = c; }

 private:
  struct Slot {
    std::string name;
    Tensor param, m, v;
  };
  std::vector<Slot> slots_;
  OptimConfig cfg_;
  std::int64_t step_count_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace sonus
