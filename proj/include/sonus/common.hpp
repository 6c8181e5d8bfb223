// common.hpp: error taxonomy, deterministic RNG, precision mode.
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sonus {

// ---------------------------------------------------------------------------
// Errors. Every failure in the library is one of these; the CLI maps the
// kinds onto distinct exit codes.
// ---------------------------------------------------------------------------

enum class ErrorKind {
  input,     // caller handed us bad data (files, ranges, unknown names)
  shape,     // tensor dimension mismatch
  config,    // bad configuration value
  numeric,   // NaN/Inf or a numerically invalid state
  contract,  // internal invariant or API contract violated
  io,        // filesystem / serialization failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InputError : Error {
  explicit InputError(const std::string& m) : Error(ErrorKind::input, m) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error(ErrorKind::contract, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

// ---------------------------------------------------------------------------
// Precision. Tensors carry a dtype; f32 tensors are rounded through IEEE
// float after every op so their values round-trip exactly through the
// 32-bit checkpoint blob. f64 is used by the gradient-check suites.
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

// Finiteness validation after every forward op. On by default; turning it
// off is a measured speed knob, not a correctness one.
bool finite_checks_enabled();
void set_finite_checks(bool enabled);

// ---------------------------------------------------------------------------
// RNG. mt19937_64 with hand-rolled value transforms: std:: distributions are
// implementation-defined, which would break bit-reproducibility guarantees.
// State serializes to text so checkpoints can resume mid-stream.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without caching; the engine is the only state.
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::int64_t uniform_int(std::int64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

// SplitMix64; used to derive independent per-item seeds from a base seed.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// FNV-1a over raw bytes; used for bit-identity assertions and blob checksums.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace sonus
