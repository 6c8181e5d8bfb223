// gradcheck.hpp: central finite-difference oracle for analytic gradients.
// Lives in test code only; deliberately independent of the tape machinery it
// checks (it calls the forward path as a black box).
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sonus/tensor.hpp"

namespace sonus_test {

using sonus::Tensor;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "<param_idx>[<elem>] analytic=<a> fd=<f>"
  bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

// f: evaluates the scalar loss from scratch (must re-run the full forward).
// inputs: leaf tensors (f64, requires_grad already set).
// After one taped backward, every input's analytic grad is compared against
// central differences (f(x+eps) - f(x-eps)) / (2 eps) per element.
inline GradCheckResult gradcheck(const std::function<Tensor()>& f,
                                 std::vector<Tensor> inputs, double eps = 1e-5) {
  GradCheckResult res;
  {
    sonus::Tape tape;
    sonus::TapeScope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    auto g = in.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    auto data = inputs[pi].mutable_data();
    for (std::size_t ei = 0; ei < data.size(); ++ei) {
      const double orig = data[ei];
      data[ei] = orig + eps;
      const double fp = f().item();
      data[ei] = orig - eps;
      const double fm = f().item();
      data[ei] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[pi][ei];
      const double denom = std::max({std::fabs(an), std::fabs(fd), 1e-6});
      const double rel = std::fabs(an - fd) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(pi) + "[" + std::to_string(ei) +
                    "] analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace sonus_test
