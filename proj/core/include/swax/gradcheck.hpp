#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "swax/autodiff.hpp"

namespace swax {

/// Builds a scalar loss on `tape` from the leaves bound to the parameters.
using LossBuilder = std::function<Var<double>(Tape<double>& tape, const std::vector<Var<double>>& params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences of step
/// `h`, per coordinate |a - c| / (|a| + |c| + 1e-12), and reports the maximum.
/// Throws NumericError if the loss evaluates to a non-finite value.
GradCheckReport finite_difference_check(const LossBuilder& loss, const std::vector<Tensor<double>>& params,
                                        double h = 1e-5);

}  // namespace swax
