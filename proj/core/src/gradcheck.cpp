#include "swax/gradcheck.hpp"

#include <cmath>
#include <string>

namespace swax {
namespace {

constexpr double kRelEps = 1e-12;

double evaluate(const LossBuilder& loss, const std::vector<Tensor<double>>& params) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, false));
  const Var<double> out = loss(tape, leaves);
  if (out.value().size() != 1) throw ShapeError("finite_difference_check: loss must be scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport finite_difference_check(const LossBuilder& loss, const std::vector<Tensor<double>>& params,
                                        double h) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
    const Var<double> out = loss(tape, leaves);
    if (!std::isfinite(out.value()[0])) throw NumericError("finite_difference_check: loss is not finite");
    tape.backward(out);
    for (const auto& leaf : leaves) analytic.push_back(tape.grad(leaf));
  }

  GradCheckReport report;
  std::vector<Tensor<double>> work = params;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + h;
      const double up = evaluate(loss, work);
      work[p][i] = orig - h;
      const double down = evaluate(loss, work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + kRelEps);
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace swax
