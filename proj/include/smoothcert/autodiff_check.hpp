#ifndef SMOOTHCERT_AUTODIFF_CHECK_HPP
#define SMOOTHCERT_AUTODIFF_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "smoothcert/tensor.hpp"

namespace smoothcert {

/// Compares reverse-mode gradients against central finite differences.
/// Gradient checking is a double-precision affair by design; float gradients
/// drown in truncation error long before a real bug shows up.
///
/// build_loss must construct a scalar loss from the given parameters and be
/// safe to call repeatedly (it runs once under a Recording and twice per
/// perturbed entry without one). Returns the worst relative error seen.
template <class BuildLoss>
double finite_difference_check(BuildLoss&& build_loss,
                               const std::vector<Tensor<double>*>& params,
                               double h = 1e-6) {
  for (auto* p : params)
    if (!p->requires_grad())
      throw ContractError("finite_difference_check: parameter does not require grad");

  std::vector<Mat<double>> analytic;
  {
    for (auto* p : params) p->zero_grad();
    Recording<double> rec;
    Tensor<double> loss = build_loss();
    rec.backward(loss);
    for (auto* p : params)
      analytic.push_back(p->has_grad() ? p->grad()
                                       : Mat<double>::Zero(p->rows(), p->cols()));
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& v = params[pi]->value();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const double keep = v(i, j);
        v(i, j) = keep + h;
        const double up = build_loss().scalar();
        v(i, j) = keep - h;
        const double down = build_loss().scalar();
        v(i, j) = keep;
        const double fd = (up - down) / (2.0 * h);
        const double ad = analytic[pi](i, j);
        const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-8});
        worst = std::max(worst, std::fabs(fd - ad) / denom);
      }
    }
  }
  for (auto* p : params) p->zero_grad();
  return worst;
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_AUTODIFF_CHECK_HPP
