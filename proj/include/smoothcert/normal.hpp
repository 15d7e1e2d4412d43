#ifndef SMOOTHCERT_NORMAL_HPP
#define SMOOTHCERT_NORMAL_HPP

namespace smoothcert {

/// Standard normal CDF.
double normal_cdf(double x);

/// Inverse standard normal CDF for p in (0, 1).
/// Absolute error is below 1e-9 across p in [1e-12, 1 - 1e-12].
/// Throws ContractError outside (0, 1).
double normal_quantile(double p);

}  // namespace smoothcert

#endif  // SMOOTHCERT_NORMAL_HPP
