#ifndef SMOOTHCERT_BINOMIAL_HPP
#define SMOOTHCERT_BINOMIAL_HPP

#include <cstdint>

namespace smoothcert {

/// Regularized incomplete beta function I_x(a, b) for a, b > 0, x in [0, 1].
double incbeta(double a, double b, double x);

/// P[X <= k] for X ~ Binomial(n, p).
double binomial_cdf(std::int64_t k, std::int64_t n, double p);

/// P[X >= k] for X ~ Binomial(n, p).
double binomial_sf(std::int64_t k, std::int64_t n, double p);

/// One-sided lower confidence bound on the success probability after
/// observing k successes in n trials: the p solving P[X >= k | p] = alpha.
/// Returns 0 for k = 0 and alpha^(1/n) for k = n.
double clopper_pearson_lower(std::int64_t k, std::int64_t n, double alpha);

/// One-sided upper confidence bound: the p solving P[X <= k | p] = alpha.
double clopper_pearson_upper(std::int64_t k, std::int64_t n, double alpha);

/// Exact two-sided binomial test p-value for k successes in n trials under
/// H0: success probability = p0.
double binomial_two_sided_p(std::int64_t k, std::int64_t n, double p0);

}  // namespace smoothcert

#endif  // SMOOTHCERT_BINOMIAL_HPP
