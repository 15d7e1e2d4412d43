#include "smoothcert/binomial.hpp"

#include <algorithm>
#include <cmath>

#include "smoothcert/errors.hpp"

namespace smoothcert {

namespace {

// Continued fraction for the incomplete beta function, modified Lentz method.
double incbeta_cf(double a, double b, double x) {
  const double tiny = 1e-300;
  const double eps = 1e-16;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double incbeta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0))
    throw ContractError("incbeta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0))
    throw ContractError("incbeta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  // Use the continued fraction on the side where it converges fast.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * incbeta_cf(a, b, x) / a;
  return 1.0 - std::exp(ln_front) * incbeta_cf(b, a, 1.0 - x) / b;
}

double binomial_cdf(std::int64_t k, std::int64_t n, double p) {
  if (n < 0 || k > n)
    throw ContractError("binomial_cdf: need 0 <= k <= n");
  if (k < 0) return 0.0;
  if (k == n) return 1.0;
  if (p <= 0.0) return 1.0;
  if (p >= 1.0) return 0.0;
  // P[X <= k] = I_{1-p}(n - k, k + 1)
  return incbeta(static_cast<double>(n - k), static_cast<double>(k + 1), 1.0 - p);
}

double binomial_sf(std::int64_t k, std::int64_t n, double p) {
  if (n < 0 || k < 0)
    throw ContractError("binomial_sf: need 0 <= k and 0 <= n");
  if (k > n) return 0.0;
  if (k == 0) return 1.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  // P[X >= k] = I_p(k, n - k + 1)
  return incbeta(static_cast<double>(k), static_cast<double>(n - k + 1), p);
}

double clopper_pearson_lower(std::int64_t k, std::int64_t n, double alpha) {
  if (n <= 0 || k < 0 || k > n)
    throw ContractError("clopper_pearson_lower: need 0 <= k <= n, n > 0");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ContractError("clopper_pearson_lower: alpha must lie in (0, 1)");
  if (k == 0) return 0.0;
  if (k == n) return std::pow(alpha, 1.0 / static_cast<double>(n));
  // binomial_sf(k, n, p) grows monotonically from 0 to 1 in p.
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_sf(k, n, mid) < alpha)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double clopper_pearson_upper(std::int64_t k, std::int64_t n, double alpha) {
  if (n <= 0 || k < 0 || k > n)
    throw ContractError("clopper_pearson_upper: need 0 <= k <= n, n > 0");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ContractError("clopper_pearson_upper: alpha must lie in (0, 1)");
  if (k == n) return 1.0;
  if (k == 0) return 1.0 - std::pow(alpha, 1.0 / static_cast<double>(n));
  // binomial_cdf(k, n, p) falls monotonically from 1 to 0 in p.
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_cdf(k, n, mid) > alpha)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double binomial_two_sided_p(std::int64_t k, std::int64_t n, double p0) {
  if (n <= 0 || k < 0 || k > n)
    throw ContractError("binomial_two_sided_p: need 0 <= k <= n, n > 0");
  if (!(p0 > 0.0 && p0 < 1.0))
    throw ContractError("binomial_two_sided_p: p0 must lie in (0, 1)");
  const double lower = binomial_cdf(k, n, p0);
  const double upper = binomial_sf(k, n, p0);
  return std::min(1.0, 2.0 * std::min(lower, upper));
}

}  // namespace smoothcert
