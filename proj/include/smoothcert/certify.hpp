#ifndef SMOOTHCERT_CERTIFY_HPP
#define SMOOTHCERT_CERTIFY_HPP

#include <functional>
#include <string>
#include <vector>

#include "smoothcert/binomial.hpp"
#include "smoothcert/dataset.hpp"
#include "smoothcert/normal.hpp"
#include "smoothcert/rng.hpp"

namespace smoothcert {

/// Maps a batch of (noisy) pixel rows to one predicted class per row. The
/// certifier only ever sees classifiers through this: the ViT, the SPSA
/// decorated model, and analytic test classifiers all fit.
using BatchScorer = std::function<std::vector<int>(const Mat<float>&)>;

struct SmoothingParams {
  double sigma = 0.25;
  std::int64_t n0 = 100;    // selection samples
  std::int64_t n = 1000;    // estimation samples
  double alpha = 0.001;
  Eigen::Index batch = 128;

  void validate() const {
    if (sigma <= 0.0) throw ContractError("smoothing: sigma must be > 0");
    if (n0 < 1 || n < 1) throw ContractError("smoothing: sample counts must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0))
      throw ContractError("smoothing: alpha must be in (0, 1)");
    if (batch < 1) throw ContractError("smoothing: batch must be >= 1");
  }
};

constexpr int kAbstain = -1;

struct CertifyOutcome {
  int predicted = kAbstain;
  double radius = 0.0;
  double pa_lower = 0.0;
  std::vector<std::int64_t> counts;  // estimation-phase votes per class
  double seconds = 0.0;
};

/// Monte Carlo votes: k draws of x + N(0, sigma^2 I) through the scorer.
/// Sample s draws its noise from a stream keyed (seed, stream, example, s),
/// so the counts depend on neither the batch size nor any worker schedule.
std::vector<std::int64_t> sample_counts(const BatchScorer& scorer,
                                        Eigen::Index num_classes,
                                        const Mat<float>& x, double sigma,
                                        std::int64_t k, std::uint64_t seed,
                                        std::uint64_t stream, std::uint64_t example,
                                        Eigen::Index batch);

/// One-sided lower confidence bound on the top-class probability at level
/// 1 - alpha (exact Clopper-Pearson).
inline double lower_conf_bound(std::int64_t k, std::int64_t n, double alpha) {
  return clopper_pearson_lower(k, n, alpha);
}

/// Certified l2 radius sigma/2 (phi_inv(pa) - phi_inv(pb)); both bounds are
/// clamped to [1e-12, 1-1e-12] first. pa <= pb yields no certificate.
double certified_radius(double sigma, double pa_lower, double pb_upper);

/// Two-phase certification: n0 selection samples pick the candidate class,
/// n fresh estimation samples bound its probability, abstaining when the
/// bound does not clear 1/2.
CertifyOutcome certify(const BatchScorer& scorer, Eigen::Index num_classes,
                       const Mat<float>& x, const SmoothingParams& params,
                       std::uint64_t seed, std::uint64_t example);

/// Majority-vote prediction with an exact two-sided binomial test of the top
/// two counts; returns kAbstain unless fairness is rejected at alpha.
int predict(const BatchScorer& scorer, Eigen::Index num_classes, const Mat<float>& x,
            const SmoothingParams& params, std::uint64_t seed, std::uint64_t example);

struct CertifyRow {
  Eigen::Index idx = 0;
  int label = 0;
  int predict = kAbstain;
  double radius = 0.0;
  bool correct = false;
  double seconds = 0.0;
};

struct CertifyDatasetOptions {
  Eigen::Index skip = 1;    // certify every skip-th example
  Eigen::Index max = -1;    // row limit; -1 means no limit
  int workers = 1;          // workers > 1 needs a scorer safe for concurrent calls
  bool resume = true;
  std::vector<std::string> provenance;  // echoed as leading # comment lines
};

struct ResultsFile {
  std::vector<std::string> provenance;
  std::vector<CertifyRow> rows;
};

/// Certifies every skip-th example, streaming TSV rows to out_path in index
/// order. An existing compatible results file is resumed: finished indices
/// are kept and only missing ones are computed. Returns the full row set.
std::vector<CertifyRow> certify_dataset(const BatchScorer& scorer, const Dataset& ds,
                                        const SmoothingParams& params, std::uint64_t seed,
                                        const std::string& out_path,
                                        const CertifyDatasetOptions& options);

/// Reads a results TSV written by certify_dataset.
ResultsFile read_results(const std::string& path);

}  // namespace smoothcert

#endif  // SMOOTHCERT_CERTIFY_HPP
