#ifndef SMOOTHCERT_REPORT_HPP
#define SMOOTHCERT_REPORT_HPP

#include <string>
#include <vector>

#include "smoothcert/certify.hpp"

namespace smoothcert {

/// Certified-accuracy curve over a radius grid, plus the scalar summaries a
/// report needs. Everything here is derived from a results TSV alone: the
/// per-row columns give the curve and abstain rate, and clean_acc /
/// trained_params are read back from the provenance lines the certification
/// run embedded.
struct CertifiedAccuracyCurve {
  std::vector<double> radii;
  std::vector<double> acc;
  double clean_acc = 0.0;
  double abstain_rate = 0.0;
  std::int64_t trained_params = 0;
};

/// Radius grid 0.0, 0.05, ..., 2.0 (41 points). Values are the
/// nearest-double of each decimal, so a grid written at six decimal places
/// and parsed back compares equal.
std::vector<double> default_radii();

/// Builds the curve from parsed results. acc(r) is the fraction of rows that
/// are correct with certified radius at least r; abstentions count against
/// accuracy at every radius. Throws DataError if the file has no rows or the
/// provenance lacks clean_acc / trained_params.
CertifiedAccuracyCurve make_curve(const ResultsFile& results, const std::vector<double>& radii);

/// read_results + make_curve.
CertifiedAccuracyCurve curve_from_results(const std::string& path, const std::vector<double>& radii);

/// Writes "# key=value" provenance lines, the curve summaries, a
/// "radius,certified_acc" header, then one row per grid point. Provenance
/// lines for keys the curve owns (clean_acc, abstain_rate, trained_params)
/// are dropped from `provenance` in favour of the curve's values.
void write_curve_csv(const std::string& path, const CertifiedAccuracyCurve& curve,
                     const std::vector<std::string>& provenance);

/// Reads a curve CSV written by write_curve_csv.
CertifiedAccuracyCurve read_curve_csv(const std::string& path);

/// Aligned tab-separated comparison of curves over a shared radius grid: one
/// column per curve plus summary rows for parameter counts and clean
/// accuracy. With more than one curve the best cell per radius is marked, *
/// for a unique maximum and = for a tie. Throws DataError if the grids
/// differ.
std::string compare_table(const std::vector<std::string>& names,
                          const std::vector<CertifiedAccuracyCurve>& curves);

}  // namespace smoothcert

#endif  // SMOOTHCERT_REPORT_HPP
