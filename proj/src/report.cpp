#include "smoothcert/report.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "smoothcert/config.hpp"
#include "smoothcert/errors.hpp"

namespace smoothcert {

namespace {

constexpr const char* kCurveHeader = "radius,certified_acc";

/// Keys write_curve_csv emits itself; duplicates in caller provenance are
/// dropped so a results file's embedded summaries do not appear twice.
bool owned_key(const std::string& line) {
  for (const char* key : {"clean_acc=", "abstain_rate=", "trained_params="})
    if (line.rfind(key, 0) == 0) return true;
  return false;
}

/// Finds "key=value" in provenance lines and parses the value, or throws.
std::string provenance_value(const std::vector<std::string>& provenance, const std::string& key,
                             const std::string& where) {
  const std::string prefix = key + "=";
  for (const auto& line : provenance)
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  throw DataError(where + ": provenance lacks " + key);
}

double parse_number(const std::string& text, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0')
    throw DataError(what + ": cannot parse '" + text + "'");
  return v;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::vector<double> default_radii() {
  std::vector<double> radii;
  radii.reserve(41);
  for (int k = 0; k <= 40; ++k) radii.push_back(static_cast<double>(5 * k) / 100.0);
  return radii;
}

CertifiedAccuracyCurve make_curve(const ResultsFile& results, const std::vector<double>& radii) {
  if (results.rows.empty()) throw DataError("results hold no rows");
  if (radii.empty()) throw DataError("empty radius grid");

  CertifiedAccuracyCurve curve;
  curve.radii = radii;
  curve.clean_acc =
      parse_number(provenance_value(results.provenance, "clean_acc", "results"), "clean_acc");
  curve.trained_params = static_cast<std::int64_t>(
      parse_number(provenance_value(results.provenance, "trained_params", "results"),
                   "trained_params"));

  const double n = static_cast<double>(results.rows.size());
  std::int64_t abstained = 0;
  for (const auto& row : results.rows)
    if (row.predict == kAbstain) ++abstained;
  curve.abstain_rate = static_cast<double>(abstained) / n;

  curve.acc.reserve(radii.size());
  for (double r : radii) {
    std::int64_t hits = 0;
    for (const auto& row : results.rows)
      // Radii pass through a six-decimal text round trip; the slack keeps a
      // row whose radius equals a grid point from dropping out.
      if (row.correct && row.radius >= r - 1e-9) ++hits;
    curve.acc.push_back(static_cast<double>(hits) / n);
  }
  return curve;
}

CertifiedAccuracyCurve curve_from_results(const std::string& path,
                                          const std::vector<double>& radii) {
  return make_curve(read_results(path), radii);
}

void write_curve_csv(const std::string& path, const CertifiedAccuracyCurve& curve,
                     const std::vector<std::string>& provenance) {
  if (curve.radii.size() != curve.acc.size())
    throw ContractError("curve radii and accuracies differ in length");
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + path + " for writing");
  for (const auto& line : provenance)
    if (!owned_key(line)) out << "# " << line << "\n";
  out << "# clean_acc=" << format_double(curve.clean_acc) << "\n";
  out << "# abstain_rate=" << format_double(curve.abstain_rate) << "\n";
  out << "# trained_params=" << curve.trained_params << "\n";
  out << kCurveHeader << "\n";
  for (std::size_t i = 0; i < curve.radii.size(); ++i)
    out << fixed6(curve.radii[i]) << "," << fixed6(curve.acc[i]) << "\n";
  if (!out.good()) throw DataError("write failed: " + path);
}

CertifiedAccuracyCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw DataError("cannot open " + path);
  CertifiedAccuracyCurve curve;
  std::vector<std::string> provenance;
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::size_t at = line.size() > 1 && line[1] == ' ' ? 2 : 1;
      provenance.push_back(line.substr(at));
      continue;
    }
    if (!saw_header) {
      if (line != kCurveHeader)
        throw DataError(path + ": missing curve header, found: " + line);
      saw_header = true;
      continue;
    }
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) throw DataError(path + ": malformed row: " + line);
    curve.radii.push_back(parse_number(line.substr(0, comma), path + ": radius"));
    curve.acc.push_back(parse_number(line.substr(comma + 1), path + ": certified_acc"));
  }
  if (!saw_header) throw DataError(path + ": missing curve header");
  if (curve.radii.empty()) throw DataError(path + ": curve holds no rows");
  curve.clean_acc = parse_number(provenance_value(provenance, "clean_acc", path), "clean_acc");
  curve.abstain_rate =
      parse_number(provenance_value(provenance, "abstain_rate", path), "abstain_rate");
  curve.trained_params = static_cast<std::int64_t>(
      parse_number(provenance_value(provenance, "trained_params", path), "trained_params"));
  return curve;
}

std::string compare_table(const std::vector<std::string>& names,
                          const std::vector<CertifiedAccuracyCurve>& curves) {
  if (curves.empty()) throw ContractError("nothing to compare");
  if (names.size() != curves.size()) throw ContractError("one name per curve required");
  const std::vector<double>& grid = curves.front().radii;
  for (const auto& curve : curves)
    if (curve.radii != grid) throw DataError("curves do not share a radii grid");

  std::ostringstream out;
  out << "radius";
  for (const auto& name : names) out << "\t" << name;
  out << "\n";

  char buf[64];
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.2f", grid[i]);
    out << buf;
    double best = curves.front().acc[i];
    int best_count = 0;
    for (const auto& curve : curves) {
      if (curve.acc[i] > best) best = curve.acc[i];
    }
    for (const auto& curve : curves)
      if (curve.acc[i] == best) ++best_count;
    for (const auto& curve : curves) {
      std::snprintf(buf, sizeof(buf), "%.4f", curve.acc[i]);
      out << "\t" << buf;
      if (curves.size() > 1 && curve.acc[i] == best) out << (best_count == 1 ? "*" : "=");
    }
    out << "\n";
  }

  out << "params";
  for (const auto& curve : curves) out << "\t" << curve.trained_params;
  out << "\n";
  out << "clean";
  for (const auto& curve : curves) {
    std::snprintf(buf, sizeof(buf), "%.4f", curve.clean_acc);
    out << "\t" << buf;
  }
  out << "\n";
  out << "abstain";
  for (const auto& curve : curves) {
    std::snprintf(buf, sizeof(buf), "%.4f", curve.abstain_rate);
    out << "\t" << buf;
  }
  out << "\n";
  return out.str();
}

}  // namespace smoothcert
