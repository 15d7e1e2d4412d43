#include "smoothcert/certify.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace smoothcert {

namespace {

int argmax_lowest(const std::vector<std::int64_t>& counts) {
  int best = 0;
  for (std::size_t c = 1; c < counts.size(); ++c)
    if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

}  // namespace

std::vector<std::int64_t> sample_counts(const BatchScorer& scorer,
                                        Eigen::Index num_classes,
                                        const Mat<float>& x, double sigma,
                                        std::int64_t k, std::uint64_t seed,
                                        std::uint64_t stream, std::uint64_t example,
                                        Eigen::Index batch) {
  if (num_classes < 1) throw ContractError("sample_counts: need at least one class");
  if (x.rows() != 1) throw ContractError("sample_counts: x must be a single pixel row");
  if (sigma < 0.0) throw ContractError("sample_counts: sigma must be >= 0");
  if (k < 1) throw ContractError("sample_counts: k must be >= 1");
  if (batch < 1) throw ContractError("sample_counts: batch must be >= 1");

  const Eigen::Index pixels = x.cols();
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::int64_t at = 0; at < k; at += batch) {
    const auto take = static_cast<Eigen::Index>(std::min<std::int64_t>(batch, k - at));
    Mat<float> noisy(take, pixels);
    for (Eigen::Index i = 0; i < take; ++i) {
      Rng rng(derive_key(seed, stream, example,
                         static_cast<std::uint64_t>(at + i)));
      for (Eigen::Index j = 0; j < pixels; ++j)
        noisy(i, j) = x(0, j) + static_cast<float>(sigma * rng.normal());
    }
    const std::vector<int> pred = scorer(noisy);
    if (pred.size() != static_cast<std::size_t>(take))
      throw ContractError("sample_counts: scorer returned " +
                          std::to_string(pred.size()) + " labels for " +
                          std::to_string(take) + " rows");
    for (int c : pred) {
      if (c < 0 || c >= num_classes)
        throw ContractError("sample_counts: scorer emitted class " + std::to_string(c));
      ++counts[static_cast<std::size_t>(c)];
    }
  }
  return counts;
}

double certified_radius(double sigma, double pa_lower, double pb_upper) {
  if (sigma <= 0.0) throw ContractError("certified_radius: sigma must be > 0");
  const double lo = 1e-12, hi = 1.0 - 1e-12;
  const double pa = std::min(hi, std::max(lo, pa_lower));
  const double pb = std::min(hi, std::max(lo, pb_upper));
  if (pa <= pb) return 0.0;
  return 0.5 * sigma * (normal_quantile(pa) - normal_quantile(pb));
}

CertifyOutcome certify(const BatchScorer& scorer, Eigen::Index num_classes,
                       const Mat<float>& x, const SmoothingParams& params,
                       std::uint64_t seed, std::uint64_t example) {
  params.validate();
  const auto t0 = std::chrono::steady_clock::now();

  const auto selection =
      sample_counts(scorer, num_classes, x, params.sigma, params.n0, seed,
                    streams::kCertifySelect, example, params.batch);
  const int ca = argmax_lowest(selection);

  CertifyOutcome out;
  out.counts = sample_counts(scorer, num_classes, x, params.sigma, params.n, seed,
                             streams::kCertifyEstimate, example, params.batch);
  const std::int64_t k = out.counts[static_cast<std::size_t>(ca)];
  out.pa_lower = lower_conf_bound(k, params.n, params.alpha);
  if (out.pa_lower > 0.5) {
    out.predicted = ca;
    out.radius = certified_radius(params.sigma, out.pa_lower, 1.0 - out.pa_lower);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

int predict(const BatchScorer& scorer, Eigen::Index num_classes, const Mat<float>& x,
            const SmoothingParams& params, std::uint64_t seed, std::uint64_t example) {
  params.validate();
  const auto counts = sample_counts(scorer, num_classes, x, params.sigma, params.n, seed,
                                    streams::kPredict, example, params.batch);
  const int top = argmax_lowest(counts);
  std::int64_t second = 0;
  for (int c = 0; c < static_cast<int>(counts.size()); ++c)
    if (c != top)
      second = std::max(second, counts[static_cast<std::size_t>(c)]);
  const std::int64_t na = counts[static_cast<std::size_t>(top)];
  const double p = binomial_two_sided_p(na, na + second, 0.5);
  return p <= params.alpha ? top : kAbstain;
}

namespace {

constexpr const char* kHeader = "idx\tlabel\tpredict\tradius\tcorrect\ttime";

std::string format_row(const CertifyRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld\t%d\t%d\t%.6f\t%d\tPT%.3fS\n",
                static_cast<long long>(r.idx), r.label, r.predict, r.radius,
                r.correct ? 1 : 0, r.seconds);
  return buf;
}

CertifyRow parse_row(const std::string& line, const std::string& path) {
  CertifyRow r;
  long long idx = 0;
  int correct = 0;
  double secs = 0.0;
  if (std::sscanf(line.c_str(), "%lld\t%d\t%d\t%lf\t%d\tPT%lfS", &idx, &r.label,
                  &r.predict, &r.radius, &correct, &secs) != 6)
    throw DataError(path + ": malformed results row: " + line);
  r.idx = static_cast<Eigen::Index>(idx);
  r.correct = correct != 0;
  r.seconds = secs;
  return r;
}

}  // namespace

ResultsFile read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw DataError("cannot open " + path);
  ResultsFile rf;
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::size_t at = line.size() > 1 && line[1] == ' ' ? 2 : 1;
      rf.provenance.push_back(line.substr(at));
      continue;
    }
    if (!saw_header) {
      if (line != kHeader)
        throw DataError(path + ": missing results header, found: " + line);
      saw_header = true;
      continue;
    }
    rf.rows.push_back(parse_row(line, path));
  }
  if (!saw_header) throw DataError(path + ": missing results header");
  return rf;
}

std::vector<CertifyRow> certify_dataset(const BatchScorer& scorer, const Dataset& ds,
                                        const SmoothingParams& params, std::uint64_t seed,
                                        const std::string& out_path,
                                        const CertifyDatasetOptions& options) {
  params.validate();
  if (options.skip < 1) throw ContractError("certify_dataset: skip must be >= 1");
  if (options.workers < 1) throw ContractError("certify_dataset: workers must be >= 1");
  if (ds.size() == 0) throw DataError("certify_dataset: empty dataset");

  std::vector<Eigen::Index> targets;
  for (Eigen::Index idx = 0; idx < ds.size(); idx += options.skip) {
    if (options.max >= 0 && static_cast<Eigen::Index>(targets.size()) >= options.max) break;
    targets.push_back(idx);
  }

  // Resume: an existing compatible file must hold a prefix of the target
  // list; everything else is a configuration mix-up worth refusing.
  std::vector<CertifyRow> done;
  const bool have_file = static_cast<bool>(std::ifstream(out_path));
  if (options.resume && have_file) {
    ResultsFile rf = read_results(out_path);
    if (rf.provenance != options.provenance)
      throw DataError(out_path + ": existing results were written under a different configuration");
    if (rf.rows.size() > targets.size())
      throw DataError(out_path + ": existing results hold more rows than requested");
    for (std::size_t i = 0; i < rf.rows.size(); ++i)
      if (rf.rows[i].idx != targets[i])
        throw DataError(out_path + ": existing results do not match the requested example set");
    done = std::move(rf.rows);
  }

  std::ofstream out;
  if (done.empty()) {
    out.open(out_path, std::ios::trunc);
    if (!out.good()) throw DataError("cannot open " + out_path + " for writing");
    for (const auto& line : options.provenance) out << "# " << line << "\n";
    out << kHeader << "\n";
  } else {
    out.open(out_path, std::ios::app);
    if (!out.good()) throw DataError("cannot open " + out_path + " for appending");
  }
  out.flush();

  const std::size_t first_pending = done.size();
  std::vector<CertifyRow> fresh(targets.size() - first_pending);
  std::mutex mu;
  std::size_t next_claim = first_pending;
  std::size_t next_flush = first_pending;
  std::map<std::size_t, const CertifyRow*> ready;
  std::string io_error;

  auto work = [&]() {
    for (;;) {
      std::size_t pos;
      {
        std::lock_guard<std::mutex> lk(mu);
        if (next_claim >= targets.size() || !io_error.empty()) return;
        pos = next_claim++;
      }
      const Eigen::Index idx = targets[pos];
      Mat<float> x = ds.images.row(idx);
      const CertifyOutcome oc =
          certify(scorer, ds.num_classes, x, params, seed, static_cast<std::uint64_t>(idx));
      CertifyRow row;
      row.idx = idx;
      row.label = ds.labels[static_cast<std::size_t>(idx)];
      row.predict = oc.predicted;
      row.radius = oc.radius;
      row.correct = oc.predicted != kAbstain && oc.predicted == row.label;
      row.seconds = oc.seconds;

      std::lock_guard<std::mutex> lk(mu);
      fresh[pos - first_pending] = row;
      ready[pos] = &fresh[pos - first_pending];
      while (!ready.empty() && ready.begin()->first == next_flush) {
        out << format_row(*ready.begin()->second);
        ready.erase(ready.begin());
        ++next_flush;
      }
      out.flush();
      if (!out.good() && io_error.empty()) io_error = "write failed on " + out_path;
    }
  };

  if (options.workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < options.workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (!io_error.empty()) throw DataError(io_error);

  done.insert(done.end(), fresh.begin(), fresh.end());
  return done;
}

}  // namespace smoothcert
