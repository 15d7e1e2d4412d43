#ifndef SMOOTHCERT_CONFIG_HPP
#define SMOOTHCERT_CONFIG_HPP

#include <stdexcept>
#include <string>
#include <vector>

#include "smoothcert/certify.hpp"
#include "smoothcert/peft.hpp"
#include "smoothcert/spsa.hpp"
#include "smoothcert/train.hpp"
#include "smoothcert/vit.hpp"

namespace smoothcert {

/// Bad command line or config file: the caller typed something wrong.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything one experiment needs, addressable by dotted field paths
/// (e.g. smoothing.sigma). Config files are plain key=value lines; the same
/// paths back the CLI overrides, and resolved() echoes the final state into
/// every artifact.
struct ExperimentConfig {
  std::string dataset_path;
  std::string dataset_format = "cifar10-bin";
  Eigen::Index dataset_limit = 2000;  // deterministic subset cap; 0 keeps everything
  VitConfig model;
  PeftConfig peft;
  TrainConfig train;
  SmoothingParams smoothing;
  Eigen::Index certify_skip = 1;
  Eigen::Index certify_max = -1;
  int certify_workers = 1;
  long spsa_steps = 2000;
  Eigen::Index spsa_batch = 32;
  SpsaSchedule schedule;
  CoordinatorConfig coordinator;
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  ExperimentConfig() { train.sigma = 0.25; }

  /// Assigns one field by path. Unknown paths and unparsable values throw
  /// UsageError naming the field.
  void set(const std::string& key, const std::string& value);

  /// The full configuration as ordered key=value lines. Values round-trip:
  /// feeding them back through set() reproduces this config exactly.
  std::vector<std::string> resolved() const;

  void validate() const;
};

/// Shortest decimal form that parses back to exactly the same double.
std::string format_double(double v);

/// Parses a key=value config file ('#' comments and blank lines allowed).
ExperimentConfig load_config_file(const std::string& path);

/// Applies key=value override strings on top of an existing config.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace smoothcert

#endif  // SMOOTHCERT_CONFIG_HPP
