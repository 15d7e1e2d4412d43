// smoothcert: batch front-end for the certified-robustness toolkit.
//
// Configuration precedence per command: built-in defaults, then --config
// file, then --set key=value overrides, then dedicated flags. The resolved
// configuration is echoed into every text artifact and written next to the
// artifacts as resolved_<command>.cfg, which is itself a valid --config file.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smoothcert/checkpoint.hpp"
#include "smoothcert/config.hpp"
#include "smoothcert/report.hpp"
#include "smoothcert/spsa.hpp"
#include "smoothcert/train.hpp"

namespace fs = std::filesystem;
using namespace smoothcert;

namespace {

/// One command at a time per output directory. The lock file is removed on
/// destruction; a crash can leave it behind, in which case the error message
/// says what to delete.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw DataError("output directory " + dir +
                      " is in use by another command (remove " + path_ + " if stale)");
    ::close(fd);
  }
  ~DirLock() { ::unlink(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

/// Shared flags. Values are kept as strings and pushed through
/// ExperimentConfig::set so every parse failure names its field path.
struct CommonArgs {
  std::string config_path;
  std::vector<std::string> defines;
  std::string dataset, format, limit;
  std::string sigma, n0, n, alpha;
  std::string peft, rank, prompt_len;
  std::string seed, skip, max, workers, out;
  std::string epochs, batch, lr;
  std::string spsa_steps, spsa_batch;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value config file");
  cmd->add_option("--set", a.defines, "override, e.g. --set smoothing.n=500 (repeatable)");
  cmd->add_option("--dataset", a.dataset, "dataset file path");
  cmd->add_option("--dataset-format", a.format, "cifar10-bin | idx | raw");
  cmd->add_option("--limit", a.limit, "deterministic subset size, 0 keeps everything");
  cmd->add_option("--sigma", a.sigma, "noise level for training and certification");
  cmd->add_option("--n0", a.n0, "selection sample count");
  cmd->add_option("--n", a.n, "estimation sample count");
  cmd->add_option("--alpha", a.alpha, "certification failure probability");
  cmd->add_option("--peft", a.peft, "lora | adapter | prompt | full | none");
  cmd->add_option("--rank", a.rank, "LoRA rank");
  cmd->add_option("--prompt-len", a.prompt_len, "deep prompt length");
  cmd->add_option("--seed", a.seed, "experiment seed");
  cmd->add_option("--skip", a.skip, "certify every skip-th example");
  cmd->add_option("--max", a.max, "certify at most this many examples, -1 for all");
  cmd->add_option("--workers", a.workers, "certification worker threads");
  cmd->add_option("--epochs", a.epochs, "training epochs");
  cmd->add_option("--batch", a.batch, "training batch size");
  cmd->add_option("--lr", a.lr, "learning rate");
  cmd->add_option("--steps", a.spsa_steps, "SPSA steps");
  cmd->add_option("--spsa-batch", a.spsa_batch, "SPSA loss batch size");
  cmd->add_option("--out", a.out, "output directory");
}

ExperimentConfig build_config(const CommonArgs& a) {
  ExperimentConfig cfg =
      a.config_path.empty() ? ExperimentConfig{} : load_config_file(a.config_path);
  apply_overrides(cfg, a.defines);
  auto over = [&](const char* key, const std::string& v) {
    if (!v.empty()) cfg.set(key, v);
  };
  over("dataset.path", a.dataset);
  over("dataset.format", a.format);
  over("dataset.limit", a.limit);
  // One noise level drives both the augmented training and the certifier.
  if (!a.sigma.empty()) {
    cfg.set("train.sigma", a.sigma);
    cfg.set("smoothing.sigma", a.sigma);
  }
  over("smoothing.n0", a.n0);
  over("smoothing.n", a.n);
  over("smoothing.alpha", a.alpha);
  over("peft.method", a.peft);
  over("peft.rank", a.rank);
  over("peft.prompt_length", a.prompt_len);
  over("seed", a.seed);
  over("certify.skip", a.skip);
  over("certify.max", a.max);
  over("certify.workers", a.workers);
  over("train.epochs", a.epochs);
  over("train.batch_size", a.batch);
  over("train.learning_rate", a.lr);
  over("spsa.steps", a.spsa_steps);
  over("spsa.batch_size", a.spsa_batch);
  over("out", a.out);
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

void write_resolved(const ExperimentConfig& cfg, const std::string& command) {
  const std::string path = cfg.out_dir + "/resolved_" + command + ".cfg";
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + path + " for writing");
  out << "# resolved " << command << " configuration; reusable via --config\n";
  for (const auto& line : cfg.resolved()) out << line << "\n";
}

std::string method_tag(const ExperimentConfig& cfg) { return to_string(cfg.peft.method); }

std::string default_backbone(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/backbone.psmc";
}

std::string default_peft_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/peft_" + method_tag(cfg) + ".psmc";
}

std::string pick(const std::string& given, const std::string& fallback) {
  return given.empty() ? fallback : given;
}

Dataset load_experiment_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset_path.empty())
    throw UsageError("dataset.path is required (--dataset or dataset.path=...)");
  Dataset ds = load_dataset(cfg.dataset_path, cfg.dataset_format);
  if (cfg.dataset_limit > 0 && ds.size() > cfg.dataset_limit)
    ds = subset(ds, cfg.dataset_limit, cfg.seed);
  return ds;
}

VitModel<float> load_backbone(const std::string& path) {
  if (!fs::exists(path))
    throw DataError("missing checkpoint " + path + " (run pretrain first)");
  return load_checkpoint<float>(path);
}

/// The model certify/predict evaluates: the plain backbone for method none,
/// the saved full checkpoint for method full, otherwise backbone + delta.
VitModel<float> load_eval_model(const ExperimentConfig& cfg, const std::string& backbone_path,
                                const std::string& peft_path) {
  if (cfg.peft.method == PeftMethod::none) return load_backbone(backbone_path);
  if (cfg.peft.method == PeftMethod::full) {
    if (!fs::exists(peft_path))
      throw DataError("missing checkpoint " + peft_path + " (run finetune first)");
    return load_checkpoint<float>(peft_path);
  }
  VitModel<float> m = load_backbone(backbone_path);
  if (!fs::exists(peft_path))
    throw DataError("missing checkpoint " + peft_path + " (run finetune first)");
  load_peft_checkpoint(peft_path, m);
  return m;
}

std::int64_t trained_param_count(VitModel<float>& m, PeftMethod method) {
  return method == PeftMethod::none ? 0 : count_parameters(m, true);
}

/// Certifier-facing view of a model: noisy pixels in, one class per row out.
/// Grad-free forward passes never touch shared state, so one model serves
/// every certification worker.
BatchScorer vit_scorer(VitModel<float>& m) {
  return [&m](const Mat<float>& x) { return argmax_rows(forward_logits(m, x)); };
}

/// Applies a trained pixel prompt to every image, in chunks to keep the
/// encoder forward pass small.
void decorate_dataset(Coordinator& co, Dataset& ds) {
  const Eigen::Index chunk = 256;
  for (Eigen::Index at = 0; at < ds.size(); at += chunk) {
    const Eigen::Index take = std::min(chunk, ds.size() - at);
    ds.images.middleRows(at, take) =
        co.decorate_clean(Mat<float>(ds.images.middleRows(at, take)));
  }
}

void do_pretrain(const ExperimentConfig& cfg) {
  Dataset ds = load_experiment_dataset(cfg);
  VitModel<float> model = init_model<float>(cfg.model, cfg.seed);
  TrainConfig tc = cfg.train;
  tc.mode = "clean_pretrain";
  const std::vector<EpochStats> trace = train(model, ds, tc);
  save_checkpoint(model, default_backbone(cfg));
  write_loss_csv(cfg.out_dir + "/loss_pretrain.csv", trace, cfg.resolved());
  std::cout << "pretrained " << count_parameters(model, false) << " parameters on "
            << ds.size() << " examples\n"
            << "final clean accuracy " << format_double(trace.back().clean_acc) << "\n"
            << "wrote " << default_backbone(cfg) << "\n";
}

void do_finetune(const ExperimentConfig& cfg, const std::string& backbone_path) {
  if (cfg.peft.method == PeftMethod::none)
    throw UsageError("peft.method=none trains nothing; pick lora, adapter, prompt, or full");
  Dataset ds = load_experiment_dataset(cfg);
  VitModel<float> model = load_backbone(backbone_path);
  attach(model, cfg.peft, cfg.seed);
  TrainConfig tc = cfg.train;
  if (tc.mode == "clean_pretrain") tc.mode = "noise_finetune";
  const std::vector<EpochStats> trace = train(model, ds, tc);
  save_checkpoint(model, default_peft_path(cfg));
  write_loss_csv(cfg.out_dir + "/loss_" + method_tag(cfg) + ".csv", trace, cfg.resolved());
  std::cout << method_tag(cfg) << " tuned " << count_parameters(model, true)
            << " parameters for " << tc.epochs << " epochs at sigma "
            << format_double(tc.effective_sigma()) << "\n"
            << "final noisy accuracy " << format_double(trace.back().noisy_acc) << "\n"
            << "wrote " << default_peft_path(cfg) << "\n";
}

/// Shared setup for certify and predict: evaluation model, optionally a
/// coordinator-decorated dataset, and provenance lines carrying the resolved
/// config plus the summaries the report stage reads back.
struct EvalSetup {
  Dataset ds;
  VitModel<float> model;
  std::vector<std::string> provenance;
};

EvalSetup prepare_eval(const ExperimentConfig& cfg, const std::string& backbone_path,
                       const std::string& peft_path, const std::string& coordinator_path) {
  EvalSetup s{load_experiment_dataset(cfg),
              load_eval_model(cfg, backbone_path, peft_path),
              cfg.resolved()};
  if (!coordinator_path.empty()) {
    if (!fs::exists(coordinator_path))
      throw DataError("missing coordinator checkpoint " + coordinator_path);
    Coordinator co = load_coordinator(coordinator_path, load_backbone(backbone_path));
    decorate_dataset(co, s.ds);
    s.provenance.push_back("coordinator=" + coordinator_path);
  }
  const double clean_acc = evaluate(s.model, s.ds, 0.0, cfg.seed);
  std::int64_t params = trained_param_count(s.model, cfg.peft.method);
  s.provenance.push_back("clean_acc=" + format_double(clean_acc));
  s.provenance.push_back("trained_params=" + std::to_string(params));
  return s;
}

void do_certify(const ExperimentConfig& cfg, const std::string& backbone_path,
                const std::string& peft_path, const std::string& coordinator_path,
                const std::string& results_path) {
  EvalSetup s = prepare_eval(cfg, backbone_path, peft_path, coordinator_path);
  CertifyDatasetOptions options;
  options.skip = cfg.certify_skip;
  options.max = cfg.certify_max;
  options.workers = cfg.certify_workers;
  options.provenance = s.provenance;
  const BatchScorer scorer = vit_scorer(s.model);
  const std::vector<CertifyRow> rows =
      certify_dataset(scorer, s.ds, cfg.smoothing, cfg.seed, results_path, options);

  Eigen::Index abstained = 0, correct = 0;
  double radius_sum = 0.0;
  for (const auto& r : rows) {
    if (r.predict == kAbstain) ++abstained;
    if (r.correct) {
      ++correct;
      radius_sum += r.radius;
    }
  }
  const double nrows = static_cast<double>(rows.size());
  std::cout << "certified " << rows.size() << " examples at sigma "
            << format_double(cfg.smoothing.sigma) << "\n"
            << "certified accuracy at r=0: "
            << format_double(static_cast<double>(correct) / nrows) << "\n"
            << "abstain rate: " << format_double(static_cast<double>(abstained) / nrows)
            << "\n";
  if (correct > 0)
    std::cout << "mean certified radius (correct rows): "
              << format_double(radius_sum / static_cast<double>(correct)) << "\n";
  std::cout << "wrote " << results_path << "\n";
}

void do_predict(const ExperimentConfig& cfg, const std::string& backbone_path,
                const std::string& peft_path, const std::string& coordinator_path,
                const std::string& out_path) {
  EvalSetup s = prepare_eval(cfg, backbone_path, peft_path, coordinator_path);
  const BatchScorer scorer = vit_scorer(s.model);

  std::ofstream out(out_path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + out_path + " for writing");
  for (const auto& line : s.provenance) out << "# " << line << "\n";
  out << "idx\tlabel\tpredict\tcorrect\n";

  Eigen::Index done = 0, abstained = 0, correct = 0;
  for (Eigen::Index idx = 0; idx < s.ds.size(); idx += cfg.certify_skip) {
    if (cfg.certify_max >= 0 && done >= cfg.certify_max) break;
    const Mat<float> x = s.ds.images.row(idx);
    const int label = s.ds.labels[static_cast<std::size_t>(idx)];
    const int pred = predict(scorer, cfg.model.num_classes, x, cfg.smoothing, cfg.seed,
                             static_cast<std::uint64_t>(idx));
    if (pred == kAbstain) ++abstained;
    if (pred == label) ++correct;
    out << idx << "\t" << label << "\t" << pred << "\t" << (pred == label ? 1 : 0) << "\n";
    ++done;
  }
  if (!out.good()) throw DataError("write failed on " + out_path);
  const double n = static_cast<double>(done);
  std::cout << "predicted " << done << " examples\n"
            << "accuracy: " << format_double(static_cast<double>(correct) / n) << "\n"
            << "abstain rate: " << format_double(static_cast<double>(abstained) / n) << "\n"
            << "wrote " << out_path << "\n";
}

void do_spsa_train(const ExperimentConfig& cfg, const std::string& backbone_path,
                   const std::string& peft_path, const std::string& coordinator_out) {
  Dataset ds = load_experiment_dataset(cfg);
  VitModel<float> encoder = load_backbone(backbone_path);
  VitModel<float> target = load_eval_model(cfg, backbone_path, peft_path);
  const ModelQuery query = make_vit_query(target);
  Coordinator co(std::move(encoder), cfg.coordinator, cfg.seed);

  SpsaTrainConfig sc;
  sc.steps = cfg.spsa_steps;
  sc.batch_size = cfg.spsa_batch;
  sc.sigma = cfg.smoothing.sigma;
  sc.schedule = cfg.schedule;
  sc.seed = cfg.seed;

  const double before = evaluate_decorated(query, co, ds, sc.sigma, cfg.seed);
  const SpsaTrainResult result = spsa_train(co, query, ds, sc);
  const double after = evaluate_decorated(query, co, ds, sc.sigma, cfg.seed);
  save_coordinator(co, coordinator_out);

  const std::string loss_path = cfg.out_dir + "/spsa_loss.csv";
  std::ofstream out(loss_path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + loss_path + " for writing");
  for (const auto& line : cfg.resolved()) out << "# " << line << "\n";
  out << "# decorated_acc_before=" << format_double(before) << "\n";
  out << "# decorated_acc_after=" << format_double(after) << "\n";
  out << "# queries=" << result.queries << "\n";
  out << "step,loss\n";
  char row[64];
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    std::snprintf(row, sizeof row, "%zu,%.6f\n", i + 1, result.loss_trace[i]);
    out << row;
  }
  if (!out.good()) throw DataError("write failed on " + loss_path);

  std::cout << "ran " << result.queries << " model queries over " << cfg.spsa_steps
            << " steps\n"
            << "decorated noisy accuracy at sigma " << format_double(sc.sigma) << ": "
            << format_double(before) << " -> " << format_double(after) << "\n"
            << "wrote " << coordinator_out << "\n";
}

/// Derives the curve from the results TSV alone; the curve inherits the
/// provenance certify embedded there.
void do_report(const std::string& results_path, const std::string& curve_path) {
  const ResultsFile rf = read_results(results_path);
  const CertifiedAccuracyCurve curve = make_curve(rf, default_radii());
  write_curve_csv(curve_path, curve, rf.provenance);
  std::cout << "curve over " << rf.rows.size() << " certified examples\n"
            << "clean accuracy " << format_double(curve.clean_acc) << ", abstain rate "
            << format_double(curve.abstain_rate) << "\n"
            << "certified accuracy at r=0: " << format_double(curve.acc.front()) << "\n"
            << "wrote " << curve_path << "\n";
}

void do_sweep(const ExperimentConfig& cfg, const std::string& backbone_path,
              std::vector<long long> values) {
  const char* key = nullptr;
  if (cfg.peft.method == PeftMethod::prompt) {
    key = "peft.prompt_length";
    if (values.empty()) values = {10, 50, 100, 200};
  } else if (cfg.peft.method == PeftMethod::lora) {
    key = "peft.rank";
    if (values.empty()) values = {1, 2, 4, 8};
  } else {
    throw UsageError("sweep expects peft.method prompt or lora");
  }

  std::vector<std::string> names;
  std::vector<CertifiedAccuracyCurve> curves;
  for (long long v : values) {
    ExperimentConfig sub = cfg;
    sub.set(key, std::to_string(v));
    sub.out_dir = cfg.out_dir + "/" + method_tag(cfg) + std::to_string(v);
    std::error_code ec;
    fs::create_directories(sub.out_dir, ec);
    std::cout << "== " << key << "=" << v << "\n";
    do_finetune(sub, backbone_path);
    const std::string results = sub.out_dir + "/results_" + method_tag(sub) + ".tsv";
    do_certify(sub, backbone_path, default_peft_path(sub), "", results);
    const std::string curve_path = sub.out_dir + "/curve_" + method_tag(sub) + ".csv";
    do_report(results, curve_path);
    names.push_back(method_tag(cfg) + std::to_string(v));
    curves.push_back(read_curve_csv(curve_path));
  }

  const std::string table = compare_table(names, curves);
  const std::string table_path = cfg.out_dir + "/sweep_" + method_tag(cfg) + ".tsv";
  std::ofstream out(table_path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + table_path + " for writing");
  for (const auto& line : cfg.resolved()) out << "# " << line << "\n";
  out << table;
  if (!out.good()) throw DataError("write failed on " + table_path);
  std::cout << table << "wrote " << table_path << "\n";
}

void do_compare(const std::vector<std::string>& curve_paths, const std::string& out_file) {
  std::vector<std::string> names;
  std::vector<CertifiedAccuracyCurve> curves;
  for (const auto& path : curve_paths) {
    names.push_back(fs::path(path).stem().string());
    curves.push_back(read_curve_csv(path));
  }
  const std::string table = compare_table(names, curves);
  if (!out_file.empty()) {
    std::ofstream out(out_file, std::ios::trunc);
    if (!out.good()) throw DataError("cannot open " + out_file + " for writing");
    out << table;
    if (!out.good()) throw DataError("write failed on " + out_file);
  }
  std::cout << table;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certified-robustness experiment harness"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string backbone_path, peft_path, coordinator_path, results_path, curve_path;
  std::string out_file;
  std::vector<std::string> curve_paths;
  std::vector<long long> sweep_values;
  std::string synth_out, synth_format = "cifar10-bin";
  long long synth_count = 2000, synth_classes = 10, synth_size = 32, synth_channels = 3;
  std::string synth_seed = "0";

  int rc = 0;

  CLI::App* pretrain = app.add_subcommand("pretrain", "train a clean backbone from scratch");
  add_common(pretrain, args);
  pretrain->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "pretrain");
    do_pretrain(cfg);
  });

  CLI::App* finetune =
      app.add_subcommand("finetune", "noise-augmented PEFT or full fine-tuning");
  add_common(finetune, args);
  finetune->add_option("--backbone", backbone_path, "backbone checkpoint path");
  finetune->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "finetune");
    do_finetune(cfg, pick(backbone_path, default_backbone(cfg)));
  });

  CLI::App* certify = app.add_subcommand("certify", "randomized-smoothing certification");
  add_common(certify, args);
  certify->add_option("--backbone", backbone_path, "backbone checkpoint path");
  certify->add_option("--peft-checkpoint", peft_path, "fine-tuned checkpoint path");
  certify->add_option("--coordinator", coordinator_path,
                      "decorate inputs with this trained coordinator");
  certify->add_option("--results", results_path, "results TSV path");
  certify->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "certify");
    do_certify(cfg, pick(backbone_path, default_backbone(cfg)),
               pick(peft_path, default_peft_path(cfg)), coordinator_path,
               pick(results_path, cfg.out_dir + "/results_" + method_tag(cfg) + ".tsv"));
  });

  CLI::App* predict_cmd = app.add_subcommand("predict", "smoothed prediction without radii");
  add_common(predict_cmd, args);
  predict_cmd->add_option("--backbone", backbone_path, "backbone checkpoint path");
  predict_cmd->add_option("--peft-checkpoint", peft_path, "fine-tuned checkpoint path");
  predict_cmd->add_option("--coordinator", coordinator_path,
                          "decorate inputs with this trained coordinator");
  predict_cmd->add_option("--results", results_path, "predictions TSV path");
  predict_cmd->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "predict");
    do_predict(cfg, pick(backbone_path, default_backbone(cfg)),
               pick(peft_path, default_peft_path(cfg)), coordinator_path,
               pick(results_path, cfg.out_dir + "/predictions_" + method_tag(cfg) + ".tsv"));
  });

  CLI::App* spsa = app.add_subcommand("spsa-train", "train a black-box pixel-prompt coordinator");
  add_common(spsa, args);
  spsa->add_option("--backbone", backbone_path, "backbone checkpoint path (frozen encoder)");
  spsa->add_option("--peft-checkpoint", peft_path, "query model checkpoint path");
  spsa->add_option("--coordinator", coordinator_path, "coordinator checkpoint output path");
  spsa->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "spsa-train");
    do_spsa_train(cfg, pick(backbone_path, default_backbone(cfg)),
                  pick(peft_path, default_peft_path(cfg)),
                  pick(coordinator_path, cfg.out_dir + "/coordinator.psmc"));
  });

  CLI::App* report = app.add_subcommand("report", "certified-accuracy curve from a results TSV");
  add_common(report, args);
  report->add_option("--results", results_path, "results TSV path");
  report->add_option("--curve", curve_path, "curve CSV output path");
  report->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "report");
    do_report(pick(results_path, cfg.out_dir + "/results_" + method_tag(cfg) + ".tsv"),
              pick(curve_path, cfg.out_dir + "/curve_" + method_tag(cfg) + ".csv"));
  });

  CLI::App* sweep = app.add_subcommand(
      "sweep", "finetune+certify+report across prompt lengths or LoRA ranks");
  add_common(sweep, args);
  sweep->add_option("--backbone", backbone_path, "backbone checkpoint path");
  sweep->add_option("--values", sweep_values, "swept values")->delimiter(',');
  sweep->callback([&] {
    const ExperimentConfig cfg = build_config(args);
    DirLock lock(cfg.out_dir);
    write_resolved(cfg, "sweep");
    do_sweep(cfg, pick(backbone_path, default_backbone(cfg)), sweep_values);
  });

  CLI::App* compare = app.add_subcommand("compare", "align curve CSVs into one table");
  compare->add_option("curves", curve_paths, "curve CSV paths")->required()->expected(1, -1);
  compare->add_option("--out-file", out_file, "also write the table here");
  compare->callback([&] { do_compare(curve_paths, out_file); });

  CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic dataset file");
  synth->add_option("--out-file", synth_out, "dataset file to write")->required();
  synth->add_option("--count", synth_count, "example count");
  synth->add_option("--classes", synth_classes, "class count");
  synth->add_option("--image-size", synth_size, "image height and width");
  synth->add_option("--channels", synth_channels, "image channels");
  synth->add_option("--format", synth_format, "cifar10-bin | idx | raw");
  synth->add_option("--seed", synth_seed, "prototype family seed");
  synth->callback([&] {
    char* end = nullptr;
    const std::uint64_t seed = std::strtoull(synth_seed.c_str(), &end, 10);
    if (end != synth_seed.c_str() + synth_seed.size() || synth_seed.empty())
      throw UsageError("--seed: cannot parse '" + synth_seed + "'");
    const Dataset ds = synthetic_dataset(synth_count, synth_channels, synth_size,
                                         synth_classes, seed);
    save_dataset(ds, synth_out, synth_format);
    std::cout << "wrote " << ds.size() << " examples to " << synth_out << " ("
              << synth_format << ")\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
