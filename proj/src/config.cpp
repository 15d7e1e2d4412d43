#include "smoothcert/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>

namespace smoothcert {

namespace {

double parse_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end != value.c_str() + value.size() || value.empty())
    throw UsageError("config field '" + key + "': cannot parse '" + value + "' as a number");
  return v;
}

long long parse_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (end != value.c_str() + value.size() || value.empty())
    throw UsageError("config field '" + key + "': cannot parse '" + value + "' as an integer");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end != value.c_str() + value.size() || value.empty() || value[0] == '-')
    throw UsageError("config field '" + key + "': cannot parse '" + value +
                     "' as a non-negative integer");
  return v;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  if (std::abs(v) < 1e15 && v == std::trunc(v)) {
    std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(v));
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto idx = [&](Eigen::Index& field) { field = static_cast<Eigen::Index>(parse_int(key, value)); };
  auto num = [&](double& field) { field = parse_double(key, value); };

  if (key == "dataset.path") dataset_path = value;
  else if (key == "dataset.format") dataset_format = value;
  else if (key == "dataset.limit") idx(dataset_limit);
  else if (key == "model.image_size") idx(model.image_size);
  else if (key == "model.channels") idx(model.channels);
  else if (key == "model.patch_size") idx(model.patch_size);
  else if (key == "model.embed_dim") idx(model.embed_dim);
  else if (key == "model.num_heads") idx(model.num_heads);
  else if (key == "model.depth") idx(model.depth);
  else if (key == "model.mlp_ratio") idx(model.mlp_ratio);
  else if (key == "model.num_classes") idx(model.num_classes);
  else if (key == "peft.method") {
    try {
      peft.method = peft_method_from(value);
    } catch (const ContractError&) {
      throw UsageError("config field 'peft.method': unknown method '" + value + "'");
    }
  } else if (key == "peft.rank") idx(peft.rank);
  else if (key == "peft.bottleneck") idx(peft.bottleneck);
  else if (key == "peft.prompt_length") idx(peft.prompt_length);
  else if (key == "peft.lora_alpha") num(peft.lora_alpha);
  else if (key == "train.mode") train.mode = value;
  else if (key == "train.sigma") num(train.sigma);
  else if (key == "train.epochs") train.epochs = static_cast<int>(parse_int(key, value));
  else if (key == "train.batch_size") idx(train.batch_size);
  else if (key == "train.learning_rate") num(train.learning_rate);
  else if (key == "train.optimizer") train.optimizer = value;
  else if (key == "smoothing.sigma") num(smoothing.sigma);
  else if (key == "smoothing.n0") smoothing.n0 = parse_int(key, value);
  else if (key == "smoothing.n") smoothing.n = parse_int(key, value);
  else if (key == "smoothing.alpha") num(smoothing.alpha);
  else if (key == "smoothing.batch") idx(smoothing.batch);
  else if (key == "certify.skip") idx(certify_skip);
  else if (key == "certify.max") idx(certify_max);
  else if (key == "certify.workers") certify_workers = static_cast<int>(parse_int(key, value));
  else if (key == "spsa.steps") spsa_steps = static_cast<long>(parse_int(key, value));
  else if (key == "spsa.batch_size") idx(spsa_batch);
  else if (key == "spsa.a") num(schedule.a);
  else if (key == "spsa.stability") num(schedule.stability);
  else if (key == "spsa.alpha") num(schedule.alpha);
  else if (key == "spsa.gamma") num(schedule.gamma);
  else if (key == "spsa.c") num(schedule.c);
  else if (key == "spsa.beta") num(schedule.beta);
  else if (key == "coordinator.trigger_len") idx(coordinator.trigger_len);
  else if (key == "coordinator.hidden") idx(coordinator.hidden);
  else if (key == "coordinator.epsilon") num(coordinator.epsilon);
  else if (key == "out") out_dir = value;
  else if (key == "seed") seed = parse_u64(key, value);
  else throw UsageError("unknown config field '" + key + "'");
}

std::vector<std::string> ExperimentConfig::resolved() const {
  std::vector<std::string> lines;
  auto put = [&](const std::string& k, const std::string& v) { lines.push_back(k + "=" + v); };
  auto put_i = [&](const std::string& k, long long v) { put(k, std::to_string(v)); };
  auto put_d = [&](const std::string& k, double v) { put(k, format_double(v)); };

  put("dataset.path", dataset_path);
  put("dataset.format", dataset_format);
  put_i("dataset.limit", dataset_limit);
  put_i("model.image_size", model.image_size);
  put_i("model.channels", model.channels);
  put_i("model.patch_size", model.patch_size);
  put_i("model.embed_dim", model.embed_dim);
  put_i("model.num_heads", model.num_heads);
  put_i("model.depth", model.depth);
  put_i("model.mlp_ratio", model.mlp_ratio);
  put_i("model.num_classes", model.num_classes);
  put("peft.method", to_string(peft.method));
  put_i("peft.rank", peft.rank);
  put_i("peft.bottleneck", peft.bottleneck);
  put_i("peft.prompt_length", peft.prompt_length);
  put_d("peft.lora_alpha", peft.lora_alpha);
  put("train.mode", train.mode);
  put_d("train.sigma", train.sigma);
  put_i("train.epochs", train.epochs);
  put_i("train.batch_size", train.batch_size);
  put_d("train.learning_rate", train.learning_rate);
  put("train.optimizer", train.optimizer);
  put_d("smoothing.sigma", smoothing.sigma);
  put_i("smoothing.n0", smoothing.n0);
  put_i("smoothing.n", smoothing.n);
  put_d("smoothing.alpha", smoothing.alpha);
  put_i("smoothing.batch", smoothing.batch);
  put_i("certify.skip", certify_skip);
  put_i("certify.max", certify_max);
  put_i("certify.workers", certify_workers);
  put_i("spsa.steps", spsa_steps);
  put_i("spsa.batch_size", spsa_batch);
  put_d("spsa.a", schedule.a);
  put_d("spsa.stability", schedule.stability);
  put_d("spsa.alpha", schedule.alpha);
  put_d("spsa.gamma", schedule.gamma);
  put_d("spsa.c", schedule.c);
  put_d("spsa.beta", schedule.beta);
  put_i("coordinator.trigger_len", coordinator.trigger_len);
  put_i("coordinator.hidden", coordinator.hidden);
  put_d("coordinator.epsilon", coordinator.epsilon);
  put("out", out_dir);
  put("seed", std::to_string(seed));
  return lines;
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
    peft.validate();
    train.validate();
    smoothing.validate();
    schedule.validate();
    coordinator.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (dataset_limit < 0) throw UsageError("config field 'dataset.limit': must be >= 0");
  if (certify_skip < 1) throw UsageError("config field 'certify.skip': must be >= 1");
  if (certify_workers < 1) throw UsageError("config field 'certify.workers': must be >= 1");
  if (spsa_steps < 0) throw UsageError("config field 'spsa.steps': must be >= 0");
  if (spsa_batch < 1) throw UsageError("config field 'spsa.batch_size': must be >= 1");
  if (out_dir.empty()) throw UsageError("config field 'out': must not be empty");
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw DataError("cannot open config file " + path);
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + s +
                       "'");
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw UsageError("override '" + kv + "': expected key=value");
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
}

}  // namespace smoothcert
