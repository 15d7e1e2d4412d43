#ifndef SMOOTHCERT_SPSA_HPP
#define SMOOTHCERT_SPSA_HPP

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "smoothcert/checkpoint.hpp"
#include "smoothcert/dataset.hpp"
#include "smoothcert/vit.hpp"

namespace smoothcert {

/// Scalar objective over a flat parameter vector.
using LossFn = std::function<double(const Eigen::VectorXd&)>;

/// Black-box classifier interface: a batch of images in, one row of class
/// scores per image out. Scores are treated as unnormalized log-probabilities.
/// The interface exposes evaluation only, so nothing upstream can reach the
/// model's parameters or gradients.
using ModelQuery = std::function<Mat<float>(const Mat<float>&)>;

/// Decaying step and perturbation sequences in the standard SPSA form
/// a_i = a / (A + i)^alpha and c_i = c / i^gamma, with heavy-ball momentum.
struct SpsaSchedule {
  double a = 0.01;
  double stability = 100.0;  // the A offset
  double alpha = 0.602;
  double c = 0.01;
  double gamma = 0.101;
  double beta = 0.9;

  double step_size(long i) const { return a / std::pow(stability + static_cast<double>(i), alpha); }
  double perturb_size(long i) const { return c / std::pow(static_cast<double>(i), gamma); }

  void validate() const {
    if (a <= 0.0) throw ContractError("spsa schedule: a must be > 0");
    if (c <= 0.0 || c > 1.0) throw ContractError("spsa schedule: c must be in (0, 1]");
    if (alpha < 0.0) throw ContractError("spsa schedule: alpha must be >= 0");
    if (gamma < 0.0) throw ContractError("spsa schedule: gamma must be >= 0");
    if (stability < 0.0) throw ContractError("spsa schedule: stability offset must be >= 0");
    if (beta < 0.0 || beta > 1.0) throw ContractError("spsa schedule: beta must be in [0, 1]");
  }
};

struct CoordinatorConfig {
  Eigen::Index trigger_len = 16;
  Eigen::Index hidden = 64;
  double epsilon = 0.3;  // prompt strength

  void validate() const {
    if (trigger_len < 1) throw ContractError("coordinator config: trigger length must be >= 1");
    if (hidden < 1) throw ContractError("coordinator config: hidden width must be >= 1");
    if (epsilon < 0.0 || epsilon > 1.0)
      throw ContractError("coordinator config: epsilon must be in [0, 1]");
  }
};

/// Pixel-prompt generator h_phi(x) = g(f(x), trigger). The encoder f is the
/// patch embedding plus first block of a pretrained model, held by handle and
/// never written to; keep the source model unchanged while the coordinator is
/// live. The decoder g maps each patch feature, concatenated with a learned
/// trigger vector, through a two-layer tanh network back to patch pixels, so
/// the prompt has the exact shape of the input image and lives in [-1, 1].
///
/// The output projection starts at zero, which makes the initial prompt
/// exactly zero: an untrained coordinator decorates to the identity.
class Coordinator {
 public:
  Coordinator(VitModel<float> encoder, const CoordinatorConfig& cfg, std::uint64_t seed)
      : enc_(std::move(encoder)), cfg_(cfg) {
    cfg_.validate();
    if (enc_.peft) throw ContractError("coordinator: encoder model must be PEFT-free");
    const Eigen::Index d = enc_.config.embed_dim;
    const Eigen::Index pd = enc_.config.channels * enc_.config.patch_size * enc_.config.patch_size;
    w1_.resize(d + cfg_.trigger_len, cfg_.hidden);
    Rng(derive_key(seed, streams::kInit, std::uint64_t{2000})).fill_normal(w1_, 0.02);
    b1_ = Mat<float>::Zero(1, cfg_.hidden);
    w2_ = Mat<float>::Zero(cfg_.hidden, pd);
    b2_ = Mat<float>::Zero(1, pd);
    trigger_.resize(1, cfg_.trigger_len);
    Rng(derive_key(seed, streams::kInit, std::uint64_t{2001})).fill_normal(trigger_, 0.02);
  }

  const CoordinatorConfig& config() const { return cfg_; }
  const VitConfig& image_config() const { return enc_.config; }

  /// The frozen encoder, exposed for hashing and persistence only.
  VitModel<float>& encoder_model() { return enc_; }

  Eigen::Index num_params() const {
    return w1_.size() + b1_.size() + w2_.size() + b2_.size() + trigger_.size();
  }

  /// Flat trainable vector (decoder weights then trigger), in double for the
  /// optimizer's benefit.
  Eigen::VectorXd params() const {
    Eigen::VectorXd phi(num_params());
    Eigen::Index at = 0;
    for (const Mat<float>* t : tensors())
      for (Eigen::Index k = 0; k < t->size(); ++k) phi[at++] = static_cast<double>(t->data()[k]);
    return phi;
  }

  void set_params(const Eigen::VectorXd& phi) {
    if (phi.size() != num_params())
      throw ContractError("coordinator: parameter vector has size " + std::to_string(phi.size()) +
                          ", expected " + std::to_string(num_params()));
    Eigen::Index at = 0;
    for (Mat<float>* t : tensors())
      for (Eigen::Index k = 0; k < t->size(); ++k) t->data()[k] = static_cast<float>(phi[at++]);
  }

  /// h_phi(x): one prompt image per input row, same shape, values in [-1, 1].
  Mat<float> prompt(const Mat<float>& x) {
    const VitConfig& vc = enc_.config;
    const Eigen::Index batch = x.rows(), np = vc.num_patches();
    const Mat<float> z = encode_patch_features(enc_, x);

    Mat<float> in(batch * np, z.cols() + cfg_.trigger_len);
    in.leftCols(z.cols()) = z;
    in.rightCols(cfg_.trigger_len) = trigger_.replicate(batch * np, 1);
    const Mat<float> u = ((in * w1_).rowwise() + b1_.row(0)).array().tanh().matrix();
    const Mat<float> o = ((u * w2_).rowwise() + b2_.row(0)).array().tanh().matrix();

    const Eigen::Index ps = vc.patch_size, g = vc.image_size / ps, hw = vc.image_size * vc.image_size;
    Mat<float> h(batch, vc.pixels());
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index pr = 0; pr < g; ++pr)
        for (Eigen::Index pc = 0; pc < g; ++pc) {
          const auto src = o.row(b * np + pr * g + pc);
          Eigen::Index j = 0;
          for (Eigen::Index ch = 0; ch < vc.channels; ++ch)
            for (Eigen::Index dy = 0; dy < ps; ++dy)
              for (Eigen::Index dx = 0; dx < ps; ++dx)
                h(b, ch * hw + (pr * ps + dy) * vc.image_size + (pc * ps + dx)) = src(j++);
        }
    return h;
  }

  /// clip(x + epsilon * h_phi(x)), the pre-noise decorated image in [0, 1].
  Mat<float> decorate_clean(const Mat<float>& x) {
    const float eps = static_cast<float>(cfg_.epsilon);
    return (x + eps * prompt(x)).cwiseMax(0.0f).cwiseMin(1.0f);
  }

 private:
  std::array<const Mat<float>*, 5> tensors() const { return {&w1_, &b1_, &w2_, &b2_, &trigger_}; }
  std::array<Mat<float>*, 5> tensors() { return {&w1_, &b1_, &w2_, &b2_, &trigger_}; }

  VitModel<float> enc_;
  CoordinatorConfig cfg_;
  Mat<float> w1_, b1_, w2_, b2_, trigger_;
};

/// Decorated smoothing input clip(x + eps h(x)) + delta with delta drawn from
/// rng at N(0, sigma^2). The clip happens before the noise, so the pre-noise
/// intermediate is always a valid image.
inline Mat<float> decorate(Coordinator& co, const Mat<float>& x, double sigma, Rng& rng) {
  return augment_batch(co.decorate_clean(x), sigma, rng);
}

/// Two-query simultaneous-perturbation gradient estimate at phi: draws a
/// Rademacher sign vector Delta and returns [L(phi + c Delta) - L(phi - c Delta)]
/// / (2c) * Delta. For sign vectors the elementwise inverse of Delta is Delta
/// itself, hence the multiply. Exact on one-dimensional quadratics.
inline Eigen::VectorXd spsa_gradient(const LossFn& loss, const Eigen::VectorXd& phi, double c,
                                     Rng& rng) {
  if (c <= 0.0) throw ContractError("spsa_gradient: perturbation size must be > 0");
  Eigen::VectorXd delta(phi.size());
  for (Eigen::Index i = 0; i < phi.size(); ++i)
    delta[i] = static_cast<double>(rng.rademacher());
  const double lp = loss(phi + c * delta);
  const double lm = loss(phi - c * delta);
  return ((lp - lm) / (2.0 * c)) * delta;
}

struct SpsaResult {
  Eigen::VectorXd phi;
  long queries = 0;
  std::vector<double> loss_trace;  // midpoint surrogate (L+ + L-) / 2 per step
};

/// Momentum SPSA descent: m_{i+1} = beta m_i - a_i g_i, phi_{i+1} = phi_i +
/// m_{i+1}, with the step-i perturbation drawn from its own keyed stream.
inline SpsaResult spsa_minimize(const LossFn& loss, Eigen::VectorXd phi, const SpsaSchedule& sched,
                                long steps, std::uint64_t seed) {
  sched.validate();
  if (steps < 0) throw ContractError("spsa_minimize: steps must be >= 0");
  SpsaResult res;
  Eigen::VectorXd mom = Eigen::VectorXd::Zero(phi.size());
  for (long i = 1; i <= steps; ++i) {
    Rng rng(derive_key(seed, streams::kSpsaPerturb, static_cast<std::uint64_t>(i)));
    double seen = 0.0;
    const LossFn probe = [&](const Eigen::VectorXd& p) {
      const double v = loss(p);
      seen += v;
      return v;
    };
    const Eigen::VectorXd g = spsa_gradient(probe, phi, sched.perturb_size(i), rng);
    res.queries += 2;
    res.loss_trace.push_back(0.5 * seen);
    mom = sched.beta * mom - sched.step_size(i) * g;
    phi += mom;
  }
  res.phi = std::move(phi);
  return res;
}

struct SpsaTrainConfig {
  long steps = 2000;
  Eigen::Index batch_size = 32;
  double sigma = 0.25;
  SpsaSchedule schedule{};
  std::uint64_t seed = 0;
  int max_retries = 2;  // extra attempts per failed query before aborting

  void validate() const {
    if (steps < 0) throw ContractError("spsa config: steps must be >= 0");
    if (batch_size < 1) throw ContractError("spsa config: batch size must be >= 1");
    if (sigma < 0.0) throw ContractError("spsa config: sigma must be >= 0");
    if (max_retries < 0) throw ContractError("spsa config: max retries must be >= 0");
    schedule.validate();
  }
};

struct SpsaTrainResult {
  long queries = 0;                // loss evaluations, exactly 2 per step
  std::vector<double> loss_trace;  // midpoint surrogate per step
};

namespace detail {

inline Mat<float> query_with_retry(const ModelQuery& query, const Mat<float>& x, int max_retries) {
  for (int attempt = 0;; ++attempt) {
    try {
      return query(x);
    } catch (const std::exception& e) {
      if (attempt >= max_retries)
        throw DataError("model query failed after " + std::to_string(attempt + 1) +
                        " attempts: " + e.what());
    }
  }
}

inline double mean_cross_entropy(const Mat<float>& scores, const std::vector<int>& labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::ArrayXd s = scores.row(i).cast<double>().array();
    const double mx = s.maxCoeff();
    total += std::log((s - mx).exp().sum()) + mx - s[labels[static_cast<std::size_t>(i)]];
  }
  return total / static_cast<double>(scores.rows());
}

}  // namespace detail

/// Trains the coordinator's decoder and trigger against a query-only
/// classifier. Each step draws a keyed batch and one keyed noise matrix,
/// shared by both perturbation queries so they differ only in phi, and
/// minimizes the cross-entropy of the scores on clip(x + eps h(x)) + delta.
/// The model is touched through `query` alone: two evaluations per step,
/// no parameters, no gradients.
inline SpsaTrainResult spsa_train(Coordinator& co, const ModelQuery& query, const Dataset& ds,
                                  const SpsaTrainConfig& cfg) {
  cfg.validate();
  if (ds.size() == 0) throw DataError("spsa_train: empty dataset");
  if (ds.pixels() != co.image_config().pixels())
    throw ShapeError("spsa_train: dataset pixel count does not match the encoder");

  Eigen::VectorXd phi = co.params();
  Eigen::VectorXd mom = Eigen::VectorXd::Zero(phi.size());
  SpsaTrainResult res;

  for (long i = 1; i <= cfg.steps; ++i) {
    Rng brng(derive_key(cfg.seed, streams::kSpsaBatch, static_cast<std::uint64_t>(i)));
    Mat<float> x(cfg.batch_size, ds.pixels());
    std::vector<int> y(static_cast<std::size_t>(cfg.batch_size));
    for (Eigen::Index j = 0; j < cfg.batch_size; ++j) {
      const auto src = static_cast<Eigen::Index>(brng.below(static_cast<std::uint64_t>(ds.size())));
      x.row(j) = ds.images.row(src);
      y[static_cast<std::size_t>(j)] = ds.labels[static_cast<std::size_t>(src)];
    }
    Mat<float> noise = Mat<float>::Zero(cfg.batch_size, ds.pixels());
    if (cfg.sigma > 0.0) {
      Rng nrng(derive_key(cfg.seed, streams::kSpsaNoise, static_cast<std::uint64_t>(i)));
      nrng.fill_normal(noise, cfg.sigma);
    }

    double seen = 0.0;
    const LossFn step_loss = [&](const Eigen::VectorXd& p) {
      co.set_params(p);
      const Mat<float> xt = co.decorate_clean(x) + noise;
      const Mat<float> scores = detail::query_with_retry(query, xt, cfg.max_retries);
      if (scores.rows() != xt.rows())
        throw DataError("model query returned " + std::to_string(scores.rows()) +
                        " rows for a batch of " + std::to_string(xt.rows()));
      for (int label : y)
        if (label < 0 || label >= scores.cols())
          throw DataError("model query returned too few classes for label " +
                          std::to_string(label));
      const double v = detail::mean_cross_entropy(scores, y);
      seen += v;
      return v;
    };

    Rng prng(derive_key(cfg.seed, streams::kSpsaPerturb, static_cast<std::uint64_t>(i)));
    const Eigen::VectorXd g = spsa_gradient(step_loss, phi, cfg.schedule.perturb_size(i), prng);
    res.queries += 2;
    const double mid = 0.5 * seen;
    if (!std::isfinite(mid))
      throw NumericError("spsa training diverged: loss " + std::to_string(mid) + " at step " +
                         std::to_string(i));
    res.loss_trace.push_back(mid);
    mom = cfg.schedule.beta * mom - cfg.schedule.step_size(i) * g;
    phi += mom;
  }
  co.set_params(phi);
  return res;
}

/// In-process stand-in for a remote scorer: answers image batches with the
/// model's logits and exposes nothing else.
inline ModelQuery make_vit_query(VitModel<float>& m) {
  return [&m](const Mat<float>& x) { return forward_logits(m, x); };
}

namespace detail {

inline nlohmann::ordered_json coordinator_config_json(const CoordinatorConfig& c) {
  nlohmann::ordered_json j;
  j["trigger_len"] = c.trigger_len;
  j["hidden"] = c.hidden;
  j["epsilon"] = c.epsilon;
  return j;
}

inline CoordinatorConfig coordinator_config_from_json(const nlohmann::ordered_json& j) {
  CoordinatorConfig c;
  try {
    c.trigger_len = j.at("trigger_len").get<Eigen::Index>();
    c.hidden = j.at("hidden").get<Eigen::Index>();
    c.epsilon = j.at("epsilon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("coordinator checkpoint: bad config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

}  // namespace detail

/// Writes the trainable vector plus the configs and the encoder's backbone
/// hash, so the prompt can only ever be rebound to the model it was trained
/// against.
inline void save_coordinator(Coordinator& co, const std::string& path) {
  BlobFile blob;
  blob.kind = "coord";
  blob.backbone_sha256 = backbone_hash(co.encoder_model());
  nlohmann::ordered_json extra;
  extra["config"] = detail::vit_config_json(co.image_config());
  extra["coordinator"] = detail::coordinator_config_json(co.config());
  blob.extra_json = extra.dump();

  const Eigen::VectorXd phi = co.params();
  BlobEntry e;
  e.name = "coordinator.phi";
  e.dtype = "f32";
  e.shape = {1, phi.size()};
  std::vector<float> vals(static_cast<std::size_t>(phi.size()));
  for (Eigen::Index i = 0; i < phi.size(); ++i)
    vals[static_cast<std::size_t>(i)] = static_cast<float>(phi[i]);
  e.bytes.assign(reinterpret_cast<const char*>(vals.data()), sizeof(float) * vals.size());
  blob.entries.push_back(std::move(e));
  write_blob(path, blob);
}

/// Restores a saved coordinator over its encoder model. The stored backbone
/// hash and model config must match the encoder handed in.
inline Coordinator load_coordinator(const std::string& path, VitModel<float> encoder) {
  BlobFile blob = read_blob(path);
  if (blob.kind != "coord")
    throw DataError("load_coordinator: " + path + " is not a coordinator checkpoint");
  if (blob.backbone_sha256 != backbone_hash(encoder))
    throw DataError("load_coordinator: encoder hash mismatch for " + path);
  nlohmann::ordered_json extra =
      nlohmann::ordered_json::parse(blob.extra_json.empty() ? "{}" : blob.extra_json);
  if (!extra.contains("config") || !extra.contains("coordinator"))
    throw DataError("load_coordinator: missing config in " + path);
  if (detail::vit_config_json(encoder.config) != extra["config"])
    throw DataError("load_coordinator: encoder config does not match " + path);

  Coordinator co(std::move(encoder), detail::coordinator_config_from_json(extra["coordinator"]),
                 0);
  if (blob.entries.size() != 1 || blob.entries[0].name != "coordinator.phi")
    throw DataError("load_coordinator: expected a single coordinator.phi tensor in " + path);
  const BlobEntry& e = blob.entries[0];
  if (e.dtype != "f32" || e.shape.size() != 2 || e.shape[0] != 1 ||
      e.shape[1] != co.num_params() ||
      e.bytes.size() != sizeof(float) * static_cast<std::size_t>(co.num_params()))
    throw DataError("load_coordinator: coordinator.phi does not fit this configuration");
  Eigen::VectorXd phi(co.num_params());
  for (Eigen::Index i = 0; i < phi.size(); ++i) {
    float v;
    std::memcpy(&v, e.bytes.data() + sizeof(float) * static_cast<std::size_t>(i), sizeof(float));
    phi[i] = static_cast<double>(v);
  }
  co.set_params(phi);
  return co;
}

/// Accuracy of the black-box model on decorated noisy inputs; the evaluation
/// twin of spsa_train. Chunked like evaluate(), with per-chunk keyed noise.
inline double evaluate_decorated(const ModelQuery& query, Coordinator& co, const Dataset& ds,
                                 double sigma, std::uint64_t seed) {
  if (ds.size() == 0) throw DataError("evaluate_decorated: empty dataset");
  const Eigen::Index chunk = 128;
  Eigen::Index correct = 0;
  for (Eigen::Index at = 0, b = 0; at < ds.size(); at += chunk, ++b) {
    const Eigen::Index take = std::min(chunk, ds.size() - at);
    Rng rng(derive_key(seed, streams::kEvalNoise, static_cast<std::uint64_t>(b)));
    const Mat<float> xt = decorate(co, Mat<float>(ds.images.middleRows(at, take)), sigma, rng);
    const std::vector<int> pred = argmax_rows(query(xt));
    for (Eigen::Index i = 0; i < take; ++i)
      if (pred[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(at + i)])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_SPSA_HPP
