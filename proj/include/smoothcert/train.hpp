#ifndef SMOOTHCERT_TRAIN_HPP
#define SMOOTHCERT_TRAIN_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "smoothcert/dataset.hpp"
#include "smoothcert/vit.hpp"

namespace smoothcert {

struct TrainConfig {
  double sigma = 0.0;
  int epochs = 10;
  Eigen::Index batch_size = 64;
  double learning_rate = 1e-3;  // full fine-tuning wants 1e-4
  std::string optimizer = "adam";
  std::uint64_t seed = 0;
  std::string mode = "noise_finetune";  // clean_pretrain | noise_finetune | joint_adapt

  void validate() const {
    if (sigma < 0.0) throw ContractError("train config: sigma must be >= 0");
    if (learning_rate < 0.0) throw ContractError("train config: learning rate must be >= 0");
    if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
    if (optimizer != "adam" && optimizer != "sgd")
      throw ContractError("train config: unknown optimizer " + optimizer);
    if (mode != "clean_pretrain" && mode != "noise_finetune" && mode != "joint_adapt")
      throw ContractError("train config: unknown mode " + mode);
  }

  double effective_sigma() const { return mode == "clean_pretrain" ? 0.0 : sigma; }
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double clean_acc = 0.0;
  double noisy_acc = 0.0;
};

/// Single-draw top-1 accuracy under x + N(0, sigma^2 I) noise, keyed by seed.
/// sigma = 0 is plain test accuracy.
template <class S>
double evaluate(VitModel<S>& m, const Dataset& ds, double sigma, std::uint64_t seed) {
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  const Eigen::Index chunk = 128;
  Eigen::Index correct = 0;
  for (Eigen::Index at = 0, b = 0; at < ds.size(); at += chunk, ++b) {
    const Eigen::Index take = std::min(chunk, ds.size() - at);
    Mat<S> x = ds.images.middleRows(at, take).template cast<S>();
    if (sigma > 0.0) {
      Rng rng(derive_key(seed, streams::kEvalNoise, static_cast<std::uint64_t>(b)));
      x = augment_batch(x, sigma, rng);
    }
    const std::vector<int> pred = argmax_rows(forward_logits(m, x));
    for (Eigen::Index i = 0; i < take; ++i)
      if (pred[static_cast<std::size_t>(i)] ==
          ds.labels[static_cast<std::size_t>(at + i)])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

template <class S>
struct AdamSlot {
  Mat<S> m, v;
};

template <class S>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<S>> params, const TrainConfig& cfg)
      : params_(std::move(params)), lr_(cfg.learning_rate), adam_(cfg.optimizer == "adam") {
    if (adam_)
      for (auto& p : params_)
        slots_.push_back({Mat<S>::Zero(p.rows(), p.cols()), Mat<S>::Zero(p.rows(), p.cols())});
  }

  void step() {
    ++t_;
    const S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);
    const S c1 = S(1) - static_cast<S>(std::pow(0.9, t_));
    const S c2 = S(1) - static_cast<S>(std::pow(0.999, t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Mat<S>& g = p.grad();
      if (adam_) {
        auto& s = slots_[i];
        s.m = b1 * s.m + (S(1) - b1) * g;
        s.v.array() = b2 * s.v.array() + (S(1) - b2) * g.array().square();
        p.value().array() -=
            static_cast<S>(lr_) * (s.m.array() / c1) /
            ((s.v.array() / c2).sqrt() + eps);
      } else {
        p.value() -= static_cast<S>(lr_) * g;
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<S>> params_;
  double lr_;
  bool adam_;
  std::vector<AdamSlot<S>> slots_;
  int t_ = 0;
};

}  // namespace detail

/// Noise-augmented training: every batch of every epoch draws fresh Gaussian
/// noise from a (seed, epoch, batch) keyed stream, so runs are reproducible
/// and worker-count independent. Returns the per-epoch trace; the per-epoch
/// accuracies are measured on a capped, seed-stable evaluation subset.
template <class S>
std::vector<EpochStats> train(VitModel<S>& m, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.size() == 0) throw DataError("train: empty dataset");
  if (ds.num_classes != m.config.num_classes)
    throw DataError("train: dataset has " + std::to_string(ds.num_classes) +
                    " classes, model expects " + std::to_string(m.config.num_classes));
  const double sigma = cfg.effective_sigma();

  std::vector<Tensor<S>> trainable;
  for (auto& [name, t] : named_params(m))
    if (t.requires_grad()) trainable.push_back(t);
  if (trainable.empty())
    throw ContractError("train: no trainable parameters (attach a method first)");
  detail::Optimizer<S> opt(trainable, cfg);

  const Eigen::Index eval_n = std::min<Eigen::Index>(ds.size(), 256);
  const Dataset eval_ds = eval_n == ds.size() ? ds : subset(ds, eval_n, cfg.seed);

  std::vector<EpochStats> trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(
        ds.size(), derive_key(cfg.seed, streams::kShuffle, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    for (Eigen::Index at = 0, b = 0; at < ds.size(); at += cfg.batch_size, ++b) {
      const Eigen::Index take = std::min(cfg.batch_size, ds.size() - at);
      Mat<S> x(take, ds.pixels());
      std::vector<int> y(static_cast<std::size_t>(take));
      for (Eigen::Index i = 0; i < take; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(at + i)];
        x.row(i) = ds.images.row(src).template cast<S>();
        y[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
      }
      if (sigma > 0.0) {
        Rng rng(derive_key(cfg.seed, streams::kTrainNoise,
                           static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)));
        x = augment_batch(x, sigma, rng);
      }

      opt.zero_grad();
      double batch_loss;
      {
        Recording<S> rec;
        auto loss = softmax_cross_entropy(forward(m, x), y);
        batch_loss = static_cast<double>(loss.scalar());
        rec.backward(loss);
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("training diverged: loss " + std::to_string(batch_loss) +
                           " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      opt.step();
      loss_sum += batch_loss * static_cast<double>(take);
    }

    EpochStats st;
    st.epoch = epoch;
    st.mean_loss = loss_sum / static_cast<double>(ds.size());
    st.clean_acc = evaluate(m, eval_ds, 0.0, cfg.seed);
    st.noisy_acc =
        evaluate(m, eval_ds, sigma,
                 derive_key(cfg.seed, streams::kEvalNoise, static_cast<std::uint64_t>(epoch)));
    trace.push_back(st);
  }
  return trace;
}

/// One-round combined smoothing and transfer: attach the PEFT method to the
/// pretrained backbone and train once on the noise-augmented new dataset.
template <class S>
std::vector<EpochStats> joint_adapt(VitModel<S>& m, const Dataset& new_ds,
                                    const PeftConfig& pc, TrainConfig cfg) {
  attach(m, pc, cfg.seed);
  cfg.mode = "joint_adapt";
  return train(m, new_ds, cfg);
}

inline void write_loss_csv(const std::string& path, const std::vector<EpochStats>& trace,
                           const std::vector<std::string>& provenance = {}) {
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + path + " for writing");
  for (const auto& line : provenance) out << "# " << line << "\n";
  out << "epoch,mean_loss,clean_acc,noisy_acc\n";
  char line[128];
  for (const auto& st : trace) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.4f,%.4f\n", st.epoch, st.mean_loss,
                  st.clean_acc, st.noisy_acc);
    out << line;
  }
  out.close();
  if (!out.good()) throw DataError("write failed on " + path);
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_TRAIN_HPP
