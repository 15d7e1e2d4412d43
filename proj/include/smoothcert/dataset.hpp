#ifndef SMOOTHCERT_DATASET_HPP
#define SMOOTHCERT_DATASET_HPP

#include <string>
#include <vector>

#include "smoothcert/errors.hpp"
#include "smoothcert/rng.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

/// In-memory image classification data. Images are flat CHW rows in [0, 1];
/// samples stay in storage order until a trainer shuffles index lists.
struct Dataset {
  Mat<float> images;  // [n x channels*height*width]
  std::vector<int> labels;
  Eigen::Index channels = 0, height = 0, width = 0;
  Eigen::Index num_classes = 0;
  std::string split;

  Eigen::Index size() const { return images.rows(); }
  Eigen::Index pixels() const { return images.cols(); }

  void validate() const {
    if (images.rows() != static_cast<Eigen::Index>(labels.size()))
      throw DataError("dataset: image/label count mismatch");
    if (images.cols() != channels * height * width)
      throw DataError("dataset: pixel count does not match dimensions");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw DataError("dataset: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  }
};

/// Loads a dataset. Formats:
///   cifar10-bin  3073-byte records (1 label byte + 3x32x32 pixel bytes)
///   idx          big-endian idx image file; the matching label file is found
///                by the standard images->labels name substitution
///   raw          RAW1 header (u32 n, channels, height, width, classes,
///                then u32 labels, then f32 pixels), all little-endian
Dataset load_dataset(const std::string& path, const std::string& format);

/// Writes a dataset in one of the load_dataset formats.
void save_dataset(const Dataset& d, const std::string& path, const std::string& format);

/// Deterministic n-example subset: a seeded shuffle decides membership, so
/// the same (seed, n) always selects the same examples in the same order.
Dataset subset(const Dataset& d, Eigen::Index n, std::uint64_t seed);

/// Bundled synthetic task: each class is a distinct low-frequency sinusoid
/// prototype; samples are the prototype plus small pixel noise, clipped to
/// [0, 1]. Different seeds give different prototype families, which is how
/// the transfer benchmark manufactures a second domain.
Dataset synthetic_dataset(Eigen::Index n, Eigen::Index channels, Eigen::Index size,
                          Eigen::Index num_classes, std::uint64_t seed);

/// Gaussian noise augmentation: x + delta, delta ~ N(0, sigma^2 I), no
/// clipping. The certifier draws noise of the identical law.
template <class S>
Mat<S> augment_batch(const Mat<S>& x, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ContractError("augment_batch: sigma must be >= 0");
  if (sigma == 0.0) return x;
  Mat<S> noise(x.rows(), x.cols());
  rng.fill_normal(noise, sigma);
  return x + noise;
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_DATASET_HPP
