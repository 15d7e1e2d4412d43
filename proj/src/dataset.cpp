#include "smoothcert/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace smoothcert {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw DataError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof()) throw DataError("read failed on " + path);
  return std::move(buf).str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw DataError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out.good()) throw DataError("write failed on " + path);
}

std::uint32_t get_be32(const std::string& s, std::size_t off) {
  auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i]));
  };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

void put_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

std::uint32_t get_le32(const std::string& s, std::size_t off) {
  auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i]));
  };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

void put_le32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

constexpr std::size_t kCifarRecord = 3073;  // 1 label byte + 3*32*32 pixels
constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

Dataset load_cifar10_bin(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.empty()) throw DataError(path + ": empty file");
  if (bytes.size() % kCifarRecord != 0)
    throw DataError(path + ": size " + std::to_string(bytes.size()) +
                    " is not a multiple of the 3073-byte record");
  const auto n = static_cast<Eigen::Index>(bytes.size() / kCifarRecord);

  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.num_classes = 10;
  d.images.resize(n, 3 * 32 * 32);
  d.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * kCifarRecord;
    const int label = static_cast<unsigned char>(bytes[off]);
    if (label >= 10)
      throw DataError(path + ": record " + std::to_string(i) + " has label " +
                      std::to_string(label) + ", expected < 10");
    d.labels[static_cast<std::size_t>(i)] = label;
    for (Eigen::Index j = 0; j < 3072; ++j)
      d.images(i, j) =
          static_cast<float>(static_cast<unsigned char>(bytes[off + 1 + static_cast<std::size_t>(j)])) /
          255.0f;
  }
  return d;
}

void save_cifar10_bin(const Dataset& d, const std::string& path) {
  if (d.pixels() != 3072 || d.num_classes != 10)
    throw ContractError("cifar10-bin requires 3x32x32 images and 10 classes");
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(d.size()) * kCifarRecord);
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    bytes.push_back(static_cast<char>(d.labels[static_cast<std::size_t>(i)]));
    for (Eigen::Index j = 0; j < 3072; ++j) {
      const long v = std::lround(static_cast<double>(d.images(i, j)) * 255.0);
      bytes.push_back(static_cast<char>(std::min(255L, std::max(0L, v))));
    }
  }
  write_file(path, bytes);
}

std::string idx_labels_path(const std::string& images_path) {
  std::string p = images_path;
  const auto at = p.find("images");
  if (at == std::string::npos)
    throw DataError(images_path +
                    ": cannot derive the label file name (no 'images' in the path)");
  p.replace(at, 6, "labels");
  const auto dims = p.find("idx3");
  if (dims != std::string::npos) p.replace(dims, 4, "idx1");
  return p;
}

Dataset load_idx(const std::string& path) {
  const std::string img = read_file(path);
  if (img.size() < 16) throw DataError(path + ": truncated idx header");
  if (get_be32(img, 0) != kIdxImagesMagic)
    throw DataError(path + ": bad idx image magic");
  const auto n = static_cast<Eigen::Index>(get_be32(img, 4));
  const auto h = static_cast<Eigen::Index>(get_be32(img, 8));
  const auto w = static_cast<Eigen::Index>(get_be32(img, 12));
  if (n <= 0 || h <= 0 || w <= 0) throw DataError(path + ": empty idx file");
  if (img.size() != 16 + static_cast<std::size_t>(n * h * w))
    throw DataError(path + ": idx payload size mismatch");

  const std::string labels_path = idx_labels_path(path);
  const std::string lab = read_file(labels_path);
  if (lab.size() < 8) throw DataError(labels_path + ": truncated idx header");
  if (get_be32(lab, 0) != kIdxLabelsMagic)
    throw DataError(labels_path + ": bad idx label magic");
  if (static_cast<Eigen::Index>(get_be32(lab, 4)) != n)
    throw DataError(labels_path + ": label count differs from image count");
  if (lab.size() != 8 + static_cast<std::size_t>(n))
    throw DataError(labels_path + ": idx payload size mismatch");

  Dataset d;
  d.channels = 1;
  d.height = h;
  d.width = w;
  d.images.resize(n, h * w);
  d.labels.resize(static_cast<std::size_t>(n));
  int max_label = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = static_cast<unsigned char>(lab[8 + static_cast<std::size_t>(i)]);
    d.labels[static_cast<std::size_t>(i)] = y;
    max_label = std::max(max_label, y);
    for (Eigen::Index j = 0; j < h * w; ++j)
      d.images(i, j) =
          static_cast<float>(static_cast<unsigned char>(
              img[16 + static_cast<std::size_t>(i * h * w + j)])) /
          255.0f;
  }
  d.num_classes = max_label + 1;
  return d;
}

void save_idx(const Dataset& d, const std::string& path) {
  if (d.channels != 1)
    throw ContractError("idx format stores single-channel images");
  std::string img;
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(d.size()));
  put_be32(img, static_cast<std::uint32_t>(d.height));
  put_be32(img, static_cast<std::uint32_t>(d.width));
  for (Eigen::Index i = 0; i < d.size(); ++i)
    for (Eigen::Index j = 0; j < d.pixels(); ++j) {
      const long v = std::lround(static_cast<double>(d.images(i, j)) * 255.0);
      img.push_back(static_cast<char>(std::min(255L, std::max(0L, v))));
    }
  write_file(path, img);

  std::string lab;
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) lab.push_back(static_cast<char>(y));
  write_file(idx_labels_path(path), lab);
}

constexpr char kRawMagic[4] = {'R', 'A', 'W', '1'};

Dataset load_raw(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 24) throw DataError(path + ": truncated raw header");
  if (std::string(bytes, 0, 4) != std::string(kRawMagic, 4))
    throw DataError(path + ": bad raw magic");
  const auto n = static_cast<Eigen::Index>(get_le32(bytes, 4));
  const auto c = static_cast<Eigen::Index>(get_le32(bytes, 8));
  const auto h = static_cast<Eigen::Index>(get_le32(bytes, 12));
  const auto w = static_cast<Eigen::Index>(get_le32(bytes, 16));
  const auto classes = static_cast<Eigen::Index>(get_le32(bytes, 20));
  if (n <= 0 || c <= 0 || h <= 0 || w <= 0 || classes <= 0)
    throw DataError(path + ": empty raw file");
  const std::size_t want = 24 + static_cast<std::size_t>(n) * 4 +
                           static_cast<std::size_t>(n * c * h * w) * 4;
  if (bytes.size() != want)
    throw DataError(path + ": raw payload size mismatch");

  Dataset d;
  d.channels = c;
  d.height = h;
  d.width = w;
  d.num_classes = classes;
  d.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = get_le32(bytes, 24 + static_cast<std::size_t>(i) * 4);
    if (static_cast<Eigen::Index>(y) >= classes)
      throw DataError(path + ": label " + std::to_string(y) + " outside [0, " +
                      std::to_string(classes) + ")");
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(y);
  }
  d.images.resize(n, c * h * w);
  const std::size_t pix_off = 24 + static_cast<std::size_t>(n) * 4;
  static_assert(sizeof(float) == 4);
  std::memcpy(d.images.data(), bytes.data() + pix_off,
              static_cast<std::size_t>(d.images.size()) * 4);
  for (Eigen::Index i = 0; i < d.images.size(); ++i) {
    const float v = d.images.data()[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw DataError(path + ": pixel value " + std::to_string(v) +
                      " outside [0, 1]");
  }
  return d;
}

void save_raw(const Dataset& d, const std::string& path) {
  std::string bytes(kRawMagic, 4);
  put_le32(bytes, static_cast<std::uint32_t>(d.size()));
  put_le32(bytes, static_cast<std::uint32_t>(d.channels));
  put_le32(bytes, static_cast<std::uint32_t>(d.height));
  put_le32(bytes, static_cast<std::uint32_t>(d.width));
  put_le32(bytes, static_cast<std::uint32_t>(d.num_classes));
  for (int y : d.labels) put_le32(bytes, static_cast<std::uint32_t>(y));
  const std::size_t pix_off = bytes.size();
  bytes.resize(pix_off + static_cast<std::size_t>(d.images.size()) * 4);
  std::memcpy(bytes.data() + pix_off, d.images.data(),
              static_cast<std::size_t>(d.images.size()) * 4);
  write_file(path, bytes);
}

}  // namespace

Dataset load_dataset(const std::string& path, const std::string& format) {
  Dataset d;
  if (format == "cifar10-bin") d = load_cifar10_bin(path);
  else if (format == "idx") d = load_idx(path);
  else if (format == "raw" || format == "raw-npy-like") d = load_raw(path);
  else throw ContractError("unknown dataset format: " + format);
  d.split = path;
  d.validate();
  return d;
}

void save_dataset(const Dataset& d, const std::string& path, const std::string& format) {
  d.validate();
  if (format == "cifar10-bin") save_cifar10_bin(d, path);
  else if (format == "idx") save_idx(d, path);
  else if (format == "raw" || format == "raw-npy-like") save_raw(d, path);
  else throw ContractError("unknown dataset format: " + format);
}

Dataset subset(const Dataset& d, Eigen::Index n, std::uint64_t seed) {
  if (n <= 0) throw ContractError("subset: n must be positive");
  if (n > d.size())
    throw DataError("subset: requested " + std::to_string(n) + " of " +
                    std::to_string(d.size()) + " examples");
  const auto order = shuffled_indices(d.size(), derive_key(seed, streams::kSubset));
  Dataset out;
  out.channels = d.channels;
  out.height = d.height;
  out.width = d.width;
  out.num_classes = d.num_classes;
  out.split = d.split;
  out.images.resize(n, d.pixels());
  out.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    out.images.row(i) = d.images.row(order[static_cast<std::size_t>(i)]);
    out.labels[static_cast<std::size_t>(i)] =
        d.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  return out;
}

Dataset synthetic_dataset(Eigen::Index n, Eigen::Index channels, Eigen::Index size,
                          Eigen::Index num_classes, std::uint64_t seed) {
  if (n <= 0 || channels <= 0 || size <= 0 || num_classes <= 0)
    throw ContractError("synthetic_dataset: all sizes must be positive");

  // Class prototypes: distinct plane-wave frequency pairs from a small
  // lattice. The seed permutes the class-to-frequency assignment and jitters
  // the phases, so each seed is its own task family: the same feature
  // distribution, different label semantics. That is what makes one family a
  // genuine transfer target for a model trained on another.
  struct Proto {
    double fx, fy, phase;
  };
  const auto cells =
      shuffled_indices(9, derive_key(seed, streams::kSynthProto,
                                     static_cast<std::uint64_t>(-1)));
  std::vector<Proto> protos(static_cast<std::size_t>(num_classes));
  for (Eigen::Index c = 0; c < num_classes; ++c) {
    Rng rng(derive_key(seed, streams::kSynthProto, static_cast<std::uint64_t>(c)));
    auto& p = protos[static_cast<std::size_t>(c)];
    const auto cell = cells[static_cast<std::size_t>(c) % cells.size()];
    p.fx = 1.0 + static_cast<double>(cell % 3);
    p.fy = 1.0 + static_cast<double>(cell / 3);
    p.phase = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(num_classes) +
              rng.uniform(0.0, 0.5);
  }

  Dataset d;
  d.channels = channels;
  d.height = size;
  d.width = size;
  d.num_classes = num_classes;
  d.images.resize(n, channels * size * size);
  d.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i % num_classes);
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(c);
    const Proto& p = protos[static_cast<std::size_t>(c)];
    Rng rng(derive_key(seed, streams::kSynthSample, static_cast<std::uint64_t>(i)));
    for (Eigen::Index ch = 0; ch < channels; ++ch) {
      const double chphase = p.phase + 2.0 * M_PI * static_cast<double>(ch) /
                                           (3.0 * static_cast<double>(num_classes));
      for (Eigen::Index y = 0; y < size; ++y)
        for (Eigen::Index x = 0; x < size; ++x) {
          const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
          const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
          const double wave =
              std::sin(2.0 * M_PI * (p.fx * u + p.fy * v) + chphase);
          const double pix = 0.5 + 0.3 * wave + 0.05 * rng.normal();
          d.images(i, (ch * size + y) * size + x) =
              static_cast<float>(std::min(1.0, std::max(0.0, pix)));
        }
    }
  }
  return d;
}

}  // namespace smoothcert
