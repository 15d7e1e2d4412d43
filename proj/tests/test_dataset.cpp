#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "smoothcert/dataset.hpp"

using namespace smoothcert;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& name)
      : path(fs::temp_directory_path() / name) {}
  ~TempFile() {
    std::error_code ec;
    fs::remove(path, ec);
  }
};

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  return a.size() == b.size() && a.labels == b.labels &&
         a.num_classes == b.num_classes &&
         (a.images - b.images).cwiseAbs().maxCoeff() == 0.0f;
}

}  // namespace

TEST_CASE("cifar10-bin round trip and size arithmetic") {
  Dataset d = synthetic_dataset(10, 3, 32, 10, 5);
  TempFile f("smoothcert_test_c10.bin");
  save_dataset(d, f.path.string(), "cifar10-bin");
  CHECK(fs::file_size(f.path) == 10 * 3073);

  Dataset re = load_dataset(f.path.string(), "cifar10-bin");
  CHECK(re.size() == 10);
  CHECK(re.channels == 3);
  CHECK(re.num_classes == 10);
  CHECK(re.labels == d.labels);
  // Byte quantization moves pixels by at most half a step.
  CHECK((re.images - d.images).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
  CHECK(re.labels[0] == 0);
  CHECK(re.labels[1] == 1);
}

TEST_CASE("cifar10-bin rejects malformed files") {
  TempFile f("smoothcert_test_c10_bad.bin");

  SUBCASE("empty file") {
    write_bytes(f.path, "");
    CHECK_THROWS_AS(load_dataset(f.path.string(), "cifar10-bin"), DataError);
  }
  SUBCASE("partial record") {
    write_bytes(f.path, std::string(3073 + 100, '\0'));
    CHECK_THROWS_AS(load_dataset(f.path.string(), "cifar10-bin"), DataError);
  }
  SUBCASE("label out of range") {
    std::string bytes(3073, '\0');
    bytes[0] = 11;
    write_bytes(f.path, bytes);
    CHECK_THROWS_AS(load_dataset(f.path.string(), "cifar10-bin"), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_dataset("/nonexistent/x.bin", "cifar10-bin"), DataError);
  }
}

TEST_CASE("idx round trip derives the label path") {
  Dataset d = synthetic_dataset(12, 1, 8, 4, 6);
  TempFile fimg("smoothcert_test_images-idx3-ubyte");
  TempFile flab("smoothcert_test_labels-idx1-ubyte");
  save_dataset(d, fimg.path.string(), "idx");
  CHECK(fs::exists(flab.path));

  Dataset re = load_dataset(fimg.path.string(), "idx");
  CHECK(re.size() == 12);
  CHECK(re.channels == 1);
  CHECK(re.height == 8);
  CHECK(re.labels == d.labels);
  CHECK(re.num_classes == 4);
  CHECK((re.images - d.images).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("idx loader rejects bad headers") {
  TempFile fimg("smoothcert_test_bad_images-idx3-ubyte");
  TempFile flab("smoothcert_test_bad_labels-idx1-ubyte");

  SUBCASE("bad image magic") {
    write_bytes(fimg.path, std::string(16, '\x07'));
    CHECK_THROWS_AS(load_dataset(fimg.path.string(), "idx"), DataError);
  }
  SUBCASE("label count mismatch") {
    Dataset d = synthetic_dataset(3, 1, 4, 3, 1);
    save_dataset(d, fimg.path.string(), "idx");
    std::string lab;
    lab.push_back('\0'); lab.push_back('\0'); lab.push_back('\x08'); lab.push_back('\x01');
    lab += std::string(4, '\0');  // claims 0 items badly
    write_bytes(flab.path, lab + std::string(4, '\0'));
    CHECK_THROWS_AS(load_dataset(fimg.path.string(), "idx"), DataError);
  }
  SUBCASE("underivable label path") {
    TempFile fodd("smoothcert_test_odd.idx");
    write_bytes(fodd.path, std::string(16, '\0'));
    CHECK_THROWS_AS(load_dataset(fodd.path.string(), "idx"), DataError);
  }
}

TEST_CASE("raw format round trips exactly") {
  Dataset d = synthetic_dataset(7, 3, 8, 5, 9);
  TempFile f("smoothcert_test_raw.bin");
  save_dataset(d, f.path.string(), "raw");
  Dataset re = load_dataset(f.path.string(), "raw");
  CHECK(same_dataset(d, re));
  CHECK(re.height == 8);
  CHECK(re.width == 8);

  SUBCASE("alias spelling") {
    Dataset re2 = load_dataset(f.path.string(), "raw-npy-like");
    CHECK(same_dataset(d, re2));
  }
  SUBCASE("truncation rejected") {
    std::ifstream in(f.path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    write_bytes(f.path, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_dataset(f.path.string(), "raw"), DataError);
  }
  SUBCASE("bad magic rejected") {
    std::ifstream in(f.path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes[0] = 'Q';
    write_bytes(f.path, bytes);
    CHECK_THROWS_AS(load_dataset(f.path.string(), "raw"), DataError);
  }
}

TEST_CASE("unknown format tag is a contract error") {
  CHECK_THROWS_AS(load_dataset("x", "parquet"), ContractError);
  Dataset d = synthetic_dataset(2, 1, 4, 2, 1);
  CHECK_THROWS_AS(save_dataset(d, "x", "parquet"), ContractError);
}

TEST_CASE("subset is deterministic, seed-sensitive, and bounded") {
  Dataset d = synthetic_dataset(50, 1, 4, 5, 3);
  Dataset a = subset(d, 20, 7);
  Dataset b = subset(d, 20, 7);
  Dataset c = subset(d, 20, 8);
  CHECK(a.size() == 20);
  CHECK(same_dataset(a, b));
  CHECK(!same_dataset(a, c));
  CHECK_THROWS_AS(subset(d, 0, 1), ContractError);
  CHECK_THROWS_AS(subset(d, 51, 1), DataError);

  // Membership is a prefix property: growing n keeps earlier picks.
  Dataset wide = subset(d, 30, 7);
  CHECK((wide.images.topRows(20) - a.images).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("synthetic dataset is balanced, bounded, and seed-keyed") {
  Dataset d = synthetic_dataset(40, 3, 8, 10, 11);
  d.validate();
  CHECK(d.images.minCoeff() >= 0.0f);
  CHECK(d.images.maxCoeff() <= 1.0f);
  std::vector<int> counts(10, 0);
  for (int y : d.labels) counts[static_cast<std::size_t>(y)]++;
  for (int c : counts) CHECK(c == 4);

  Dataset same = synthetic_dataset(40, 3, 8, 10, 11);
  Dataset other = synthetic_dataset(40, 3, 8, 10, 12);
  CHECK(same_dataset(d, same));
  CHECK(!same_dataset(d, other));

  // Same class, different samples: close to the shared prototype but not equal.
  CHECK((d.images.row(0) - d.images.row(10)).cwiseAbs().maxCoeff() > 0.0f);
  CHECK((d.images.row(0) - d.images.row(10)).cwiseAbs().maxCoeff() < 0.5f);
}

TEST_CASE("augment_batch matches the noise law") {
  Mat<double> x = Mat<double>::Constant(1000, 1000, 0.25);

  SUBCASE("sigma zero is the identity") {
    Rng rng(1);
    Mat<double> y = augment_batch(x, 0.0, rng);
    CHECK((y - x).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("moments at sigma 0.5") {
    Rng rng(2);
    Mat<double> y = augment_batch(x, 0.5, rng);
    Mat<double> delta = y - x;
    const double mean = delta.mean();
    const double sd = std::sqrt((delta.array() - mean).square().mean());
    CHECK(mean == doctest::Approx(0.0).epsilon(0.002).scale(1.0));
    CHECK(sd == doctest::Approx(0.5).epsilon(0.004));
  }
  SUBCASE("same key, same noise") {
    Rng r1(3), r2(3);
    Mat<double> y1 = augment_batch(x, 0.3, r1);
    Mat<double> y2 = augment_batch(x, 0.3, r2);
    CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("negative sigma rejected") {
    Rng rng(4);
    CHECK_THROWS_AS(augment_batch(x, -0.1, rng), ContractError);
  }
}
