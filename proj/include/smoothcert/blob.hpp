#ifndef SMOOTHCERT_BLOB_HPP
#define SMOOTHCERT_BLOB_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace smoothcert {

/// Streaming SHA-256 with a hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, std::size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex_digest();  // finalizes; further updates are an error

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(const void* data, std::size_t len);

/// One tensor record inside a checkpoint container.
struct BlobEntry {
  std::string name;
  std::string dtype;  // "f32" or "f64"
  std::vector<std::int64_t> shape;
  std::string bytes;  // little-endian payload
};

/// Checkpoint container: magic "PSMC", u32 version, u64 manifest length,
/// JSON manifest (entry descriptors plus one trailer object), raw payload.
struct BlobFile {
  std::vector<BlobEntry> entries;
  std::string backbone_sha256;
  std::string kind;        // "full" or "peft"
  std::string extra_json;  // trailer fields beyond hash/kind, as a JSON object
};

void write_blob(const std::string& path, const BlobFile& blob);
BlobFile read_blob(const std::string& path);

}  // namespace smoothcert

#endif  // SMOOTHCERT_BLOB_HPP
