#include "smoothcert/blob.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "json.hpp"
#include "smoothcert/errors.hpp"

namespace smoothcert {

struct Sha256::Impl {
  EVP_MD_CTX* ctx = nullptr;
  bool done = false;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
  impl_->ctx = EVP_MD_CTX_new();
  if (!impl_->ctx || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: init failed");
}

Sha256::~Sha256() {
  if (impl_ && impl_->ctx) EVP_MD_CTX_free(impl_->ctx);
}

void Sha256::update(const void* data, std::size_t len) {
  if (impl_->done) throw ContractError("sha256: update after digest");
  if (EVP_DigestUpdate(impl_->ctx, data, len) != 1)
    throw std::runtime_error("sha256: update failed");
}

std::string Sha256::hex_digest() {
  if (impl_->done) throw ContractError("sha256: digest taken twice");
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(impl_->ctx, md, &len) != 1)
    throw std::runtime_error("sha256: final failed");
  impl_->done = true;
  static const char* hex = "0123456789abcdef";
  std::string out(2 * len, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hex[md[i] >> 4];
    out[2 * i + 1] = hex[md[i] & 0xf];
  }
  return out;
}

std::string sha256_hex(const void* data, std::size_t len) {
  Sha256 h;
  h.update(data, len);
  return h.hex_digest();
}

namespace {

constexpr char kMagic[4] = {'P', 'S', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_blob(const std::string& path, const BlobFile& blob) {
  using json = nlohmann::ordered_json;
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : blob.entries) {
    if (e.dtype != "f32" && e.dtype != "f64")
      throw ContractError("write_blob: dtype must be f32 or f64");
    json rec;
    rec["name"] = e.name;
    rec["dtype"] = e.dtype;
    rec["shape"] = e.shape;
    rec["offset"] = offset;
    rec["byte_len"] = e.bytes.size();
    manifest.push_back(std::move(rec));
    offset += e.bytes.size();
  }
  json trailer;
  trailer["backbone_sha256"] = blob.backbone_sha256;
  trailer["kind"] = blob.kind;
  if (!blob.extra_json.empty()) {
    json extra = json::parse(blob.extra_json);
    for (auto& [k, v] : extra.items()) trailer[k] = v;
  }
  manifest.push_back(std::move(trailer));

  const std::string mtext = manifest.dump();
  std::string head;
  head.append(kMagic, 4);
  put_u32(head, kVersion);
  put_u64(head, mtext.size());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("write_blob: cannot open " + path);
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& e : blob.entries)
    f.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
  if (!f) throw DataError("write_blob: write failed for " + path);
}

BlobFile read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_blob: cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 16) throw DataError("read_blob: file too short: " + path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (std::memcmp(p, kMagic, 4) != 0) throw DataError("read_blob: bad magic in " + path);
  const std::uint32_t version = get_u32(p + 4);
  if (version != kVersion)
    throw DataError("read_blob: unknown format version " + std::to_string(version));
  const std::uint64_t mlen = get_u64(p + 8);
  if (16 + mlen > raw.size()) throw DataError("read_blob: truncated manifest in " + path);

  using json = nlohmann::ordered_json;
  json manifest;
  try {
    manifest = json::parse(raw.substr(16, mlen));
  } catch (const json::parse_error& e) {
    throw DataError("read_blob: manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.is_array() || manifest.empty() || !manifest.back().is_object() ||
      !manifest.back().contains("kind"))
    throw DataError("read_blob: manifest must be an entry array plus a trailer");

  const std::size_t payload_start = 16 + mlen;
  const std::size_t payload_len = raw.size() - payload_start;

  BlobFile out;
  json trailer = manifest.back();
  out.backbone_sha256 = trailer.value("backbone_sha256", "");
  out.kind = trailer.at("kind").get<std::string>();
  trailer.erase("backbone_sha256");
  trailer.erase("kind");
  out.extra_json = trailer.empty() ? "" : trailer.dump();

  for (std::size_t i = 0; i + 1 < manifest.size(); ++i) {
    const json& rec = manifest[i];
    BlobEntry e;
    try {
      e.name = rec.at("name").get<std::string>();
      e.dtype = rec.at("dtype").get<std::string>();
      e.shape = rec.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = rec.at("offset").get<std::uint64_t>();
      const auto blen = rec.at("byte_len").get<std::uint64_t>();
      if (offset + blen > payload_len)
        throw DataError("read_blob: truncated payload for tensor " + e.name);
      std::int64_t count = 1;
      for (auto s : e.shape) {
        if (s <= 0) throw DataError("read_blob: non-positive dimension in " + e.name);
        count *= s;
      }
      const std::size_t want = (e.dtype == "f64" ? 8u : 4u) * static_cast<std::size_t>(count);
      if (e.dtype != "f32" && e.dtype != "f64")
        throw DataError("read_blob: unknown dtype " + e.dtype);
      if (want != blen)
        throw DataError("read_blob: manifest/payload mismatch for tensor " + e.name);
      e.bytes = raw.substr(payload_start + offset, blen);
    } catch (const json::exception& ex) {
      throw DataError("read_blob: malformed manifest entry: " + std::string(ex.what()));
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace smoothcert
