#ifndef SMOOTHCERT_CHECKPOINT_HPP
#define SMOOTHCERT_CHECKPOINT_HPP

#include <cstring>
#include <map>
#include <string>

#include "json.hpp"
#include "smoothcert/blob.hpp"
#include "smoothcert/vit.hpp"

namespace smoothcert {

template <class S>
constexpr const char* dtype_name() {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  return sizeof(S) == 4 ? "f32" : "f64";
}

/// Content hash of the frozen backbone (name-tagged little-endian tensor
/// bytes, fixed visitation order). PEFT checkpoints carry it so a delta is
/// never applied to the wrong base.
template <class S>
std::string backbone_hash(VitModel<S>& m) {
  Sha256 h;
  for (auto& [name, t] : backbone_params(m)) {
    h.update(name);
    h.update("\0", 1);
    h.update(t.value().data(), sizeof(S) * static_cast<std::size_t>(t.value().size()));
  }
  return h.hex_digest();
}

namespace detail {

inline nlohmann::ordered_json vit_config_json(const VitConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["patch_size"] = c.patch_size;
  j["embed_dim"] = c.embed_dim;
  j["num_heads"] = c.num_heads;
  j["depth"] = c.depth;
  j["mlp_ratio"] = c.mlp_ratio;
  j["num_classes"] = c.num_classes;
  return j;
}

inline VitConfig vit_config_from_json(const nlohmann::ordered_json& j) {
  VitConfig c;
  try {
    c.image_size = j.at("image_size").get<Eigen::Index>();
    c.channels = j.at("channels").get<Eigen::Index>();
    c.patch_size = j.at("patch_size").get<Eigen::Index>();
    c.embed_dim = j.at("embed_dim").get<Eigen::Index>();
    c.num_heads = j.at("num_heads").get<Eigen::Index>();
    c.depth = j.at("depth").get<Eigen::Index>();
    c.mlp_ratio = j.at("mlp_ratio").get<Eigen::Index>();
    c.num_classes = j.at("num_classes").get<Eigen::Index>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad model config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json peft_config_json(const PeftConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = to_string(c.method);
  j["rank"] = c.rank;
  j["bottleneck"] = c.bottleneck;
  j["prompt_length"] = c.prompt_length;
  j["lora_alpha"] = c.lora_alpha;
  return j;
}

inline PeftConfig peft_config_from_json(const nlohmann::ordered_json& j) {
  PeftConfig c;
  try {
    c.method = peft_method_from(j.at("method").get<std::string>());
    c.rank = j.at("rank").get<Eigen::Index>();
    c.bottleneck = j.at("bottleneck").get<Eigen::Index>();
    c.prompt_length = j.at("prompt_length").get<Eigen::Index>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad peft config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

template <class S>
BlobEntry entry_from(const std::string& name, const Tensor<S>& t) {
  BlobEntry e;
  e.name = name;
  e.dtype = dtype_name<S>();
  e.shape = {t.rows(), t.cols()};
  e.bytes.assign(reinterpret_cast<const char*>(t.value().data()),
                 sizeof(S) * static_cast<std::size_t>(t.value().size()));
  return e;
}

template <class S>
void fill_from(Tensor<S>& t, const BlobEntry& e) {
  if (e.dtype != dtype_name<S>())
    throw DataError("checkpoint: tensor " + e.name + " has dtype " + e.dtype +
                    ", expected " + dtype_name<S>());
  if (e.shape.size() != 2 || e.shape[0] != t.rows() || e.shape[1] != t.cols())
    throw DataError("checkpoint: tensor " + e.name + " has unexpected shape");
  std::memcpy(t.value().data(), e.bytes.data(), e.bytes.size());
}

}  // namespace detail

/// Writes the model to one self-describing file. A model with a PEFT method
/// other than full carries kind "peft": only the delta tensors and the
/// classifier head are stored, plus the backbone content hash. Everything
/// else writes kind "full".
template <class S>
void save_checkpoint(VitModel<S>& m, const std::string& path) {
  const bool delta = m.peft && m.peft->config.method != PeftMethod::none &&
                     m.peft->config.method != PeftMethod::full;
  BlobFile blob;
  blob.kind = delta ? "peft" : "full";
  blob.backbone_sha256 = backbone_hash(m);

  nlohmann::ordered_json extra;
  extra["config"] = detail::vit_config_json(m.config);
  if (delta) extra["peft"] = detail::peft_config_json(m.peft->config);
  blob.extra_json = extra.dump();

  for (auto& [name, t] : named_params(m)) {
    const bool is_delta_tensor =
        name.rfind("peft.", 0) == 0 || name.rfind("head.", 0) == 0;
    if (delta && !is_delta_tensor) continue;
    if (!delta && name.rfind("peft.", 0) == 0) continue;
    blob.entries.push_back(detail::entry_from(name, t));
  }
  write_blob(path, blob);
}

/// Loads a kind:"full" checkpoint into a fresh model.
template <class S>
VitModel<S> load_checkpoint(const std::string& path) {
  BlobFile blob = read_blob(path);
  if (blob.kind != "full")
    throw DataError("load_checkpoint: " + path +
                    " is a PEFT-only checkpoint; load it over its backbone");
  nlohmann::ordered_json extra = nlohmann::ordered_json::parse(
      blob.extra_json.empty() ? "{}" : blob.extra_json);
  if (!extra.contains("config"))
    throw DataError("load_checkpoint: missing model config in " + path);
  VitModel<S> m = init_model<S>(detail::vit_config_from_json(extra["config"]), 0);

  std::map<std::string, const BlobEntry*> by_name;
  for (const auto& e : blob.entries) by_name[e.name] = &e;
  for (auto& [name, t] : named_params(m)) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("load_checkpoint: tensor " + name + " missing from " + path);
    detail::fill_from(t, *it->second);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw DataError("load_checkpoint: unexpected tensor " + by_name.begin()->first +
                    " in " + path);
  return m;
}

/// Loads a kind:"peft" checkpoint over its pretrained backbone, verifying the
/// stored backbone hash first. The model gains the stored PEFT state and
/// classifier head.
template <class S>
void load_peft_checkpoint(const std::string& path, VitModel<S>& backbone) {
  BlobFile blob = read_blob(path);
  if (blob.kind != "peft")
    throw DataError("load_peft_checkpoint: " + path + " is not a PEFT checkpoint");
  if (backbone.peft)
    throw ContractError("load_peft_checkpoint: backbone already has PEFT attached");
  if (blob.backbone_sha256 != backbone_hash(backbone))
    throw DataError("load_peft_checkpoint: backbone hash mismatch for " + path);

  nlohmann::ordered_json extra = nlohmann::ordered_json::parse(
      blob.extra_json.empty() ? "{}" : blob.extra_json);
  if (!extra.contains("peft"))
    throw DataError("load_peft_checkpoint: missing peft config in " + path);
  attach(backbone, detail::peft_config_from_json(extra["peft"]), 0);

  std::map<std::string, const BlobEntry*> by_name;
  for (const auto& e : blob.entries) by_name[e.name] = &e;
  for (auto& [name, t] : named_params(backbone)) {
    const bool is_delta_tensor =
        name.rfind("peft.", 0) == 0 || name.rfind("head.", 0) == 0;
    if (!is_delta_tensor) continue;
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("load_peft_checkpoint: tensor " + name + " missing from " + path);
    detail::fill_from(t, *it->second);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw DataError("load_peft_checkpoint: unexpected tensor " +
                    by_name.begin()->first + " in " + path);
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_CHECKPOINT_HPP
