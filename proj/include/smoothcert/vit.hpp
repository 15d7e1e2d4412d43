#ifndef SMOOTHCERT_VIT_HPP
#define SMOOTHCERT_VIT_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "smoothcert/peft.hpp"
#include "smoothcert/rng.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

struct VitConfig {
  Eigen::Index image_size = 32;
  Eigen::Index channels = 3;
  Eigen::Index patch_size = 4;
  Eigen::Index embed_dim = 64;
  Eigen::Index num_heads = 4;
  Eigen::Index depth = 4;
  Eigen::Index mlp_ratio = 2;
  Eigen::Index num_classes = 10;

  void validate() const {
    if (image_size <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0 ||
        num_heads <= 0 || depth <= 0 || mlp_ratio <= 0 || num_classes <= 0)
      throw ContractError("vit config: all dimensions must be positive");
    if (image_size % patch_size != 0)
      throw ContractError("vit config: patch size must divide image size");
    if (embed_dim % num_heads != 0)
      throw ContractError("vit config: heads must divide embed dim");
  }

  Eigen::Index grid() const { return image_size / patch_size; }
  Eigen::Index num_patches() const { return grid() * grid(); }
  Eigen::Index patch_dim() const { return channels * patch_size * patch_size; }
  Eigen::Index pixels() const { return channels * image_size * image_size; }
};

template <class S>
struct VitBlock {
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> w1, b1, w2, b2;
};

template <class S>
struct VitModel {
  VitConfig config;
  Tensor<S> patch_w, patch_b;  // [patch_dim x d], [1 x d]
  Tensor<S> cls;               // [1 x d]
  Tensor<S> pos;               // [(1 + num_patches) x d]
  std::vector<VitBlock<S>> blocks;
  Tensor<S> lnf_g, lnf_b;
  Tensor<S> head_w, head_b;  // [d x C], [1 x C]
  std::optional<PeftState<S>> peft;

  Eigen::Index prompt_rows() const {
    return peft && peft->config.method == PeftMethod::prompt ? peft->config.prompt_length
                                                             : 0;
  }
};

/// Every parameter of the model (backbone, head, and any attached PEFT
/// state), paired with a stable name. Order is fixed; checkpoints and hashes
/// depend on it.
template <class S>
std::vector<std::pair<std::string, Tensor<S>>> named_params(VitModel<S>& m) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  auto put = [&](std::string name, const Tensor<S>& t) {
    out.emplace_back(std::move(name), t);
  };
  put("patch.w", m.patch_w);
  put("patch.b", m.patch_b);
  put("cls", m.cls);
  put("pos", m.pos);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& blk = m.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    put(p + "ln1.g", blk.ln1_g);
    put(p + "ln1.b", blk.ln1_b);
    put(p + "wq", blk.wq);
    put(p + "bq", blk.bq);
    put(p + "wk", blk.wk);
    put(p + "bk", blk.bk);
    put(p + "wv", blk.wv);
    put(p + "bv", blk.bv);
    put(p + "wo", blk.wo);
    put(p + "bo", blk.bo);
    put(p + "ln2.g", blk.ln2_g);
    put(p + "ln2.b", blk.ln2_b);
    put(p + "w1", blk.w1);
    put(p + "b1", blk.b1);
    put(p + "w2", blk.w2);
    put(p + "b2", blk.b2);
  }
  put("lnf.g", m.lnf_g);
  put("lnf.b", m.lnf_b);
  put("head.w", m.head_w);
  put("head.b", m.head_b);
  if (m.peft) {
    auto& ps = *m.peft;
    for (std::size_t i = 0; i < ps.lora_q.size(); ++i) {
      const std::string p = "peft.lora" + std::to_string(i) + ".";
      put(p + "q.a", ps.lora_q[i].a);
      put(p + "q.b", ps.lora_q[i].b);
      put(p + "v.a", ps.lora_v[i].a);
      put(p + "v.b", ps.lora_v[i].b);
    }
    for (std::size_t i = 0; i < ps.adapters.size(); ++i) {
      const std::string p = "peft.adapter" + std::to_string(i) + ".";
      put(p + "attn.down", ps.adapters[i].attn_down);
      put(p + "attn.up", ps.adapters[i].attn_up);
      put(p + "mlp.down", ps.adapters[i].mlp_down);
      put(p + "mlp.up", ps.adapters[i].mlp_up);
    }
    for (std::size_t i = 0; i < ps.prompts.size(); ++i)
      put("peft.prompt" + std::to_string(i), ps.prompts[i]);
  }
  return out;
}

/// Backbone tensors only: everything the pretrained model owns except the
/// classifier head and PEFT state. This is the set the frozen-weight
/// guarantees and the checkpoint backbone hash quantify over.
template <class S>
std::vector<std::pair<std::string, Tensor<S>>> backbone_params(VitModel<S>& m) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (auto& [name, t] : named_params(m))
    if (name.rfind("peft.", 0) != 0 && name.rfind("head.", 0) != 0)
      out.emplace_back(name, t);
  return out;
}

template <class S>
VitModel<S> init_model(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VitModel<S> m;
  m.config = cfg;
  std::uint64_t idx = 0;
  auto normal_init = [&](Eigen::Index r, Eigen::Index c) {
    Rng rng(derive_key(seed, streams::kInit, idx++));
    Mat<S> v(r, c);
    rng.fill_normal(v, 0.02);
    return Tensor<S>::leaf(std::move(v));
  };
  auto zeros = [&](Eigen::Index r, Eigen::Index c) {
    ++idx;
    return Tensor<S>::zeros(r, c);
  };
  auto ones = [&](Eigen::Index r, Eigen::Index c) {
    ++idx;
    return Tensor<S>::leaf(Mat<S>::Ones(r, c));
  };

  const Eigen::Index d = cfg.embed_dim, pd = cfg.patch_dim(), np = cfg.num_patches();
  m.patch_w = normal_init(pd, d);
  m.patch_b = zeros(1, d);
  m.cls = normal_init(1, d);
  m.pos = normal_init(1 + np, d);
  for (Eigen::Index l = 0; l < cfg.depth; ++l) {
    VitBlock<S> blk;
    blk.ln1_g = ones(1, d);
    blk.ln1_b = zeros(1, d);
    blk.wq = normal_init(d, d);
    blk.bq = zeros(1, d);
    blk.wk = normal_init(d, d);
    blk.bk = zeros(1, d);
    blk.wv = normal_init(d, d);
    blk.bv = zeros(1, d);
    blk.wo = normal_init(d, d);
    blk.bo = zeros(1, d);
    blk.ln2_g = ones(1, d);
    blk.ln2_b = zeros(1, d);
    blk.w1 = normal_init(d, d * cfg.mlp_ratio);
    blk.b1 = zeros(1, d * cfg.mlp_ratio);
    blk.w2 = normal_init(d * cfg.mlp_ratio, d);
    blk.b2 = zeros(1, d);
    m.blocks.push_back(std::move(blk));
  }
  m.lnf_g = ones(1, d);
  m.lnf_b = zeros(1, d);
  m.head_w = normal_init(d, cfg.num_classes);
  m.head_b = zeros(1, cfg.num_classes);
  return m;
}

namespace detail {

/// One transformer block with any attached PEFT applied.
template <class S>
Tensor<S> apply_block(VitModel<S>& m, std::size_t layer, Tensor<S> tokens,
                      Eigen::Index batch) {
  auto& blk = m.blocks[layer];
  const bool lora = m.peft && m.peft->config.method == PeftMethod::lora;
  const bool adapter = m.peft && m.peft->config.method == PeftMethod::adapter;
  const S lscale = lora ? static_cast<S>(m.peft->config.lora_scale()) : S(1);

  auto h = layer_norm(tokens, blk.ln1_g, blk.ln1_b);
  Tensor<S> q, v;
  if (lora) {
    q = lora_forward(h, blk.wq, blk.bq, m.peft->lora_q[layer], lscale);
    v = lora_forward(h, blk.wv, blk.bv, m.peft->lora_v[layer], lscale);
  } else {
    q = add(matmul(h, blk.wq), blk.bq);
    v = add(matmul(h, blk.wv), blk.bv);
  }
  auto k = add(matmul(h, blk.wk), blk.bk);
  auto att = attention_heads(q, k, v, batch, m.config.num_heads);
  att = add(matmul(att, blk.wo), blk.bo);
  tokens = add(tokens, att);
  if (adapter)
    tokens = adapter_forward(tokens, m.peft->adapters[layer].attn_down,
                             m.peft->adapters[layer].attn_up);

  auto h2 = layer_norm(tokens, blk.ln2_g, blk.ln2_b);
  auto fed = add(matmul(gelu(add(matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2);
  tokens = add(tokens, fed);
  if (adapter)
    tokens = adapter_forward(tokens, m.peft->adapters[layer].mlp_down,
                             m.peft->adapters[layer].mlp_up);
  return tokens;
}

}  // namespace detail

/// Full forward pass: flat CHW pixel rows in, logits out. Differentiable
/// through every attached parameter when run under a Recording.
template <class S>
Tensor<S> forward(VitModel<S>& m, const Mat<S>& images) {
  const auto& cfg = m.config;
  if (images.cols() != cfg.pixels())
    throw ShapeError("forward: expected " + std::to_string(cfg.pixels()) +
                     " pixels per row, got " + std::to_string(images.cols()));
  const Eigen::Index batch = images.rows();
  const Eigen::Index p = m.prompt_rows();

  auto x = Tensor<S>::constant(images);
  auto patches = patchify(x, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size);
  auto embedded = add(matmul(patches, m.patch_w), m.patch_b);

  Tensor<S> tokens = p > 0 ? concat_tokens(m.cls, m.peft->prompts[0], embedded, batch)
                           : concat_tokens(m.cls, embedded, batch);
  tokens = add_pos(tokens, m.pos, batch, p);

  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    if (p > 0 && l > 0)
      tokens = replace_prompt_rows(tokens, m.peft->prompts[l], batch);
    tokens = detail::apply_block(m, l, tokens, batch);
  }
  tokens = layer_norm(tokens, m.lnf_g, m.lnf_b);
  auto pooled = take_cls_rows(tokens, batch);
  return add(matmul(pooled, m.head_w), m.head_b);
}

/// Inference-only logits as a plain matrix.
template <class S>
Mat<S> forward_logits(VitModel<S>& m, const Mat<S>& images) {
  return forward(m, images).value();
}

/// Frozen encoder for the black-box Coordinator: patch embedding, positions,
/// and the first block of a (pretrained, PEFT-free) model. Returns per-patch
/// features [batch*num_patches x d].
template <class S>
Mat<S> encode_patch_features(VitModel<S>& m, const Mat<S>& images) {
  if (m.peft) throw ContractError("encode_patch_features: encoder must be PEFT-free");
  const auto& cfg = m.config;
  if (images.cols() != cfg.pixels())
    throw ShapeError("encode_patch_features: pixel count mismatch");
  const Eigen::Index batch = images.rows();
  auto x = Tensor<S>::constant(images);
  auto patches = patchify(x, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size);
  auto embedded = add(matmul(patches, m.patch_w), m.patch_b);
  auto tokens = concat_tokens(m.cls, embedded, batch);
  tokens = add_pos(tokens, m.pos, batch, 0);
  tokens = detail::apply_block(m, 0, tokens, batch);

  const Eigen::Index t = 1 + cfg.num_patches(), np = cfg.num_patches();
  Mat<S> out(batch * np, cfg.embed_dim);
  for (Eigen::Index b = 0; b < batch; ++b)
    out.middleRows(b * np, np) = tokens.value().middleRows(b * t + 1, np);
  return out;
}

/// Attaches a PEFT parameter set. Freezes the backbone (unless method is
/// full), marks the PEFT tensors and the classifier head trainable, and
/// leaves the forward output untouched via the zero-init rules.
template <class S>
void attach(VitModel<S>& m, const PeftConfig& cfg, std::uint64_t seed) {
  if (m.peft) throw ContractError("attach: model already has PEFT attached");
  cfg.validate();
  const Eigen::Index d = m.config.embed_dim;

  for (auto& [name, t] : named_params(m)) t.set_requires_grad(false);

  PeftState<S> ps;
  ps.config = cfg;
  std::uint64_t idx = 0;
  auto random_init = [&](Eigen::Index r, Eigen::Index c) {
    Rng rng(derive_key(seed, streams::kInit, 1000 + idx++));
    Mat<S> v(r, c);
    rng.fill_normal(v, 0.02);
    return Tensor<S>::leaf(std::move(v));
  };

  switch (cfg.method) {
    case PeftMethod::none:
      break;
    case PeftMethod::full:
      for (auto& [name, t] : named_params(m)) t.set_requires_grad(true);
      break;
    case PeftMethod::lora:
      for (Eigen::Index l = 0; l < m.config.depth; ++l) {
        ps.lora_q.push_back({random_init(d, cfg.rank), Tensor<S>::zeros(cfg.rank, d)});
        ps.lora_v.push_back({random_init(d, cfg.rank), Tensor<S>::zeros(cfg.rank, d)});
      }
      break;
    case PeftMethod::adapter:
      for (Eigen::Index l = 0; l < m.config.depth; ++l) {
        BlockAdapters<S> a;
        a.attn_down = random_init(d, cfg.bottleneck);
        a.attn_up = Tensor<S>::zeros(cfg.bottleneck, d);
        a.mlp_down = random_init(d, cfg.bottleneck);
        a.mlp_up = Tensor<S>::zeros(cfg.bottleneck, d);
        ps.adapters.push_back(std::move(a));
      }
      break;
    case PeftMethod::prompt:
      for (Eigen::Index l = 0; l < m.config.depth; ++l)
        ps.prompts.push_back(random_init(cfg.prompt_length, d));
      break;
  }
  m.peft = std::move(ps);

  if (cfg.method != PeftMethod::none && cfg.method != PeftMethod::full) {
    m.head_w.set_requires_grad(true);
    m.head_b.set_requires_grad(true);
  }
}

/// Folds LoRA deltas into the frozen projections and returns a plain model.
template <class S>
VitModel<S> merge_lora(VitModel<S>& m) {
  if (!m.peft || m.peft->config.method != PeftMethod::lora)
    throw ContractError("merge_lora: model has no LoRA attached");
  const S scale = static_cast<S>(m.peft->config.lora_scale());

  VitModel<S> out;
  out.config = m.config;
  auto copy = [](const Tensor<S>& t) { return Tensor<S>::leaf(t.value()); };
  out.patch_w = copy(m.patch_w);
  out.patch_b = copy(m.patch_b);
  out.cls = copy(m.cls);
  out.pos = copy(m.pos);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& src = m.blocks[l];
    VitBlock<S> blk;
    blk.ln1_g = copy(src.ln1_g);
    blk.ln1_b = copy(src.ln1_b);
    blk.wq = Tensor<S>::leaf(src.wq.value() +
                             scale * (m.peft->lora_q[l].a.value() *
                                      m.peft->lora_q[l].b.value()));
    blk.bq = copy(src.bq);
    blk.wk = copy(src.wk);
    blk.bk = copy(src.bk);
    blk.wv = Tensor<S>::leaf(src.wv.value() +
                             scale * (m.peft->lora_v[l].a.value() *
                                      m.peft->lora_v[l].b.value()));
    blk.bv = copy(src.bv);
    blk.wo = copy(src.wo);
    blk.bo = copy(src.bo);
    blk.ln2_g = copy(src.ln2_g);
    blk.ln2_b = copy(src.ln2_b);
    blk.w1 = copy(src.w1);
    blk.b1 = copy(src.b1);
    blk.w2 = copy(src.w2);
    blk.b2 = copy(src.b2);
    out.blocks.push_back(std::move(blk));
  }
  out.lnf_g = copy(m.lnf_g);
  out.lnf_b = copy(m.lnf_b);
  out.head_w = copy(m.head_w);
  out.head_b = copy(m.head_b);
  return out;
}

template <class S>
std::int64_t count_parameters(VitModel<S>& m, bool trainable_only) {
  std::int64_t total = 0;
  for (auto& [name, t] : named_params(m))
    if (!trainable_only || t.requires_grad()) total += t.value().size();
  return total;
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_VIT_HPP
