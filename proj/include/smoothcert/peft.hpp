#ifndef SMOOTHCERT_PEFT_HPP
#define SMOOTHCERT_PEFT_HPP

#include <string>
#include <vector>

#include "smoothcert/tensor.hpp"

namespace smoothcert {

enum class PeftMethod { none, lora, adapter, prompt, full };

inline const char* to_string(PeftMethod m) {
  switch (m) {
    case PeftMethod::none: return "none";
    case PeftMethod::lora: return "lora";
    case PeftMethod::adapter: return "adapter";
    case PeftMethod::prompt: return "prompt";
    case PeftMethod::full: return "full";
  }
  return "none";
}

inline PeftMethod peft_method_from(const std::string& s) {
  if (s == "none") return PeftMethod::none;
  if (s == "lora") return PeftMethod::lora;
  if (s == "adapter") return PeftMethod::adapter;
  if (s == "prompt") return PeftMethod::prompt;
  if (s == "full") return PeftMethod::full;
  throw ContractError("unknown peft method: " + s);
}

struct PeftConfig {
  PeftMethod method = PeftMethod::none;
  Eigen::Index rank = 2;            // LoRA rank on the query and value projections
  Eigen::Index bottleneck = 32;     // adapter bottleneck width
  Eigen::Index prompt_length = 100; // deep prompt rows per layer
  double lora_alpha = 0.0;          // 0 means "use rank", giving scale 1

  double lora_scale() const {
    return (lora_alpha > 0.0 ? lora_alpha : static_cast<double>(rank)) /
           static_cast<double>(rank);
  }

  void validate() const {
    if (method == PeftMethod::lora && rank < 1)
      throw ContractError("peft: lora rank must be >= 1");
    if (method == PeftMethod::adapter && bottleneck < 1)
      throw ContractError("peft: adapter bottleneck must be >= 1");
    if (method == PeftMethod::prompt && prompt_length < 1)
      throw ContractError("peft: prompt length must be >= 1");
  }
};

/// Trainable low-rank delta for one frozen projection.
/// a is [k x r] (random init), b is [r x d] (zero init), so a·b = 0 at attach.
template <class S>
struct LoraPair {
  Tensor<S> a, b;
};

/// Bottleneck adapters inserted after the attention and MLP sub-layers.
template <class S>
struct BlockAdapters {
  Tensor<S> attn_down, attn_up, mlp_down, mlp_up;
};

template <class S>
struct PeftState {
  PeftConfig config;
  std::vector<LoraPair<S>> lora_q, lora_v;  // one per layer
  std::vector<BlockAdapters<S>> adapters;   // one per layer
  std::vector<Tensor<S>> prompts;           // P_i, one per layer, [p x d]
};

/// h = x·W0 + b0 + (alpha/r)·(x·A)·B. With B = 0 this is exactly the frozen
/// projection.
template <class S>
Tensor<S> lora_forward(const Tensor<S>& x, const Tensor<S>& w0, const Tensor<S>& b0,
                       const LoraPair<S>& lp, double scale) {
  auto base = add(matmul(x, w0), b0);
  auto delta = matmul(matmul(x, lp.a), lp.b);
  return add(base, mul(delta, static_cast<S>(scale)));
}

/// h = y + relu(y·W_down)·W_up. With W_up = 0 this is the identity.
template <class S>
Tensor<S> adapter_forward(const Tensor<S>& y, const Tensor<S>& down, const Tensor<S>& up) {
  return add(y, matmul(relu(matmul(y, down)), up));
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_PEFT_HPP
