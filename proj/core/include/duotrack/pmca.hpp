#pragma once

#include "duotrack/param_store.hpp"
#include "duotrack/tensor.hpp"

#include <string>
#include <utility>

namespace duotrack {

// Shared bridge adapter at the attention stage: three bare projections,
// zero-initialized up matrix.
struct ShallowAdapterParams {
  Tensor W_down;  // C×h
  Tensor W_mid;   // h×h
  Tensor W_up;    // h×C
  int h = 0;
};

ShallowAdapterParams make_shallow_params(ParamSink& store,
                                         const std::string& prefix, int C,
                                         int h);

// prompt = x·W_down·W_mid·W_up, added to the OTHER modality's stream.
Tensor shallow_adapter_forward(const Tensor& x_src,
                               const ShallowAdapterParams& params);

// Modality-specific gated pixel-wise attention adapter at the MLP stage.
struct DeepAdapterParams {
  Tensor proj_down;  // C×d'
  Tensor W_gate;     // 2d'×d'
  Tensor noise_k;    // d'
  Tensor noise_v;    // d'
  Tensor out_proj;   // d'×d'
  Tensor proj_up;    // d'×C
  int dprime = 0;
};

DeepAdapterParams make_deep_params(ParamSink& store,
                                   const std::string& prefix, int C,
                                   int dprime);

// Score gating x_self's cross key: softmax over channels of
// concat(x_self, x_other)·W_gate. Both inputs already width d'.
Tensor gate_scores(const Tensor& x_self, const Tensor& x_other,
                   const Tensor& W_gate);

struct PixelwiseQkv {
  Tensor Q;  // B×N×d'
  Tensor K;  // B×N×2×d'  (entry 0 intra-modal, entry 1 cross-modal)
  Tensor V;  // B×N×2×d'
};

// Q = x_self; K = [x_self + noise_k, x_self ⊙ score]; V = [x_self + noise_v,
// x_other].
PixelwiseQkv build_qkv(const Tensor& x_self, const Tensor& x_other,
                       const Tensor& score_into_self, const Tensor& noise_k,
                       const Tensor& noise_v);

// Per-token attention over the 2-entry key/value set; linear in N. Applies
// out_proj when defined.
Tensor pixelwise_mha(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const Tensor& out_proj = {}, int heads = 1);

// Quadratic full cross-attention over all tokens; benchmark baseline only.
Tensor full_cross_attention(const Tensor& x_self, const Tensor& x_other,
                            int heads = 1);

// Both directional prompts at width C; caller adds each to its modality's
// residual stream.
std::pair<Tensor, Tensor> deep_adapter_forward(const Tensor& x_rgb,
                                               const Tensor& x_x,
                                               const DeepAdapterParams& rgb,
                                               const DeepAdapterParams& x);

}  // namespace duotrack
