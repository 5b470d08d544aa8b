#pragma once

#include "duotrack/param_store.hpp"
#include "duotrack/tensor.hpp"

#include <string>
#include <vector>

namespace duotrack {

// Token sequence layout: T template frames of N_z tokens each, then N_x
// search tokens.
struct TokenLayout {
  int T = 1;
  int N_z = 0;
  int N_x = 0;
  int C = 0;

  int total() const { return T * N_z + N_x; }
  int search_offset() const { return T * N_z; }
};

struct BackboneConfig {
  int depth = 4;
  int C = 64;
  int heads = 4;
  int p = 8;
  int H_z = 32, W_z = 32;
  int H_x = 64, W_x = 64;
  int mlp_ratio = 4;
  int ch = 1;  // image channels per modality

  int N_z() const { return (H_z / p) * (W_z / p); }
  int N_x() const { return (H_x / p) * (W_x / p); }
  void validate() const;
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor W_q, b_q, W_k, b_k, W_v, b_v, W_o, b_o;
  Tensor ln2_g, ln2_b;
  Tensor mlp_W1, mlp_b1, mlp_W2, mlp_b2;
  int heads = 0;
};

struct BackboneParams {
  Tensor patch_W;  // (p*p*ch) × C
  Tensor patch_b;  // C
  Tensor pos_template;  // N_z × C, shared across template slots
  Tensor pos_search;    // N_x × C
  Tensor final_ln_g, final_ln_b;
  std::vector<BlockParams> blocks;
  BackboneConfig config;
};

BackboneParams make_backbone_params(ParamSink& store,
                                    const BackboneConfig& config);

// image B×ch×H×W -> tokens B×N×C via non-overlapping p×p patches.
Tensor patch_embed(const Tensor& image, const BackboneParams& params);

// Adds the same template positional embedding to every template frame and
// the search embedding to search tokens.
Tensor add_position(const Tensor& tokens, const TokenLayout& layout,
                    const BackboneParams& params);

// memory_tokens: T sets of B×N_z×C in ascending temporal order.
Tensor build_token_sequence(const std::vector<Tensor>& memory_tokens,
                            const Tensor& search_tokens, TokenLayout& layout);

// Residual deltas of the two pre-norm stages.
Tensor attn_stage(const Tensor& x, const BlockParams& block);
Tensor mlp_stage(const Tensor& x, const BlockParams& block);

// Plain frozen block: x + attn, then + mlp. Adapter insertion happens in the
// model layer, which interleaves prompts with these stages.
Tensor block_forward(const Tensor& x, const BlockParams& block);

Tensor final_norm(const Tensor& x, const BackboneParams& params);

}  // namespace duotrack
