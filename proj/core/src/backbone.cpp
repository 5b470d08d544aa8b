#include "duotrack/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace duotrack {

namespace {
[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::backbone: " + what);
}
}  // namespace

void BackboneConfig::validate() const {
  if (depth <= 0 || C <= 0 || heads <= 0 || p <= 0 || mlp_ratio <= 0 ||
      ch <= 0)
    fail("all extents must be positive");
  if (C % heads != 0) fail("C must be divisible by heads");
  if (H_z % p || W_z % p || H_x % p || W_x % p)
    fail("patch size must divide every image extent");
}

BackboneParams make_backbone_params(ParamSink& store,
                                    const BackboneConfig& config) {
  config.validate();
  const int C = config.C;
  const double w_std = 0.02;
  BackboneParams bp;
  bp.config = config;
  bp.patch_W = store.create("backbone.patch.W",
                            {config.p * config.p * config.ch, C},
                            ParamGroup::Backbone, ParamInit::gaussian(w_std));
  bp.patch_b = store.create("backbone.patch.b", {C}, ParamGroup::Backbone,
                            ParamInit::zeros());
  bp.pos_template =
      store.create("backbone.pos.template", {config.N_z(), C},
                   ParamGroup::Backbone, ParamInit::gaussian(w_std));
  bp.pos_search = store.create("backbone.pos.search", {config.N_x(), C},
                               ParamGroup::Backbone, ParamInit::gaussian(w_std));
  bp.blocks.resize(config.depth);
  for (int b = 0; b < config.depth; ++b) {
    const std::string pre = "backbone.block" + std::to_string(b);
    BlockParams& blk = bp.blocks[b];
    blk.heads = config.heads;
    auto mat = [&](const std::string& n, int rows, int cols) {
      return store.create(pre + "." + n, {rows, cols}, ParamGroup::Backbone,
                          ParamInit::gaussian(w_std));
    };
    auto vec = [&](const std::string& n, int len, double value) {
      return store.create(pre + "." + n, {len}, ParamGroup::Backbone,
                          ParamInit::constant(value));
    };
    blk.ln1_g = vec("ln1.g", C, 1.0);
    blk.ln1_b = vec("ln1.b", C, 0.0);
    blk.W_q = mat("attn.W_q", C, C);
    blk.b_q = vec("attn.b_q", C, 0.0);
    blk.W_k = mat("attn.W_k", C, C);
    blk.b_k = vec("attn.b_k", C, 0.0);
    blk.W_v = mat("attn.W_v", C, C);
    blk.b_v = vec("attn.b_v", C, 0.0);
    blk.W_o = mat("attn.W_o", C, C);
    blk.b_o = vec("attn.b_o", C, 0.0);
    blk.ln2_g = vec("ln2.g", C, 1.0);
    blk.ln2_b = vec("ln2.b", C, 0.0);
    blk.mlp_W1 = mat("mlp.W1", C, C * config.mlp_ratio);
    blk.mlp_b1 = vec("mlp.b1", C * config.mlp_ratio, 0.0);
    blk.mlp_W2 = mat("mlp.W2", C * config.mlp_ratio, C);
    blk.mlp_b2 = vec("mlp.b2", C, 0.0);
  }
  bp.final_ln_g = store.create("backbone.final_ln.g", {C},
                               ParamGroup::Backbone, ParamInit::constant(1.0));
  bp.final_ln_b = store.create("backbone.final_ln.b", {C},
                               ParamGroup::Backbone, ParamInit::zeros());
  return bp;
}

Tensor patch_embed(const Tensor& image, const BackboneParams& params) {
  const BackboneConfig& cfg = params.config;
  if (image.rank() != 4) fail("expected image B×ch×H×W");
  const int B = image.extent(0), ch = image.extent(1);
  const int H = image.extent(2), W = image.extent(3);
  if (ch != cfg.ch) fail("channel count mismatch");
  if (H % cfg.p || W % cfg.p) fail("patch size must divide image extents");
  const int p = cfg.p;
  const int gh = H / p, gw = W / p;
  // B×ch×(gh p)×(gw p) -> B×(gh gw)×(p p ch)
  Tensor t = reshape(image, {B, ch, gh, p, gw, p});
  t = permute(t, {0, 2, 4, 3, 5, 1});  // B×gh×gw×p×p×ch
  t = reshape(t, {B, gh * gw, p * p * ch});
  return add(matmul(t, params.patch_W), params.patch_b);
}

Tensor add_position(const Tensor& tokens, const TokenLayout& layout,
                    const BackboneParams& params) {
  if (tokens.rank() != 3) fail("expected tokens B×N×C");
  if (tokens.extent(1) != layout.total())
    fail("token count " + std::to_string(tokens.extent(1)) +
         " does not match layout total " + std::to_string(layout.total()));
  if (params.pos_template.extent(0) != layout.N_z ||
      params.pos_search.extent(0) != layout.N_x)
    fail("positional embedding extents do not match layout");
  std::vector<Tensor> pos_parts;
  pos_parts.reserve(layout.T + 1);
  for (int t = 0; t < layout.T; ++t) pos_parts.push_back(params.pos_template);
  pos_parts.push_back(params.pos_search);
  Tensor pos = concat(pos_parts, 0);  // total×C
  return add(tokens, pos);
}

Tensor build_token_sequence(const std::vector<Tensor>& memory_tokens,
                            const Tensor& search_tokens, TokenLayout& layout) {
  if (memory_tokens.empty()) fail("memory must contain at least one template");
  const int N_z = memory_tokens[0].extent(1);
  const int C = memory_tokens[0].extent(2);
  for (const Tensor& m : memory_tokens) {
    if (m.rank() != 3 || m.extent(1) != N_z || m.extent(2) != C)
      fail("inconsistent template token sets");
  }
  if (search_tokens.rank() != 3 || search_tokens.extent(2) != C)
    fail("search width inconsistent with templates");
  layout.T = static_cast<int>(memory_tokens.size());
  layout.N_z = N_z;
  layout.N_x = search_tokens.extent(1);
  layout.C = C;
  std::vector<Tensor> parts = memory_tokens;
  parts.push_back(search_tokens);
  return concat(parts, 1);
}

Tensor attn_stage(const Tensor& x, const BlockParams& block) {
  Tensor n = layer_norm(x, block.ln1_g, block.ln1_b);
  Tensor q = add(matmul(n, block.W_q), block.b_q);
  Tensor k = add(matmul(n, block.W_k), block.b_k);
  Tensor v = add(matmul(n, block.W_v), block.b_v);
  Tensor a = attention(q, k, v, block.heads);
  return add(matmul(a, block.W_o), block.b_o);
}

Tensor mlp_stage(const Tensor& x, const BlockParams& block) {
  Tensor n = layer_norm(x, block.ln2_g, block.ln2_b);
  Tensor h = gelu(add(matmul(n, block.mlp_W1), block.mlp_b1));
  return add(matmul(h, block.mlp_W2), block.mlp_b2);
}

Tensor block_forward(const Tensor& x, const BlockParams& block) {
  Tensor y = add(x, attn_stage(x, block));
  return add(y, mlp_stage(y, block));
}

Tensor final_norm(const Tensor& x, const BackboneParams& params) {
  return layer_norm(x, params.final_ln_g, params.final_ln_b);
}

}  // namespace duotrack
