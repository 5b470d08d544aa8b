#include "duotrack/pmca.hpp"

#include <cmath>
#include <stdexcept>

namespace duotrack {

namespace {
[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::pmca: " + what);
}

void check_tokens(const Tensor& t, const char* what) {
  if (t.rank() != 3) fail(std::string(what) + " must be rank-3 B×N×c");
}
}  // namespace

ShallowAdapterParams make_shallow_params(ParamSink& store,
                                         const std::string& prefix, int C,
                                         int h) {
  if (C <= 0 || h <= 0) fail("widths must be positive");
  ShallowAdapterParams p;
  p.h = h;
  p.W_down = store.create(prefix + ".W_down", {C, h}, ParamGroup::Shallow,
                          ParamInit::gaussian(0.02));
  p.W_mid = store.create(prefix + ".W_mid", {h, h}, ParamGroup::Shallow,
                         ParamInit::gaussian(0.02));
  p.W_up = store.create(prefix + ".W_up", {h, C}, ParamGroup::Shallow,
                        ParamInit::zeros());
  return p;
}

Tensor shallow_adapter_forward(const Tensor& x_src,
                               const ShallowAdapterParams& params) {
  check_tokens(x_src, "x_src");
  return matmul(matmul(matmul(x_src, params.W_down), params.W_mid),
                params.W_up);
}

DeepAdapterParams make_deep_params(ParamSink& store,
                                   const std::string& prefix, int C,
                                   int dprime) {
  if (C <= 0 || dprime <= 0) fail("widths must be positive");
  DeepAdapterParams p;
  p.dprime = dprime;
  p.proj_down = store.create(prefix + ".proj_down", {C, dprime},
                             ParamGroup::Deep, ParamInit::gaussian(0.02));
  p.W_gate = store.create(prefix + ".W_gate", {2 * dprime, dprime},
                          ParamGroup::Deep, ParamInit::gaussian(0.02));
  p.noise_k = store.create(prefix + ".noise_k", {dprime}, ParamGroup::Noise,
                           ParamInit::gaussian(0.02));
  p.noise_v = store.create(prefix + ".noise_v", {dprime}, ParamGroup::Noise,
                           ParamInit::gaussian(0.02));
  p.out_proj = store.create(
      prefix + ".out_proj", {dprime, dprime}, ParamGroup::Deep,
      ParamInit::gaussian(1.0 / std::sqrt(static_cast<double>(dprime))));
  p.proj_up = store.create(prefix + ".proj_up", {dprime, C}, ParamGroup::Deep,
                           ParamInit::zeros());
  return p;
}

Tensor gate_scores(const Tensor& x_self, const Tensor& x_other,
                   const Tensor& W_gate) {
  check_tokens(x_self, "x_self");
  check_tokens(x_other, "x_other");
  if (x_self.shape() != x_other.shape())
    fail("gate inputs must share shape, got " + shape_str(x_self.shape()) +
         " and " + shape_str(x_other.shape()));
  Tensor cat = concat({x_self, x_other}, 2);
  return softmax(matmul(cat, W_gate), 2);
}

PixelwiseQkv build_qkv(const Tensor& x_self, const Tensor& x_other,
                       const Tensor& score_into_self, const Tensor& noise_k,
                       const Tensor& noise_v) {
  check_tokens(x_self, "x_self");
  check_tokens(x_other, "x_other");
  if (x_self.shape() != x_other.shape() ||
      x_self.shape() != score_into_self.shape())
    fail("build_qkv inputs must share shape");
  PixelwiseQkv out;
  out.Q = x_self;
  out.K = stack({add(x_self, noise_k), mul(x_self, score_into_self)}, 2);
  out.V = stack({add(x_self, noise_v), x_other}, 2);
  return out;
}

Tensor pixelwise_mha(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const Tensor& out_proj, int heads) {
  check_tokens(Q, "Q");
  if (K.rank() != 4 || V.rank() != 4)
    fail("K and V must be rank-4 B×N×2×d'");
  const int B = Q.extent(0), N = Q.extent(1), d = Q.extent(2);
  if (K.extent(0) != B || K.extent(1) != N || K.extent(3) != d ||
      K.shape() != V.shape())
    fail("Q/K/V shapes disagree");
  const int entries = K.extent(2);
  // one batched attention per token: sequence length `entries`, query length 1
  Tensor q = reshape(Q, {B * N, 1, d});
  Tensor k = reshape(K, {B * N, entries, d});
  Tensor v = reshape(V, {B * N, entries, d});
  Tensor p = attention(q, k, v, heads);
  p = reshape(p, {B, N, d});
  if (out_proj.defined()) p = matmul(p, out_proj);
  return p;
}

Tensor full_cross_attention(const Tensor& x_self, const Tensor& x_other,
                            int heads) {
  check_tokens(x_self, "x_self");
  check_tokens(x_other, "x_other");
  return attention(x_self, x_other, x_other, heads);
}

std::pair<Tensor, Tensor> deep_adapter_forward(const Tensor& x_rgb,
                                               const Tensor& x_x,
                                               const DeepAdapterParams& rgb,
                                               const DeepAdapterParams& x) {
  check_tokens(x_rgb, "x_rgb");
  check_tokens(x_x, "x_x");
  if (x_rgb.extent(1) != x_x.extent(1))
    fail("token counts differ across modalities: " +
         std::to_string(x_rgb.extent(1)) + " vs " +
         std::to_string(x_x.extent(1)));
  Tensor d_rgb = matmul(x_rgb, rgb.proj_down);
  Tensor d_x = matmul(x_x, x.proj_down);

  Tensor score_rgb = gate_scores(d_rgb, d_x, rgb.W_gate);
  Tensor score_x = gate_scores(d_x, d_rgb, x.W_gate);

  PixelwiseQkv qkv_rgb = build_qkv(d_rgb, d_x, score_rgb, rgb.noise_k,
                                   rgb.noise_v);
  PixelwiseQkv qkv_x = build_qkv(d_x, d_rgb, score_x, x.noise_k, x.noise_v);

  Tensor p_rgb = pixelwise_mha(qkv_rgb.Q, qkv_rgb.K, qkv_rgb.V, rgb.out_proj);
  Tensor p_x = pixelwise_mha(qkv_x.Q, qkv_x.K, qkv_x.V, x.out_proj);

  return {matmul(p_rgb, rgb.proj_up), matmul(p_x, x.proj_up)};
}

}  // namespace duotrack
