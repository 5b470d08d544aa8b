#include "duotrack/stma.hpp"

#include <stdexcept>

namespace duotrack {

namespace {
[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::stma: " + what);
}
}  // namespace

StmaParams make_stma_params(ParamSink& store, const std::string& prefix,
                            int C, int d) {
  if (C <= 0 || d <= 0) fail("widths must be positive");
  StmaParams p;
  p.d = d;
  p.W_down = store.create(prefix + ".W_down", {C, d}, ParamGroup::Stma,
                          ParamInit::gaussian(0.02));
  p.b_down = store.create(prefix + ".b_down", {d}, ParamGroup::Stma,
                          ParamInit::zeros());
  p.conv_w = store.create(prefix + ".conv_w", {d, d, 3}, ParamGroup::Stma,
                          ParamInit::gaussian(0.02));
  p.conv_b = store.create(prefix + ".conv_b", {d}, ParamGroup::Stma,
                          ParamInit::zeros());
  p.W_up = store.create(prefix + ".W_up", {d, C}, ParamGroup::Stma,
                        ParamInit::zeros());
  p.b_up = store.create(prefix + ".b_up", {C}, ParamGroup::Stma,
                        ParamInit::zeros());
  return p;
}

std::pair<Tensor, Tensor> split_tokens(const Tensor& x_down,
                                       const TokenLayout& layout) {
  if (x_down.rank() != 3) fail("expected tokens B×N×d");
  if (x_down.extent(1) != layout.total())
    fail("token count " + std::to_string(x_down.extent(1)) +
         " does not match layout total " + std::to_string(layout.total()));
  Tensor x_z = slice(x_down, 1, 0, layout.search_offset());
  Tensor x_x = slice(x_down, 1, layout.search_offset(), layout.N_x);
  return {x_z, x_x};
}

Tensor temporal_reshape(const Tensor& x_z, const TokenLayout& layout) {
  if (x_z.rank() != 3) fail("expected template tokens B×(T·N_z)×d");
  const int B = x_z.extent(0);
  const int d = x_z.extent(2);
  if (x_z.extent(1) != layout.T * layout.N_z)
    fail("template token count mismatch");
  Tensor r = reshape(x_z, {B, layout.T, layout.N_z, d});
  r = permute(r, {0, 2, 3, 1});  // B×N_z×d×T
  return reshape(r, {B * layout.N_z, d, layout.T});
}

Tensor temporal_reshape_inverse(const Tensor& x, const TokenLayout& layout,
                                int batch) {
  if (x.rank() != 3) fail("expected (B·N_z)×d×T");
  const int d = x.extent(1);
  if (x.extent(0) != batch * layout.N_z || x.extent(2) != layout.T)
    fail("temporal shape mismatch");
  Tensor r = reshape(x, {batch, layout.N_z, d, layout.T});
  r = permute(r, {0, 3, 1, 2});  // B×T×N_z×d
  return reshape(r, {batch, layout.T * layout.N_z, d});
}

Tensor stma_forward(const Tensor& x, const StmaParams& params,
                    const TokenLayout& layout) {
  if (x.rank() != 3) fail("expected tokens B×N×C");
  const int B = x.extent(0);
  Tensor x_down = add(matmul(x, params.W_down), params.b_down);
  auto [x_z, x_x] = split_tokens(x_down, layout);
  Tensor t = temporal_reshape(x_z, layout);
  Tensor conv = conv1d(t, params.conv_w, params.conv_b, 1);
  Tensor x_z_mixed = add(x_z, temporal_reshape_inverse(conv, layout, B));
  Tensor merged = concat({x_z_mixed, x_x}, 1);
  return add(matmul(merged, params.W_up), params.b_up);
}

}  // namespace duotrack
