#pragma once

#include "duotrack/backbone.hpp"
#include "duotrack/param_store.hpp"
#include "duotrack/tensor.hpp"

#include <string>
#include <utility>

namespace duotrack {

// Bottleneck adapter with a temporal conv over the template-memory axis.
// Up-projection starts at zero so the adapter is an exact no-op initially.
struct StmaParams {
  Tensor W_down;  // C×d
  Tensor b_down;  // d
  Tensor conv_w;  // d×d×3
  Tensor conv_b;  // d
  Tensor W_up;    // d×C
  Tensor b_up;    // C
  int d = 0;
};

StmaParams make_stma_params(ParamSink& store, const std::string& prefix,
                            int C, int d);

// x_down B×(T·N_z+N_x)×d -> (template part B×(T·N_z)×d, search part B×N_x×d)
std::pair<Tensor, Tensor> split_tokens(const Tensor& x_down,
                                       const TokenLayout& layout);

// (b, frame t, token n, channel c) -> row b·N_z+n, channel c, time t
Tensor temporal_reshape(const Tensor& x_z, const TokenLayout& layout);
Tensor temporal_reshape_inverse(const Tensor& x, const TokenLayout& layout,
                                int batch);

// delta = up(concat(X_z + Conv1d_time(X_z), X_x)); caller adds it to the
// residual stream at block entry.
Tensor stma_forward(const Tensor& x, const StmaParams& params,
                    const TokenLayout& layout);

}  // namespace duotrack
