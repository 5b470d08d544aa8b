#pragma once

#include <string>
#include <vector>

namespace duotrack {

enum class SamplingStrategy { UniformInterval, KNearest, KHighestConfidence };

SamplingStrategy strategy_from_name(const std::string& name);
std::string strategy_name(SamplingStrategy s);

// Schedule {0} ∪ {i·D + ⌊D/2⌋ : i in 0..K−1}, D = ⌊C/K⌋, clamped to
// [0, C−1], duplicates collapsed, sorted. K=1 degenerates to {0}.
std::vector<int> uniform_interval_indices(int K, int C);

// Last min(k, C) frame indices, ascending.
std::vector<int> k_nearest_indices(int k, int C);

// Frame 0 plus the top-k confidence frames; ties prefer the earlier frame.
std::vector<int> k_highest_confidence_indices(const std::vector<double>& scores,
                                              int k);

// Exactly T slots over frames [0, C). Uniform-interval uses K = T−1 samples
// plus frame 0 for T > 1. Short histories pad by repeating the most recent
// selected frame.
std::vector<int> assemble_memory_indices(SamplingStrategy strategy, int T,
                                         int C,
                                         const std::vector<double>& scores);

}  // namespace duotrack
