#include "duotrack/memory_bank.hpp"

#include <algorithm>
#include <stdexcept>

namespace duotrack {

namespace {
[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::memory_bank: " + what);
}
}  // namespace

SamplingStrategy strategy_from_name(const std::string& name) {
  if (name == "uniform") return SamplingStrategy::UniformInterval;
  if (name == "nearest") return SamplingStrategy::KNearest;
  if (name == "highest") return SamplingStrategy::KHighestConfidence;
  fail("unknown strategy '" + name + "' (expected uniform|nearest|highest)");
}

std::string strategy_name(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::UniformInterval: return "uniform";
    case SamplingStrategy::KNearest: return "nearest";
    case SamplingStrategy::KHighestConfidence: return "highest";
  }
  fail("bad strategy value");
}

std::vector<int> uniform_interval_indices(int K, int C) {
  if (K <= 0) fail("sample count K must be positive");
  if (C <= 0) fail("frames seen C must be positive");
  if (K == 1) return {0};
  const int D = C / K;
  std::vector<int> out{0};
  for (int i = 0; i < K; ++i) {
    int idx = i * D + D / 2;
    idx = std::clamp(idx, 0, C - 1);
    out.push_back(idx);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> k_nearest_indices(int k, int C) {
  if (k <= 0) fail("k must be positive");
  if (C <= 0) fail("frames seen C must be positive");
  const int n = std::min(k, C);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = C - n + i;
  return out;
}

std::vector<int> k_highest_confidence_indices(const std::vector<double>& scores,
                                              int k) {
  if (scores.empty()) fail("scores must be nonempty");
  if (k <= 0) fail("k must be positive");
  const int C = static_cast<int>(scores.size());
  std::vector<int> by_score(C);
  for (int i = 0; i < C; ++i) by_score[i] = i;
  std::stable_sort(by_score.begin(), by_score.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> out{0};
  for (int i = 0; i < std::min(k, C); ++i) out.push_back(by_score[i]);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> assemble_memory_indices(SamplingStrategy strategy, int T,
                                         int C,
                                         const std::vector<double>& scores) {
  if (T <= 0) fail("memory size T must be positive");
  if (C <= 0) fail("frames seen C must be positive");
  std::vector<int> picked;
  switch (strategy) {
    case SamplingStrategy::UniformInterval:
      picked = uniform_interval_indices(std::max(T - 1, 1), C);
      break;
    case SamplingStrategy::KNearest:
      picked = k_nearest_indices(T, C);
      break;
    case SamplingStrategy::KHighestConfidence:
      if (T == 1) {
        picked = {0};
      } else {
        if (static_cast<int>(scores.size()) != C)
          fail("need one confidence score per seen frame");
        picked = k_highest_confidence_indices(scores, T - 1);
      }
      break;
  }
  if (static_cast<int>(picked.size()) > T)
    picked.resize(T);
  while (static_cast<int>(picked.size()) < T) picked.push_back(picked.back());
  return picked;
}

}  // namespace duotrack
