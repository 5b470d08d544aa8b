#pragma once

#include "duotrack/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace duotrack {

enum class ParamGroup { Backbone, Stma, Shallow, Deep, Noise, Head };

std::string_view group_name(ParamGroup g);
ParamGroup group_from_name(std::string_view name);

struct ParamInit {
  enum class Kind { Constant, Gaussian };
  Kind kind = Kind::Constant;
  double value = 0.0;  // constant value, or stddev for Gaussian

  static ParamInit zeros() { return {Kind::Constant, 0.0}; }
  static ParamInit constant(double v) { return {Kind::Constant, v}; }
  static ParamInit gaussian(double stddev) {
    return {Kind::Gaussian, stddev};
  }
};

struct ParamEntry {
  Tensor tensor;
  ParamGroup group = ParamGroup::Backbone;
  bool trainable = true;
};

// Destination for parameter declarations. The store allocates and
// initializes; the counter only tallies shapes, so full-scale geometry can
// be audited through the same declaration path without touching memory.
class ParamSink {
 public:
  virtual ~ParamSink() = default;
  virtual Tensor create(const std::string& name, Shape shape, ParamGroup group,
                        ParamInit init) = 0;
};

class ParamCounter : public ParamSink {
 public:
  Tensor create(const std::string& name, Shape shape, ParamGroup group,
                ParamInit init) override;
  std::int64_t count(ParamGroup group) const;
  std::int64_t total() const;
  std::size_t tensor_count() const { return tensor_count_; }

 private:
  std::int64_t counts_[6] = {0, 0, 0, 0, 0, 0};
  std::size_t tensor_count_ = 0;
};

// Deterministic stream of doubles for parameter initialization. Built on
// mt19937_64 raw output so the values are pinned by the standard, not by a
// library's distribution implementation.
class DeterministicRng {
 public:
  explicit DeterministicRng(std::uint64_t seed);
  double uniform();            // [0, 1)
  double uniform(double lo, double hi);
  double normal(double stddev);
  std::uint64_t next_u64();
  int uniform_int(int lo, int hi);  // inclusive bounds

 private:
  std::uint64_t state_[312];
  int index_;
  double spare_ = 0.0;
  bool has_spare_ = false;
  void seed_state(std::uint64_t seed);
};

std::uint64_t fnv1a_mix(std::string_view text, std::uint64_t seed);

// Named parameter map. Initialization of each tensor is seeded from
// hash(store seed, name), so values do not depend on creation order.
// Trainable flags lock at finalize(); iteration is sorted by name.
class ParamStore : public ParamSink {
 public:
  explicit ParamStore(std::uint64_t seed);

  Tensor create(const std::string& name, Shape shape, ParamGroup group,
                ParamInit init) override;

  bool has(const std::string& name) const;
  Tensor get(const std::string& name) const;
  const ParamEntry& entry(const std::string& name) const;

  void set_trainable(const std::string& name, bool trainable);
  void freeze_group(ParamGroup group);
  void finalize();
  bool finalized() const { return finalized_; }

  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, ParamEntry>& entries() const { return entries_; }

  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::vector<Tensor> trainable_tensors() const;

  std::int64_t scalar_count(ParamGroup group, bool trainable) const;
  std::int64_t total_scalars() const;
  std::int64_t trainable_scalars() const;
  std::int64_t frozen_scalars() const;

  void zero_grads();
  // FNV-1a over the raw bytes of frozen parameter values, in name order.
  std::uint64_t frozen_checksum() const;

  void save_checkpoint(const std::string& path) const;
  // Overwrites values of an already-assembled store; names, shapes, groups
  // and trainable flags in the file must match exactly.
  void load_checkpoint(const std::string& path);

 private:
  std::uint64_t seed_;
  bool finalized_ = false;
  std::map<std::string, ParamEntry> entries_;
};

}  // namespace duotrack
