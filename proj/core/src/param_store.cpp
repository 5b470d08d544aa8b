#include "duotrack/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace duotrack {

namespace {

constexpr std::string_view kGroupNames[] = {"backbone", "stma", "shallow",
                                            "deep",     "noise", "head"};

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("duotrack::ParamStore: " + what);
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
    return r;
  }
}

void write_doubles_le(std::ostream& out, const std::vector<double>& values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    bits = to_le(bits);
    out.write(reinterpret_cast<const char*>(&bits), 8);
  }
}

void read_doubles_le(std::istream& in, std::vector<double>& values) {
  for (double& v : values) {
    std::uint64_t bits;
    in.read(reinterpret_cast<char*>(&bits), 8);
    bits = to_le(bits);
    std::memcpy(&v, &bits, 8);
  }
}

}  // namespace

std::string_view group_name(ParamGroup g) {
  return kGroupNames[static_cast<int>(g)];
}

ParamGroup group_from_name(std::string_view name) {
  for (int i = 0; i < 6; ++i) {
    if (kGroupNames[i] == name) return static_cast<ParamGroup>(i);
  }
  fail("unknown parameter group '" + std::string(name) + "'");
}

std::uint64_t fnv1a_mix(std::string_view text, std::uint64_t seed) {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (int i = 0; i < 8; ++i) feed(static_cast<unsigned char>(seed >> (8 * i)));
  for (char c : text) feed(static_cast<unsigned char>(c));
  return h;
}

DeterministicRng::DeterministicRng(std::uint64_t seed) { seed_state(seed); }

// mt19937_64 per the standard's parameterization.
void DeterministicRng::seed_state(std::uint64_t seed) {
  state_[0] = seed;
  for (int i = 1; i < 312; ++i) {
    state_[i] = 6364136223846793005ull *
                    (state_[i - 1] ^ (state_[i - 1] >> 62)) +
                static_cast<std::uint64_t>(i);
  }
  index_ = 312;
}

std::uint64_t DeterministicRng::next_u64() {
  if (index_ >= 312) {
    constexpr std::uint64_t kUpper = 0xffffffff80000000ull;
    constexpr std::uint64_t kLower = 0x7fffffffull;
    constexpr std::uint64_t kMatrix = 0xb5026f5aa96619e9ull;
    for (int i = 0; i < 312; ++i) {
      const std::uint64_t x =
          (state_[i] & kUpper) | (state_[(i + 1) % 312] & kLower);
      state_[i] = state_[(i + 156) % 312] ^ (x >> 1) ^ ((x & 1) ? kMatrix : 0);
    }
    index_ = 0;
  }
  std::uint64_t y = state_[index_++];
  y ^= (y >> 29) & 0x5555555555555555ull;
  y ^= (y << 17) & 0x71d67fffeda60000ull;
  y ^= (y << 37) & 0xfff7eee000000000ull;
  y ^= y >> 43;
  return y;
}

double DeterministicRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double DeterministicRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double DeterministicRng::normal(double stddev) {
  if (has_spare_) {
    has_spare_ = false;
    return spare_ * stddev;
  }
  double u, v, s;
  do {
    u = uniform(-1.0, 1.0);
    v = uniform(-1.0, 1.0);
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m * stddev;
}

int DeterministicRng::uniform_int(int lo, int hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

Tensor ParamCounter::create(const std::string& name, Shape shape,
                            ParamGroup group, ParamInit init) {
  (void)name;
  (void)init;
  counts_[static_cast<int>(group)] += shape_numel(shape);
  ++tensor_count_;
  return {};
}

std::int64_t ParamCounter::count(ParamGroup group) const {
  return counts_[static_cast<int>(group)];
}

std::int64_t ParamCounter::total() const {
  std::int64_t n = 0;
  for (std::int64_t c : counts_) n += c;
  return n;
}

ParamStore::ParamStore(std::uint64_t seed) : seed_(seed) {}

Tensor ParamStore::create(const std::string& name, Shape shape,
                          ParamGroup group, ParamInit init) {
  if (finalized_) fail("create after finalize: " + name);
  if (entries_.count(name)) fail("duplicate parameter name: " + name);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)),
                           init.kind == ParamInit::Kind::Constant ? init.value
                                                                  : 0.0);
  if (init.kind == ParamInit::Kind::Gaussian) {
    DeterministicRng rng(fnv1a_mix(name, seed_));
    for (double& v : data) v = rng.normal(init.value);
  }
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), true);
  entries_.emplace(name, ParamEntry{t, group, true});
  return t;
}

bool ParamStore::has(const std::string& name) const {
  return entries_.count(name) != 0;
}

Tensor ParamStore::get(const std::string& name) const {
  return entry(name).tensor;
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail("unknown parameter: " + name);
  return it->second;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  if (finalized_) fail("set_trainable after finalize: " + name);
  auto it = entries_.find(name);
  if (it == entries_.end()) fail("unknown parameter: " + name);
  it->second.trainable = trainable;
  it->second.tensor.node()->requires_grad = trainable;
}

void ParamStore::freeze_group(ParamGroup group) {
  if (finalized_) fail("freeze_group after finalize");
  for (auto& [name, entry] : entries_) {
    if (entry.group == group) {
      entry.trainable = false;
      entry.tensor.node()->requires_grad = false;
    }
  }
}

void ParamStore::finalize() { finalized_ = true; }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) out.push_back(name);
  }
  return out;
}

std::vector<Tensor> ParamStore::trainable_tensors() const {
  std::vector<Tensor> out;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) out.push_back(entry.tensor);
  }
  return out;
}

std::int64_t ParamStore::scalar_count(ParamGroup group, bool trainable) const {
  std::int64_t n = 0;
  for (const auto& [name, entry] : entries_) {
    if (entry.group == group && entry.trainable == trainable)
      n += entry.tensor.numel();
  }
  return n;
}

std::int64_t ParamStore::total_scalars() const {
  std::int64_t n = 0;
  for (const auto& [name, entry] : entries_) n += entry.tensor.numel();
  return n;
}

std::int64_t ParamStore::trainable_scalars() const {
  std::int64_t n = 0;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) n += entry.tensor.numel();
  }
  return n;
}

std::int64_t ParamStore::frozen_scalars() const {
  return total_scalars() - trainable_scalars();
}

void ParamStore::zero_grads() {
  for (auto& [name, entry] : entries_) entry.tensor.clear_grad();
}

std::uint64_t ParamStore::frozen_checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) continue;
    for (double v : entry.tensor.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i)
        feed(static_cast<unsigned char>(bits >> (8 * i)));
    }
  }
  return h;
}

void ParamStore::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open checkpoint for writing: " + path);
  out << "duotrack-checkpoint v1\n";
  out << "seed " << seed_ << "\n";
  for (const auto& [name, entry] : entries_) {
    out << "param " << name << ' ' << group_name(entry.group) << ' '
        << (entry.trainable ? 1 : 0) << ' ' << entry.tensor.rank();
    for (int e : entry.tensor.shape()) out << ' ' << e;
    out << "\n";
  }
  out << "end\n";
  for (const auto& [name, entry] : entries_) {
    write_doubles_le(out, entry.tensor.data());
  }
  if (!out) fail("write failure: " + path);
}

void ParamStore::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "duotrack-checkpoint v1")
    fail("bad checkpoint magic in " + path);
  if (!std::getline(in, line)) fail("truncated checkpoint header");
  {
    std::istringstream row(line);
    std::string tag;
    std::uint64_t file_seed;
    if (!(row >> tag >> file_seed) || tag != "seed")
      fail("bad seed line: " + line);
    if (file_seed != seed_)
      fail("checkpoint seed " + std::to_string(file_seed) +
           " does not match store seed " + std::to_string(seed_));
  }
  std::vector<std::string> order;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream row(line);
    std::string tag, name, group_text;
    int trainable_flag, rank;
    if (!(row >> tag >> name >> group_text >> trainable_flag >> rank) ||
        tag != "param")
      fail("bad param line: " + line);
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) {
      if (!(row >> shape[i])) fail("bad shape in line: " + line);
    }
    auto it = entries_.find(name);
    if (it == entries_.end()) fail("checkpoint names unknown param: " + name);
    const ParamEntry& e = it->second;
    if (e.tensor.shape() != shape)
      fail("shape mismatch for " + name + ": store " +
           shape_str(e.tensor.shape()) + " vs file " + shape_str(shape));
    if (group_from_name(group_text) != e.group)
      fail("group mismatch for " + name);
    if ((trainable_flag != 0) != e.trainable)
      fail("trainable flag mismatch for " + name);
    order.push_back(name);
  }
  if (line != "end") fail("missing end marker in " + path);
  if (order.size() != entries_.size())
    fail("checkpoint lists " + std::to_string(order.size()) + " params, store has " +
         std::to_string(entries_.size()));
  for (const std::string& name : order) {
    auto& values = entries_.at(name).tensor.mutable_data();
    read_doubles_le(in, values);
    if (!in) fail("truncated checkpoint payload at " + name);
  }
}

}  // namespace duotrack
