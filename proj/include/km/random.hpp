#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace km {

// splitmix64; used both as a generator and to derive child seeds.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// one-shot mix of a value (splitmix64 without threading state through)
inline uint64_t mix64(uint64_t v) {
  return splitmix64(v);
}

inline uint64_t hash_string(const std::string& s) {
  // FNV-1a
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// All randomness in the project funnels through this generator. It is
// deterministic across platforms (no std::distribution involved) and cheap
// to fork: child streams are derived by hashing, so a per-document job gets
// an independent stream regardless of scheduling order.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x5deece66dULL) {
    // warm up so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

  // standard normal via Box-Muller (one value per call; spare discarded to
  // keep the stream position independent of call pattern)
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  Rng fork(uint64_t salt) const {
    uint64_t s = state_;
    return Rng(splitmix64(s) ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

  Rng fork(const std::string& name) const { return fork(hash_string(name)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace km
