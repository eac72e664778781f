#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "carnet/tensor.hpp"

namespace carnet {

// Deterministic random stream. All randomness in the project flows through
// explicit instances of this class so that runs are reproducible and
// checkpoints can capture generator state exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0,1). 53-bit mantissa, independent of library distributions
  // so the byte stream is stable across standard library versions.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo + 1));
  }

  // Box-Muller without a cached spare: two uniforms per sample, which keeps
  // serialized state exactly the generator state.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  void fill_uniform(Tensor& t, double lo, double hi) {
    for (double& v : t.data) v = uniform(lo, hi);
  }
  void fill_normal(Tensor& t) {
    for (double& v : t.data) v = normal();
  }

  // Derive an independent child stream (used for per-purpose streams).
  Rng child(uint64_t salt) {
    uint64_t s = next_u64() ^ (salt * 0x9E3779B97F4A7C15ull);
    return Rng(s);
  }

  std::string serialize() const {
    std::ostringstream ss;
    ss << gen_;
    return ss.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream ss(s);
    ss >> gen_;
    if (ss.fail()) throw ConfigError("bad rng state string");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace carnet
