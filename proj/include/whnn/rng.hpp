#ifndef WHNN_RNG_HPP
#define WHNN_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string_view>

namespace whnn {

// Deterministic splitmix64 generator. All randomness in the project flows
// through this class so that results are reproducible bit-for-bit across
// runs and independent of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Derives an independent stream from a base seed, a label and an index.
  // Streams: "init", "dropout", "split", "search", "data", ...
  static Rng stream(uint64_t base, std::string_view label, uint64_t index = 0) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a over the label
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    Rng r(mix(mix(base) ^ h) ^ mix(index + 0x71ee2b5c8d3f4a19ull));
    r.next_u64();
    return r;
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform on [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(T* data, int64_t n) {
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      T tmp = data[i];
      data[i] = data[j];
      data[j] = tmp;
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace whnn

#endif  // WHNN_RNG_HPP
