#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace hdt {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Child seed for an independent stream. Tags keep episode generation, batch
// sampling, dropout and eval streams decoupled from each other.
inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t idx = 0) {
  return splitmix64(splitmix64(base ^ (tag * 0xd1342543de82ef95ull)) + idx);
}

// mt19937_64 core (bit-identical across platforms per the standard) with
// hand-rolled distributions, since std:: distributions are not portable.
class Prng {
 public:
  explicit Prng(uint64_t seed) : gen_(splitmix64(seed)) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [0, n)
  int64_t randint(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hdt
