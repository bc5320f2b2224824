#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace icdyn {

// Portable random source. The engine is std::mt19937_64 (bit-exact across
// standard libraries); the distributions below are implemented here because
// the std:: distributions are not specified to be reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();

  std::string state() const;
  void set_state(const std::string& state);

  // Named sub-stream: seed = splitmix64(seed ^ fnv1a(name)).
  static Rng derive(std::uint64_t seed, std::string_view stream);
  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace icdyn
