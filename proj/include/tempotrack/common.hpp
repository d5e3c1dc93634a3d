#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tempotrack {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. One instance per independent stream; fork() derives
// decorrelated child streams so seeding stays reproducible across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), base_seed_mix_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform(double lo, double hi) {
    // Fixed mapping instead of std::uniform_real_distribution: the
    // distribution's algorithm is implementation-defined and we promise
    // bit-stable streams for a given seed.
    const double u = (next_u64() >> 11) * 0x1.0p-53;  // [0,1)
    return lo + (hi - lo) * u;
  }

  double normal(double mean, double sd) {
    // Box-Muller, deterministic given the stream.
    double u1 = uniform(1e-12, 1.0);
    double u2 = uniform(0.0, 1.0);
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    return mean + sd * z;
  }

  // Inclusive bounds.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  Rng fork(std::uint64_t stream) const {
    return Rng(splitmix64(base_seed_mix_ ^ splitmix64(stream)));
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t base_seed_mix_;
};

}  // namespace tempotrack
