#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace eyedx {

// ---------------------------------------------------------------------------
// Error types
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
  ParseError(std::size_t line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg),
        line(line) {}
  std::size_t line;
};

struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EmptyInputError : std::runtime_error {
  explicit EmptyInputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MaskError : std::runtime_error {
  explicit MaskError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VersionError : std::runtime_error {
  explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CorruptCheckpointError : std::runtime_error {
  explicit CorruptCheckpointError(const std::string& msg)
      : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic randomness
//
// All draws go through this wrapper instead of <random> distributions, whose
// output is implementation-defined. mt19937_64 itself is pinned by the
// standard, so results are reproducible across platforms and runs.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // uniform in (0, 1), safe for logs
  double uniform_open() {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }

  // standard normal via Box-Muller
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 gen_;
};

// splitmix64 finalizer; used to derive independent seed streams
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t s1,
                                 std::uint64_t s2) {
  return derive_seed(derive_seed(base, s1), s2);
}

}  // namespace eyedx
