// Shared infrastructure: matrix aliases, error types, deterministic
// counter-based random number generation, and small hashing utilities.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nnk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

enum class Precision { Single, Double };

inline const char* precision_name(Precision p) {
  return p == Precision::Single ? "single" : "double";
}

// ----------------------------------------------------------------------------
// Errors

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct IngestError : std::runtime_error {
  explicit IngestError(const std::string& what) : std::runtime_error(what) {}
};

struct DimensionError : std::invalid_argument {
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

struct ConditioningError : std::runtime_error {
  ConditioningError(const std::string& what, double min_eig, double suggested_eps)
      : std::runtime_error(what), min_eigenvalue(min_eig), suggested_eps(suggested_eps) {}
  double min_eigenvalue;
  double suggested_eps;
};

struct ResourceError : std::runtime_error {
  explicit ResourceError(const std::string& what) : std::runtime_error(what) {}
};

// ----------------------------------------------------------------------------
// Deterministic counter-based RNG.
//
// All randomness in the library is derived from (key, counter) pairs so that
// results are independent of evaluation order and thread schedule.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Combine a key with a stream/counter index into a fresh key.
inline std::uint64_t rng_mix(std::uint64_t key, std::uint64_t n) {
  return splitmix64(splitmix64(key) ^ (n * 0xda942042e4dd58b5ULL));
}

inline std::uint64_t rng_mix(std::uint64_t key, std::uint64_t a, std::uint64_t b) {
  return rng_mix(rng_mix(key, a), b);
}

// Uniform in (0, 1]: strictly positive so it is safe inside log().
inline double uniform_from_bits(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

// Uniform double in [0, 1).
inline double uniform01(std::uint64_t key, std::uint64_t counter) {
  return static_cast<double>(rng_mix(key, counter) >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_below(std::uint64_t key, std::uint64_t counter, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(key, counter) * static_cast<double>(n));
}

// One standard normal from (key, counter) via Box-Muller.
inline double normal_from_key(std::uint64_t key, std::uint64_t counter) {
  const std::uint64_t a = rng_mix(key, 2 * counter);
  const std::uint64_t b = rng_mix(key, 2 * counter + 1);
  const double u1 = uniform_from_bits(a);
  const double u2 = uniform_from_bits(b);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

// Fill a buffer with iid standard normals, deterministically from `key`.
// Vectorized Box-Muller; the per-chunk counters make the result independent
// of how the buffer is traversed.
template <typename T>
void fill_normal(T* dst, std::size_t n, std::uint64_t key) {
  constexpr std::size_t kChunk = 2048;
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Arr u1(kChunk), u2(kChunk), r(kChunk);
  std::size_t done = 0;
  std::uint64_t counter = 0;
  while (done < n) {
    const std::size_t take = std::min(kChunk, n - done);
    const std::size_t pairs = (take + 1) / 2;
    for (std::size_t i = 0; i < pairs; ++i) {
      u1[static_cast<Eigen::Index>(i)] =
          static_cast<T>(uniform_from_bits(rng_mix(key, counter + 2 * i)));
      u2[static_cast<Eigen::Index>(i)] =
          static_cast<T>(uniform_from_bits(rng_mix(key, counter + 2 * i + 1)));
    }
    counter += 2 * pairs;
    auto h1 = u1.head(pairs);
    auto h2 = u2.head(pairs);
    r.head(pairs) = (T(-2) * h1.log()).sqrt();
    Arr c = (T(6.2831853071795864769) * h2).cos();
    Arr s = (T(6.2831853071795864769) * h2).sin();
    for (std::size_t i = 0; i < pairs; ++i) {
      dst[done + 2 * i] = r[static_cast<Eigen::Index>(i)] * c[static_cast<Eigen::Index>(i)];
      if (2 * i + 1 < take)
        dst[done + 2 * i + 1] = r[static_cast<Eigen::Index>(i)] * s[static_cast<Eigen::Index>(i)];
    }
    done += take;
  }
}

// ----------------------------------------------------------------------------
// FNV-1a hashing, used for architecture/config provenance.

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace nnk
