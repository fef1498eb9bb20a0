#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace routeforge {

// Failure classes map 1:1 onto CLI exit codes.
enum class ErrorKind { Config, Data, Backend, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_config(const std::string& msg) { throw Error(ErrorKind::Config, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(ErrorKind::Data, msg); }
[[noreturn]] inline void fail_backend(const std::string& msg) { throw Error(ErrorKind::Backend, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrorKind::Numeric, msg); }

// ---- deterministic hashing -------------------------------------------------
// FNV-1a, fixed across platforms. std::hash is not stable enough for cache
// digests and seeded decisions that must reproduce between processes.

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// splitmix64 finalizer; mixes a hash into a well-distributed 64-bit value
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Hash of several string parts with separators; order-sensitive.
std::uint64_t hash_parts(std::initializer_list<std::string_view> parts);

// Uniform double in [0, 1) from a 64-bit value.
inline double unit_double(std::uint64_t x) {
  return static_cast<double>(x >> 11) * (1.0 / 9007199254740992.0);
}

// ---- deterministic RNG helpers ---------------------------------------------
// Explicit arithmetic on raw engine outputs; std::uniform_* distributions are
// implementation-defined and would break cross-run reproducibility claims.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next() {
    state_ = mix64(state_ + 0x632be59bd9b4e019ULL);
    return state_;
  }
  double next_unit() { return unit_double(next()); }
  // uniform in [-scale, scale]
  double next_symmetric(double scale) { return (2.0 * next_unit() - 1.0) * scale; }
  std::uint64_t next_below(std::uint64_t n) { return n ? next() % n : 0; }

 private:
  std::uint64_t state_;
};

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

// k distinct indices from 0..n-1, in ascending order.
std::vector<std::size_t> sample_indices(std::size_t k, std::size_t n, Rng& rng);

// ---- string helpers ----------------------------------------------------------

std::string lower_copy(std::string_view s);
std::string trim_copy(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::vector<std::string> split_ws(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string collapse_ws(std::string_view s);
bool contains(std::string_view haystack, std::string_view needle);

}  // namespace routeforge
