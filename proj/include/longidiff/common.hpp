#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace longidiff {

// Raised for malformed or unusable input data (manifests, images, labels).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when optimization diverges (non-finite loss).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent sub-stream seed derived from a base seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t s = base ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL);
  return splitmix64(s);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Unbiased index draw in [0, n). Rejection sampling keeps the draw
// reproducible across implementations, unlike std::uniform_int_distribution.
inline size_t uniform_index(std::mt19937_64& rng, size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<size_t>(v % n);
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
  return lo + (hi - lo) * u;
}

// Box-Muller without caching; two draws per variate, fixed order.
inline double normal_draw(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline at::Generator make_generator(uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return gen;
}

// Thread cap from LONGIDIFF_THREADS; 0 means "leave as is".
inline int env_thread_cap() {
  const char* v = std::getenv("LONGIDIFF_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  const long n = std::strtol(v, nullptr, 10);
  return n > 0 ? static_cast<int>(n) : 0;
}

inline void apply_thread_cap() {
  if (const int n = env_thread_cap(); n > 0) torch::set_num_threads(n);
}

}  // namespace longidiff
