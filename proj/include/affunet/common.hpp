#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace affunet {

// ---------------------------------------------------------------------------
// Errors. Exit-code mapping for the CLI lives here so library code can throw
// the right category without knowing about the CLI.
// ---------------------------------------------------------------------------

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
  return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
  return Dtype::F64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch between " + shape_str(a) + " and " +
                              shape_str(b));
}

// ---------------------------------------------------------------------------
// Global knobs: worker-thread count and the optional finite check that runs
// after each forward op (off by default).
// ---------------------------------------------------------------------------

inline int& thread_count() {
  static int n = 1;
  return n;
}

inline void set_threads(int n) { thread_count() = n < 1 ? 1 : n; }

inline bool& debug_check_finite() {
  static bool on = false;
  return on;
}

// Static partition over [0, n). Deterministic for a fixed thread count; the
// callback receives a half-open index range.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  const int threads = thread_count();
  if (threads <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  const int workers = static_cast<int>(std::min<int64_t>(threads, n));
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::normal_distribution output is implementation
// defined, so uniform and normal draws are hand-rolled on top of splitmix64
// to keep byte-level reproducibility across standard libraries.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t hash_tag(const std::string& tag) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derives an independent substream, e.g. seed_for(seed, "toyset").
inline uint64_t seed_for(uint64_t master, const std::string& tag) {
  uint64_t s = master ^ hash_tag(tag);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = uniform_int(0, i);
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace affunet
