#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace latentmem {

// splitmix64: the seed mixer behind every derived stream in the project.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Deterministic RNG. All randomness in the project flows through this type so
// that identical seeds reproduce identical runs on the same build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // [0, n)
  int uniform_int(int n) {
    return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  Rng derive(std::string_view tag) const { return Rng(mix_seed(state_, hash_str(tag))); }
  Rng derive(uint64_t salt) const { return Rng(mix_seed(state_, salt)); }

 private:
  uint64_t state_;
};

// Counter for prompt-truncation warnings; tests inspect it, the CLI reports it.
inline std::atomic<uint64_t>& truncation_warning_count() {
  static std::atomic<uint64_t> n{0};
  return n;
}

inline void warn_truncation(const char* where, int had, int kept) {
  truncation_warning_count().fetch_add(1, std::memory_order_relaxed);
  std::fprintf(stderr, "[warn] %s: context over budget, left-truncated %d -> %d tokens\n",
               where, had, kept);
}

// Runs fn(i) for i in [0, n). Each index writes only its own output slot, so
// results are identical for any worker count; reductions happen afterwards in
// index order.
template <class Fn>
void parallel_for(int64_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  int nthreads = static_cast<int>(std::min<int64_t>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace latentmem
