#include "ettk/bench.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <mutex>

namespace ettk {

namespace {
// Sink defeating dead-code elimination of the benched forward.
volatile float g_bench_sink = 0;
}  // namespace

void tune_allocator_for_throughput() {
#if defined(__GLIBC__)
  // Large tensor temporaries otherwise straddle the mmap threshold and pay
  // page faults on every allocation in the hot loop.
  static std::once_flag once;
  std::call_once(once, [] { mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024); });
#endif
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median_of: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double iqr_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("iqr_of: empty sample");
  std::sort(v.begin(), v.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1 - frac) + v[hi] * frac;
  };
  return quantile(0.75) - quantile(0.25);
}

BenchStats bench_head_forward(const HeadParams<float>& head, const Tensor<float>& corr, int warmup, int repeats) {
  if (warmup < 3) throw std::invalid_argument("bench: warmup must be >= 3");
  if (repeats < 30) throw std::invalid_argument("bench: repeats must be >= 30");
  tune_allocator_for_throughput();
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) {
    const auto out = head_forward(corr, head);
    g_bench_sink = g_bench_sink + out.cls_logits[0];
  }
  std::vector<double> us;
  us.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = clock::now();
    const auto out = head_forward(corr, head);
    const auto t1 = clock::now();
    g_bench_sink = g_bench_sink + out.cls_logits[0];
    us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  return BenchStats{median_of(us), iqr_of(us), repeats};
}

}  // namespace ettk
