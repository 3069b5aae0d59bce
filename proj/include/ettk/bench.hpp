#pragma once

#include "ettk/head.hpp"

namespace ettk {

struct BenchStats {
  double median_us = 0;
  double iqr_us = 0;
  int repeats = 0;
};

// One-time glibc malloc tuning for tight inference loops.
void tune_allocator_for_throughput();

double median_of(std::vector<double> v);
double iqr_of(std::vector<double> v);

// Wall-clock per head forward on a fixed correlation map, single thread.
// Medians and interquartile ranges, given CPU timing's heavy tail.
BenchStats bench_head_forward(const HeadParams<float>& head, const Tensor<float>& corr, int warmup, int repeats);

}  // namespace ettk
