// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/common.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <thread>

namespace timbre {

double PairwiseSum(const double* x, size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (size_t i = 0; i < n; i++) s += x[i];
    return s;
  }
  size_t half = n / 2;
  return PairwiseSum(x, half) + PairwiseSum(x + half, n - half);
}

void ParallelChunks(int chunk_count, int threads, const std::function<void(int)>& fn) {
  if (chunk_count <= 0) return;
  threads = std::max(1, std::min(threads, chunk_count));
  if (threads == 1) {
    for (int c = 0; c < chunk_count; c++) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int w = 0; w < threads; w++) {
    pool.emplace_back([&, w]() {
      for (int c = w; c < chunk_count; c += threads) fn(c);
    });
  }
  for (auto& t : pool) t.join();
}

int DefaultThreads() {
  if (const char* env = std::getenv("TIMBRE_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  return static_cast<int>(std::min(hw, 8u));
}

std::string FormatFull(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace timbre
