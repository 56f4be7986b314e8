// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#ifndef TIMBRE_COMMON_HPP
#define TIMBRE_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace timbre {

/// Error type thrown by all modules. The stage tag names the pipeline
/// stage that failed so the CLI can report it.
class Error : public std::runtime_error {
 public:
  Error(std::string stage, const std::string& msg)
      : std::runtime_error("[" + stage + "] " + msg), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

[[noreturn]] inline void Fail(const std::string& stage, const std::string& msg) {
  throw Error(stage, msg);
}

inline void Require(bool cond, const std::string& stage, const std::string& msg) {
  if (!cond) Fail(stage, msg);
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit) — used for utterance ids, config hashes and
// serialized-content checksums.
// ---------------------------------------------------------------------------

inline uint64_t Fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; i++) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t Fnv1a64(std::string_view s) { return Fnv1a64(s.data(), s.size()); }

// ---------------------------------------------------------------------------
// Counter-based RNG.
//
// All randomness in the toolkit flows through keyed, stateless derivation:
// a key is mixed from a master seed plus structural identifiers (utterance
// hash, layer id, iteration, ...), and draws are pure functions of
// (key, counter). Evaluation order can therefore never change a result.
// ---------------------------------------------------------------------------

inline uint64_t Mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t MixKey(uint64_t a, uint64_t b) {
  return Mix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

inline uint64_t MixKey(uint64_t a, uint64_t b, uint64_t c) { return MixKey(MixKey(a, b), c); }

inline uint64_t MixKey(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return MixKey(MixKey(a, b, c), d);
}

/// Uniform double in [0, 1), a pure function of (key, counter).
inline double CounterUniform(uint64_t key, uint64_t counter) {
  return static_cast<double>(Mix64(key ^ Mix64(counter)) >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on counters (2i, 2i+1).
inline double CounterGaussian(uint64_t key, uint64_t counter) {
  double u1 = CounterUniform(key, 2 * counter);
  double u2 = CounterUniform(key, 2 * counter + 1);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

/// Convenience wrapper holding a key and a running counter. Stateless
/// underneath; two instances with the same key replay the same stream.
class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}
  double Uniform() { return CounterUniform(key_, counter_++); }
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  double Gaussian() { return CounterGaussian(key_, counter_++); }
  /// Integer in [0, n).
  uint64_t Below(uint64_t n) { return static_cast<uint64_t>(Uniform() * static_cast<double>(n)) % n; }
  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Deterministic reductions.
// ---------------------------------------------------------------------------

/// Pairwise (tree) summation. Order-independent of any parallel schedule and
/// more accurate than left-to-right accumulation.
double PairwiseSum(const double* x, size_t n);
inline double PairwiseSum(const std::vector<double>& x) { return PairwiseSum(x.data(), x.size()); }

/// Runs fn(chunk_index) for chunk_count chunks on up to `threads` workers.
/// Chunk layout is fixed by the caller, so results are independent of the
/// thread count; callers merge per-chunk results in chunk order.
void ParallelChunks(int chunk_count, int threads, const std::function<void(int)>& fn);

/// Worker count used by batch computations: TIMBRE_THREADS env var if set,
/// otherwise min(hardware_concurrency, 8).
int DefaultThreads();

// ---------------------------------------------------------------------------
// Text formatting helpers.
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form of a double (17 significant digits).
std::string FormatFull(double v);

}  // namespace timbre

#endif  // TIMBRE_COMMON_HPP
