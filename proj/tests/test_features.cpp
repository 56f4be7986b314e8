// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "timbre/features.hpp"

using namespace timbre;
using namespace timbre::feat;
using Eigen::MatrixXd;

namespace {

// Independent triangular-weight oracle: rebuilds the warped filter weights
// straight from the mel formulas and sums them against the spectrum.
double DirectFilterSum(const FilterbankConfig& cfg, int filter, const Eigen::VectorXd& spec) {
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto imel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  double nyq = cfg.sample_rate / 2.0;
  auto warp = [&](double f) {
    if (cfg.warp_factor == 1.0) return f;
    double b = 0.8 * nyq;
    if (f <= b) return cfg.warp_factor * f;
    double mb = cfg.warp_factor * b;
    return mb + (nyq - mb) * (f - b) / (nyq - b);
  };
  double lo_m = mel(cfg.freq_low), hi_m = mel(cfg.freq_high);
  auto edge = [&](int i) { return warp(imel(lo_m + (hi_m - lo_m) * i / (cfg.num_filters + 1))); };
  double lo = edge(filter), center = edge(filter + 1), hi = edge(filter + 2);
  double total_w = 0.0, acc = 0.0;
  for (int k = 0; k < cfg.fft_bins; k++) {
    double hz = k * nyq / (cfg.fft_bins - 1);
    double w = 0.0;
    if (hz > lo && hz < center) w = (hz - lo) / (center - lo);
    else if (hz >= center && hz < hi) w = (hi - hz) / (hi - center);
    total_w += w;
    acc += w * spec[k];
  }
  return acc / total_w;
}

UtteranceFeatures MakeUtt(const std::string& id, const std::string& spk, const MatrixXd& statics) {
  UtteranceFeatures u;
  u.utterance_id = id;
  u.speaker_id = spk;
  u.Resize(static_cast<int>(statics.rows()), static_cast<int>(statics.cols()), 1);
  u.SetChannel(0, statics);
  return u;
}

}  // namespace

TEST_CASE("mel filterbank: flat spectrum gives equal bins") {
  FilterbankConfig cfg;
  cfg.num_filters = 3;
  cfg.fft_bins = 64;
  cfg.freq_high = 8000.0;
  MatrixXd spec = MatrixXd::Ones(2, 64);
  MatrixXd out = MelFilterbank(spec, cfg);
  CHECK(out(0, 0) == doctest::Approx(out(0, 1)).epsilon(1e-12));
  CHECK(out(0, 1) == doctest::Approx(out(0, 2)).epsilon(1e-12));
  // Unit-normalized filters on an all-ones spectrum integrate to 1.
  CHECK(out(0, 0) == doctest::Approx(std::log(1.0 + kLogFloor)));
}

TEST_CASE("mel filterbank: zero spectrum hits the log floor") {
  FilterbankConfig cfg;
  cfg.num_filters = 4;
  cfg.fft_bins = 32;
  MatrixXd spec = MatrixXd::Zero(1, 32);
  MatrixXd out = MelFilterbank(spec, cfg);
  for (int f = 0; f < 4; f++) CHECK(out(0, f) == doctest::Approx(std::log(kLogFloor)));
}

TEST_CASE("mel filterbank: tone at a filter center wins that bin, matches direct sum") {
  FilterbankConfig cfg;
  cfg.num_filters = 6;
  cfg.fft_bins = 256;
  FilterbankDefinition def = BuildFilterbank(cfg);
  const int target = 3;
  double nyq = cfg.sample_rate / 2.0;
  int tone_bin = static_cast<int>(std::lround(def.center_freqs[target] / (nyq / (cfg.fft_bins - 1))));
  MatrixXd spec = MatrixXd::Zero(1, cfg.fft_bins);
  spec(0, tone_bin) = 5.0;
  MatrixXd out = MelFilterbank(spec, cfg);
  for (int f = 0; f < cfg.num_filters; f++) {
    if (f != target) CHECK(out(0, target) > out(0, f));
    double expect = std::log(DirectFilterSum(cfg, f, spec.row(0)) + kLogFloor);
    CHECK(out(0, f) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("mel filterbank rejects bad input") {
  FilterbankConfig cfg;
  cfg.num_filters = 3;
  cfg.fft_bins = 16;
  CHECK_THROWS_AS(MelFilterbank(MatrixXd::Ones(1, 8), cfg), Error);  // width mismatch
  MatrixXd neg = MatrixXd::Ones(1, 16);
  neg(0, 3) = -1.0;
  CHECK_THROWS_AS(MelFilterbank(neg, cfg), Error);
  MatrixXd nan = MatrixXd::Ones(1, 16);
  nan(0, 0) = std::nan("");
  CHECK_THROWS_AS(MelFilterbank(nan, cfg), Error);
}

TEST_CASE("apply_warp: identity warp is bit-identical") {
  FilterbankConfig cfg;
  cfg.num_filters = 8;
  cfg.fft_bins = 128;
  FilterbankDefinition a = BuildFilterbank(cfg);
  FilterbankDefinition b = BuildFilterbank(ApplyWarp(cfg, 1.0));
  REQUIRE(a.weights.size() == b.weights.size());
  for (size_t i = 0; i < a.weights.size(); i++) CHECK(a.weights[i] == b.weights[i]);
  CHECK_THROWS_AS(ApplyWarp(cfg, 0.5), Error);
  CHECK_THROWS_AS(ApplyWarp(cfg, 1.5), Error);
}

TEST_CASE("apply_warp: tone peak moves with the analytically warped centers") {
  FilterbankConfig cfg;
  cfg.num_filters = 20;
  cfg.fft_bins = 512;
  double nyq = cfg.sample_rate / 2.0;
  double bin_hz = nyq / (cfg.fft_bins - 1);

  // Tone placed on the unwarped center of a high filter, where a +-10% warp
  // moves the center by more than one filter spacing.
  FilterbankDefinition base = BuildFilterbank(cfg);
  int tone_bin = static_cast<int>(std::lround(base.center_freqs[14] / bin_hz));
  MatrixXd spec = MatrixXd::Zero(1, cfg.fft_bins);
  spec(0, tone_bin) = 1.0;
  double tone_hz = tone_bin * bin_hz;

  auto argmax_for = [&](double warp) {
    MatrixXd out = MelFilterbank(spec, ApplyWarp(cfg, warp));
    int best = 0;
    for (int f = 1; f < cfg.num_filters; f++)
      if (out(0, f) > out(0, best)) best = f;
    return best;
  };
  auto nearest_center = [&](double warp) {
    FilterbankDefinition def = BuildFilterbank(ApplyWarp(cfg, warp));
    int best = 0;
    for (int f = 1; f < cfg.num_filters; f++)
      if (std::abs(def.center_freqs[f] - tone_hz) < std::abs(def.center_freqs[best] - tone_hz))
        best = f;
    return best;
  };
  int peak_low = argmax_for(0.9);
  int peak_high = argmax_for(1.1);
  CHECK(peak_low == nearest_center(0.9));
  CHECK(peak_high == nearest_center(1.1));
  CHECK(peak_low != peak_high);
}

TEST_CASE("deltas: constant and linear signals") {
  MatrixXd constant = MatrixXd::Constant(6, 3, 2.5);
  auto out = ComputeDeltas(constant, 2);
  for (int t = 0; t < 6; t++)
    for (int f = 0; f < 3; f++) {
      CHECK(out[(t * 3 + f) * 3 + 1] == doctest::Approx(0.0));
      CHECK(out[(t * 3 + f) * 3 + 2] == doctest::Approx(0.0));
    }

  MatrixXd ramp(8, 1);
  for (int t = 0; t < 8; t++) ramp(t, 0) = 0.7 * t;
  auto r = ComputeDeltas(ramp, 2);
  for (int t = 2; t < 6; t++) CHECK(r[t * 3 + 1] == doctest::Approx(0.7).epsilon(1e-12));
  for (int t = 4; t < 4; t++) CHECK(r[t * 3 + 2] == doctest::Approx(0.0));
}

TEST_CASE("deltas: direct regression formula on a random 5-frame input") {
  CounterRng rng(42);
  MatrixXd x(5, 2);
  for (int t = 0; t < 5; t++)
    for (int f = 0; f < 2; f++) x(t, f) = rng.Gaussian();
  const int w = 2;
  auto out = ComputeDeltas(x, w);
  double denom = 2.0 * (1 + 4);
  for (int t = 0; t < 5; t++) {
    for (int f = 0; f < 2; f++) {
      double expect = 0.0;
      for (int n = 1; n <= w; n++) {
        int hi = std::min(t + n, 4), lo = std::max(t - n, 0);
        expect += n * (x(hi, f) - x(lo, f));
      }
      expect /= denom;
      CHECK(out[(t * 2 + f) * 3 + 1] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(ComputeDeltas(x, 0), Error);
}

TEST_CASE("deltas are linear") {
  CounterRng rng(7);
  MatrixXd x(9, 4), y(9, 4);
  for (int t = 0; t < 9; t++)
    for (int f = 0; f < 4; f++) {
      x(t, f) = rng.Gaussian();
      y(t, f) = rng.Gaussian();
    }
  double a = 1.7, b = -0.3;
  auto dx = ComputeDeltas(x, 2);
  auto dy = ComputeDeltas(y, 2);
  auto dz = ComputeDeltas(a * x + b * y, 2);
  for (size_t i = 0; i < dz.size(); i++) {
    CHECK(std::abs(dz[i] - (a * dx[i] + b * dy[i])) < 1e-10);
  }
}

TEST_CASE("append energy") {
  MatrixXd empty(0, 4);
  std::vector<double> none;
  MatrixXd out0 = AppendEnergy(empty, none);
  CHECK(out0.rows() == 0);
  CHECK(out0.cols() == 5);

  MatrixXd two = MatrixXd::Zero(2, 3);
  MatrixXd with = AppendEnergy(two, {1.0, 2.0});
  CHECK(with.cols() == 4);
  CHECK(with(0, 3) == 1.0);
  CHECK(with(1, 3) == 2.0);
  MatrixXd back = RemoveEnergy(with);
  CHECK(back == two);
  CHECK_THROWS_AS(AppendEnergy(two, {1.0}), Error);
}

TEST_CASE("normalize: hand case and already-normalized corpus") {
  // Two frames, one dim: {-1, +3} -> mean 1, std 2, normalized {-1, +1}.
  MatrixXd m(2, 1);
  m(0, 0) = -1.0;
  m(1, 0) = 3.0;
  std::vector<UtteranceFeatures> corpus{MakeUtt("u0", "s0", m)};
  NormStats stats = NormalizeCorpus(corpus);
  CHECK(stats.mean[0] == doctest::Approx(1.0));
  CHECK(stats.variance[0] == doctest::Approx(4.0));
  CHECK(corpus[0].At(0, 0, 0) == doctest::Approx(-1.0));
  CHECK(corpus[0].At(1, 0, 0) == doctest::Approx(1.0));

  // Normalizing again changes nothing beyond 1e-6 and reports (0, 1).
  auto copy = corpus;
  NormStats again = NormalizeCorpus(copy);
  CHECK(std::abs(again.mean[0]) < 1e-12);
  CHECK(again.variance[0] == doctest::Approx(1.0));
  for (int t = 0; t < 2; t++)
    CHECK(std::abs(copy[0].At(t, 0, 0) - corpus[0].At(t, 0, 0)) < 1e-6);
}

TEST_CASE("normalize: random corpus moments recomputed directly") {
  CounterRng rng(123);
  std::vector<UtteranceFeatures> corpus;
  for (int u = 0; u < 5; u++) {
    MatrixXd m(17, 3);
    for (int t = 0; t < 17; t++)
      for (int f = 0; f < 3; f++) m(t, f) = 3.0 * rng.Gaussian() + 2.0;
    corpus.push_back(MakeUtt("u" + std::to_string(u), "s", m));
  }
  NormalizeCorpus(corpus);
  for (int f = 0; f < 3; f++) {
    double sum = 0.0, sumsq = 0.0;
    int n = 0;
    for (const auto& utt : corpus)
      for (int t = 0; t < utt.num_frames; t++) {
        sum += utt.At(t, f, 0);
        sumsq += utt.At(t, f, 0) * utt.At(t, f, 0);
        n++;
      }
    double mean = sum / n, var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("normalize: zero-variance dimension is flagged and left unscaled") {
  MatrixXd m = MatrixXd::Zero(4, 2);
  for (int t = 0; t < 4; t++) {
    m(t, 0) = 5.0;         // constant dim
    m(t, 1) = t;           // varying dim
  }
  std::vector<UtteranceFeatures> corpus{MakeUtt("u", "s", m)};
  NormStats stats = NormalizeCorpus(corpus);
  CHECK(stats.constant[0] == 1);
  CHECK(stats.constant[1] == 0);
  for (int t = 0; t < 4; t++) CHECK(corpus[0].At(t, 0, 0) == doctest::Approx(0.0));
}

TEST_CASE("splice context") {
  CounterRng rng(5);
  MatrixXd m(6, 2);
  for (int t = 0; t < 6; t++)
    for (int f = 0; f < 2; f++) m(t, f) = rng.Gaussian();
  UtteranceFeatures utt = MakeUtt("u", "s", m);

  auto id = SpliceContext(utt, 0);
  CHECK(id.size() == 6);
  for (int t = 0; t < 6; t++)
    for (int f = 0; f < 2; f++) CHECK(id[t].values[f] == utt.At(t, f, 0));

  auto nine = SpliceContext(utt, 4);
  CHECK(nine.size() == 6);
  CHECK(nine[0].window == 9);

  MatrixXd one(1, 2);
  one << 0.5, -0.25;
  auto single = SpliceContext(MakeUtt("u1", "s", one), 2);
  CHECK(single.size() == 1);
  CHECK(single[0].window == 5);
  for (int w = 0; w < 5; w++) {
    CHECK(single[0].values[w * 2 + 0] == 0.5);
    CHECK(single[0].values[w * 2 + 1] == -0.25);
  }
}

TEST_CASE("filterbank locality: contiguous support, interior points shared by two filters") {
  FilterbankConfig cfg;
  cfg.num_filters = 12;
  cfg.fft_bins = 128;
  FilterbankDefinition def = BuildFilterbank(cfg);
  for (int f = 0; f < cfg.num_filters; f++) {
    auto [lo, hi] = def.support[f];
    REQUIRE(lo <= hi);
    for (int k = lo; k <= hi; k++) CHECK(def.Weight(f, k) > 0.0);
    for (int k = 0; k < lo; k++) CHECK(def.Weight(f, k) == 0.0);
    for (int k = hi + 1; k < cfg.fft_bins; k++) CHECK(def.Weight(f, k) == 0.0);
    if (f + 1 < cfg.num_filters) CHECK(def.support[f + 1].first <= def.support[f].second + 1);
  }
}

TEST_CASE("feature file round-trip is bit-exact") {
  CounterRng rng(99);
  UtteranceFeatures utt;
  utt.utterance_id = "utt-007";
  utt.speaker_id = "spk/3";
  utt.Resize(4, 3, 3);
  for (auto& v : utt.frames) v = static_cast<float>(rng.Gaussian());  // f32-representable
  utt.labels = {1, 2, 0, 1};

  std::string path = "test_features_roundtrip.tmbf";
  WriteFeatureFile(utt, path);
  UtteranceFeatures back = ReadFeatureFile(path);
  CHECK(back.utterance_id == utt.utterance_id);
  CHECK(back.speaker_id == utt.speaker_id);
  CHECK(back.num_frames == utt.num_frames);
  CHECK(back.num_rows == utt.num_rows);
  CHECK(back.num_channels == utt.num_channels);
  for (size_t i = 0; i < utt.frames.size(); i++) CHECK(back.frames[i] == utt.frames[i]);

  // File-level byte identity after a second write.
  std::string path2 = "test_features_roundtrip2.tmbf";
  WriteFeatureFile(back, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("norm stats round-trip") {
  NormStats stats;
  stats.num_rows = 2;
  stats.num_channels = 1;
  stats.mean = {0.123456789012345678, -3.5};
  stats.variance = {2.25, 0.0};
  stats.constant = {0, 1};
  std::string path = "test_norm_stats.txt";
  SaveNormStats(stats, path);
  NormStats back = LoadNormStats(path);
  CHECK(back.mean[0] == stats.mean[0]);
  CHECK(back.mean[1] == stats.mean[1]);
  CHECK(back.variance[0] == stats.variance[0]);
  CHECK(back.constant[1] == 1);
  std::remove(path.c_str());
}
