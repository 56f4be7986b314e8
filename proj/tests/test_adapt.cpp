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
#include <sstream>

#include "timbre/adapt.hpp"

using namespace timbre;
using namespace timbre::adapt;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd GaussianFrames(int n, int d, uint64_t key) {
  CounterRng rng(key);
  MatrixXd m(n, d);
  for (int t = 0; t < n; t++)
    for (int f = 0; f < d; f++) m(t, f) = rng.Gaussian();
  return m;
}

void CheckNondecreasing(const std::vector<double>& objective, double rel_tol = 1e-6) {
  for (size_t i = 1; i < objective.size(); i++) {
    CHECK(objective[i] >= objective[i - 1] - rel_tol * std::abs(objective[i - 1]));
  }
}

}  // namespace

TEST_CASE("gmm: K=1 recovers sample moments") {
  MatrixXd frames = GaussianFrames(500, 3, 11);
  frames.col(1) *= 2.5;
  frames.array() += 0.7;
  DiagonalGMM gmm = TrainDiagGmm(frames, 1, 3);
  Eigen::RowVectorXd mean = frames.colwise().mean();
  Eigen::RowVectorXd var = (frames.rowwise() - mean).array().square().colwise().mean();
  for (int f = 0; f < 3; f++) {
    CHECK(gmm.means(0, f) == doctest::Approx(mean[f]).epsilon(1e-10));
    CHECK(gmm.variances(0, f) == doctest::Approx(var[f]).epsilon(1e-10));
  }
  CHECK(gmm.weights[0] == doctest::Approx(1.0));
}

TEST_CASE("gmm: two separated clusters recovered, log-likelihood nondecreasing") {
  CounterRng rng(21);
  MatrixXd frames(600, 2);
  for (int t = 0; t < 300; t++) {
    frames(t, 0) = -4.0 + 0.3 * rng.Gaussian();
    frames(t, 1) = 1.0 + 0.3 * rng.Gaussian();
  }
  for (int t = 300; t < 600; t++) {
    frames(t, 0) = 4.0 + 0.3 * rng.Gaussian();
    frames(t, 1) = -1.0 + 0.3 * rng.Gaussian();
  }
  EstimationTrace trace;
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 15, &trace);
  CheckNondecreasing(trace.objective);

  int lo = gmm.means(0, 0) < gmm.means(1, 0) ? 0 : 1;
  CHECK(std::abs(gmm.means(lo, 0) - (-4.0)) < 0.1);
  CHECK(std::abs(gmm.means(lo, 1) - 1.0) < 0.1);
  CHECK(std::abs(gmm.means(1 - lo, 0) - 4.0) < 0.1);
  CHECK(std::abs(gmm.means(1 - lo, 1) - (-1.0)) < 0.1);
  gmm.Validate();
}

TEST_CASE("gmm: iters=0 returns the deterministic initialization") {
  MatrixXd frames = GaussianFrames(64, 2, 5);
  DiagonalGMM a = TrainDiagGmm(frames, 4, 0);
  DiagonalGMM b = TrainDiagGmm(frames, 4, 0);
  CHECK(a.means == b.means);
  CHECK(a.variances == b.variances);
  CHECK(a.weights == b.weights);
  for (int j = 0; j < 4; j++) {
    int idx = static_cast<int>((j + 0.5) * 64 / 4);
    CHECK(a.means.row(j) == frames.row(idx));
  }
}

TEST_CASE("stc: outer_iters=0 is the identity") {
  MatrixXd frames = GaussianFrames(200, 3, 31);
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 5);
  STCTransform stc = EstimateStc(gmm, frames, 0);
  CHECK(stc.transform.isIdentity(0.0));
  CHECK(stc.component_variances == gmm.variances);
  CHECK(stc.model_tag == gmm.ContentHash());
}

TEST_CASE("stc: already-uncorrelated data keeps S near diagonal") {
  CounterRng rng(77);
  MatrixXd frames(2000, 3);
  for (int t = 0; t < 2000; t++) {
    bool second = t % 2 == 1;
    frames(t, 0) = (second ? 2.0 : -2.0) + 0.5 * rng.Gaussian();
    frames(t, 1) = 1.3 * rng.Gaussian();
    frames(t, 2) = (second ? -1.0 : 1.0) + 0.8 * rng.Gaussian();
  }
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 10);
  EstimationTrace trace;
  STCTransform stc = EstimateStc(gmm, frames, 5, 2, &trace);
  CheckNondecreasing(trace.objective);
  for (int r = 0; r < 3; r++) {
    for (int c = 0; c < 3; c++) {
      if (r == c) continue;
      CHECK(std::abs(stc.transform(r, c) / stc.transform(r, r)) < 0.05);
    }
  }
}

TEST_CASE("stc: correlated 2-D data gets decorrelated") {
  // Covariance [[1, .8], [.8, 1]] via x = L z.
  CounterRng rng(99);
  MatrixXd frames(3000, 2);
  for (int t = 0; t < 3000; t++) {
    double z0 = rng.Gaussian(), z1 = rng.Gaussian();
    frames(t, 0) = z0;
    frames(t, 1) = 0.8 * z0 + std::sqrt(1.0 - 0.64) * z1;
  }
  DiagonalGMM gmm = TrainDiagGmm(frames, 1, 4);
  EstimationTrace trace;
  STCTransform stc = EstimateStc(gmm, frames, 6, 2, &trace);
  CheckNondecreasing(trace.objective);

  auto weighted_offdiag = [&](const MatrixXd& data, const MatrixXd& means) {
    // GMM-weighted covariance about component means; K=1 here.
    MatrixXd centered = data.rowwise() - means.row(0);
    MatrixXd cov = centered.transpose() * centered / data.rows();
    return std::abs(cov(0, 1)) / std::sqrt(cov(0, 0) * cov(1, 1));
  };
  double before = weighted_offdiag(frames, gmm.means);
  MatrixXd transformed = frames * stc.transform.transpose();
  MatrixXd moved_means = gmm.means * stc.transform.transpose();
  double after = weighted_offdiag(transformed, moved_means);
  CHECK(before > 0.7);  // sanity: generator really is correlated
  CHECK(after < 0.5 * before);
}

TEST_CASE("fmllr: iters=0 returns the identity") {
  MatrixXd frames = GaussianFrames(100, 3, 17);
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 5);
  FMLLRTransform t = EstimateFmllr(gmm, frames, 0, "spk0");
  CHECK(t.IsIdentity());
  CHECK(t.speaker_id == "spk0");
}

TEST_CASE("fmllr: recovers a synthetic shift") {
  const int d = 4;
  CounterRng rng(123);
  MatrixXd base(5000, d);
  for (int t = 0; t < 5000; t++) {
    bool second = t % 2 == 1;
    for (int f = 0; f < d; f++)
      base(t, f) = (second ? 1.5 : -1.5) * (f % 2 ? 1.0 : -1.0) + 0.6 * rng.Gaussian();
  }
  DiagonalGMM gmm = TrainDiagGmm(base, 4, 10);

  VectorXd delta(d);
  delta << 0.9, -0.4, 0.6, 0.2;
  MatrixXd shifted = base.rowwise() + delta.transpose();

  EstimationTrace trace;
  FMLLRTransform t = EstimateFmllr(gmm, shifted, 6, "spk1", &trace);
  CheckNondecreasing(trace.objective);
  CHECK(t.final_loglike >= t.baseline_loglike);
  for (int r = 0; r < d; r++) {
    CHECK(std::abs(t.bias[r] - (-delta[r])) < 0.1);
    for (int c = 0; c < d; c++) {
      CHECK(std::abs(t.transform(r, c) - (r == c ? 1.0 : 0.0)) < 0.1);
    }
  }
}

TEST_CASE("fmllr: matched data gains almost nothing") {
  MatrixXd frames = GaussianFrames(4000, 3, 55);
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 8);
  FMLLRTransform t = EstimateFmllr(gmm, frames, 5, "spk2");
  double gain = t.final_loglike - t.baseline_loglike;
  CHECK(gain >= 0.0);
  CHECK(gain < 0.01 * std::abs(t.baseline_loglike));
}

TEST_CASE("fmllr: too few frames returns identity and logs") {
  MatrixXd frames = GaussianFrames(100, 5, 3);
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 4);
  EstimationTrace trace;
  FMLLRTransform t = EstimateFmllr(gmm, frames.topRows(3), 5, "spk3", &trace);
  CHECK(t.IsIdentity());
  REQUIRE(trace.events.size() == 1);
  CHECK(trace.events[0].find("identity returned") != std::string::npos);
}

TEST_CASE("adapt_features: identity chain is bit-exact") {
  feat::UtteranceFeatures utt;
  utt.utterance_id = "u0";
  utt.speaker_id = "spk0";
  utt.Resize(5, 3, 1);
  CounterRng rng(8);
  for (auto& v : utt.frames) v = rng.Gaussian();

  STCTransform stc;
  stc.transform = MatrixXd::Identity(3, 3);
  stc.component_variances = MatrixXd::Ones(1, 3);
  FMLLRTransform fmllr = IdentityFmllr(3, "spk0");

  feat::UtteranceFeatures out = AdaptFeatures(utt, stc, fmllr);
  for (size_t i = 0; i < utt.frames.size(); i++) CHECK(out.frames[i] == utt.frames[i]);

  // b = e1 shifts dimension 1 by exactly +1.
  fmllr.bias[0] = 1.0;
  feat::UtteranceFeatures shifted = AdaptFeatures(utt, stc, fmllr);
  for (int t = 0; t < 5; t++) {
    CHECK(shifted.At(t, 0, 0) == doctest::Approx(utt.At(t, 0, 0) + 1.0).epsilon(1e-15));
    CHECK(shifted.At(t, 1, 0) == utt.At(t, 1, 0));
    CHECK(shifted.At(t, 2, 0) == utt.At(t, 2, 0));
  }

  // Speaker mismatch is an error.
  FMLLRTransform wrong = IdentityFmllr(3, "other");
  CHECK_THROWS_AS(AdaptFeatures(utt, stc, wrong), Error);
}

TEST_CASE("adapt_features: matches the explicit three-step chain and inverts") {
  const int d = 4;
  CounterRng rng(31);
  STCTransform stc;
  stc.transform = MatrixXd::Identity(d, d);
  for (int r = 0; r < d; r++)
    for (int c = 0; c < d; c++) stc.transform(r, c) += 0.3 * rng.Gaussian();
  stc.component_variances = MatrixXd::Ones(1, d);

  FMLLRTransform fmllr = IdentityFmllr(d, "spk");
  for (int r = 0; r < d; r++) {
    fmllr.bias[r] = rng.Gaussian();
    for (int c = 0; c < d; c++) fmllr.transform(r, c) += 0.25 * rng.Gaussian();
  }

  MatrixXd statics = GaussianFrames(20, d, 77);
  MatrixXd adapted = AdaptStatics(statics, stc, fmllr);

  // Independent three-step oracle: S f, then A () + b, then S^-1 ().
  MatrixXd s_inv = stc.transform.inverse();
  for (int t = 0; t < 20; t++) {
    VectorXd f = statics.row(t).transpose();
    VectorXd step = stc.transform * f;
    step = fmllr.transform * step + fmllr.bias;
    VectorXd expect = s_inv * step;
    for (int r = 0; r < d; r++) CHECK(std::abs(adapted(t, r) - expect[r]) < 1e-10);
  }

  // Inverse chain recovers the input within 1e-8.
  MatrixXd a_inv = fmllr.transform.inverse();
  for (int t = 0; t < 20; t++) {
    VectorXd y = adapted.row(t).transpose();
    VectorXd back = s_inv * (a_inv * (stc.transform * y - fmllr.bias));
    for (int r = 0; r < d; r++) CHECK(std::abs(back[r] - statics(t, r)) < 1e-8);
  }
}

TEST_CASE("adapt_features recomputes deltas from adapted statics") {
  feat::UtteranceFeatures utt;
  utt.utterance_id = "u1";
  utt.speaker_id = "spk";
  CounterRng rng(4);
  MatrixXd statics(7, 3);
  for (int t = 0; t < 7; t++)
    for (int f = 0; f < 3; f++) statics(t, f) = rng.Gaussian();
  utt.Resize(7, 3, 3);
  utt.frames = feat::ComputeDeltas(statics, 2);

  STCTransform stc;
  stc.transform = MatrixXd::Identity(3, 3) * 2.0;
  stc.component_variances = MatrixXd::Ones(1, 3);
  FMLLRTransform fmllr = IdentityFmllr(3, "spk");
  fmllr.bias << 1.0, 0.0, -1.0;

  feat::UtteranceFeatures out = AdaptFeatures(utt, stc, fmllr);
  MatrixXd adapted = AdaptStatics(statics, stc, fmllr);
  std::vector<double> expect = feat::ComputeDeltas(adapted, 2);
  REQUIRE(out.frames.size() == expect.size());
  for (size_t i = 0; i < expect.size(); i++) CHECK(out.frames[i] == doctest::Approx(expect[i]));
}

TEST_CASE("transform serialization round-trips exactly") {
  MatrixXd frames = GaussianFrames(300, 3, 13);
  DiagonalGMM gmm = TrainDiagGmm(frames, 3, 6);
  SaveGmm(gmm, "test_gmm.txt");
  DiagonalGMM gmm2 = LoadGmm("test_gmm.txt");
  CHECK(gmm2.weights == gmm.weights);
  CHECK(gmm2.means == gmm.means);
  CHECK(gmm2.variances == gmm.variances);
  CHECK(gmm2.ContentHash() == gmm.ContentHash());

  STCTransform stc = EstimateStc(gmm, frames, 3);
  SaveStc(stc, "test_stc.txt");
  STCTransform stc2 = LoadStc("test_stc.txt");
  CHECK(stc2.transform == stc.transform);
  CHECK(stc2.component_variances == stc.component_variances);
  CHECK(stc2.model_tag == stc.model_tag);

  DiagonalGMM moved = StcSpaceGmm(gmm, stc);
  FMLLRTransform fmllr = EstimateFmllr(moved, frames * stc.transform.transpose(), 3, "spk9");
  SaveFmllr(fmllr, "test_fmllr.txt");
  FMLLRTransform fmllr2 = LoadFmllr("test_fmllr.txt");
  CHECK(fmllr2.transform == fmllr.transform);
  CHECK(fmllr2.bias == fmllr.bias);
  CHECK(fmllr2.speaker_id == fmllr.speaker_id);
  CHECK(fmllr2.baseline_loglike == fmllr.baseline_loglike);
  CHECK(fmllr2.final_loglike == fmllr.final_loglike);

  std::remove("test_gmm.txt");
  std::remove("test_stc.txt");
  std::remove("test_fmllr.txt");
}

TEST_CASE("stc-space gmm refuses a mismatched model") {
  MatrixXd frames = GaussianFrames(200, 2, 1);
  DiagonalGMM gmm = TrainDiagGmm(frames, 2, 4);
  STCTransform stc = EstimateStc(gmm, frames, 2);
  DiagonalGMM other = TrainDiagGmm(frames, 2, 5);
  CHECK_THROWS_AS(StcSpaceGmm(other, stc), Error);
}
