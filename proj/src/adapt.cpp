// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/adapt.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace timbre {
namespace adapt {

namespace {

constexpr char kStage[] = "adapt";
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kVarianceFloorScale = 1e-4;  // times global per-dimension variance
constexpr double kMinDet = 1e-12;

void LogEvent(EstimationTrace* trace, const std::string& msg) {
  if (trace) trace->events.push_back(msg);
}

void PushObjective(EstimationTrace* trace, double v) {
  if (trace) trace->objective.push_back(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// DiagonalGMM
// ---------------------------------------------------------------------------

void DiagonalGMM::Validate() const {
  const int k = NumComponents();
  Require(k >= 1, kStage, "GMM must have at least one component");
  Require(means.rows() == k && variances.rows() == k && means.cols() == variances.cols(), kStage,
          "GMM shape mismatch");
  Require((weights.array() >= 0.0).all(), kStage, "negative mixture weight");
  Require(std::abs(weights.sum() - 1.0) < 1e-8, kStage, "mixture weights must sum to 1");
  Require((variances.array() > 0.0).all(), kStage, "non-positive variance");
}

uint64_t DiagonalGMM::ContentHash() const {
  uint64_t h = Fnv1a64(weights.data(), sizeof(double) * weights.size());
  h = Fnv1a64(means.data(), sizeof(double) * means.size(), h);
  h = Fnv1a64(variances.data(), sizeof(double) * variances.size(), h);
  return h;
}

VectorXd DiagonalGMM::FrameLogLikes(const MatrixXd& frames, MatrixXd* responsibilities) const {
  const int n = static_cast<int>(frames.rows());
  const int k = NumComponents();
  Require(frames.cols() == Dim(), kStage, "frame dimension does not match GMM");

  MatrixXd inv_var = variances.array().inverse().matrix();  // K x D
  VectorXd log_const(k);
  for (int j = 0; j < k; j++) {
    log_const[j] = std::log(weights[j]) -
                   0.5 * (Dim() * kLog2Pi + variances.row(j).array().log().sum()) -
                   0.5 * means.row(j).cwiseProduct(means.row(j)).dot(inv_var.row(j));
  }
  // loglike(t, j) = log_const[j] - 0.5 * x^2 . invvar_j + x . (mu_j * invvar_j)
  MatrixXd mean_term = means.cwiseProduct(inv_var);  // K x D
  MatrixXd ll = frames * mean_term.transpose();      // N x K
  ll.noalias() -= 0.5 * frames.cwiseProduct(frames) * inv_var.transpose();
  ll.rowwise() += log_const.transpose();

  VectorXd row_max = ll.rowwise().maxCoeff();
  VectorXd out(n);
  for (int t = 0; t < n; t++) {
    out[t] = row_max[t] + std::log((ll.row(t).array() - row_max[t]).exp().sum());
  }
  if (responsibilities) {
    responsibilities->resize(n, k);
    for (int t = 0; t < n; t++) {
      responsibilities->row(t) = (ll.row(t).array() - out[t]).exp();
    }
  }
  return out;
}

DiagonalGMM TrainDiagGmm(const MatrixXd& frames, int num_components, int iters,
                         EstimationTrace* trace) {
  const int n = static_cast<int>(frames.rows());
  const int d = static_cast<int>(frames.cols());
  Require(num_components >= 1 && d >= 1, kStage, "bad GMM size");
  Require(n >= num_components, kStage, "need at least one frame per component");
  Require(iters >= 0, kStage, "negative iteration count");

  Eigen::RowVectorXd global_mean = frames.colwise().mean();
  Eigen::RowVectorXd global_var =
      (frames.rowwise() - global_mean).array().square().colwise().mean();
  Eigen::RowVectorXd floor = (global_var.array() * kVarianceFloorScale).max(1e-10).matrix();

  DiagonalGMM gmm;
  gmm.weights = VectorXd::Constant(num_components, 1.0 / num_components);
  gmm.means.resize(num_components, d);
  gmm.variances.resize(num_components, d);
  for (int j = 0; j < num_components; j++) {
    int idx = static_cast<int>((j + 0.5) * n / num_components);
    gmm.means.row(j) = frames.row(idx);
    gmm.variances.row(j) = global_var.cwiseMax(floor);
  }
  if (iters == 0) return gmm;

  for (int it = 0; it < iters; it++) {
    MatrixXd gamma;
    VectorXd ll = gmm.FrameLogLikes(frames, &gamma);
    PushObjective(trace, ll.sum());

    VectorXd counts = gamma.colwise().sum();  // K
    MatrixXd sum_x = gamma.transpose() * frames;
    MatrixXd sum_xx = gamma.transpose() * frames.cwiseProduct(frames);

    // Reseed starved components from the busiest one.
    for (int j = 0; j < num_components; j++) {
      if (counts[j] < 1e-8 * n) {
        int best;
        counts.maxCoeff(&best);
        CounterRng rng(MixKey(0x6d6d672d72657364ULL, static_cast<uint64_t>(j)));
        for (int f = 0; f < d; f++) {
          gmm.means(j, f) =
              gmm.means(best, f) + 0.1 * std::sqrt(gmm.variances(best, f)) * rng.Gaussian();
        }
        gmm.variances.row(j) = gmm.variances.row(best);
        gmm.weights[j] = 1e-4;
        gmm.weights /= gmm.weights.sum();
        LogEvent(trace, "component " + std::to_string(j) + " reseeded at iteration " +
                            std::to_string(it));
        counts[j] = -1.0;  // skip the M-step update below
      }
    }
    for (int j = 0; j < num_components; j++) {
      if (counts[j] < 0.0) continue;
      gmm.means.row(j) = sum_x.row(j) / counts[j];
      Eigen::RowVectorXd var = sum_xx.row(j) / counts[j] -
                               gmm.means.row(j).cwiseProduct(gmm.means.row(j));
      gmm.variances.row(j) = var.cwiseMax(floor);
      gmm.weights[j] = counts[j] / n;
    }
    gmm.weights /= gmm.weights.sum();
  }
  PushObjective(trace, gmm.TotalLogLike(frames));
  return gmm;
}

// ---------------------------------------------------------------------------
// STC
// ---------------------------------------------------------------------------

void STCTransform::Validate() const {
  Require(transform.rows() == transform.cols(), kStage, "S must be square");
  Require(std::abs(transform.determinant()) > kMinDet, kStage, "singular STC transform");
}

namespace {

/// Model log-likelihood of the data under the S-space diagonal model,
/// including the change-of-variables term N*log|det S|.
double StcObjective(const DiagonalGMM& gmm, const STCTransform& stc, const MatrixXd& frames) {
  DiagonalGMM moved;
  moved.weights = gmm.weights;
  moved.means = gmm.means * stc.transform.transpose();
  moved.variances = stc.component_variances;
  double log_det = std::log(std::abs(stc.transform.determinant()));
  return moved.FrameLogLikes(frames * stc.transform.transpose()).sum() +
         frames.rows() * log_det;
}

}  // namespace

STCTransform EstimateStc(const DiagonalGMM& gmm, const MatrixXd& frames, int outer_iters,
                         int row_sweeps, EstimationTrace* trace) {
  gmm.Validate();
  const int d = gmm.Dim();
  const int k = gmm.NumComponents();
  const int n = static_cast<int>(frames.rows());
  Require(frames.cols() == d, kStage, "frame dimension does not match GMM");
  Require(outer_iters >= 0 && row_sweeps >= 1, kStage, "bad STC iteration counts");

  STCTransform stc;
  stc.transform = MatrixXd::Identity(d, d);
  stc.component_variances = gmm.variances;
  stc.model_tag = gmm.ContentHash();
  if (outer_iters == 0) return stc;

  PushObjective(trace, StcObjective(gmm, stc, frames));
  for (int outer = 0; outer < outer_iters; outer++) {
    // E-step under the current transformed model.
    DiagonalGMM moved;
    moved.weights = gmm.weights;
    moved.means = gmm.means * stc.transform.transpose();
    moved.variances = stc.component_variances;
    MatrixXd gamma;
    moved.FrameLogLikes(frames * stc.transform.transpose(), &gamma);

    // Per-component scatter about the component mean, in the original space:
    // W_j = sum_t gamma_tj (x_t - mu_j)(x_t - mu_j)^T.
    VectorXd counts = gamma.colwise().sum();
    std::vector<MatrixXd> scatter(k);
    for (int j = 0; j < k; j++) {
      MatrixXd centered = frames.rowwise() - gmm.means.row(j);
      scatter[j] = centered.transpose() * gamma.col(j).asDiagonal() * centered;
    }

    // Variances given S.
    for (int j = 0; j < k; j++) {
      if (counts[j] < 1e-8) {
        LogEvent(trace, "component " + std::to_string(j) + " empty in STC update");
        continue;
      }
      for (int r = 0; r < d; r++) {
        double v = stc.transform.row(r) * scatter[j] * stc.transform.row(r).transpose();
        stc.component_variances(j, r) = std::max(v / counts[j], 1e-10);
      }
    }

    // Row statistics G_r = sum_j W_j / sigma^2_{j,r}, then cofactor updates.
    std::vector<MatrixXd> g(d, MatrixXd::Zero(d, d));
    for (int r = 0; r < d; r++) {
      for (int j = 0; j < k; j++) {
        if (counts[j] < 1e-8) continue;
        g[r] += scatter[j] / stc.component_variances(j, r);
      }
    }
    for (int sweep = 0; sweep < row_sweeps; sweep++) {
      for (int r = 0; r < d; r++) {
        Eigen::FullPivLU<MatrixXd> lu(stc.transform);
        if (!lu.isInvertible()) {
          LogEvent(trace, "singular transform at row " + std::to_string(r) + ", row skipped");
          continue;
        }
        VectorXd cof = lu.inverse().transpose().row(r);  // cofactor row up to scale
        Eigen::LDLT<MatrixXd> ldlt(g[r]);
        if (ldlt.info() != Eigen::Success) {
          LogEvent(trace, "ill-conditioned row statistics at row " + std::to_string(r) +
                              ", row skipped");
          continue;
        }
        VectorXd u = ldlt.solve(cof);
        double cu = cof.dot(u);
        if (!(cu > 0.0) || !u.allFinite()) {
          LogEvent(trace, "cofactor system degenerate at row " + std::to_string(r) +
                              ", row skipped");
          continue;
        }
        stc.transform.row(r) = (std::sqrt(static_cast<double>(n) / cu) * u).transpose();
      }
    }
    PushObjective(trace, StcObjective(gmm, stc, frames));
  }
  stc.Validate();
  return stc;
}

DiagonalGMM StcSpaceGmm(const DiagonalGMM& gmm, const STCTransform& stc) {
  Require(stc.model_tag == gmm.ContentHash(), kStage,
          "STC transform was estimated from a different model");
  DiagonalGMM out;
  out.weights = gmm.weights;
  out.means = gmm.means * stc.transform.transpose();
  out.variances = stc.component_variances;
  return out;
}

// ---------------------------------------------------------------------------
// fMLLR
// ---------------------------------------------------------------------------

bool FMLLRTransform::IsIdentity() const {
  return transform.isIdentity(0.0) && bias.isZero(0.0);
}

void FMLLRTransform::Validate() const {
  Require(transform.rows() == transform.cols() && bias.size() == transform.rows(), kStage,
          "fMLLR shape mismatch");
  Require(std::abs(transform.determinant()) > kMinDet, kStage, "singular fMLLR transform");
}

FMLLRTransform IdentityFmllr(int dim, const std::string& speaker_id) {
  FMLLRTransform t;
  t.speaker_id = speaker_id;
  t.transform = MatrixXd::Identity(dim, dim);
  t.bias = VectorXd::Zero(dim);
  return t;
}

namespace {

double FmllrObjective(const DiagonalGMM& gmm, const FMLLRTransform& t, const MatrixXd& frames) {
  MatrixXd mapped = frames * t.transform.transpose();
  mapped.rowwise() += t.bias.transpose();
  return gmm.FrameLogLikes(mapped).sum() +
         frames.rows() * std::log(std::abs(t.transform.determinant()));
}

}  // namespace

FMLLRTransform EstimateFmllr(const DiagonalGMM& gmm, const MatrixXd& speaker_frames, int iters,
                             const std::string& speaker_id, EstimationTrace* trace) {
  gmm.Validate();
  const int d = gmm.Dim();
  const int n = static_cast<int>(speaker_frames.rows());
  Require(speaker_frames.cols() == d, kStage, "frame dimension does not match GMM");
  Require(iters >= 0, kStage, "negative iteration count");

  FMLLRTransform t = IdentityFmllr(d, speaker_id);
  t.baseline_loglike = n > 0 ? FmllrObjective(gmm, t, speaker_frames) : 0.0;
  t.final_loglike = t.baseline_loglike;
  if (iters == 0) return t;
  if (n < d) {
    LogEvent(trace, "speaker " + speaker_id + " has " + std::to_string(n) + " frames < dim " +
                        std::to_string(d) + ", identity returned");
    return t;
  }

  const double beta = static_cast<double>(n);
  MatrixXd inv_var = gmm.variances.array().inverse().matrix();  // K x D
  MatrixXd mean_inv_var = gmm.means.cwiseProduct(inv_var);      // K x D
  MatrixXd ext(n, d + 1);                                       // [f, 1]
  ext.leftCols(d) = speaker_frames;
  ext.col(d).setOnes();

  PushObjective(trace, t.baseline_loglike);
  for (int it = 0; it < iters; it++) {
    // E-step at the current transform.
    MatrixXd mapped = speaker_frames * t.transform.transpose();
    mapped.rowwise() += t.bias.transpose();
    MatrixXd gamma;
    gmm.FrameLogLikes(mapped, &gamma);

    // Row statistics: G_r = sum_t (sum_j gamma_tj / var_jr) xi_t xi_t^T,
    // k_r = sum_t (sum_j gamma_tj mu_jr / var_jr) xi_t.
    MatrixXd prec = gamma * inv_var;             // N x D
    MatrixXd mean_stats = gamma * mean_inv_var;  // N x D
    std::vector<MatrixXd> g(d);
    MatrixXd k_rows = mean_stats.transpose() * ext;  // D x (D+1)
    for (int r = 0; r < d; r++) {
      g[r] = ext.transpose() * prec.col(r).asDiagonal() * ext;
    }

    // W = [A b] row by row, ascending, two sweeps.
    MatrixXd w(d, d + 1);
    w.leftCols(d) = t.transform;
    w.col(d) = t.bias;
    for (int sweep = 0; sweep < 2; sweep++) {
      for (int r = 0; r < d; r++) {
        Eigen::FullPivLU<MatrixXd> lu(w.leftCols(d));
        if (!lu.isInvertible()) {
          LogEvent(trace, "singular transform at row " + std::to_string(r) + ", row skipped");
          continue;
        }
        VectorXd p = VectorXd::Zero(d + 1);
        p.head(d) = lu.inverse().transpose().row(r);  // extended cofactor, bias part 0
        Eigen::LDLT<MatrixXd> ldlt(g[r]);
        if (ldlt.info() != Eigen::Success) {
          LogEvent(trace, "ill-conditioned row statistics at row " + std::to_string(r) +
                              ", row skipped");
          continue;
        }
        VectorXd u = ldlt.solve(p);
        VectorXd v = ldlt.solve(k_rows.row(r).transpose());
        double pu = p.dot(u);
        double pv = p.dot(v);
        if (!(pu > 0.0) || !u.allFinite() || !v.allFinite()) {
          LogEvent(trace, "cofactor system degenerate at row " + std::to_string(r) +
                              ", row skipped");
          continue;
        }
        double disc = std::sqrt(pv * pv + 4.0 * pu * beta);
        auto objective = [&](const VectorXd& row) {
          double det_part = row.dot(p);
          if (det_part == 0.0) return -std::numeric_limits<double>::infinity();
          return beta * std::log(std::abs(det_part)) - 0.5 * row.dot(g[r] * row) +
                 row.dot(k_rows.row(r).transpose());
        };
        VectorXd cand1 = v + ((-pv + disc) / (2.0 * pu)) * u;
        VectorXd cand2 = v + ((-pv - disc) / (2.0 * pu)) * u;
        w.row(r) = (objective(cand1) >= objective(cand2) ? cand1 : cand2).transpose();
      }
    }
    t.transform = w.leftCols(d);
    t.bias = w.col(d);
    PushObjective(trace, FmllrObjective(gmm, t, speaker_frames));
  }
  t.final_loglike = FmllrObjective(gmm, t, speaker_frames);
  t.Validate();
  return t;
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

MatrixXd AdaptStatics(const MatrixXd& statics, const STCTransform& stc,
                      const FMLLRTransform& fmllr) {
  const int d = stc.Dim();
  Require(fmllr.Dim() == d, kStage, "STC and fMLLR dimensions disagree");
  Require(statics.cols() == d, kStage, "feature dimension does not match transforms");
  stc.Validate();

  Eigen::PartialPivLU<MatrixXd> s_lu(stc.transform);
  MatrixXd composed = s_lu.solve(fmllr.transform * stc.transform);  // S^-1 A S
  VectorXd shift = s_lu.solve(fmllr.bias);                          // S^-1 b
  MatrixXd out = statics * composed.transpose();
  out.rowwise() += shift.transpose();
  return out;
}

feat::UtteranceFeatures AdaptFeatures(const feat::UtteranceFeatures& utt, const STCTransform& stc,
                                      const FMLLRTransform& fmllr, int delta_window) {
  Require(utt.speaker_id == fmllr.speaker_id, kStage,
          "transform for speaker " + fmllr.speaker_id + " applied to utterance of " +
              utt.speaker_id);
  const int local_rows = utt.num_rows - utt.non_local_rows;
  Require(local_rows == stc.Dim(), kStage, "local feature rows do not match transform dimension");

  MatrixXd statics = utt.Channel(0);
  MatrixXd adapted_local = AdaptStatics(statics.leftCols(local_rows), stc, fmllr);

  feat::UtteranceFeatures out = utt;
  MatrixXd new_statics = statics;
  new_statics.leftCols(local_rows) = adapted_local;
  if (utt.num_channels == 1) {
    out.SetChannel(0, new_statics);
    return out;
  }
  Require(utt.num_channels == 3, kStage, "expected 1 or 3 channels");
  out.frames = feat::ComputeDeltas(new_statics, delta_window);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

void WriteMatrix(std::ostream& os, const MatrixXd& m) {
  for (int r = 0; r < m.rows(); r++) {
    for (int c = 0; c < m.cols(); c++) {
      if (c) os << " ";
      os << FormatFull(m(r, c));
    }
    os << "\n";
  }
}

MatrixXd ReadMatrix(std::istream& is, int rows, int cols) {
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; r++)
    for (int c = 0; c < cols; c++) {
      Require(static_cast<bool>(is >> m(r, c)), kStage, "truncated matrix in transform file");
    }
  return m;
}

void ExpectToken(std::istream& is, const std::string& expected) {
  std::string tok;
  is >> tok;
  Require(static_cast<bool>(is) && tok == expected, kStage,
          "expected token '" + expected + "', got '" + tok + "'");
}

template <typename T, void (*WriteFn)(const T&, std::ostream&)>
void SaveText(const T& value, const std::string& path) {
  std::ofstream os(path);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  WriteFn(value, os);
  Require(static_cast<bool>(os), kStage, "write failure on " + path);
}

template <typename T, T (*ReadFn)(std::istream&)>
T LoadText(const std::string& path) {
  std::ifstream is(path);
  Require(static_cast<bool>(is), kStage, "cannot open " + path);
  return ReadFn(is);
}

}  // namespace

void WriteGmm(const DiagonalGMM& gmm, std::ostream& os) {
  os << "DiagonalGMM\n" << gmm.NumComponents() << " " << gmm.Dim() << "\n";
  WriteMatrix(os, gmm.weights.transpose());
  WriteMatrix(os, gmm.means);
  WriteMatrix(os, gmm.variances);
}

DiagonalGMM ReadGmm(std::istream& is) {
  ExpectToken(is, "DiagonalGMM");
  int k, d;
  Require(static_cast<bool>(is >> k >> d), kStage, "bad GMM header");
  DiagonalGMM gmm;
  gmm.weights = ReadMatrix(is, 1, k).transpose();
  gmm.means = ReadMatrix(is, k, d);
  gmm.variances = ReadMatrix(is, k, d);
  gmm.Validate();
  return gmm;
}

void WriteStc(const STCTransform& stc, std::ostream& os) {
  os << "STCTransform\n"
     << stc.Dim() << " " << stc.component_variances.rows() << " " << stc.model_tag << "\n";
  WriteMatrix(os, stc.transform);
  WriteMatrix(os, stc.component_variances);
}

STCTransform ReadStc(std::istream& is) {
  ExpectToken(is, "STCTransform");
  int d, k;
  uint64_t tag;
  Require(static_cast<bool>(is >> d >> k >> tag), kStage, "bad STC header");
  STCTransform stc;
  stc.transform = ReadMatrix(is, d, d);
  stc.component_variances = ReadMatrix(is, k, d);
  stc.model_tag = tag;
  stc.Validate();
  return stc;
}

void WriteFmllr(const FMLLRTransform& fmllr, std::ostream& os) {
  Require(fmllr.speaker_id.find_first_of(" \t\n") == std::string::npos, kStage,
          "speaker id must not contain whitespace");
  os << "FMLLRTransform\n"
     << "speaker " << fmllr.speaker_id << "\n"
     << fmllr.Dim() << "\n";
  WriteMatrix(os, fmllr.transform);
  WriteMatrix(os, fmllr.bias.transpose());
  os << FormatFull(fmllr.baseline_loglike) << " " << FormatFull(fmllr.final_loglike) << "\n";
}

FMLLRTransform ReadFmllr(std::istream& is) {
  ExpectToken(is, "FMLLRTransform");
  ExpectToken(is, "speaker");
  FMLLRTransform t;
  int d;
  Require(static_cast<bool>(is >> t.speaker_id >> d), kStage, "bad fMLLR header");
  t.transform = ReadMatrix(is, d, d);
  t.bias = ReadMatrix(is, 1, d).transpose();
  Require(static_cast<bool>(is >> t.baseline_loglike >> t.final_loglike), kStage,
          "bad fMLLR trailer");
  t.Validate();
  return t;
}

void SaveGmm(const DiagonalGMM& gmm, const std::string& path) {
  SaveText<DiagonalGMM, WriteGmm>(gmm, path);
}
DiagonalGMM LoadGmm(const std::string& path) { return LoadText<DiagonalGMM, ReadGmm>(path); }

void SaveStc(const STCTransform& stc, const std::string& path) {
  SaveText<STCTransform, WriteStc>(stc, path);
}
STCTransform LoadStc(const std::string& path) { return LoadText<STCTransform, ReadStc>(path); }

void SaveFmllr(const FMLLRTransform& fmllr, const std::string& path) {
  SaveText<FMLLRTransform, WriteFmllr>(fmllr, path);
}
FMLLRTransform LoadFmllr(const std::string& path) {
  return LoadText<FMLLRTransform, ReadFmllr>(path);
}

}  // namespace adapt
}  // namespace timbre
