// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Speaker adaptation in a correlated feature space: a diagonal-GMM front
// end, a semi-tied covariance transform S that decorrelates the space, a
// per-speaker affine transform (A, b) estimated in the decorrelated space,
// and the composed application S^-1 (A (S f) + b) back in the original
// space so locality is preserved for convolutional input.

#ifndef TIMBRE_ADAPT_HPP
#define TIMBRE_ADAPT_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "timbre/features.hpp"

namespace timbre {
namespace adapt {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Diagonal-covariance GMM
// ---------------------------------------------------------------------------

struct DiagonalGMM {
  VectorXd weights;    // K
  MatrixXd means;      // K x D
  MatrixXd variances;  // K x D

  int NumComponents() const { return static_cast<int>(weights.size()); }
  int Dim() const { return static_cast<int>(means.cols()); }
  void Validate() const;
  uint64_t ContentHash() const;

  /// Per-frame log-likelihoods (N) and optional responsibilities (N x K).
  VectorXd FrameLogLikes(const MatrixXd& frames, MatrixXd* responsibilities = nullptr) const;
  double TotalLogLike(const MatrixXd& frames) const { return FrameLogLikes(frames).sum(); }
};

/// Per-run record of an iterative estimation: objective values (one entry
/// per iteration boundary, nondecreasing) and noteworthy events.
struct EstimationTrace {
  std::vector<double> objective;
  std::vector<std::string> events;
};

/// EM training. Initialization is deterministic (evenly spaced data points
/// as means, global variance, uniform weights); iters = 0 returns it
/// unchanged. Empty components are reseeded from a perturbation of the
/// highest-count component and the event is logged.
DiagonalGMM TrainDiagGmm(const MatrixXd& frames, int num_components, int iters,
                         EstimationTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Semi-tied covariance transform
// ---------------------------------------------------------------------------

struct STCTransform {
  MatrixXd transform;             // S, D x D
  MatrixXd component_variances;   // K x D, diagonal variances in S-space
  uint64_t model_tag = 0;         // ContentHash of the GMM it belongs to

  int Dim() const { return static_cast<int>(transform.rows()); }
  void Validate() const;
};

/// Alternating optimization: per-component diagonal variances given S, then
/// each row of S via the cofactor closed form. outer_iters = 0 returns the
/// identity transform with the GMM's own variances.
STCTransform EstimateStc(const DiagonalGMM& gmm, const MatrixXd& frames, int outer_iters,
                         int row_sweeps = 2, EstimationTrace* trace = nullptr);

/// The GMM moved into S-space: means S*mu_k, the transform's diagonal
/// variances, unchanged weights. Refuses a transform whose model tag does
/// not match the GMM.
DiagonalGMM StcSpaceGmm(const DiagonalGMM& gmm, const STCTransform& stc);

// ---------------------------------------------------------------------------
// fMLLR
// ---------------------------------------------------------------------------

struct FMLLRTransform {
  std::string speaker_id;
  MatrixXd transform;  // A, D x D
  VectorXd bias;       // b
  double baseline_loglike = 0.0;  // identity-transform likelihood at estimation
  double final_loglike = 0.0;

  int Dim() const { return static_cast<int>(transform.rows()); }
  bool IsIdentity() const;
  void Validate() const;
};

FMLLRTransform IdentityFmllr(int dim, const std::string& speaker_id);

/// Gales-style row updates with cofactors, maximizing the diagonal-GMM
/// likelihood of A*f + b plus the log|det A| term. Frames must already be
/// in STC space and the GMM must be the S-space model. Speakers with fewer
/// frames than dimensions get the identity (logged).
FMLLRTransform EstimateFmllr(const DiagonalGMM& gmm_stc_space, const MatrixXd& speaker_frames,
                             int iters, const std::string& speaker_id,
                             EstimationTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

/// Per-frame composed transform S^-1 (A (S f) + b) on T x D static features.
MatrixXd AdaptStatics(const MatrixXd& statics, const STCTransform& stc,
                      const FMLLRTransform& fmllr);

/// Feature-level application: adapts the static channel's local rows (the
/// trailing non-local energy row passes through) and recomputes deltas when
/// the utterance carries delta channels. The transform must belong to the
/// utterance's speaker.
feat::UtteranceFeatures AdaptFeatures(const feat::UtteranceFeatures& utt, const STCTransform& stc,
                                      const FMLLRTransform& fmllr,
                                      int delta_window = feat::kDefaultDeltaWindow);

// ---------------------------------------------------------------------------
// Serialization (structured text, 17 significant digits, exact round-trip)
// ---------------------------------------------------------------------------

void WriteGmm(const DiagonalGMM& gmm, std::ostream& os);
DiagonalGMM ReadGmm(std::istream& is);
void SaveGmm(const DiagonalGMM& gmm, const std::string& path);
DiagonalGMM LoadGmm(const std::string& path);

void WriteStc(const STCTransform& stc, std::ostream& os);
STCTransform ReadStc(std::istream& is);
void SaveStc(const STCTransform& stc, const std::string& path);
STCTransform LoadStc(const std::string& path);

void WriteFmllr(const FMLLRTransform& fmllr, std::ostream& os);
FMLLRTransform ReadFmllr(std::istream& is);
void SaveFmllr(const FMLLRTransform& fmllr, const std::string& path);
FMLLRTransform LoadFmllr(const std::string& path);

}  // namespace adapt
}  // namespace timbre

#endif  // TIMBRE_ADAPT_HPP
