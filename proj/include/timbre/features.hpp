// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Feature pipeline: warped log-mel filterbank energies, regression deltas,
// optional energy row, corpus normalization and temporal context splicing.

#ifndef TIMBRE_FEATURES_HPP
#define TIMBRE_FEATURES_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "timbre/common.hpp"

namespace timbre {
namespace feat {

using Eigen::MatrixXd;

// Log floor on filterbank energies.
constexpr double kLogFloor = 1e-10;

// ---------------------------------------------------------------------------
// Filterbank
// ---------------------------------------------------------------------------

struct FilterbankConfig {
  int num_filters = 24;
  double sample_rate = 16000.0;
  int fft_bins = 40;              // power-spectrum bins spanning [0, Nyquist]
  double freq_low = 20.0;         // Hz
  double freq_high = 8000.0;      // Hz, <= Nyquist
  double warp_factor = 1.0;       // 1.0 = no warp
  bool include_energy = false;

  void Validate() const;
};

/// Triangular filter weights on the fft-bin grid. Row m holds filter m;
/// each filter is normalized to unit weight sum so a flat spectrum excites
/// all bins equally.
struct FilterbankDefinition {
  int num_filters = 0;
  int fft_bins = 0;
  std::vector<double> weights;             // num_filters x fft_bins, row-major
  std::vector<double> center_freqs;        // warped center (Hz) per filter
  std::vector<std::pair<int, int>> support;  // [first, last] nonzero bin per filter

  double Weight(int m, int k) const { return weights[static_cast<size_t>(m) * fft_bins + k]; }
};

/// Piecewise-linear frequency warp with breakpoint at 80% of Nyquist.
/// Identity for warp_factor == 1. Maps [0, nyquist] onto [0, nyquist].
double WarpFrequency(double freq, double warp_factor, double nyquist);

/// Builds the triangular filter table on the warp-adjusted mel axis.
FilterbankDefinition BuildFilterbank(const FilterbankConfig& config);

/// Returns a config whose filters are rescaled by the piecewise-linear warp.
/// warp 1.0 is the identity.
FilterbankConfig ApplyWarp(const FilterbankConfig& config, double warp_factor);

/// Log filterbank energies: out[t][m] = log(sum_k tri_m(k) * spec[t][k] + eps).
/// Spectra must be nonnegative and finite.
MatrixXd MelFilterbank(const MatrixXd& power_spectrum_frames, const FilterbankConfig& config);

// ---------------------------------------------------------------------------
// Utterance container
// ---------------------------------------------------------------------------

/// Per-utterance features: T frames x F rows x C channels, (t, f, c) order.
/// Channel order is fixed as [static, delta, double-delta]. Trailing
/// `non_local_rows` frequency rows (the energy row) carry no locality and
/// are dropped from convolutional input unless explicitly included.
struct UtteranceFeatures {
  std::string utterance_id;
  std::string speaker_id;
  int num_frames = 0;    // T
  int num_rows = 0;      // F
  int num_channels = 1;  // C
  std::vector<double> frames;  // T*F*C, (t, f, c) row-major
  std::vector<int> labels;     // optional, per frame (empty when absent)
  int non_local_rows = 0;

  double& At(int t, int f, int c) {
    return frames[(static_cast<size_t>(t) * num_rows + f) * num_channels + c];
  }
  double At(int t, int f, int c) const {
    return frames[(static_cast<size_t>(t) * num_rows + f) * num_channels + c];
  }
  void Resize(int t, int f, int c) {
    num_frames = t;
    num_rows = f;
    num_channels = c;
    frames.assign(static_cast<size_t>(t) * f * c, 0.0);
  }
  /// Copy of one channel as a T x F matrix.
  MatrixXd Channel(int c) const;
  void SetChannel(int c, const MatrixXd& m);
  bool AllFinite() const;
};

// ---------------------------------------------------------------------------
// Deltas and energy
// ---------------------------------------------------------------------------

/// Regression deltas over +-window frames with edge replication.
/// Channel 0 = input, channel 1 = deltas, channel 2 = deltas of deltas.
/// Output is T x F x 3 in an UtteranceFeatures-shaped buffer.
std::vector<double> ComputeDeltas(const MatrixXd& frames, int window);

constexpr int kDefaultDeltaWindow = 2;

/// Appends per-frame energy as one extra frequency row (returns T x (F+1)).
MatrixXd AppendEnergy(const MatrixXd& frames, const std::vector<double>& per_frame_energy);

/// Removes the trailing energy row; inverse of AppendEnergy.
MatrixXd RemoveEnergy(const MatrixXd& frames);

/// log(sum_k spec[t][k] + eps) per frame.
std::vector<double> LogFrameEnergy(const MatrixXd& power_spectrum_frames);

// ---------------------------------------------------------------------------
// Corpus normalization
// ---------------------------------------------------------------------------

struct NormStats {
  int num_rows = 0;
  int num_channels = 0;
  std::vector<double> mean;      // F*C, (f, c) order
  std::vector<double> variance;  // raw variance; constant dims keep theirs
  std::vector<uint8_t> constant;  // flagged zero-variance dims (left unscaled)

  int Dim() const { return num_rows * num_channels; }
};

/// Accumulates global mean/variance over every frame of the corpus
/// (pairwise-merged per-utterance partials) and normalizes in place.
/// Zero-variance dimensions are mean-shifted but left unscaled and flagged.
NormStats NormalizeCorpus(std::vector<UtteranceFeatures>& corpus);

/// Applies previously estimated statistics (test-time path).
void ApplyNormalization(const NormStats& stats, std::vector<UtteranceFeatures>& corpus);

void WriteNormStats(const NormStats& stats, std::ostream& os);
NormStats ReadNormStats(std::istream& is);
void SaveNormStats(const NormStats& stats, const std::string& path);
NormStats LoadNormStats(const std::string& path);

// ---------------------------------------------------------------------------
// Context splicing
// ---------------------------------------------------------------------------

/// One spliced example: a (2*context+1) x F x C window, (w, f, c) order.
struct SplicedExample {
  int window = 0;  // 2*context+1
  int num_rows = 0;
  int num_channels = 0;
  std::vector<double> values;
};

/// Splices +-context frames around every frame with edge replication.
/// Output count equals the frame count.
std::vector<SplicedExample> SpliceContext(const UtteranceFeatures& utt, int context);

// ---------------------------------------------------------------------------
// Feature files
//
// Binary container, little-endian: magic "TMBF", u32 version, u32 T, u32 F,
// u32 C, u32 utterance-id length, u32 speaker-id length, the two id byte
// strings, then T*F*C float32 values in (t, f, c) row-major order.
// ---------------------------------------------------------------------------

void WriteFeatureFile(const UtteranceFeatures& utt, const std::string& path);
UtteranceFeatures ReadFeatureFile(const std::string& path);

}  // namespace feat
}  // namespace timbre

#endif  // TIMBRE_FEATURES_HPP
