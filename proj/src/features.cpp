// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace timbre {
namespace feat {

namespace {

constexpr char kStage[] = "features";

double HzToMel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelToHz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

void FilterbankConfig::Validate() const {
  Require(num_filters >= 1, kStage, "num_filters must be >= 1");
  Require(fft_bins >= 2, kStage, "fft_bins must be >= 2");
  Require(sample_rate > 0, kStage, "sample_rate must be positive");
  Require(freq_low >= 0 && freq_low < freq_high, kStage, "freq range must satisfy low < high");
  Require(freq_high <= sample_rate / 2.0 + 1e-9, kStage, "freq_high must be <= Nyquist");
  Require(warp_factor >= 0.8 && warp_factor <= 1.2, kStage,
          "warp_factor must lie in [0.8, 1.2]");
}

double WarpFrequency(double freq, double warp_factor, double nyquist) {
  if (warp_factor == 1.0) return freq;
  const double breakpoint = 0.8 * nyquist;
  if (freq <= breakpoint) return warp_factor * freq;
  // Linear continuation mapping the breakpoint image to Nyquist at Nyquist.
  const double mapped_break = warp_factor * breakpoint;
  return mapped_break + (nyquist - mapped_break) * (freq - breakpoint) / (nyquist - breakpoint);
}

FilterbankDefinition BuildFilterbank(const FilterbankConfig& config) {
  config.Validate();
  const int m = config.num_filters;
  const int bins = config.fft_bins;
  const double nyquist = config.sample_rate / 2.0;

  // M+2 mel points, warped back on the Hz axis.
  std::vector<double> edges(m + 2);
  const double mel_lo = HzToMel(config.freq_low);
  const double mel_hi = HzToMel(config.freq_high);
  for (int i = 0; i < m + 2; i++) {
    double hz = MelToHz(mel_lo + (mel_hi - mel_lo) * i / (m + 1));
    edges[i] = WarpFrequency(hz, config.warp_factor, nyquist);
  }

  FilterbankDefinition def;
  def.num_filters = m;
  def.fft_bins = bins;
  def.weights.assign(static_cast<size_t>(m) * bins, 0.0);
  def.center_freqs.resize(m);
  def.support.assign(m, {bins, -1});

  const double bin_hz = nyquist / (bins - 1);
  for (int f = 0; f < m; f++) {
    const double lo = edges[f], center = edges[f + 1], hi = edges[f + 2];
    def.center_freqs[f] = center;
    double total = 0.0;
    for (int k = 0; k < bins; k++) {
      const double hz = k * bin_hz;
      double w = 0.0;
      if (hz > lo && hz < center) {
        w = (hz - lo) / (center - lo);
      } else if (hz >= center && hz < hi) {
        w = (hi - hz) / (hi - center);
      }
      if (w > 0.0) {
        def.weights[static_cast<size_t>(f) * bins + k] = w;
        total += w;
        def.support[f].first = std::min(def.support[f].first, k);
        def.support[f].second = std::max(def.support[f].second, k);
      }
    }
    Require(total > 0.0, kStage,
            "filter " + std::to_string(f) + " has empty support on the bin grid");
    for (int k = def.support[f].first; k <= def.support[f].second; k++) {
      def.weights[static_cast<size_t>(f) * bins + k] /= total;
    }
  }
  return def;
}

FilterbankConfig ApplyWarp(const FilterbankConfig& config, double warp_factor) {
  Require(warp_factor >= 0.8 && warp_factor <= 1.2, kStage,
          "warp_factor must lie in [0.8, 1.2]");
  FilterbankConfig out = config;
  out.warp_factor = warp_factor;
  return out;
}

MatrixXd MelFilterbank(const MatrixXd& spectra, const FilterbankConfig& config) {
  FilterbankDefinition def = BuildFilterbank(config);
  Require(static_cast<int>(spectra.cols()) == config.fft_bins, kStage,
          "spectrum width does not match fft_bins");
  Require(spectra.allFinite(), kStage, "non-finite value in power spectrum");
  Require((spectra.array() >= 0.0).all(), kStage, "negative value in power spectrum");

  const int t_count = static_cast<int>(spectra.rows());
  MatrixXd out(t_count, config.num_filters);
  for (int t = 0; t < t_count; t++) {
    for (int f = 0; f < config.num_filters; f++) {
      double acc = 0.0;
      for (int k = def.support[f].first; k <= def.support[f].second; k++) {
        acc += def.Weight(f, k) * spectra(t, k);
      }
      out(t, f) = std::log(acc + kLogFloor);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// UtteranceFeatures
// ---------------------------------------------------------------------------

MatrixXd UtteranceFeatures::Channel(int c) const {
  MatrixXd m(num_frames, num_rows);
  for (int t = 0; t < num_frames; t++)
    for (int f = 0; f < num_rows; f++) m(t, f) = At(t, f, c);
  return m;
}

void UtteranceFeatures::SetChannel(int c, const MatrixXd& m) {
  Require(static_cast<int>(m.rows()) == num_frames && static_cast<int>(m.cols()) == num_rows,
          kStage, "channel shape mismatch");
  for (int t = 0; t < num_frames; t++)
    for (int f = 0; f < num_rows; f++) At(t, f, c) = m(t, f);
}

bool UtteranceFeatures::AllFinite() const {
  for (double v : frames)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Deltas and energy
// ---------------------------------------------------------------------------

namespace {

// d_t = sum_n n * (x[t+n] - x[t-n]) / (2 * sum_n n^2), indices edge-replicated.
MatrixXd RegressionDeltas(const MatrixXd& x, int window) {
  const int t_count = static_cast<int>(x.rows());
  double denom = 0.0;
  for (int n = 1; n <= window; n++) denom += 2.0 * n * n;
  MatrixXd d(t_count, x.cols());
  for (int t = 0; t < t_count; t++) {
    for (int f = 0; f < x.cols(); f++) {
      double acc = 0.0;
      for (int n = 1; n <= window; n++) {
        int hi = std::min(t + n, t_count - 1);
        int lo = std::max(t - n, 0);
        acc += n * (x(hi, f) - x(lo, f));
      }
      d(t, f) = acc / denom;
    }
  }
  return d;
}

}  // namespace

std::vector<double> ComputeDeltas(const MatrixXd& frames, int window) {
  Require(window >= 1, kStage, "delta window must be >= 1");
  Require(frames.rows() >= 1, kStage, "need at least one frame");
  const int t_count = static_cast<int>(frames.rows());
  const int f_count = static_cast<int>(frames.cols());
  MatrixXd d = RegressionDeltas(frames, window);
  MatrixXd dd = RegressionDeltas(d, window);

  std::vector<double> out(static_cast<size_t>(t_count) * f_count * 3);
  for (int t = 0; t < t_count; t++) {
    for (int f = 0; f < f_count; f++) {
      size_t base = (static_cast<size_t>(t) * f_count + f) * 3;
      out[base + 0] = frames(t, f);
      out[base + 1] = d(t, f);
      out[base + 2] = dd(t, f);
    }
  }
  return out;
}

MatrixXd AppendEnergy(const MatrixXd& frames, const std::vector<double>& energy) {
  Require(static_cast<size_t>(frames.rows()) == energy.size(), kStage,
          "energy length does not match frame count");
  MatrixXd out(frames.rows(), frames.cols() + 1);
  out.leftCols(frames.cols()) = frames;
  for (int t = 0; t < frames.rows(); t++) out(t, frames.cols()) = energy[t];
  return out;
}

MatrixXd RemoveEnergy(const MatrixXd& frames) {
  Require(frames.cols() >= 1, kStage, "no energy row to remove");
  return frames.leftCols(frames.cols() - 1);
}

std::vector<double> LogFrameEnergy(const MatrixXd& spectra) {
  std::vector<double> e(spectra.rows());
  for (int t = 0; t < spectra.rows(); t++) e[t] = std::log(spectra.row(t).sum() + kLogFloor);
  return e;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

struct MomentAccumulator {
  double count = 0.0;
  std::vector<double> sum;
  std::vector<double> sumsq;

  void Merge(const MomentAccumulator& o) {
    count += o.count;
    for (size_t i = 0; i < sum.size(); i++) {
      sum[i] += o.sum[i];
      sumsq[i] += o.sumsq[i];
    }
  }
};

MomentAccumulator PairwiseMerge(std::vector<MomentAccumulator>& parts, size_t lo, size_t hi) {
  if (hi - lo == 1) return std::move(parts[lo]);
  size_t mid = lo + (hi - lo) / 2;
  MomentAccumulator a = PairwiseMerge(parts, lo, mid);
  MomentAccumulator b = PairwiseMerge(parts, mid, hi);
  a.Merge(b);
  return a;
}

NormStats ComputeStats(const std::vector<UtteranceFeatures>& corpus) {
  Require(!corpus.empty(), kStage, "corpus is empty");
  const int f_count = corpus[0].num_rows;
  const int c_count = corpus[0].num_channels;
  const int dim = f_count * c_count;

  std::vector<MomentAccumulator> parts(corpus.size());
  for (size_t u = 0; u < corpus.size(); u++) {
    const auto& utt = corpus[u];
    Require(utt.num_rows == f_count && utt.num_channels == c_count, kStage,
            "inconsistent feature dimensions across corpus");
    Require(utt.AllFinite(), kStage, "non-finite feature value in " + utt.utterance_id);
    auto& acc = parts[u];
    acc.count = utt.num_frames;
    acc.sum.assign(dim, 0.0);
    acc.sumsq.assign(dim, 0.0);
    for (int t = 0; t < utt.num_frames; t++) {
      for (int f = 0; f < f_count; f++) {
        for (int c = 0; c < c_count; c++) {
          double v = utt.At(t, f, c);
          acc.sum[f * c_count + c] += v;
          acc.sumsq[f * c_count + c] += v * v;
        }
      }
    }
  }
  MomentAccumulator total = PairwiseMerge(parts, 0, parts.size());
  Require(total.count > 0, kStage, "corpus has no frames");

  NormStats stats;
  stats.num_rows = f_count;
  stats.num_channels = c_count;
  stats.mean.resize(dim);
  stats.variance.resize(dim);
  stats.constant.assign(dim, 0);
  for (int i = 0; i < dim; i++) {
    stats.mean[i] = total.sum[i] / total.count;
    double var = total.sumsq[i] / total.count - stats.mean[i] * stats.mean[i];
    stats.variance[i] = std::max(var, 0.0);
    if (stats.variance[i] <= 1e-12 * (1.0 + stats.mean[i] * stats.mean[i])) {
      stats.constant[i] = 1;
    }
  }
  return stats;
}

}  // namespace

void ApplyNormalization(const NormStats& stats, std::vector<UtteranceFeatures>& corpus) {
  const int dim = stats.Dim();
  std::vector<double> scale(dim, 1.0);
  for (int i = 0; i < dim; i++) {
    if (!stats.constant[i]) scale[i] = 1.0 / std::sqrt(stats.variance[i]);
  }
  for (auto& utt : corpus) {
    Require(utt.num_rows == stats.num_rows && utt.num_channels == stats.num_channels, kStage,
            "normalization dimension mismatch");
    for (int t = 0; t < utt.num_frames; t++) {
      for (int f = 0; f < utt.num_rows; f++) {
        for (int c = 0; c < utt.num_channels; c++) {
          int i = f * utt.num_channels + c;
          utt.At(t, f, c) = (utt.At(t, f, c) - stats.mean[i]) * scale[i];
        }
      }
    }
  }
}

NormStats NormalizeCorpus(std::vector<UtteranceFeatures>& corpus) {
  NormStats stats = ComputeStats(corpus);
  ApplyNormalization(stats, corpus);
  return stats;
}

void WriteNormStats(const NormStats& stats, std::ostream& os) {
  os << "# rows " << stats.num_rows << " channels " << stats.num_channels << "\n";
  for (int i = 0; i < stats.Dim(); i++) {
    os << i << " " << FormatFull(stats.mean[i]) << " "
       << FormatFull(stats.constant[i] ? 0.0 : stats.variance[i]) << "\n";
  }
}

NormStats ReadNormStats(std::istream& is) {
  NormStats stats;
  std::string hash, rows_tok, channels_tok;
  is >> hash >> rows_tok >> stats.num_rows >> channels_tok >> stats.num_channels;
  Require(static_cast<bool>(is) && hash == "#" && rows_tok == "rows" && channels_tok == "channels",
          kStage, "bad normalization statistics header");
  const int dim = stats.Dim();
  stats.mean.resize(dim);
  stats.variance.resize(dim);
  stats.constant.assign(dim, 0);
  for (int i = 0; i < dim; i++) {
    int idx;
    double mean, var;
    is >> idx >> mean >> var;
    Require(static_cast<bool>(is) && idx == i, kStage, "bad normalization statistics line");
    stats.mean[i] = mean;
    stats.variance[i] = var;
    if (var <= 0.0) {
      stats.constant[i] = 1;
      stats.variance[i] = 0.0;
    }
  }
  return stats;
}

void SaveNormStats(const NormStats& stats, const std::string& path) {
  std::ofstream os(path);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  WriteNormStats(stats, os);
}

NormStats LoadNormStats(const std::string& path) {
  std::ifstream is(path);
  Require(static_cast<bool>(is), kStage, "cannot open " + path);
  return ReadNormStats(is);
}

// ---------------------------------------------------------------------------
// Splicing
// ---------------------------------------------------------------------------

std::vector<SplicedExample> SpliceContext(const UtteranceFeatures& utt, int context) {
  Require(context >= 0, kStage, "context must be >= 0");
  Require(utt.num_frames >= 1, kStage, "empty utterance");
  const int window = 2 * context + 1;
  std::vector<SplicedExample> out(utt.num_frames);
  for (int t = 0; t < utt.num_frames; t++) {
    auto& ex = out[t];
    ex.window = window;
    ex.num_rows = utt.num_rows;
    ex.num_channels = utt.num_channels;
    ex.values.resize(static_cast<size_t>(window) * utt.num_rows * utt.num_channels);
    for (int w = 0; w < window; w++) {
      int src = std::clamp(t + w - context, 0, utt.num_frames - 1);
      for (int f = 0; f < utt.num_rows; f++) {
        for (int c = 0; c < utt.num_channels; c++) {
          ex.values[(static_cast<size_t>(w) * utt.num_rows + f) * utt.num_channels + c] =
              utt.At(src, f, c);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'M', 'B', 'F'};
constexpr uint32_t kVersion = 1;

void WriteU32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t ReadU32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void WriteF32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  WriteU32(os, bits);
}

float ReadF32(std::istream& is) {
  uint32_t bits = ReadU32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void WriteFeatureFile(const UtteranceFeatures& utt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  os.write(kMagic, 4);
  WriteU32(os, kVersion);
  WriteU32(os, static_cast<uint32_t>(utt.num_frames));
  WriteU32(os, static_cast<uint32_t>(utt.num_rows));
  WriteU32(os, static_cast<uint32_t>(utt.num_channels));
  WriteU32(os, static_cast<uint32_t>(utt.utterance_id.size()));
  WriteU32(os, static_cast<uint32_t>(utt.speaker_id.size()));
  os.write(utt.utterance_id.data(), static_cast<std::streamsize>(utt.utterance_id.size()));
  os.write(utt.speaker_id.data(), static_cast<std::streamsize>(utt.speaker_id.size()));
  for (double v : utt.frames) WriteF32(os, static_cast<float>(v));
  Require(static_cast<bool>(os), kStage, "write failure on " + path);
}

UtteranceFeatures ReadFeatureFile(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(static_cast<bool>(is), kStage, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  Require(static_cast<bool>(is) && std::memcmp(magic, kMagic, 4) == 0, kStage,
          path + ": bad magic");
  Require(ReadU32(is) == kVersion, kStage, path + ": unsupported version");
  UtteranceFeatures utt;
  uint32_t t = ReadU32(is), f = ReadU32(is), c = ReadU32(is);
  uint32_t utt_len = ReadU32(is), spk_len = ReadU32(is);
  Require(static_cast<bool>(is), kStage, path + ": truncated header");
  utt.utterance_id.resize(utt_len);
  utt.speaker_id.resize(spk_len);
  is.read(utt.utterance_id.data(), utt_len);
  is.read(utt.speaker_id.data(), spk_len);
  utt.Resize(static_cast<int>(t), static_cast<int>(f), static_cast<int>(c));
  for (auto& v : utt.frames) v = static_cast<double>(ReadF32(is));
  Require(static_cast<bool>(is), kStage, path + ": truncated payload");
  Require(utt.AllFinite(), kStage, path + ": non-finite feature value");
  return utt;
}

}  // namespace feat
}  // namespace timbre
