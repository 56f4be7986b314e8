// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace timbre {
namespace harness {

namespace {

constexpr char kStage[] = "harness";
namespace fs = std::filesystem;
using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string Hash16(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

void CorpusSpec::Validate() const {
  Require(num_speakers >= 1, kStage, "corpus.num_speakers must be >= 1");
  Require(utterances_per_speaker >= 1, kStage, "corpus.utterances_per_speaker must be >= 1");
  Require(frames_per_utterance >= 1, kStage, "corpus.frames_per_utterance must be >= 1");
  Require(num_classes >= 1, kStage, "corpus.num_classes must be >= 1");
  Require(spectral_dim >= 8, kStage, "corpus.spectral_dim must be >= 8");
  Require(noise_level >= 0.0 && separation >= 0.0, kStage,
          "corpus.noise_level and corpus.separation must be nonnegative");
  Require(heldout_fraction >= 0.0 && heldout_fraction < 1.0, kStage,
          "corpus.heldout_fraction must lie in [0, 1)");
  Require(test_fraction >= 0.0 && test_fraction < 1.0, kStage,
          "corpus.test_fraction must lie in [0, 1)");
  if (distortion.enabled) {
    // exp(2r) bounds the gain ratio; keeps the affine map's condition
    // number at or below 10.
    Require(distortion.gain_log_range >= 0.0 && distortion.gain_log_range <= 1.15, kStage,
            "corpus.distortion.gain_log_range must lie in [0, 1.15]");
    Require(distortion.mix >= 0.0 && distortion.mix < 0.5, kStage,
            "corpus.distortion.mix must lie in [0, 0.5)");
    Require(distortion.bias_scale >= 0.0, kStage,
            "corpus.distortion.bias_scale must be nonnegative");
    Require(distortion.warp_low >= 0.8 && distortion.warp_high <= 1.2 &&
                distortion.warp_low <= distortion.warp_high,
            kStage, "corpus.distortion warp range must lie inside [0.8, 1.2]");
  }
}

uint64_t CorpusSpec::Hash() const {
  std::ostringstream os;
  os << num_speakers << "|" << utterances_per_speaker << "|" << frames_per_utterance << "|"
     << num_classes << "|" << spectral_dim << "|" << FormatFull(separation) << "|"
     << FormatFull(noise_level) << "|" << distortion.enabled << "|"
     << FormatFull(distortion.gain_log_range) << "|" << FormatFull(distortion.bias_scale) << "|"
     << FormatFull(distortion.mix) << "|" << FormatFull(distortion.warp_low) << "|"
     << FormatFull(distortion.warp_high) << "|" << FormatFull(heldout_fraction) << "|"
     << FormatFull(test_fraction) << "|" << master_seed;
  return Fnv1a64(os.str());
}

namespace {

// Smooth log-domain class template over the spectral bins.
VectorXd ClassTemplate(const CorpusSpec& spec, int cls) {
  CounterRng rng(MixKey(spec.master_seed, 0x746d706cULL, static_cast<uint64_t>(cls)));
  double a1 = 0.5 + 0.5 * rng.Uniform(), f1 = 1.0 + 3.0 * rng.Uniform(), p1 = rng.Uniform();
  double a2 = 0.25 + 0.25 * rng.Uniform(), f2 = 3.0 + 4.0 * rng.Uniform(), p2 = rng.Uniform();
  double a3 = 0.1 + 0.2 * rng.Uniform(), f3 = 6.0 + 6.0 * rng.Uniform(), p3 = rng.Uniform();
  VectorXd t(spec.spectral_dim);
  const double two_pi = 6.283185307179586;
  for (int k = 0; k < spec.spectral_dim; k++) {
    double x = static_cast<double>(k) / spec.spectral_dim;
    double envelope = 1.0 - 0.5 * x;
    double pattern = a1 * std::cos(two_pi * (f1 * x + p1)) +
                     a2 * std::cos(two_pi * (f2 * x + p2)) +
                     a3 * std::cos(two_pi * (f3 * x + p3));
    t[k] = envelope + spec.separation * pattern;
  }
  return t;
}

struct SpeakerDistortion {
  double warp = 1.0;
  VectorXd gains;
  VectorXd bias;
};

SpeakerDistortion MakeDistortion(const CorpusSpec& spec, int speaker) {
  SpeakerDistortion d;
  d.gains = VectorXd::Ones(spec.spectral_dim);
  d.bias = VectorXd::Zero(spec.spectral_dim);
  if (!spec.distortion.enabled) return d;
  CounterRng rng(MixKey(spec.master_seed, 0x73706b72ULL, static_cast<uint64_t>(speaker)));
  d.warp = rng.Uniform(spec.distortion.warp_low, spec.distortion.warp_high);
  for (int k = 0; k < spec.spectral_dim; k++) {
    d.gains[k] = std::exp(
        rng.Uniform(-spec.distortion.gain_log_range, spec.distortion.gain_log_range));
    d.bias[k] = spec.distortion.bias_scale * rng.Uniform();
  }
  return d;
}

VectorXd ApplySpeakerDistortion(const CorpusSpec& spec, const SpeakerDistortion& d,
                                const VectorXd& power) {
  if (!spec.distortion.enabled) return power;
  const int dim = spec.spectral_dim;
  VectorXd warped(dim);
  double top = static_cast<double>(dim - 1);
  for (int k = 0; k < dim; k++) {
    double src = feat::WarpFrequency(static_cast<double>(k), d.warp, top);
    int lo = std::clamp(static_cast<int>(std::floor(src)), 0, dim - 1);
    int hi = std::min(lo + 1, dim - 1);
    double frac = src - lo;
    warped[k] = (1.0 - frac) * power[lo] + frac * power[hi];
  }
  VectorXd mixed(dim);
  for (int k = 0; k < dim; k++) {
    double left = warped[std::max(k - 1, 0)];
    double right = warped[std::min(k + 1, dim - 1)];
    mixed[k] =
        (1.0 - spec.distortion.mix) * warped[k] + spec.distortion.mix * 0.5 * (left + right);
  }
  return d.gains.cwiseProduct(mixed) + d.bias;
}

std::string SpeakerId(int s) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "spk%03d", s);
  return buf;
}

}  // namespace

Corpus GenerateCorpus(const CorpusSpec& spec) {
  spec.Validate();
  Corpus corpus;
  corpus.hash = spec.Hash();
  corpus.num_classes = spec.num_classes;
  corpus.spectral_dim = spec.spectral_dim;

  std::vector<VectorXd> templates(spec.num_classes);
  for (int c = 0; c < spec.num_classes; c++) templates[c] = ClassTemplate(spec, c);

  const int ups = spec.utterances_per_speaker;
  const int test_count = static_cast<int>(std::lround(spec.test_fraction * ups));
  const int held_count =
      static_cast<int>(std::lround(spec.heldout_fraction * (ups - test_count)));
  Require(ups - test_count - held_count >= 1, kStage,
          "corpus split leaves no training utterances per speaker");

  for (int s = 0; s < spec.num_speakers; s++) {
    SpeakerDistortion dist = MakeDistortion(spec, s);
    corpus.speaker_warp[SpeakerId(s)] = dist.warp;
    for (int u = 0; u < ups; u++) {
      feat::UtteranceFeatures utt;
      utt.speaker_id = SpeakerId(s);
      {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_utt%03d", utt.speaker_id.c_str(), u);
        utt.utterance_id = buf;
      }
      utt.Resize(spec.frames_per_utterance, spec.spectral_dim, 1);
      utt.labels.resize(spec.frames_per_utterance);

      // Piecewise-constant class segments.
      CounterRng seg_rng(MixKey(spec.master_seed, 0x7365676dULL, static_cast<uint64_t>(s),
                                static_cast<uint64_t>(u)));
      CounterRng noise_rng(MixKey(spec.master_seed, 0x6e6f6973ULL, static_cast<uint64_t>(s),
                                  static_cast<uint64_t>(u)));
      int t = 0;
      while (t < spec.frames_per_utterance) {
        int len = 5 + static_cast<int>(seg_rng.Below(11));
        int cls = static_cast<int>(seg_rng.Below(static_cast<uint64_t>(spec.num_classes)));
        for (int i = 0; i < len && t < spec.frames_per_utterance; i++, t++) {
          utt.labels[t] = cls;
          VectorXd logp = templates[cls];
          for (int k = 0; k < spec.spectral_dim; k++) {
            logp[k] += spec.noise_level * noise_rng.Gaussian();
          }
          VectorXd power = logp.array().exp();
          power = ApplySpeakerDistortion(spec, dist, power);
          for (int k = 0; k < spec.spectral_dim; k++) utt.At(t, k, 0) = power[k];
        }
      }

      if (u < test_count) {
        corpus.test.push_back(std::move(utt));
      } else if (u < test_count + held_count) {
        corpus.heldout.push_back(std::move(utt));
      } else {
        corpus.train.push_back(std::move(utt));
      }
    }
  }
  return corpus;
}

double NearestTemplateError(const CorpusSpec& spec,
                            const std::vector<feat::UtteranceFeatures>& utts) {
  std::vector<VectorXd> templates(spec.num_classes);
  for (int c = 0; c < spec.num_classes; c++) templates[c] = ClassTemplate(spec, c);
  size_t wrong = 0, total = 0;
  for (const auto& utt : utts) {
    for (int t = 0; t < utt.num_frames; t++) {
      VectorXd logp(spec.spectral_dim);
      for (int k = 0; k < spec.spectral_dim; k++) {
        logp[k] = std::log(std::max(utt.At(t, k, 0), 1e-30));
      }
      int best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (int c = 0; c < spec.num_classes; c++) {
        double dist = (logp - templates[c]).squaredNorm();
        if (dist < best_dist) {
          best_dist = dist;
          best = c;
        }
      }
      if (best != utt.labels[t]) wrong++;
      total++;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Feature pipeline
// ---------------------------------------------------------------------------

namespace {

struct StagedUtterance {
  std::string utterance_id, speaker_id;
  MatrixXd statics;  // T x rows, energy row last when present
  std::vector<int> labels;
  int non_local_rows = 0;
};

feat::UtteranceFeatures FinishUtterance(const StagedUtterance& staged, bool use_deltas,
                                        int delta_window) {
  feat::UtteranceFeatures utt;
  utt.utterance_id = staged.utterance_id;
  utt.speaker_id = staged.speaker_id;
  utt.labels = staged.labels;
  utt.non_local_rows = staged.non_local_rows;
  const int t_count = static_cast<int>(staged.statics.rows());
  const int rows = static_cast<int>(staged.statics.cols());
  if (use_deltas) {
    utt.num_frames = t_count;
    utt.num_rows = rows;
    utt.num_channels = 3;
    utt.frames = feat::ComputeDeltas(staged.statics, delta_window);
  } else {
    utt.Resize(t_count, rows, 1);
    utt.SetChannel(0, staged.statics);
  }
  return utt;
}

}  // namespace

PreparedData PrepareFeatures(const Corpus& corpus, const FeatureOptions& opts) {
  Require(opts.num_filters >= 1 && opts.context >= 0, kStage, "bad feature options");
  feat::FilterbankConfig fb;
  fb.num_filters = opts.num_filters;
  fb.fft_bins = corpus.spectral_dim;
  fb.sample_rate = 16000.0;
  fb.freq_low = 20.0;
  fb.freq_high = 8000.0;

  auto stage_split = [&](const std::vector<feat::UtteranceFeatures>& raw) {
    std::vector<StagedUtterance> staged;
    staged.reserve(raw.size());
    for (const auto& utt : raw) {
      StagedUtterance s;
      s.utterance_id = utt.utterance_id;
      s.speaker_id = utt.speaker_id;
      s.labels = utt.labels;
      MatrixXd spectra = utt.Channel(0);
      double warp = 1.0;
      if (opts.use_warp) {
        auto it = corpus.speaker_warp.find(utt.speaker_id);
        Require(it != corpus.speaker_warp.end(), kStage,
                "no supplied warp factor for speaker " + utt.speaker_id);
        // The supplied factor normalizes the speaker's warp away.
        warp = std::clamp(1.0 / it->second, 0.8, 1.2);
      }
      s.statics = feat::MelFilterbank(spectra, feat::ApplyWarp(fb, warp));
      if (opts.use_energy) {
        s.statics = feat::AppendEnergy(s.statics, feat::LogFrameEnergy(spectra));
        s.non_local_rows = 1;
      }
      staged.push_back(std::move(s));
    }
    return staged;
  };

  std::vector<StagedUtterance> train = stage_split(corpus.train);
  std::vector<StagedUtterance> heldout = stage_split(corpus.heldout);
  std::vector<StagedUtterance> test = stage_split(corpus.test);

  PreparedData out;
  if (opts.use_fmllr) {
    const int local = opts.num_filters;  // the energy row stays outside the chain
    size_t total_frames = 0;
    for (const auto& s : train) total_frames += s.statics.rows();
    MatrixXd pooled(total_frames, local);
    size_t row = 0;
    for (const auto& s : train) {
      pooled.middleRows(row, s.statics.rows()) = s.statics.leftCols(local);
      row += s.statics.rows();
    }
    adapt::DiagonalGMM gmm =
        adapt::TrainDiagGmm(pooled, opts.gmm_components, opts.gmm_iters, &out.gmm_trace);
    adapt::STCTransform stc = adapt::EstimateStc(gmm, pooled, opts.stc_iters, 2, &out.stc_trace);
    adapt::DiagonalGMM stc_gmm = adapt::StcSpaceGmm(gmm, stc);

    // Per-speaker transforms, estimated on the speaker's training frames.
    std::map<std::string, adapt::FMLLRTransform> transforms;
    std::map<std::string, std::vector<const StagedUtterance*>> by_speaker;
    for (const auto& s : train) by_speaker[s.speaker_id].push_back(&s);
    for (const auto& [speaker, utts] : by_speaker) {
      size_t frames = 0;
      for (const auto* s : utts) frames += s->statics.rows();
      MatrixXd speaker_frames(frames, local);
      size_t r = 0;
      for (const auto* s : utts) {
        speaker_frames.middleRows(r, s->statics.rows()) = s->statics.leftCols(local);
        r += s->statics.rows();
      }
      MatrixXd in_stc = speaker_frames * stc.transform.transpose();
      adapt::EstimationTrace trace;
      transforms[speaker] =
          adapt::EstimateFmllr(stc_gmm, in_stc, opts.fmllr_iters, speaker, &trace);
      out.fmllr_traces[speaker] = std::move(trace);
    }

    auto adapt_split = [&](std::vector<StagedUtterance>& split) {
      for (auto& s : split) {
        auto it = transforms.find(s.speaker_id);
        Require(it != transforms.end(), kStage,
                "no fMLLR transform for speaker " + s.speaker_id);
        s.statics.leftCols(local) =
            adapt::AdaptStatics(s.statics.leftCols(local), stc, it->second);
      }
    };
    adapt_split(train);
    adapt_split(heldout);
    adapt_split(test);
  }

  auto finish_split = [&](const std::vector<StagedUtterance>& staged) {
    std::vector<feat::UtteranceFeatures> utts;
    utts.reserve(staged.size());
    for (const auto& s : staged) {
      utts.push_back(FinishUtterance(s, opts.use_deltas, opts.delta_window));
    }
    return utts;
  };
  out.train = finish_split(train);
  out.heldout = finish_split(heldout);
  out.test = finish_split(test);

  out.stats = feat::NormalizeCorpus(out.train);
  feat::ApplyNormalization(out.stats, out.heldout);
  feat::ApplyNormalization(out.stats, out.test);

  out.model_channels = opts.use_deltas ? 3 : 1;
  out.model_rows =
      opts.num_filters + ((opts.use_energy && opts.include_energy_in_input) ? 1 : 0);
  return out;
}

// ---------------------------------------------------------------------------
// Topology builder
// ---------------------------------------------------------------------------

net::NetworkSpec BuildTopology(const TopologyOptions& opts, net::Shape input, int num_classes) {
  Require(opts.conv_layers >= 0 && opts.conv_layers <= 3, kStage,
          "topology.conv_layers must lie in [0, 3]");
  Require(opts.full_layers >= 0 && opts.hidden >= 1 && num_classes >= 1, kStage,
          "bad topology sizes");

  auto conv_chain = [&](net::Shape cur) {
    std::vector<net::LayerSpec> chain;
    const int maps[3] = {opts.maps1, opts.maps2, opts.maps3};
    for (int i = 0; i < opts.conv_layers; i++) {
      int ff = std::min(i == 0 ? 5 : 3, cur.f);
      int ft = std::min(3, cur.t);
      std::vector<net::BandSpec> bands;
      if (opts.sharing == net::Sharing::kLimited) {
        bands = net::EqualBands(cur.f, opts.lws_bands);
      }
      chain.push_back(net::ConvLayer(opts.sharing, maps[i], ff, ft, 1, 1, bands));
      {
        net::NetworkSpec probe;
        probe.streams.push_back(chain);
        cur = net::CompiledNet::Compile(probe, input)
                  .Layer(static_cast<int>(chain.size()) - 1)
                  .out;
      }
      chain.push_back(net::ReluLayer());
      if (i == 0) {
        Require(cur.f >= opts.pool_size, kStage,
                "topology: pooling size exceeds the frequency extent");
        chain.push_back(net::PoolLayer(opts.pool_kind, net::Axis::kFrequency, opts.pool_size,
                                       opts.pool_stride, opts.lp_exponent));
        cur.f = (cur.f - opts.pool_size) / opts.pool_stride + 1;
        if (opts.pool_time) {
          Require(cur.t >= opts.time_pool_size, kStage,
                  "topology: time pooling size exceeds the time extent");
          chain.push_back(net::PoolLayer(opts.pool_kind, net::Axis::kTime, opts.time_pool_size,
                                         opts.time_pool_stride, opts.lp_exponent));
          cur.t = (cur.t - opts.time_pool_size) / opts.time_pool_stride + 1;
        }
      }
    }
    return chain;
  };

  auto full_stack = [&](std::vector<net::LayerSpec>& chain) {
    for (int i = 0; i < opts.full_layers; i++) {
      chain.push_back(net::FullLayer(opts.hidden));
      chain.push_back(net::ReluLayer());
      // Dropout goes on the 3rd and 4th fully connected layers; shallower
      // stacks put it on the last two.
      bool dropout_here;
      if (opts.full_layers >= 4) {
        dropout_here = i == 2 || i == 3;
      } else {
        dropout_here = i >= opts.full_layers - 2;
      }
      if (opts.dropout_p > 0.0 && dropout_here) {
        chain.push_back(net::DropoutLayer(opts.dropout_p));
      }
    }
    chain.push_back(net::FullLayer(num_classes));
    chain.push_back(net::SoftmaxLayer());
  };

  net::NetworkSpec spec;
  if (opts.multiscale) {
    Require(opts.conv_layers >= 1, kStage, "multiscale topology needs a conv stream");
    std::vector<net::LayerSpec> full_stream{
        net::FullLayer(opts.multiscale_stream_units), net::ReluLayer(),
        net::FullLayer(opts.multiscale_stream_units), net::ReluLayer()};
    spec.streams.push_back(std::move(full_stream));
    spec.streams.push_back(conv_chain(input));
    full_stack(spec.trunk);
  } else {
    std::vector<net::LayerSpec> chain = conv_chain(input);
    full_stack(chain);
    spec.streams.push_back(std::move(chain));
  }
  return spec;
}

TopologyOptions MatchHiddenUnits(TopologyOptions opts, net::Shape input, int num_classes,
                                 size_t target_params, double tolerance, int lo, int hi) {
  int best_h = -1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int h = lo; h <= hi; h++) {
    opts.hidden = h;
    net::CompiledNet net =
        net::CompiledNet::Compile(BuildTopology(opts, input, num_classes), input);
    double gap =
        std::abs(static_cast<double>(net.ParamCount()) - static_cast<double>(target_params));
    if (gap < best_gap) {
      best_gap = gap;
      best_h = h;
    }
  }
  opts.hidden = best_h;
  Require(best_gap <= tolerance * static_cast<double>(target_params), kStage,
          "no hidden-unit count matches the parameter target within " +
              std::to_string(tolerance * 100) + "%");
  return opts;
}

// ---------------------------------------------------------------------------
// JSON configuration
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void FieldFail(const std::string& path, const std::string& msg) {
  Fail("config", path + ": " + msg);
}

void CheckKeys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) FieldFail(path, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) {
      if (it.key() == k) known = true;
    }
    if (!known) FieldFail(path + "." + it.key(), "unknown field");
  }
}

template <typename T>
T Field(const json& j, const std::string& path, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    FieldFail(path + "." + key, "wrong type");
  }
}

int PositiveField(const json& j, const std::string& path, const char* key, int fallback) {
  int v = Field<int>(j, path, key, fallback);
  if (v < 0) FieldFail(path + "." + key, "must be nonnegative");
  return v;
}

net::LayerSpec LayerFromJson(const json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("type")) FieldFail(path, "layer needs a \"type\"");
  std::string type = j.at("type").get<std::string>();
  if (type == "conv") {
    CheckKeys(j, path, {"type", "sharing", "maps", "filter", "stride", "bands"});
    std::string sharing = Field<std::string>(j, path, "sharing", "full");
    if (sharing != "full" && sharing != "limited") {
      FieldFail(path + ".sharing", "full or limited");
    }
    auto filter = Field<std::vector<int>>(j, path, "filter", {3, 3});
    auto stride = Field<std::vector<int>>(j, path, "stride", {1, 1});
    if (filter.size() != 2) FieldFail(path + ".filter", "expected [freq, time]");
    if (stride.size() != 2) FieldFail(path + ".stride", "expected [freq, time]");
    std::vector<net::BandSpec> bands;
    if (j.contains("bands")) {
      for (size_t b = 0; b < j.at("bands").size(); b++) {
        std::vector<int> pair;
        try {
          pair = j.at("bands").at(b).get<std::vector<int>>();
        } catch (const json::exception&) {
          FieldFail(path + ".bands[" + std::to_string(b) + "]", "expected [start, width]");
        }
        if (pair.size() != 2) {
          FieldFail(path + ".bands[" + std::to_string(b) + "]", "expected [start, width]");
        }
        bands.push_back({pair[0], pair[1]});
      }
    }
    return net::ConvLayer(sharing == "full" ? net::Sharing::kFull : net::Sharing::kLimited,
                          PositiveField(j, path, "maps", 1), filter[0], filter[1], stride[0],
                          stride[1], std::move(bands));
  }
  if (type == "pool") {
    CheckKeys(j, path, {"type", "kind", "axis", "size", "stride", "p", "normalize", "abs"});
    std::string kind = Field<std::string>(j, path, "kind", "max");
    std::string axis = Field<std::string>(j, path, "axis", "frequency");
    net::PoolKind pk;
    if (kind == "max") {
      pk = net::PoolKind::kMax;
    } else if (kind == "lp") {
      pk = net::PoolKind::kLp;
    } else if (kind == "stochastic") {
      pk = net::PoolKind::kStochastic;
    } else {
      FieldFail(path + ".kind", "max, lp or stochastic");
    }
    if (axis != "frequency" && axis != "time") FieldFail(path + ".axis", "frequency or time");
    net::LayerSpec spec =
        net::PoolLayer(pk, axis == "frequency" ? net::Axis::kFrequency : net::Axis::kTime,
                       PositiveField(j, path, "size", 2), PositiveField(j, path, "stride", 2),
                       Field<double>(j, path, "p", 2.0));
    spec.lp_normalize = Field<bool>(j, path, "normalize", false);
    spec.lp_abs = Field<bool>(j, path, "abs", false);
    return spec;
  }
  if (type == "relu") {
    CheckKeys(j, path, {"type"});
    return net::ReluLayer();
  }
  if (type == "sigmoid") {
    CheckKeys(j, path, {"type"});
    return net::SigmoidLayer();
  }
  if (type == "dropout") {
    CheckKeys(j, path, {"type", "p"});
    return net::DropoutLayer(Field<double>(j, path, "p", 0.5));
  }
  if (type == "full") {
    CheckKeys(j, path, {"type", "units"});
    return net::FullLayer(PositiveField(j, path, "units", 1));
  }
  if (type == "softmax") {
    CheckKeys(j, path, {"type"});
    return net::SoftmaxLayer();
  }
  FieldFail(path + ".type", "unknown layer type \"" + type + "\"");
}

json LayerToJson(const net::LayerSpec& l) {
  json j;
  switch (l.kind) {
    case net::LayerKind::kConv: {
      j["type"] = "conv";
      j["sharing"] = l.sharing == net::Sharing::kFull ? "full" : "limited";
      j["maps"] = l.maps;
      j["filter"] = {l.filter_f, l.filter_t};
      j["stride"] = {l.stride_f, l.stride_t};
      if (!l.bands.empty()) {
        json bands = json::array();
        for (const auto& b : l.bands) bands.push_back({b.start, b.width});
        j["bands"] = bands;
      }
      break;
    }
    case net::LayerKind::kPool:
      j["type"] = "pool";
      j["kind"] = l.pool_kind == net::PoolKind::kMax    ? "max"
                  : l.pool_kind == net::PoolKind::kLp ? "lp"
                                                     : "stochastic";
      j["axis"] = l.axis == net::Axis::kFrequency ? "frequency" : "time";
      j["size"] = l.pool_size;
      j["stride"] = l.pool_stride;
      if (l.pool_kind == net::PoolKind::kLp) {
        j["p"] = l.p_exponent;
        j["normalize"] = l.lp_normalize;
        j["abs"] = l.lp_abs;
      }
      break;
    case net::LayerKind::kRelu:
      j["type"] = "relu";
      break;
    case net::LayerKind::kSigmoid:
      j["type"] = "sigmoid";
      break;
    case net::LayerKind::kDropout:
      j["type"] = "dropout";
      j["p"] = l.dropout_p;
      break;
    case net::LayerKind::kFull:
      j["type"] = "full";
      j["units"] = l.units;
      break;
    case net::LayerKind::kSoftmax:
      j["type"] = "softmax";
      break;
  }
  return j;
}

net::NetworkSpec NetworkFromJsonObject(const json& j, const std::string& path) {
  net::NetworkSpec spec;
  if (j.contains("layers")) {
    CheckKeys(j, path, {"layers", "input"});
    std::vector<net::LayerSpec> chain;
    for (size_t i = 0; i < j.at("layers").size(); i++) {
      chain.push_back(
          LayerFromJson(j.at("layers").at(i), path + ".layers[" + std::to_string(i) + "]"));
    }
    spec.streams.push_back(std::move(chain));
    return spec;
  }
  CheckKeys(j, path, {"streams", "trunk", "input"});
  if (!j.contains("streams")) FieldFail(path, "needs \"layers\" or \"streams\"");
  for (size_t s = 0; s < j.at("streams").size(); s++) {
    std::vector<net::LayerSpec> chain;
    for (size_t i = 0; i < j.at("streams").at(s).size(); i++) {
      chain.push_back(
          LayerFromJson(j.at("streams").at(s).at(i),
                        path + ".streams[" + std::to_string(s) + "][" + std::to_string(i) + "]"));
    }
    spec.streams.push_back(std::move(chain));
  }
  if (j.contains("trunk")) {
    for (size_t i = 0; i < j.at("trunk").size(); i++) {
      spec.trunk.push_back(
          LayerFromJson(j.at("trunk").at(i), path + ".trunk[" + std::to_string(i) + "]"));
    }
  }
  return spec;
}

CorpusSpec CorpusFromJson(const json& j, const std::string& path) {
  CorpusSpec spec;
  CheckKeys(j, path,
            {"num_speakers", "utterances_per_speaker", "frames_per_utterance", "num_classes",
             "spectral_dim", "separation", "noise_level", "distortion", "heldout_fraction",
             "test_fraction", "master_seed"});
  spec.num_speakers = PositiveField(j, path, "num_speakers", spec.num_speakers);
  spec.utterances_per_speaker =
      PositiveField(j, path, "utterances_per_speaker", spec.utterances_per_speaker);
  spec.frames_per_utterance =
      PositiveField(j, path, "frames_per_utterance", spec.frames_per_utterance);
  spec.num_classes = PositiveField(j, path, "num_classes", spec.num_classes);
  spec.spectral_dim = PositiveField(j, path, "spectral_dim", spec.spectral_dim);
  spec.separation = Field<double>(j, path, "separation", spec.separation);
  spec.noise_level = Field<double>(j, path, "noise_level", spec.noise_level);
  spec.heldout_fraction = Field<double>(j, path, "heldout_fraction", spec.heldout_fraction);
  spec.test_fraction = Field<double>(j, path, "test_fraction", spec.test_fraction);
  spec.master_seed = Field<uint64_t>(j, path, "master_seed", 0);
  if (j.contains("distortion")) {
    const json& d = j.at("distortion");
    const std::string dpath = path + ".distortion";
    CheckKeys(d, dpath,
              {"enabled", "gain_log_range", "bias_scale", "mix", "warp_low", "warp_high"});
    spec.distortion.enabled = Field<bool>(d, dpath, "enabled", spec.distortion.enabled);
    spec.distortion.gain_log_range =
        Field<double>(d, dpath, "gain_log_range", spec.distortion.gain_log_range);
    spec.distortion.bias_scale =
        Field<double>(d, dpath, "bias_scale", spec.distortion.bias_scale);
    spec.distortion.mix = Field<double>(d, dpath, "mix", spec.distortion.mix);
    spec.distortion.warp_low = Field<double>(d, dpath, "warp_low", spec.distortion.warp_low);
    spec.distortion.warp_high = Field<double>(d, dpath, "warp_high", spec.distortion.warp_high);
  }
  spec.Validate();
  return spec;
}

FeatureOptions FeaturesFromJson(const json& j, const std::string& path) {
  FeatureOptions opts;
  CheckKeys(j, path,
            {"num_filters", "use_warp", "use_deltas", "use_energy", "include_energy_in_input",
             "use_fmllr", "context", "delta_window", "gmm_components", "gmm_iters", "stc_iters",
             "fmllr_iters"});
  opts.num_filters = PositiveField(j, path, "num_filters", opts.num_filters);
  opts.use_warp = Field<bool>(j, path, "use_warp", opts.use_warp);
  opts.use_deltas = Field<bool>(j, path, "use_deltas", opts.use_deltas);
  opts.use_energy = Field<bool>(j, path, "use_energy", opts.use_energy);
  opts.include_energy_in_input =
      Field<bool>(j, path, "include_energy_in_input", opts.include_energy_in_input);
  opts.use_fmllr = Field<bool>(j, path, "use_fmllr", opts.use_fmllr);
  opts.context = PositiveField(j, path, "context", opts.context);
  opts.delta_window = PositiveField(j, path, "delta_window", opts.delta_window);
  opts.gmm_components = PositiveField(j, path, "gmm_components", opts.gmm_components);
  opts.gmm_iters = PositiveField(j, path, "gmm_iters", opts.gmm_iters);
  opts.stc_iters = PositiveField(j, path, "stc_iters", opts.stc_iters);
  opts.fmllr_iters = PositiveField(j, path, "fmllr_iters", opts.fmllr_iters);
  if (opts.include_energy_in_input && !opts.use_energy) {
    FieldFail(path + ".include_energy_in_input", "requires use_energy");
  }
  return opts;
}

TopologyOptions TopologyFromJson(const json& j, const std::string& path) {
  TopologyOptions opts;
  CheckKeys(j, path,
            {"conv_layers", "full_layers", "maps1", "maps2", "maps3", "hidden", "sharing",
             "lws_bands", "pool_kind", "lp_exponent", "pool_size", "pool_stride", "pool_time",
             "time_pool_size", "time_pool_stride", "dropout_p", "multiscale",
             "multiscale_stream_units"});
  opts.conv_layers = PositiveField(j, path, "conv_layers", opts.conv_layers);
  opts.full_layers = PositiveField(j, path, "full_layers", opts.full_layers);
  opts.maps1 = PositiveField(j, path, "maps1", opts.maps1);
  opts.maps2 = PositiveField(j, path, "maps2", opts.maps2);
  opts.maps3 = PositiveField(j, path, "maps3", opts.maps3);
  opts.hidden = PositiveField(j, path, "hidden", opts.hidden);
  std::string sharing = Field<std::string>(j, path, "sharing", "full");
  if (sharing != "full" && sharing != "limited") FieldFail(path + ".sharing", "full or limited");
  opts.sharing = sharing == "full" ? net::Sharing::kFull : net::Sharing::kLimited;
  opts.lws_bands = PositiveField(j, path, "lws_bands", opts.lws_bands);
  std::string kind = Field<std::string>(j, path, "pool_kind", "max");
  if (kind == "max") {
    opts.pool_kind = net::PoolKind::kMax;
  } else if (kind == "lp") {
    opts.pool_kind = net::PoolKind::kLp;
  } else if (kind == "stochastic") {
    opts.pool_kind = net::PoolKind::kStochastic;
  } else {
    FieldFail(path + ".pool_kind", "max, lp or stochastic");
  }
  opts.lp_exponent = Field<double>(j, path, "lp_exponent", opts.lp_exponent);
  opts.pool_size = PositiveField(j, path, "pool_size", opts.pool_size);
  opts.pool_stride = PositiveField(j, path, "pool_stride", opts.pool_stride);
  opts.pool_time = Field<bool>(j, path, "pool_time", opts.pool_time);
  opts.time_pool_size = PositiveField(j, path, "time_pool_size", opts.time_pool_size);
  opts.time_pool_stride = PositiveField(j, path, "time_pool_stride", opts.time_pool_stride);
  opts.dropout_p = Field<double>(j, path, "dropout_p", opts.dropout_p);
  opts.multiscale = Field<bool>(j, path, "multiscale", opts.multiscale);
  opts.multiscale_stream_units =
      PositiveField(j, path, "multiscale_stream_units", opts.multiscale_stream_units);
  return opts;
}

OptimizerConfig OptimizerFromJson(const json& j, const std::string& path) {
  OptimizerConfig opt;
  CheckKeys(j, path, {"kind", "sgd", "hf", "dropout_mode"});
  opt.kind = Field<std::string>(j, path, "kind", opt.kind);
  if (opt.kind != "sgd" && opt.kind != "hf" && opt.kind != "sgd_then_hf") {
    FieldFail(path + ".kind", "sgd, hf or sgd_then_hf");
  }
  opt.dropout_mode = Field<std::string>(j, path, "dropout_mode", opt.dropout_mode);
  if (opt.dropout_mode != "none" && opt.dropout_mode != "fixed_per_utterance" &&
      opt.dropout_mode != "per_cg_iteration") {
    FieldFail(path + ".dropout_mode", "none, fixed_per_utterance or per_cg_iteration");
  }
  if (j.contains("sgd")) {
    const json& s = j.at("sgd");
    const std::string spath = path + ".sgd";
    CheckKeys(s, spath,
              {"initial_rate", "anneal_factor", "patience", "max_anneals", "minibatch_size",
               "max_epochs"});
    opt.sgd.initial_rate = Field<double>(s, spath, "initial_rate", opt.sgd.initial_rate);
    opt.sgd.anneal_factor = Field<double>(s, spath, "anneal_factor", opt.sgd.anneal_factor);
    opt.sgd.patience = Field<double>(s, spath, "patience", opt.sgd.patience);
    opt.sgd.max_anneals = PositiveField(s, spath, "max_anneals", opt.sgd.max_anneals);
    opt.sgd.minibatch_size = PositiveField(s, spath, "minibatch_size", opt.sgd.minibatch_size);
    opt.sgd.max_epochs = PositiveField(s, spath, "max_epochs", opt.sgd.max_epochs);
  }
  if (j.contains("hf")) {
    const json& h = j.at("hf");
    const std::string hpath = path + ".hf";
    CheckKeys(h, hpath,
              {"iterations", "lambda_init", "cg_max_iters", "cg_tolerance", "curvature_fraction"});
    opt.hf.iterations = PositiveField(h, hpath, "iterations", opt.hf.iterations);
    opt.hf.lambda_init = Field<double>(h, hpath, "lambda_init", opt.hf.lambda_init);
    opt.hf.cg.max_iters = PositiveField(h, hpath, "cg_max_iters", opt.hf.cg.max_iters);
    opt.hf.cg.tolerance = Field<double>(h, hpath, "cg_tolerance", opt.hf.cg.tolerance);
    opt.hf.curvature_fraction =
        Field<double>(h, hpath, "curvature_fraction", opt.hf.curvature_fraction);
  }
  return opt;
}

json ConfigToJson(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  {
    json corpus;
    corpus["num_speakers"] = c.corpus.num_speakers;
    corpus["utterances_per_speaker"] = c.corpus.utterances_per_speaker;
    corpus["frames_per_utterance"] = c.corpus.frames_per_utterance;
    corpus["num_classes"] = c.corpus.num_classes;
    corpus["spectral_dim"] = c.corpus.spectral_dim;
    corpus["separation"] = c.corpus.separation;
    corpus["noise_level"] = c.corpus.noise_level;
    corpus["heldout_fraction"] = c.corpus.heldout_fraction;
    corpus["test_fraction"] = c.corpus.test_fraction;
    corpus["master_seed"] = c.corpus.master_seed;
    json dist;
    dist["enabled"] = c.corpus.distortion.enabled;
    dist["gain_log_range"] = c.corpus.distortion.gain_log_range;
    dist["bias_scale"] = c.corpus.distortion.bias_scale;
    dist["mix"] = c.corpus.distortion.mix;
    dist["warp_low"] = c.corpus.distortion.warp_low;
    dist["warp_high"] = c.corpus.distortion.warp_high;
    corpus["distortion"] = dist;
    j["corpus"] = corpus;
  }
  {
    json f;
    f["num_filters"] = c.features.num_filters;
    f["use_warp"] = c.features.use_warp;
    f["use_deltas"] = c.features.use_deltas;
    f["use_energy"] = c.features.use_energy;
    f["include_energy_in_input"] = c.features.include_energy_in_input;
    f["use_fmllr"] = c.features.use_fmllr;
    f["context"] = c.features.context;
    f["delta_window"] = c.features.delta_window;
    f["gmm_components"] = c.features.gmm_components;
    f["gmm_iters"] = c.features.gmm_iters;
    f["stc_iters"] = c.features.stc_iters;
    f["fmllr_iters"] = c.features.fmllr_iters;
    j["features"] = f;
  }
  if (c.explicit_network) {
    json streams = json::array();
    for (const auto& stream : c.network.streams) {
      json s = json::array();
      for (const auto& l : stream) s.push_back(LayerToJson(l));
      streams.push_back(s);
    }
    json trunk = json::array();
    for (const auto& l : c.network.trunk) trunk.push_back(LayerToJson(l));
    json n;
    n["streams"] = streams;
    n["trunk"] = trunk;
    j["network"] = n;
  } else {
    json t;
    t["conv_layers"] = c.topology.conv_layers;
    t["full_layers"] = c.topology.full_layers;
    t["maps1"] = c.topology.maps1;
    t["maps2"] = c.topology.maps2;
    t["maps3"] = c.topology.maps3;
    t["hidden"] = c.topology.hidden;
    t["sharing"] = c.topology.sharing == net::Sharing::kFull ? "full" : "limited";
    t["lws_bands"] = c.topology.lws_bands;
    t["pool_kind"] = c.topology.pool_kind == net::PoolKind::kMax    ? "max"
                     : c.topology.pool_kind == net::PoolKind::kLp ? "lp"
                                                                 : "stochastic";
    t["lp_exponent"] = c.topology.lp_exponent;
    t["pool_size"] = c.topology.pool_size;
    t["pool_stride"] = c.topology.pool_stride;
    t["pool_time"] = c.topology.pool_time;
    t["time_pool_size"] = c.topology.time_pool_size;
    t["time_pool_stride"] = c.topology.time_pool_stride;
    t["dropout_p"] = c.topology.dropout_p;
    t["multiscale"] = c.topology.multiscale;
    t["multiscale_stream_units"] = c.topology.multiscale_stream_units;
    j["topology"] = t;
  }
  {
    json o;
    o["kind"] = c.optimizer.kind;
    o["dropout_mode"] = c.optimizer.dropout_mode;
    json sgd;
    sgd["initial_rate"] = c.optimizer.sgd.initial_rate;
    sgd["anneal_factor"] = c.optimizer.sgd.anneal_factor;
    sgd["patience"] = c.optimizer.sgd.patience;
    sgd["max_anneals"] = c.optimizer.sgd.max_anneals;
    sgd["minibatch_size"] = c.optimizer.sgd.minibatch_size;
    sgd["max_epochs"] = c.optimizer.sgd.max_epochs;
    o["sgd"] = sgd;
    json hf;
    hf["iterations"] = c.optimizer.hf.iterations;
    hf["lambda_init"] = c.optimizer.hf.lambda_init;
    hf["cg_max_iters"] = c.optimizer.hf.cg.max_iters;
    hf["cg_tolerance"] = c.optimizer.hf.cg.tolerance;
    hf["curvature_fraction"] = c.optimizer.hf.curvature_fraction;
    o["hf"] = hf;
    j["optimizer"] = o;
  }
  return j;
}

net::Shape ProbeInputShape(const FeatureOptions& f) {
  int rows = f.num_filters + ((f.use_energy && f.include_energy_in_input) ? 1 : 0);
  return {rows, 2 * f.context + 1, f.use_deltas ? 3 : 1};
}

ExperimentConfig ParseConfigJson(const json& j, std::vector<std::string>* errors) {
  ExperimentConfig config;
  auto guard = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      if (!errors) throw;
      errors->push_back(e.what());
    } catch (const json::exception& e) {
      if (!errors) Fail("config", e.what());
      errors->push_back(std::string("[config] ") + e.what());
    }
  };

  guard([&] {
    CheckKeys(j, "config",
              {"name", "seed", "corpus", "features", "topology", "network", "optimizer"});
  });
  guard([&] { config.name = Field<std::string>(j, "config", "name", config.name); });
  guard([&] { config.seed = Field<uint64_t>(j, "config", "seed", config.seed); });
  guard([&] {
    if (j.contains("corpus")) config.corpus = CorpusFromJson(j.at("corpus"), "corpus");
  });
  guard([&] {
    if (j.contains("features")) config.features = FeaturesFromJson(j.at("features"), "features");
  });
  guard([&] {
    if (j.contains("topology") && j.contains("network")) {
      FieldFail("config", "give either \"topology\" or \"network\", not both");
    }
    if (j.contains("network")) {
      config.explicit_network = true;
      config.network = NetworkFromJsonObject(j.at("network"), "network");
    } else if (j.contains("topology")) {
      config.topology = TopologyFromJson(j.at("topology"), "topology");
    }
  });
  guard([&] {
    if (j.contains("optimizer")) {
      config.optimizer = OptimizerFromJson(j.at("optimizer"), "optimizer");
    }
  });
  // The corpus seed derives from the experiment seed unless pinned.
  if (config.corpus.master_seed == 0) {
    config.corpus.master_seed = MixKey(config.seed, 0x636f7270ULL);
  }
  // Shape-level validation: the network must compile against the feature
  // geometry before any compute happens.
  guard([&] {
    net::Shape input = ProbeInputShape(config.features);
    net::NetworkSpec spec = config.explicit_network
                                ? config.network
                                : BuildTopology(config.topology, input, config.corpus.num_classes);
    net::CompiledNet::Compile(spec, input);
  });
  return config;
}

}  // namespace

uint64_t ExperimentConfig::Hash() const { return Fnv1a64(ResolvedJson()); }

std::string ExperimentConfig::ResolvedJson() const { return ConfigToJson(*this).dump(2) + "\n"; }

ExperimentConfig ParseExperimentConfig(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    Fail("config", std::string("invalid JSON: ") + e.what());
  }
  return ParseConfigJson(j, nullptr);
}

std::vector<std::string> ValidateExperimentConfig(const std::string& json_text) {
  std::vector<std::string> errors;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    errors.push_back(std::string("[config] invalid JSON: ") + e.what());
    return errors;
  }
  ParseConfigJson(j, &errors);
  return errors;
}

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream is(path);
  Require(static_cast<bool>(is), "config", "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return ParseExperimentConfig(text);
}

net::NetworkSpec NetworkSpecFromJson(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    Fail("config", std::string("invalid JSON: ") + e.what());
  }
  return NetworkFromJsonObject(j, "network");
}

std::string NetworkSpecToJson(const net::NetworkSpec& spec) {
  json j;
  if (spec.streams.size() == 1 && spec.trunk.empty()) {
    json layers = json::array();
    for (const auto& l : spec.streams[0]) layers.push_back(LayerToJson(l));
    j["layers"] = layers;
  } else {
    json streams = json::array();
    for (const auto& stream : spec.streams) {
      json s = json::array();
      for (const auto& l : stream) s.push_back(LayerToJson(l));
      streams.push_back(s);
    }
    j["streams"] = streams;
    json trunk = json::array();
    for (const auto& l : spec.trunk) trunk.push_back(LayerToJson(l));
    j["trunk"] = trunk;
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Evaluation and reports
// ---------------------------------------------------------------------------

EvalOutcome Evaluate(const net::CompiledNet& network, std::span<const double> params,
                     const net::FrameDataset& data, net::BatchOptions batch) {
  const size_t n = data.NumExamples();
  Require(n > 0, kStage, "empty evaluation split");
  net::StochasticContext eval_ctx;  // dropout disabled, stochastic pooling averaged
  net::Engine engine(network);

  const int chunks = static_cast<int>((n + batch.chunk - 1) / batch.chunk);
  std::vector<double> chunk_wrong(chunks, 0.0), chunk_ce(chunks, 0.0);
  ParallelChunks(chunks, batch.threads, [&](int c) {
    thread_local net::Workspace ws;
    thread_local net::NetExample ex;
    size_t lo = static_cast<size_t>(c) * batch.chunk;
    size_t hi = std::min(lo + static_cast<size_t>(batch.chunk), n);
    double wrong = 0.0, ce = 0.0;
    for (size_t i = lo; i < hi; i++) {
      data.Materialize(i, ex);
      engine.Forward(params, ex, eval_ctx, ws);
      auto p = engine.Posteriors(ws);
      int argmax = 0;
      for (size_t k = 1; k < p.size(); k++) {
        if (p[k] > p[argmax]) argmax = static_cast<int>(k);
      }
      if (argmax != ex.label) wrong += 1.0;
      ce += -std::log(std::max(p[ex.label], 1e-300));
    }
    chunk_wrong[c] = wrong;
    chunk_ce[c] = ce;
  });
  EvalOutcome out;
  out.frame_error = PairwiseSum(chunk_wrong) / static_cast<double>(n);
  out.cross_entropy = PairwiseSum(chunk_ce) / static_cast<double>(n);
  return out;
}

std::string EmitReport(const std::vector<EvalReport>& reports) {
  Require(!reports.empty(), kStage, "no reports to emit");
  for (const auto& r : reports) {
    Require(r.corpus_hash == reports[0].corpus_hash, kStage,
            "reports from different corpora are not comparable");
  }
  std::vector<const EvalReport*> sorted;
  for (const auto& r : reports) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const EvalReport* a, const EvalReport* b) {
    return a->config_name < b->config_name;
  });

  std::ostringstream os;
  os << "# corpus " << Hash16(reports[0].corpus_hash) << "\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-32s %-16s %12s %12s %12s\n", "name", "config", "params",
                "frame_error", "heldout_ce");
  os << line;
  for (const auto* r : sorted) {
    std::snprintf(line, sizeof(line), "%-32s %-16s %12zu %12.6f %12.6f\n",
                  r->config_name.c_str(), Hash16(r->config_hash).c_str(), r->param_count,
                  r->frame_error, r->heldout_ce);
    os << line;
  }
  return os.str();
}

std::string LossSeriesCsv(const std::vector<optim::TrainRow>& rows) {
  std::ostringstream os;
  os << "iteration,loss,heldout_loss,lambda,cg_iters\n";
  for (const auto& r : rows) {
    os << r.iteration << "," << FormatFull(r.loss) << "," << FormatFull(r.heldout_loss) << ","
       << FormatFull(r.lambda) << "," << r.cg_iters << "\n";
  }
  return os.str();
}

void WriteSeriesFile(
    const std::string& path,
    const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  std::ofstream os(path);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  os << "series,x,y\n";
  for (const auto& [name, points] : series) {
    for (const auto& [x, y] : points) {
      os << name << "," << FormatFull(x) << "," << FormatFull(y) << "\n";
    }
  }
  Require(static_cast<bool>(os), kStage, "write failure on " + path);
}

std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> ReadSeriesFile(
    const std::string& path) {
  std::ifstream is(path);
  Require(static_cast<bool>(is), kStage, "cannot open " + path);
  std::string header;
  std::getline(is, header);
  Require(header == "series,x,y", kStage, path + ": bad series header");
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    size_t c1 = line.find(',');
    size_t c2 = line.find(',', c1 + 1);
    Require(c1 != std::string::npos && c2 != std::string::npos, kStage,
            path + ": bad series line");
    std::string name = line.substr(0, c1);
    double x = std::strtod(line.c_str() + c1 + 1, nullptr);
    double y = std::strtod(line.c_str() + c2 + 1, nullptr);
    if (out.empty() || out.back().first != name) out.push_back({name, {}});
    out.back().second.push_back({x, y});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

namespace {

optim::HFDropoutMode MapDropoutMode(const std::string& mode) {
  if (mode == "fixed_per_utterance") return optim::HFDropoutMode::kFixedPerUtterance;
  if (mode == "per_cg_iteration") return optim::HFDropoutMode::kPerCgIteration;
  return optim::HFDropoutMode::kNone;
}

void WriteTrainLog(const std::string& path, const PreparedData& prepared,
                   const optim::TrainResult& result, const EvalOutcome& eval) {
  std::ofstream os(path);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  for (const auto& e : prepared.gmm_trace.events) os << "event stage=gmm " << e << "\n";
  for (const auto& e : prepared.stc_trace.events) os << "event stage=stc " << e << "\n";
  for (const auto& [spk, trace] : prepared.fmllr_traces) {
    for (const auto& e : trace.events) {
      os << "event stage=fmllr speaker=" << spk << " " << e << "\n";
    }
  }
  for (const auto& r : result.rows) {
    os << "iter=" << r.iteration << " loss=" << FormatFull(r.loss)
       << " heldout=" << FormatFull(r.heldout_loss) << " lambda=" << FormatFull(r.lambda)
       << " cg_iters=" << r.cg_iters << " cg_stop=" << (r.cg_stop.empty() ? "-" : r.cg_stop)
       << " accepted=" << (r.accepted ? 1 : 0) << " rho=" << FormatFull(r.rho)
       << " rate=" << FormatFull(r.rate) << " annealed=" << (r.annealed ? 1 : 0) << "\n";
  }
  if (!result.note.empty()) os << "note " << result.note << "\n";
  os << "frame_error=" << FormatFull(eval.frame_error)
     << " test_ce=" << FormatFull(eval.cross_entropy) << "\n";
}

}  // namespace

RunArtifacts RunExperiment(const ExperimentConfig& config, const std::string& out_root) {
  auto start = std::chrono::steady_clock::now();
  config.corpus.Validate();

  Corpus corpus = GenerateCorpus(config.corpus);
  PreparedData prepared = PrepareFeatures(corpus, config.features);

  bool include_energy = config.features.use_energy && config.features.include_energy_in_input;
  net::FrameDataset train(&prepared.train, config.features.context, include_energy);
  net::FrameDataset heldout(&prepared.heldout, config.features.context, include_energy);
  net::FrameDataset test(&prepared.test, config.features.context, include_energy);

  net::NetworkSpec spec =
      config.explicit_network
          ? config.network
          : BuildTopology(config.topology, train.InputShape(), corpus.num_classes);
  net::CompiledNet network = net::CompiledNet::Compile(spec, train.InputShape());
  std::vector<double> params = network.InitParameters(MixKey(config.seed, 0x696e6974ULL));

  net::DropoutPlan plan = network.MakeDropoutPlan(
      MixKey(config.seed, 0x64726f70ULL),
      config.optimizer.dropout_mode == "fixed_per_utterance"
          ? net::DropoutPlan::Mode::kFixedPerUtterance
          : net::DropoutPlan::Mode::kPerPresentation);
  const bool has_dropout = !network.DropoutLayerIds().empty();
  const net::DropoutPlan* plan_ptr = has_dropout ? &plan : nullptr;

  optim::TrainResult result;
  if (config.optimizer.kind == "sgd" || config.optimizer.kind == "sgd_then_hf") {
    result = optim::SgdTrain(network, train, heldout, config.optimizer.sgd, plan_ptr,
                             MixKey(config.seed, 0x736764ULL), params);
  }
  if (config.optimizer.kind == "hf" || config.optimizer.kind == "sgd_then_hf") {
    optim::HFConfig hf = config.optimizer.hf;
    hf.master_seed = MixKey(config.seed, 0x6866ULL);
    hf.dropout_mode = MapDropoutMode(config.optimizer.dropout_mode);
    optim::TrainResult hf_result = optim::TrainHf(network, train, heldout, plan_ptr, hf, params);
    int base = result.rows.empty() ? 0 : result.rows.back().iteration;
    for (auto& row : hf_result.rows) {
      row.iteration += base;
      result.rows.push_back(row);
    }
    for (auto& t : hf_result.traces) result.traces.push_back(std::move(t));
    result.diverged = result.diverged || hf_result.diverged;
    if (!hf_result.note.empty()) result.note = hf_result.note;
  }

  EvalOutcome eval = Evaluate(network, params, test);

  EvalReport report;
  report.config_name = config.name;
  report.config_hash = config.Hash();
  report.corpus_hash = corpus.hash;
  report.param_count = network.ParamCount();
  report.frame_error = eval.frame_error;
  report.heldout_ce = result.rows.empty()
                          ? Evaluate(network, params, heldout).cross_entropy
                          : result.rows.back().heldout_loss;
  report.series = result.rows;

  fs::path dir = fs::path(out_root) / "runs" / Hash16(report.config_hash);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "config.resolved.json");
    os << config.ResolvedJson();
  }
  {
    std::ofstream os(dir / "loss_series.csv");
    os << LossSeriesCsv(result.rows);
  }
  {
    std::ofstream os(dir / "report.txt");
    os << EmitReport({report});
  }
  net::SaveParameters(network, params, (dir / "params.bin").string());
  WriteTrainLog((dir / "train.log").string(), prepared, result, eval);

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  RunArtifacts artifacts;
  artifacts.report = std::move(report);
  artifacts.run_dir = dir.string();
  return artifacts;
}

// ---------------------------------------------------------------------------
// Paper-trend drivers
// ---------------------------------------------------------------------------

namespace {

DriverResult FinishDriver(const std::string& driver_name, const ExperimentConfig& base,
                          std::vector<EvalReport> arms, const std::string& out_root) {
  DriverResult result;
  result.arms = std::move(arms);
  fs::path dir = fs::path(out_root) / "runs" /
                 (Hash16(MixKey(base.Hash(), Fnv1a64(driver_name))) + "-" + driver_name);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "report.txt");
    os << EmitReport(result.arms);
  }
  result.driver_dir = dir.string();
  return result;
}

}  // namespace

DriverResult RunTable1(ExperimentConfig base, const std::string& out_root) {
  struct Arm {
    const char* name;
    bool warp, fmllr, deltas, energy;
  };
  // The feature rows, in the paper's order.
  const Arm arms[] = {
      {"1-mel", false, false, false, false},
      {"2-vtln-mel", true, false, false, false},
      {"3-vtln-mel-fmllr", true, true, false, false},
      {"4-vtln-mel-d-dd", true, false, true, false},
      {"5-vtln-mel-d-dd-energy", true, false, true, true},
  };
  std::vector<EvalReport> reports;
  for (const Arm& arm : arms) {
    ExperimentConfig config = base;
    config.name = arm.name;
    config.features.use_warp = arm.warp;
    config.features.use_fmllr = arm.fmllr;
    config.features.use_deltas = arm.deltas;
    config.features.use_energy = arm.energy;
    config.features.include_energy_in_input = arm.energy;
    reports.push_back(RunExperiment(config, out_root).report);
  }
  return FinishDriver("table1", base, std::move(reports), out_root);
}

DriverResult RunTable2(ExperimentConfig base, const std::string& out_root) {
  Require(!base.explicit_network, kStage, "the layer sweep needs a topology config");
  net::Shape input = ProbeInputShape(base.features);

  // Parameter target: the 2-conv / 4-full arm at the base hidden size.
  TopologyOptions reference = base.topology;
  reference.conv_layers = 2;
  reference.full_layers = 4;
  size_t target =
      net::CompiledNet::Compile(BuildTopology(reference, input, base.corpus.num_classes), input)
          .ParamCount();

  std::vector<EvalReport> reports;
  for (int conv = 0; conv <= 3; conv++) {
    ExperimentConfig config = base;
    config.topology.conv_layers = conv;
    config.topology.full_layers = 6 - conv;
    config.topology =
        MatchHiddenUnits(config.topology, input, base.corpus.num_classes, target, 0.02);
    config.name = std::to_string(conv) + "conv-" + std::to_string(6 - conv) + "full";
    reports.push_back(RunExperiment(config, out_root).report);
  }
  return FinishDriver("table2", base, std::move(reports), out_root);
}

DriverResult RunFigure1(ExperimentConfig base, const std::string& out_root) {
  Require(base.topology.dropout_p > 0.0 || base.explicit_network, kStage,
          "the dropout comparison needs dropout layers");
  base.optimizer.kind = "hf";
  std::vector<EvalReport> reports;
  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
  for (const char* mode : {"fixed_per_utterance", "per_cg_iteration"}) {
    ExperimentConfig config = base;
    config.name = std::string("dropout-") + mode;
    config.optimizer.dropout_mode = mode;
    EvalReport report = RunExperiment(config, out_root).report;
    std::vector<std::pair<double, double>> points;
    for (const auto& row : report.series) {
      points.push_back({static_cast<double>(row.iteration), row.heldout_loss});
    }
    series.push_back({config.name, std::move(points)});
    reports.push_back(std::move(report));
  }
  DriverResult result = FinishDriver("figure1", base, std::move(reports), out_root);
  WriteSeriesFile((fs::path(result.driver_dir) / "figure1_heldout_loss.csv").string(), series);
  return result;
}

DriverResult RunPoolSweep(ExperimentConfig base, const std::string& out_root) {
  Require(!base.explicit_network, kStage, "the pooling sweep needs a topology config");
  struct Arm {
    const char* name;
    net::PoolKind kind;
    bool overlap;
    bool time;
  };
  const Arm arms[] = {
      {"1-max", net::PoolKind::kMax, false, false},
      {"2-stochastic", net::PoolKind::kStochastic, false, false},
      {"3-lp", net::PoolKind::kLp, false, false},
      {"4-max-overlap", net::PoolKind::kMax, true, false},
      {"5-max-time", net::PoolKind::kMax, false, true},
      {"6-stochastic-time", net::PoolKind::kStochastic, false, true},
      {"7-lp-time", net::PoolKind::kLp, false, true},
  };
  std::vector<EvalReport> reports;
  for (const Arm& arm : arms) {
    ExperimentConfig config = base;
    config.name = arm.name;
    config.topology.pool_kind = arm.kind;
    config.topology.pool_stride =
        arm.overlap ? std::max(1, base.topology.pool_size - 1) : base.topology.pool_size;
    config.topology.pool_time = arm.time;
    reports.push_back(RunExperiment(config, out_root).report);
  }
  return FinishDriver("poolsweep", base, std::move(reports), out_root);
}

DriverResult RunLwsVsFws(ExperimentConfig base, const std::string& out_root) {
  Require(!base.explicit_network, kStage, "the sharing comparison needs a topology config");
  net::Shape input = ProbeInputShape(base.features);

  ExperimentConfig fws = base;
  fws.name = "1-fws";
  fws.topology.sharing = net::Sharing::kFull;
  size_t target =
      net::CompiledNet::Compile(BuildTopology(fws.topology, input, base.corpus.num_classes), input)
          .ParamCount();

  ExperimentConfig lws = base;
  lws.name = "2-lws";
  lws.topology.sharing = net::Sharing::kLimited;
  lws.topology = MatchHiddenUnits(lws.topology, input, base.corpus.num_classes, target, 0.02);

  std::vector<EvalReport> reports;
  reports.push_back(RunExperiment(fws, out_root).report);
  reports.push_back(RunExperiment(lws, out_root).report);
  return FinishDriver("lws-vs-fws", base, std::move(reports), out_root);
}

}  // namespace harness
}  // namespace timbre
