// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Experiment harness: synthetic corpora with controllable speaker
// distortion, the feature pipeline with the adaptation chain, config-driven
// end-to-end runs, and the comparison-table / plot-data emitters.

#ifndef TIMBRE_HARNESS_HPP
#define TIMBRE_HARNESS_HPP

#include <map>
#include <string>
#include <vector>

#include "timbre/adapt.hpp"
#include "timbre/features.hpp"
#include "timbre/net.hpp"
#include "timbre/optim.hpp"

namespace timbre {
namespace harness {

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct DistortionSpec {
  bool enabled = true;
  double gain_log_range = 0.5;  // per-bin gains exp(U[-r, r])
  double bias_scale = 0.05;     // nonnegative additive offset in the power domain
  double mix = 0.1;             // convex neighbor mixing (keeps spectra positive)
  double warp_low = 0.9;        // per-speaker frequency warp factor range
  double warp_high = 1.1;
};

struct CorpusSpec {
  int num_speakers = 20;
  int utterances_per_speaker = 10;
  int frames_per_utterance = 200;
  int num_classes = 10;
  int spectral_dim = 40;
  double separation = 1.0;   // inter-class template separation (log domain)
  double noise_level = 0.3;  // log-domain noise
  DistortionSpec distortion;
  double heldout_fraction = 0.1;  // of each speaker's training utterances
  double test_fraction = 0.2;     // of each speaker's utterances
  uint64_t master_seed = 1;

  void Validate() const;
  uint64_t Hash() const;
};

/// Raw-spectrum utterances (C = 1, rows = spectral bins) with per-frame
/// labels, split per speaker, plus the true per-speaker warp factors the
/// generator applied (the "supplied" factors for the VTLN arm).
struct Corpus {
  std::vector<feat::UtteranceFeatures> train, heldout, test;
  std::map<std::string, double> speaker_warp;
  uint64_t hash = 0;
  int num_classes = 0;
  int spectral_dim = 0;
};

Corpus GenerateCorpus(const CorpusSpec& spec);

/// Nearest-template frame classifier on raw spectra; the noiseless
/// separability oracle.
double NearestTemplateError(const CorpusSpec& spec, const std::vector<feat::UtteranceFeatures>& utts);

// ---------------------------------------------------------------------------
// Feature pipeline
// ---------------------------------------------------------------------------

struct FeatureOptions {
  int num_filters = 24;
  bool use_warp = false;    // apply the supplied per-speaker warp factors
  bool use_deltas = true;
  bool use_energy = false;  // append the energy row
  bool include_energy_in_input = false;  // feed it to the network too
  bool use_fmllr = false;   // GMM -> STC -> per-speaker fMLLR chain
  int context = 5;
  int delta_window = feat::kDefaultDeltaWindow;
  int gmm_components = 16;
  int gmm_iters = 8;
  int stc_iters = 4;
  int fmllr_iters = 4;
};

struct PreparedData {
  std::vector<feat::UtteranceFeatures> train, heldout, test;
  feat::NormStats stats;
  adapt::EstimationTrace gmm_trace;
  adapt::EstimationTrace stc_trace;
  std::map<std::string, adapt::EstimationTrace> fmllr_traces;
  int model_rows = 0;      // rows fed to the network
  int model_channels = 0;
};

/// Full pipeline: (warped) log-mel, optional energy row, optional fMLLR
/// chain on the statics, optional deltas, then global normalization with
/// train-split statistics applied to every split.
PreparedData PrepareFeatures(const Corpus& corpus, const FeatureOptions& opts);

// ---------------------------------------------------------------------------
// Topology builder (desk scale)
// ---------------------------------------------------------------------------

struct TopologyOptions {
  int conv_layers = 2;  // 0..3
  int full_layers = 2;  // hidden fully connected layers before the head
  int maps1 = 8, maps2 = 12, maps3 = 12;
  int hidden = 48;
  net::Sharing sharing = net::Sharing::kFull;
  int lws_bands = 2;
  net::PoolKind pool_kind = net::PoolKind::kMax;
  double lp_exponent = 2.0;
  int pool_size = 3;
  int pool_stride = 3;
  bool pool_time = false;  // overlapped time pooling after the first conv
  int time_pool_size = 3;
  int time_pool_stride = 2;
  double dropout_p = 0.0;  // on the 3rd and 4th fully connected layers
  bool multiscale = false;
  int multiscale_stream_units = 32;
};

net::NetworkSpec BuildTopology(const TopologyOptions& opts, net::Shape input, int num_classes);

/// Scans the hidden-unit count so the topology's parameter total lands
/// within the tolerance of the target (the paper's matched-parameter
/// protocol). Throws if no count in [lo, hi] gets close enough.
TopologyOptions MatchHiddenUnits(TopologyOptions opts, net::Shape input, int num_classes,
                                 size_t target_params, double tolerance = 0.02, int lo = 4,
                                 int hi = 512);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  std::string kind = "sgd";  // sgd | hf | sgd_then_hf
  optim::SGDSchedule sgd;
  optim::HFConfig hf;
  std::string dropout_mode = "none";  // none | fixed_per_utterance | per_cg_iteration
};

struct ExperimentConfig {
  std::string name = "experiment";
  CorpusSpec corpus;
  FeatureOptions features;
  TopologyOptions topology;
  bool explicit_network = false;
  net::NetworkSpec network;  // used when explicit_network
  OptimizerConfig optimizer;
  uint64_t seed = 1;

  uint64_t Hash() const;
  std::string ResolvedJson() const;
};

/// Parses and fully validates a config file; every violation is reported
/// with its field path. Validation is side-effect free.
ExperimentConfig LoadExperimentConfig(const std::string& path);
ExperimentConfig ParseExperimentConfig(const std::string& json_text);
/// Returns diagnostics instead of throwing; empty means valid.
std::vector<std::string> ValidateExperimentConfig(const std::string& json_text);

net::NetworkSpec NetworkSpecFromJson(const std::string& json_text);
std::string NetworkSpecToJson(const net::NetworkSpec& spec);

// ---------------------------------------------------------------------------
// Evaluation and reports
// ---------------------------------------------------------------------------

struct EvalOutcome {
  double frame_error = 0.0;
  double cross_entropy = 0.0;
};

/// Frame error (argmax posterior vs label, dropout disabled) and mean CE.
EvalOutcome Evaluate(const net::CompiledNet& network, std::span<const double> params,
                     const net::FrameDataset& data, net::BatchOptions batch = {});

struct EvalReport {
  std::string config_name;
  uint64_t config_hash = 0;
  uint64_t corpus_hash = 0;
  size_t param_count = 0;
  double frame_error = 0.0;
  double heldout_ce = 0.0;
  std::vector<optim::TrainRow> series;
  double wall_seconds = 0.0;  // run log only, never in report.txt
};

/// Deterministic comparison table, one row per report, sorted by config
/// name. Refuses reports from different corpora.
std::string EmitReport(const std::vector<EvalReport>& reports);

/// loss_series.csv payload (header: iteration,loss,heldout_loss,lambda,cg_iters).
std::string LossSeriesCsv(const std::vector<optim::TrainRow>& rows);

/// Plot data: one file per figure, (x, y) pairs per named series, exact
/// round-trip formatting.
void WriteSeriesFile(const std::string& path,
                     const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>&
                         series);
std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> ReadSeriesFile(
    const std::string& path);

// ---------------------------------------------------------------------------
// Experiment runner and paper-trend drivers
// ---------------------------------------------------------------------------

struct RunArtifacts {
  EvalReport report;
  std::string run_dir;
};

/// Executes the full pipeline for one config and writes the artifact set
/// (resolved config, report.txt, loss_series.csv, checkpoint, train.log)
/// under <out_root>/runs/<config-hash>/.
RunArtifacts RunExperiment(const ExperimentConfig& config, const std::string& out_root);

struct DriverResult {
  std::vector<EvalReport> arms;
  std::string driver_dir;
};

DriverResult RunTable1(ExperimentConfig base, const std::string& out_root);
DriverResult RunTable2(ExperimentConfig base, const std::string& out_root);
DriverResult RunFigure1(ExperimentConfig base, const std::string& out_root);
DriverResult RunPoolSweep(ExperimentConfig base, const std::string& out_root);
DriverResult RunLwsVsFws(ExperimentConfig base, const std::string& out_root);

}  // namespace harness
}  // namespace timbre

#endif  // TIMBRE_HARNESS_HPP
