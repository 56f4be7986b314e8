// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// The CNN/DNN computation graph: full and limited weight sharing
// convolution, max / lp / stochastic pooling on the frequency and time
// axes with optional overlap, fully connected layers, seeded dropout and
// multi-scale merging, with exact gradients and Gauss-Newton products.

#ifndef TIMBRE_NET_HPP
#define TIMBRE_NET_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "timbre/common.hpp"
#include "timbre/features.hpp"

namespace timbre {
namespace net {

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// Activations are freq x time x channel, (f, t, c) row-major.
struct Tensor3 {
  int f = 0, t = 0, c = 0;
  std::vector<double> v;

  void Resize(int f_, int t_, int c_) {
    f = f_;
    t = t_;
    c = c_;
    v.assign(static_cast<size_t>(f) * t * c, 0.0);
  }
  void Zero() { std::fill(v.begin(), v.end(), 0.0); }
  double& At(int fi, int ti, int ci) { return v[(static_cast<size_t>(fi) * t + ti) * c + ci]; }
  double At(int fi, int ti, int ci) const {
    return v[(static_cast<size_t>(fi) * t + ti) * c + ci];
  }
  size_t Size() const { return v.size(); }
};

struct Shape {
  int f = 0, t = 0, c = 0;
  size_t Count() const { return static_cast<size_t>(f) * t * c; }
  bool operator==(const Shape&) const = default;
  std::string Str() const;
};

// ---------------------------------------------------------------------------
// Layer specifications
// ---------------------------------------------------------------------------

enum class LayerKind { kConv, kPool, kRelu, kSigmoid, kDropout, kFull, kSoftmax };
enum class Sharing { kFull, kLimited };
enum class PoolKind { kMax, kLp, kStochastic };
enum class Axis { kFrequency, kTime };

struct BandSpec {
  int start = 0;
  int width = 0;
};

struct LayerSpec {
  LayerKind kind = LayerKind::kFull;

  // conv
  Sharing sharing = Sharing::kFull;
  int maps = 0;
  int filter_f = 0, filter_t = 0;
  int stride_f = 1, stride_t = 1;
  std::vector<BandSpec> bands;  // limited sharing only

  // pool
  PoolKind pool_kind = PoolKind::kMax;
  double p_exponent = 2.0;
  int pool_size = 0, pool_stride = 0;
  Axis axis = Axis::kFrequency;
  bool lp_normalize = false;  // divide the power sum by |R| before the root
  bool lp_abs = false;        // pool |a| instead of requiring a >= 0

  // dropout
  double dropout_p = 0.0;

  // full
  int units = 0;
};

/// A topology is one or more parallel streams that consume the network
/// input, concatenated by a merge node (present when there are at least
/// two streams) and fed into a trunk chain. A plain CNN/DNN is a single
/// stream with an empty trunk.
struct NetworkSpec {
  std::vector<std::vector<LayerSpec>> streams;
  std::vector<LayerSpec> trunk;
};

LayerSpec ConvLayer(Sharing sharing, int maps, int filter_f, int filter_t, int stride_f = 1,
                    int stride_t = 1, std::vector<BandSpec> bands = {});
LayerSpec PoolLayer(PoolKind kind, Axis axis, int size, int stride, double p_exponent = 2.0);
LayerSpec ReluLayer();
LayerSpec SigmoidLayer();
LayerSpec DropoutLayer(double p);
LayerSpec FullLayer(int units);
LayerSpec SoftmaxLayer();

/// Contiguous equal bands covering [0, rows); the hand-set default for
/// limited weight sharing.
std::vector<BandSpec> EqualBands(int rows, int num_bands);

/// Band layout that reproduces every full-sharing filter position: band b
/// owns an equal share of the output positions and its input range covers
/// the corresponding receptive fields (bands overlap on the input).
std::vector<BandSpec> TiledBands(int rows, int filter_f, int stride_f, int num_bands);

/// The default topology: conv(128 maps, 9x9) -> ReLU -> pool(freq, 3, 3)
/// -> conv(256 maps, 4x3) -> ReLU -> 4 x [full(1024), ReLU] -> softmax,
/// sized for a 40x11x3 input by default. All dimensions are parameters.
NetworkSpec DefaultCnnSpec(int num_classes, int maps1 = 128, int maps2 = 256, int hidden = 1024,
                           int full_layers = 4, double dropout_p = 0.5,
                           bool dropout_on_middle = true);

/// Two-stream topology: a 2-layer fully connected stream and a 2-layer
/// convolutional stream over the same input, concatenated and fed into
/// shared fully connected layers.
NetworkSpec BuildMultiscale(int num_classes, int full_stream_units, int conv_maps1, int conv_maps2,
                            int trunk_units, int trunk_layers = 4);

// ---------------------------------------------------------------------------
// Dropout plan and seed registry
// ---------------------------------------------------------------------------

struct DropoutPlan {
  enum class Mode { kNone, kPerPresentation, kFixedPerUtterance };
  std::map<int, double> per_layer_probability;  // compiled layer id -> p in [0, 1)
  uint64_t master_seed = 0;
  Mode mode = Mode::kNone;

  double ProbabilityFor(int layer_id) const;
};

/// Seeds saved out once per HF iteration: one entry per (utterance,
/// stochastic layer), read-only while CG runs. Entries are a pure hash of
/// (master seed, hf iteration, utterance id, layer id).
class SeedRegistry {
 public:
  void Populate(uint64_t master_seed, int hf_iteration,
                std::span<const std::string> utterance_ids, std::span<const int> layer_ids);
  uint64_t Lookup(uint64_t utterance_hash, int layer_id) const;
  bool PopulatedFor(int hf_iteration) const { return hf_iteration_ == hf_iteration; }
  int hf_iteration() const { return hf_iteration_; }
  size_t Size() const { return seeds_.size(); }
  /// Content fingerprint; two registries with equal fingerprints produce
  /// identical masks.
  uint64_t Fingerprint() const { return fingerprint_; }

 private:
  std::map<uint64_t, uint64_t> seeds_;
  int hf_iteration_ = -1;
  uint64_t fingerprint_ = 0;
};

enum class Phase { kTrain, kEval };

/// Everything the engine needs to resolve stochastic choices (dropout
/// masks, stochastic-pooling samples) deterministically for one example.
struct StochasticContext {
  Phase phase = Phase::kEval;
  const DropoutPlan* plan = nullptr;        // null: dropout layers are identity
  const SeedRegistry* registry = nullptr;   // fixed-per-utterance mode
  uint64_t master_seed = 0;
  uint64_t salt = 0;  // presentation / CG-iteration tag in redraw modes
  bool replay = false;  // reuse masks and sampled indices recorded in the workspace

  uint64_t LayerSeed(uint64_t utterance_hash, int layer_id) const;
};

/// Eq.-style dropout application: keeps each entry with probability 1-p and
/// scales kept entries by 1/(1-p). The mask is a pure function of
/// (seed, element index).
void DropoutApply(std::span<const double> input, double p, uint64_t seed,
                  std::span<double> output, std::span<uint8_t> mask_out);

// ---------------------------------------------------------------------------
// Pooling primitives (one region)
// ---------------------------------------------------------------------------

double PoolMaxRegion(std::span<const double> a, int* argmax);
double PoolLpRegion(std::span<const double> a, double p, bool normalize, bool abs_mode);
/// Train-phase stochastic pooling: samples a location from the normalized
/// activations (Bernoulli walk over the cumulative distribution) and
/// returns its activation. All-zero regions return 0 with picked = -1.
double PoolStochasticTrain(std::span<const double> a, uint64_t seed, uint64_t counter,
                           int* picked);
/// Test-phase stochastic pooling: probability-weighted average.
double PoolStochasticTest(std::span<const double> a);

// ---------------------------------------------------------------------------
// Compiled network
// ---------------------------------------------------------------------------

struct CompiledLayer {
  LayerSpec spec;
  int layer_id = 0;
  int stream = -1;  // -1 for trunk
  Shape in, out;
  size_t param_offset = 0;
  size_t weight_count = 0;
  size_t bias_count = 0;
  // conv: per band, first output row and position count along frequency
  std::vector<int> band_out_begin;
  std::vector<int> band_out_count;

  size_t ParamCount() const { return weight_count + bias_count; }
  std::string Name() const;
};

class CompiledNet {
 public:
  static CompiledNet Compile(const NetworkSpec& spec, Shape input);

  const NetworkSpec& spec() const { return spec_; }
  Shape input_shape() const { return input_; }
  size_t ParamCount() const { return param_count_; }
  int NumLayers() const { return static_cast<int>(layers_.size()); }
  const CompiledLayer& Layer(int i) const { return layers_[i]; }
  const std::vector<int>& StreamBegin() const { return stream_begin_; }
  int TrunkBegin() const { return trunk_begin_; }
  bool HasSoftmax() const { return has_softmax_; }
  /// Logits dimension (softmax input when present, otherwise final output).
  int LogitsDim() const { return logits_dim_; }
  size_t MergedDim() const { return merged_dim_; }
  bool HasMerge() const { return stream_begin_.size() > 2; }

  /// Compiled ids of dropout layers and of all stochastic layers (dropout +
  /// stochastic pooling); the latter is what the seed registry must cover.
  std::vector<int> DropoutLayerIds() const;
  std::vector<int> StochasticLayerIds() const;

  DropoutPlan MakeDropoutPlan(uint64_t master_seed, DropoutPlan::Mode mode) const;

  /// Deterministic initialization: weights ~ N(0, 1/fan_in), biases 0.
  std::vector<double> InitParameters(uint64_t seed) const;

  /// Per-layer shapes and parameter counts.
  std::string Describe() const;
  std::vector<std::pair<std::string, size_t>> OffsetTable() const;

 private:
  NetworkSpec spec_;
  Shape input_;
  std::vector<CompiledLayer> layers_;
  std::vector<int> stream_begin_;  // per stream first layer index, plus end sentinel
  int trunk_begin_ = 0;
  size_t param_count_ = 0;
  size_t merged_dim_ = 0;
  int logits_dim_ = 0;
  bool has_softmax_ = false;
};

// ---------------------------------------------------------------------------
// Examples and evaluation workspace
// ---------------------------------------------------------------------------

enum class LossKind { kSoftmaxCrossEntropy, kSquaredError };

struct NetExample {
  Tensor3 input;
  int label = -1;                   // CE target
  std::vector<double> target;       // squared-error target
  uint64_t utterance_hash = 0;
};

struct LayerState {
  Tensor3 out;
  Tensor3 d;      // backward sensitivity w.r.t. this layer's output
  Tensor3 r_out;  // forward directional derivative
  std::vector<int> indices;   // pooling argmax / sampled offsets
  std::vector<uint8_t> mask;  // dropout keep flags
};

struct Workspace {
  std::vector<LayerState> layers;
  Tensor3 merged, d_merged, r_merged;  // multi-stream concatenation buffers
  Tensor3 d_input;                     // unused sink for the input gradient
};

class Engine {
 public:
  explicit Engine(const CompiledNet& net) : net_(&net) {}

  /// Forward pass; records pooling indices and dropout masks in ws.
  void Forward(std::span<const double> params, const NetExample& ex,
               const StochasticContext& ctx, Workspace& ws) const;
  /// Logits view after Forward (softmax input when present).
  std::span<const double> Logits(const Workspace& ws) const;
  /// Softmax posteriors (requires a softmax head).
  std::span<const double> Posteriors(Workspace& ws) const;

  double Loss(const Workspace& ws, const NetExample& ex, LossKind loss) const;
  /// dL/dlogits for the fused loss head.
  void LossGradient(const Workspace& ws, const NetExample& ex, LossKind loss,
                    std::vector<double>& dlogits) const;
  /// Gauss-Newton output-space product u = H_L * r for the fused head.
  void LossCurvatureProduct(const Workspace& ws, const NetExample& ex, LossKind loss,
                            std::span<const double> r, std::vector<double>& u) const;

  /// Backward pass from dL/dlogits; accumulates parameter gradients.
  void Backward(std::span<const double> params, const NetExample& ex, Workspace& ws,
                std::span<const double> dlogits, std::span<double> grad_accum) const;

  /// Directional forward derivative along parameter direction v, reusing
  /// the linearization point recorded by Forward. Result in r_out chain;
  /// returns the logits-space directional derivative view.
  std::span<const double> RForward(std::span<const double> params, const NetExample& ex,
                                   Workspace& ws, std::span<const double> v) const;

 private:
  const CompiledNet* net_;
};

/// Single-example conveniences.
std::vector<double> ForwardPosteriors(const CompiledNet& net, std::span<const double> params,
                                      const NetExample& ex, const StochasticContext& ctx);

// ---------------------------------------------------------------------------
// Datasets and batched operations
// ---------------------------------------------------------------------------

/// Frame-level view over utterances; spliced windows are materialized on
/// demand. Trailing non-local feature rows are dropped from the model input
/// unless include_non_local is set.
class FrameDataset {
 public:
  FrameDataset() = default;
  FrameDataset(const std::vector<feat::UtteranceFeatures>* utterances, int context,
               bool include_non_local = false);

  size_t NumExamples() const { return index_.size(); }
  Shape InputShape() const { return input_shape_; }
  void Materialize(size_t i, NetExample& ex) const;
  const std::vector<std::string>& UtteranceIds() const { return utterance_ids_; }
  /// Example indices belonging to the given utterance positions.
  std::vector<size_t> ExamplesOfUtterances(std::span<const int> utt_positions) const;
  int NumUtterances() const { return static_cast<int>(utterance_ids_.size()); }

 private:
  const std::vector<feat::UtteranceFeatures>* utterances_ = nullptr;
  int context_ = 0;
  bool include_non_local_ = false;
  Shape input_shape_;
  std::vector<std::pair<int, int>> index_;  // (utterance, frame)
  std::vector<std::string> utterance_ids_;
  std::vector<uint64_t> utterance_hashes_;
};

struct BatchOptions {
  int threads = DefaultThreads();
  int chunk = 64;
};

/// Mean loss over the examples. Deterministic for any thread count.
double BatchLoss(const CompiledNet& net, std::span<const double> params, const FrameDataset& data,
                 std::span<const size_t> examples, const StochasticContext& ctx, LossKind loss,
                 const BatchOptions& opts = {});

/// Mean loss and mean gradient.
double BatchGradient(const CompiledNet& net, std::span<const double> params,
                     const FrameDataset& data, std::span<const size_t> examples,
                     const StochasticContext& ctx, LossKind loss, std::span<double> grad_out,
                     const BatchOptions& opts = {});

/// Mean undamped Gauss-Newton product over the examples.
void BatchGaussNewtonProduct(const CompiledNet& net, std::span<const double> params,
                             const FrameDataset& data, std::span<const size_t> examples,
                             const StochasticContext& ctx, LossKind loss,
                             std::span<const double> v, std::span<double> out,
                             const BatchOptions& opts = {});

// ---------------------------------------------------------------------------
// Parameter serialization
// ---------------------------------------------------------------------------

/// Binary checkpoint: offset table, little-endian doubles and a content
/// checksum. Round-trips bit-exactly.
void SaveParameters(const CompiledNet& net, std::span<const double> params,
                    const std::string& path);
std::vector<double> LoadParameters(const CompiledNet& net, const std::string& path);

}  // namespace net
}  // namespace timbre

#endif  // TIMBRE_NET_HPP
