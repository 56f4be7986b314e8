// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/net.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

namespace timbre {
namespace net {

namespace {

constexpr char kStage[] = "net";
constexpr int kMaxPoolRegion = 256;

std::vector<BandSpec> EffectiveBands(const CompiledLayer& layer) {
  if (layer.spec.sharing == Sharing::kLimited) return layer.spec.bands;
  return {BandSpec{0, layer.in.f}};
}

}  // namespace

std::string Shape::Str() const {
  std::ostringstream os;
  os << f << "x" << t << "x" << c;
  return os.str();
}

// ---------------------------------------------------------------------------
// Layer construction helpers
// ---------------------------------------------------------------------------

LayerSpec ConvLayer(Sharing sharing, int maps, int filter_f, int filter_t, int stride_f,
                    int stride_t, std::vector<BandSpec> bands) {
  LayerSpec s;
  s.kind = LayerKind::kConv;
  s.sharing = sharing;
  s.maps = maps;
  s.filter_f = filter_f;
  s.filter_t = filter_t;
  s.stride_f = stride_f;
  s.stride_t = stride_t;
  s.bands = std::move(bands);
  return s;
}

LayerSpec PoolLayer(PoolKind kind, Axis axis, int size, int stride, double p_exponent) {
  LayerSpec s;
  s.kind = LayerKind::kPool;
  s.pool_kind = kind;
  s.axis = axis;
  s.pool_size = size;
  s.pool_stride = stride;
  s.p_exponent = p_exponent;
  return s;
}

LayerSpec ReluLayer() {
  LayerSpec s;
  s.kind = LayerKind::kRelu;
  return s;
}

LayerSpec SigmoidLayer() {
  LayerSpec s;
  s.kind = LayerKind::kSigmoid;
  return s;
}

LayerSpec DropoutLayer(double p) {
  LayerSpec s;
  s.kind = LayerKind::kDropout;
  s.dropout_p = p;
  return s;
}

LayerSpec FullLayer(int units) {
  LayerSpec s;
  s.kind = LayerKind::kFull;
  s.units = units;
  return s;
}

LayerSpec SoftmaxLayer() {
  LayerSpec s;
  s.kind = LayerKind::kSoftmax;
  return s;
}

std::vector<BandSpec> EqualBands(int rows, int num_bands) {
  Require(num_bands >= 1 && num_bands <= rows, kStage, "bad band count");
  std::vector<BandSpec> bands(num_bands);
  int next = 0;
  for (int b = 0; b < num_bands; b++) {
    int end = static_cast<int>(static_cast<int64_t>(rows) * (b + 1) / num_bands);
    bands[b] = {next, end - next};
    next = end;
  }
  return bands;
}

std::vector<BandSpec> TiledBands(int rows, int filter_f, int stride_f, int num_bands) {
  int positions = (rows - filter_f) / stride_f + 1;
  Require(positions >= num_bands, kStage, "fewer filter positions than bands");
  std::vector<BandSpec> bands(num_bands);
  for (int b = 0; b < num_bands; b++) {
    int first = static_cast<int>(static_cast<int64_t>(positions) * b / num_bands);
    int last = static_cast<int>(static_cast<int64_t>(positions) * (b + 1) / num_bands) - 1;
    int start = first * stride_f;
    bands[b] = {start, last * stride_f + filter_f - start};
  }
  return bands;
}

NetworkSpec DefaultCnnSpec(int num_classes, int maps1, int maps2, int hidden, int full_layers,
                           double dropout_p, bool dropout_on_middle) {
  NetworkSpec spec;
  std::vector<LayerSpec> chain;
  chain.push_back(ConvLayer(Sharing::kFull, maps1, 9, 9));
  chain.push_back(ReluLayer());
  chain.push_back(PoolLayer(PoolKind::kMax, Axis::kFrequency, 3, 3));
  chain.push_back(ConvLayer(Sharing::kFull, maps2, 4, 3));
  chain.push_back(ReluLayer());
  for (int i = 0; i < full_layers; i++) {
    chain.push_back(FullLayer(hidden));
    chain.push_back(ReluLayer());
    // Dropout sits on the 3rd and 4th layers, counting fully connected
    // layers only.
    if (dropout_on_middle && dropout_p > 0.0 && (i == 2 || i == 3)) {
      chain.push_back(DropoutLayer(dropout_p));
    }
  }
  chain.push_back(FullLayer(num_classes));
  chain.push_back(SoftmaxLayer());
  spec.streams.push_back(std::move(chain));
  return spec;
}

NetworkSpec BuildMultiscale(int num_classes, int full_stream_units, int conv_maps1, int conv_maps2,
                            int trunk_units, int trunk_layers) {
  NetworkSpec spec;
  std::vector<LayerSpec> full_stream;
  full_stream.push_back(FullLayer(full_stream_units));
  full_stream.push_back(ReluLayer());
  full_stream.push_back(FullLayer(full_stream_units));
  full_stream.push_back(ReluLayer());

  std::vector<LayerSpec> conv_stream;
  conv_stream.push_back(ConvLayer(Sharing::kFull, conv_maps1, 5, 3));
  conv_stream.push_back(ReluLayer());
  conv_stream.push_back(PoolLayer(PoolKind::kMax, Axis::kFrequency, 3, 3));
  conv_stream.push_back(ConvLayer(Sharing::kFull, conv_maps2, 3, 3));
  conv_stream.push_back(ReluLayer());

  spec.streams.push_back(std::move(full_stream));
  spec.streams.push_back(std::move(conv_stream));
  for (int i = 0; i < trunk_layers; i++) {
    spec.trunk.push_back(FullLayer(trunk_units));
    spec.trunk.push_back(ReluLayer());
  }
  spec.trunk.push_back(FullLayer(num_classes));
  spec.trunk.push_back(SoftmaxLayer());
  return spec;
}

// ---------------------------------------------------------------------------
// Dropout plan, seed registry, stochastic context
// ---------------------------------------------------------------------------

double DropoutPlan::ProbabilityFor(int layer_id) const {
  auto it = per_layer_probability.find(layer_id);
  Require(it != per_layer_probability.end(), kStage,
          "layer " + std::to_string(layer_id) + " not in dropout plan");
  return it->second;
}

void SeedRegistry::Populate(uint64_t master_seed, int hf_iteration,
                            std::span<const std::string> utterance_ids,
                            std::span<const int> layer_ids) {
  if (hf_iteration_ == hf_iteration) {
    throw std::logic_error("seed registry already populated for HF iteration " +
                           std::to_string(hf_iteration));
  }
  seeds_.clear();
  hf_iteration_ = hf_iteration;
  for (const auto& id : utterance_ids) {
    uint64_t utt_hash = Fnv1a64(id);
    for (int layer : layer_ids) {
      uint64_t seed = MixKey(master_seed, static_cast<uint64_t>(hf_iteration), utt_hash,
                             static_cast<uint64_t>(layer));
      seeds_[MixKey(utt_hash, static_cast<uint64_t>(layer))] = seed;
    }
  }
  fingerprint_ = Fnv1a64(&hf_iteration_, sizeof(hf_iteration_));
  for (const auto& [k, v] : seeds_) {
    fingerprint_ = Fnv1a64(&k, sizeof(k), fingerprint_);
    fingerprint_ = Fnv1a64(&v, sizeof(v), fingerprint_);
  }
}

uint64_t SeedRegistry::Lookup(uint64_t utterance_hash, int layer_id) const {
  auto it = seeds_.find(MixKey(utterance_hash, static_cast<uint64_t>(layer_id)));
  Require(it != seeds_.end(), kStage,
          "seed registry has no entry for layer " + std::to_string(layer_id));
  return it->second;
}

uint64_t StochasticContext::LayerSeed(uint64_t utterance_hash, int layer_id) const {
  if (registry != nullptr) return registry->Lookup(utterance_hash, layer_id);
  return MixKey(master_seed, utterance_hash, static_cast<uint64_t>(layer_id), salt);
}

void DropoutApply(std::span<const double> input, double p, uint64_t seed,
                  std::span<double> output, std::span<uint8_t> mask_out) {
  Require(p >= 0.0 && p < 1.0, kStage, "dropout probability must lie in [0, 1)");
  const double scale = 1.0 / (1.0 - p);
  for (size_t i = 0; i < input.size(); i++) {
    bool keep = CounterUniform(seed, i) >= p;
    mask_out[i] = keep ? 1 : 0;
    output[i] = keep ? input[i] * scale : 0.0;
  }
}

// ---------------------------------------------------------------------------
// Pooling primitives
// ---------------------------------------------------------------------------

double PoolMaxRegion(std::span<const double> a, int* argmax) {
  int best = 0;
  for (size_t i = 1; i < a.size(); i++) {
    if (a[i] > a[best]) best = static_cast<int>(i);  // ties keep the lowest index
  }
  if (argmax) *argmax = best;
  return a[best];
}

double PoolLpRegion(std::span<const double> a, double p, bool normalize, bool abs_mode) {
  Require(p >= 1.0, kStage, "lp pooling requires p >= 1");
  double peak = 0.0;
  for (double x : a) {
    if (!abs_mode) {
      Require(x >= 0.0, kStage, "negative activation into lp pooling");
      peak = std::max(peak, x);
    } else {
      peak = std::max(peak, std::abs(x));
    }
  }
  if (peak == 0.0) return 0.0;
  double sum = 0.0;
  for (double x : a) sum += std::pow(std::abs(x) / peak, p);
  if (normalize) sum /= static_cast<double>(a.size());
  return peak * std::pow(sum, 1.0 / p);
}

double PoolStochasticTrain(std::span<const double> a, uint64_t seed, uint64_t counter,
                           int* picked) {
  double total = 0.0;
  for (double x : a) {
    Require(x >= 0.0, kStage, "negative activation into stochastic pooling");
    total += x;
  }
  if (total <= 0.0) {
    *picked = -1;
    return 0.0;
  }
  double u = CounterUniform(seed, counter) * total;
  double cum = 0.0;
  int pick = static_cast<int>(a.size()) - 1;
  for (size_t i = 0; i < a.size(); i++) {
    cum += a[i];
    if (u < cum) {
      pick = static_cast<int>(i);
      break;
    }
  }
  *picked = pick;
  return a[pick];
}

double PoolStochasticTest(std::span<const double> a) {
  double total = 0.0, weighted = 0.0;
  for (double x : a) {
    Require(x >= 0.0, kStage, "negative activation into stochastic pooling");
    total += x;
    weighted += x * x;
  }
  return total > 0.0 ? weighted / total : 0.0;
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

std::string CompiledLayer::Name() const {
  std::ostringstream os;
  os << layer_id << ":";
  switch (spec.kind) {
    case LayerKind::kConv:
      os << (spec.sharing == Sharing::kFull ? "conv-fws" : "conv-lws");
      break;
    case LayerKind::kPool:
      os << "pool-";
      os << (spec.pool_kind == PoolKind::kMax    ? "max"
             : spec.pool_kind == PoolKind::kLp ? "lp"
                                              : "stochastic");
      os << (spec.axis == Axis::kFrequency ? "-freq" : "-time");
      break;
    case LayerKind::kRelu:
      os << "relu";
      break;
    case LayerKind::kSigmoid:
      os << "sigmoid";
      break;
    case LayerKind::kDropout:
      os << "dropout";
      break;
    case LayerKind::kFull:
      os << "full";
      break;
    case LayerKind::kSoftmax:
      os << "softmax";
      break;
  }
  return os.str();
}

namespace {

void CompileLayer(CompiledLayer& layer, size_t& param_cursor) {
  const LayerSpec& s = layer.spec;
  const Shape in = layer.in;
  const std::string where = "layer " + std::to_string(layer.layer_id);
  layer.param_offset = param_cursor;

  switch (s.kind) {
    case LayerKind::kConv: {
      Require(s.maps >= 1, kStage, where + ": feature_maps must be >= 1");
      Require(s.filter_f >= 1 && s.filter_t >= 1 && s.stride_f >= 1 && s.stride_t >= 1, kStage,
              where + ": bad filter/stride");
      Require(s.filter_t <= in.t, kStage,
              where + ": time filter " + std::to_string(s.filter_t) + " exceeds input extent " +
                  std::to_string(in.t));
      std::vector<BandSpec> bands;
      if (s.sharing == Sharing::kFull) {
        Require(s.bands.empty(), kStage, where + ": full sharing takes no bands");
        bands = {BandSpec{0, in.f}};
      } else {
        Require(!s.bands.empty(), kStage, where + ": limited sharing requires bands");
        bands = s.bands;
        int covered_to = -1;
        for (size_t b = 0; b < bands.size(); b++) {
          Require(bands[b].start >= 0 && bands[b].width >= 1 &&
                      bands[b].start + bands[b].width <= in.f,
                  kStage, where + ": band " + std::to_string(b) + " outside the frequency axis");
          if (b == 0) {
            Require(bands[b].start == 0, kStage, where + ": bands leave a gap before index 0");
          } else {
            Require(bands[b].start > bands[b - 1].start, kStage,
                    where + ": bands must be ordered by start");
            Require(bands[b].start <= covered_to, kStage,
                    where + ": bands leave a frequency gap at index " + std::to_string(covered_to));
          }
          covered_to = std::max(covered_to, bands[b].start + bands[b].width);
        }
        Require(covered_to == in.f, kStage, where + ": bands do not cover the frequency axis");
      }
      layer.band_out_begin.clear();
      layer.band_out_count.clear();
      int out_f = 0;
      for (size_t b = 0; b < bands.size(); b++) {
        Require(bands[b].width >= s.filter_f, kStage,
                where + ": band " + std::to_string(b) + " narrower than the filter");
        int count = (bands[b].width - s.filter_f) / s.stride_f + 1;
        layer.band_out_begin.push_back(out_f);
        layer.band_out_count.push_back(count);
        out_f += count;
      }
      layer.out = {out_f, (in.t - s.filter_t) / s.stride_t + 1, s.maps};
      layer.weight_count =
          bands.size() * static_cast<size_t>(s.maps) * s.filter_f * s.filter_t * in.c;
      layer.bias_count = bands.size() * static_cast<size_t>(s.maps);
      break;
    }
    case LayerKind::kPool: {
      Require(s.pool_size >= 1 && s.pool_size <= kMaxPoolRegion, kStage,
              where + ": bad pooling size");
      Require(s.pool_stride >= 1 && s.pool_stride <= s.pool_size, kStage,
              where + ": pooling stride must lie in [1, size]");
      if (s.axis == Axis::kTime) {
        Require(s.pool_stride < s.pool_size, kStage,
                where + ": pooling in time requires overlap (stride < size)");
      }
      if (s.pool_kind == PoolKind::kLp) {
        Require(s.p_exponent >= 1.0, kStage, where + ": lp exponent must be >= 1");
      }
      int extent = s.axis == Axis::kFrequency ? in.f : in.t;
      Require(extent >= s.pool_size, kStage, where + ": pooling region exceeds the axis extent");
      int out_extent = (extent - s.pool_size) / s.pool_stride + 1;
      layer.out = s.axis == Axis::kFrequency ? Shape{out_extent, in.t, in.c}
                                             : Shape{in.f, out_extent, in.c};
      break;
    }
    case LayerKind::kRelu:
    case LayerKind::kSigmoid:
      layer.out = in;
      break;
    case LayerKind::kDropout:
      Require(s.dropout_p >= 0.0 && s.dropout_p < 1.0, kStage,
              where + ": dropout probability must lie in [0, 1)");
      layer.out = in;
      break;
    case LayerKind::kFull:
      Require(s.units >= 1, kStage, where + ": units must be >= 1");
      layer.out = {s.units, 1, 1};
      layer.weight_count = static_cast<size_t>(s.units) * in.Count();
      layer.bias_count = static_cast<size_t>(s.units);
      break;
    case LayerKind::kSoftmax:
      Require(in.t == 1 && in.c == 1, kStage, where + ": softmax needs a flat input");
      layer.out = in;
      break;
  }
  param_cursor += layer.ParamCount();
}

}  // namespace

CompiledNet CompiledNet::Compile(const NetworkSpec& spec, Shape input) {
  Require(input.f >= 1 && input.t >= 1 && input.c >= 1, kStage, "bad input shape");
  Require(!spec.streams.empty(), kStage, "network needs at least one stream");
  if (spec.streams.size() > 1) {
    Require(!spec.trunk.empty(), kStage, "multi-stream network needs a trunk");
  }

  CompiledNet net;
  net.spec_ = spec;
  net.input_ = input;

  size_t cursor = 0;
  int id = 0;
  for (size_t st = 0; st < spec.streams.size(); st++) {
    net.stream_begin_.push_back(id);
    Require(!spec.streams[st].empty(), kStage, "stream " + std::to_string(st) + " is empty");
    Shape cur = input;
    for (const LayerSpec& ls : spec.streams[st]) {
      CompiledLayer layer;
      layer.spec = ls;
      layer.layer_id = id;
      layer.stream = static_cast<int>(st);
      layer.in = cur;
      CompileLayer(layer, cursor);
      cur = layer.out;
      net.layers_.push_back(std::move(layer));
      id++;
    }
  }
  net.stream_begin_.push_back(id);
  net.trunk_begin_ = id;

  // Merge: flattened stream outputs, concatenated.
  net.merged_dim_ = 0;
  for (size_t st = 0; st < spec.streams.size(); st++) {
    int last = net.stream_begin_[st + 1] - 1;
    net.merged_dim_ += net.layers_[last].out.Count();
  }

  Shape cur;
  if (spec.streams.size() > 1) {
    cur = {static_cast<int>(net.merged_dim_), 1, 1};
  } else {
    cur = net.layers_.back().out;
  }
  for (const LayerSpec& ls : spec.trunk) {
    CompiledLayer layer;
    layer.spec = ls;
    layer.layer_id = id;
    layer.stream = -1;
    layer.in = cur;
    CompileLayer(layer, cursor);
    cur = layer.out;
    net.layers_.push_back(std::move(layer));
    id++;
  }
  net.param_count_ = cursor;

  // Softmax may only appear as the final layer.
  for (size_t i = 0; i < net.layers_.size(); i++) {
    if (net.layers_[i].spec.kind == LayerKind::kSoftmax) {
      Require(i + 1 == net.layers_.size(), kStage, "softmax must be the final layer");
      net.has_softmax_ = true;
    }
  }
  // Logits are the softmax input (flat by construction) or the flattened
  // final output.
  const CompiledLayer& last = net.layers_.back();
  net.logits_dim_ = static_cast<int>(net.has_softmax_ ? last.in.Count() : last.out.Count());
  return net;
}

std::vector<int> CompiledNet::DropoutLayerIds() const {
  std::vector<int> ids;
  for (const auto& l : layers_)
    if (l.spec.kind == LayerKind::kDropout) ids.push_back(l.layer_id);
  return ids;
}

std::vector<int> CompiledNet::StochasticLayerIds() const {
  std::vector<int> ids;
  for (const auto& l : layers_) {
    if (l.spec.kind == LayerKind::kDropout ||
        (l.spec.kind == LayerKind::kPool && l.spec.pool_kind == PoolKind::kStochastic)) {
      ids.push_back(l.layer_id);
    }
  }
  return ids;
}

DropoutPlan CompiledNet::MakeDropoutPlan(uint64_t master_seed, DropoutPlan::Mode mode) const {
  DropoutPlan plan;
  plan.master_seed = master_seed;
  plan.mode = mode;
  for (const auto& l : layers_) {
    if (l.spec.kind == LayerKind::kDropout) {
      plan.per_layer_probability[l.layer_id] = l.spec.dropout_p;
    }
  }
  return plan;
}

std::vector<double> CompiledNet::InitParameters(uint64_t seed) const {
  std::vector<double> params(param_count_, 0.0);
  for (const auto& l : layers_) {
    if (l.ParamCount() == 0) continue;
    CounterRng rng(MixKey(seed, 0x696e6974ULL, static_cast<uint64_t>(l.layer_id)));
    double fan_in;
    if (l.spec.kind == LayerKind::kConv) {
      fan_in = static_cast<double>(l.spec.filter_f) * l.spec.filter_t * l.in.c;
    } else {
      fan_in = static_cast<double>(l.in.Count());
    }
    double scale = 1.0 / std::sqrt(fan_in);
    for (size_t i = 0; i < l.weight_count; i++) {
      params[l.param_offset + i] = scale * rng.Gaussian();
    }
    // biases stay zero
  }
  return params;
}

std::string CompiledNet::Describe() const {
  std::ostringstream os;
  os << "input " << input_.Str() << "\n";
  for (const auto& l : layers_) {
    os << "  " << l.Name();
    if (l.spec.kind == LayerKind::kConv) {
      os << " maps=" << l.spec.maps << " filter=" << l.spec.filter_f << "x" << l.spec.filter_t
         << " stride=" << l.spec.stride_f << "x" << l.spec.stride_t;
      if (l.spec.sharing == Sharing::kLimited) os << " bands=" << l.spec.bands.size();
    } else if (l.spec.kind == LayerKind::kPool) {
      os << " size=" << l.spec.pool_size << " stride=" << l.spec.pool_stride;
      if (l.spec.pool_kind == PoolKind::kLp) os << " p=" << l.spec.p_exponent;
    } else if (l.spec.kind == LayerKind::kFull) {
      os << " units=" << l.spec.units;
    } else if (l.spec.kind == LayerKind::kDropout) {
      os << " p=" << l.spec.dropout_p;
    }
    if (l.stream >= 0) os << " stream=" << l.stream;
    os << "  " << l.in.Str() << " -> " << l.out.Str() << "  params " << l.weight_count << "+"
       << l.bias_count << "\n";
  }
  if (HasMerge()) os << "  merge -> " << merged_dim_ << "x1x1\n";
  os << "total parameters: " << param_count_ << "\n";
  return os.str();
}

std::vector<std::pair<std::string, size_t>> CompiledNet::OffsetTable() const {
  std::vector<std::pair<std::string, size_t>> table;
  for (const auto& l : layers_) {
    if (l.ParamCount() > 0) table.emplace_back(l.Name(), l.param_offset);
  }
  return table;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

// Gathers one pooling region into buf; returns its length.
inline int GatherRegion(const CompiledLayer& l, const Tensor3& in, int of, int ot, int c,
                        double* buf) {
  const int size = l.spec.pool_size, stride = l.spec.pool_stride;
  if (l.spec.axis == Axis::kFrequency) {
    int f0 = of * stride;
    for (int i = 0; i < size; i++) buf[i] = in.At(f0 + i, ot, c);
  } else {
    int t0 = ot * stride;
    for (int i = 0; i < size; i++) buf[i] = in.At(of, t0 + i, c);
  }
  return size;
}

inline void ScatterRegion(const CompiledLayer& l, Tensor3& d_in, int of, int ot, int c, int i,
                          double g) {
  if (l.spec.axis == Axis::kFrequency) {
    d_in.At(of * l.spec.pool_stride + i, ot, c) += g;
  } else {
    d_in.At(of, ot * l.spec.pool_stride + i, c) += g;
  }
}

// d s / d a_i for lp pooling at the cached region values and output s.
inline double LpTerm(double a, double s, double p, bool normalize, int n) {
  if (s <= 0.0 || a == 0.0) return 0.0;
  double term = std::pow(std::abs(a) / s, p - 1.0);
  if (normalize) term /= static_cast<double>(n);
  return a < 0.0 ? -term : term;
}

}  // namespace

void Engine::Forward(std::span<const double> params, const NetExample& ex,
                     const StochasticContext& ctx, Workspace& ws) const {
  const CompiledNet& net = *net_;
  Require(ex.input.f == net.input_shape().f && ex.input.t == net.input_shape().t &&
              ex.input.c == net.input_shape().c,
          kStage, "example shape " + Shape{ex.input.f, ex.input.t, ex.input.c}.Str() +
                      " does not match network input " + net.input_shape().Str());
  ws.layers.resize(net.NumLayers());

  const int num_streams = static_cast<int>(net.StreamBegin().size()) - 1;
  for (int i = 0; i < net.NumLayers(); i++) {
    const CompiledLayer& l = net.Layer(i);
    // Resolve this layer's input tensor.
    const Tensor3* in;
    bool first_of_stream = false;
    for (int st = 0; st < num_streams; st++) {
      if (net.StreamBegin()[st] == i) first_of_stream = true;
    }
    if (first_of_stream) {
      in = &ex.input;
    } else if (i == net.TrunkBegin() && num_streams > 1) {
      // Merge: concatenate flattened stream outputs.
      ws.merged.Resize(static_cast<int>(net.MergedDim()), 1, 1);
      size_t off = 0;
      for (int st = 0; st < num_streams; st++) {
        const Tensor3& s_out = ws.layers[net.StreamBegin()[st + 1] - 1].out;
        std::copy(s_out.v.begin(), s_out.v.end(), ws.merged.v.begin() + off);
        off += s_out.Size();
      }
      in = &ws.merged;
    } else {
      in = &ws.layers[i - 1].out;
    }

    LayerState& st = ws.layers[i];
    const double* w = params.data() + l.param_offset;
    const double* b = w + l.weight_count;

    switch (l.spec.kind) {
      case LayerKind::kConv: {
        st.out.Resize(l.out.f, l.out.t, l.out.c);
        const auto bands = EffectiveBands(l);
        const int fh = l.spec.filter_f, fw = l.spec.filter_t, cin = l.in.c, maps = l.spec.maps;
        const size_t band_w = static_cast<size_t>(maps) * fh * fw * cin;
        for (size_t bi = 0; bi < bands.size(); bi++) {
          const double* wb = w + bi * band_w;
          for (int j = 0; j < l.band_out_count[bi]; j++) {
            const int f0 = bands[bi].start + j * l.spec.stride_f;
            const int of = l.band_out_begin[bi] + j;
            for (int ot = 0; ot < l.out.t; ot++) {
              const int t0 = ot * l.spec.stride_t;
              for (int m = 0; m < maps; m++) {
                const double* wm = wb + static_cast<size_t>(m) * fh * fw * cin;
                double acc = b[bi * maps + m];
                for (int df = 0; df < fh; df++)
                  for (int dt = 0; dt < fw; dt++)
                    for (int ci = 0; ci < cin; ci++)
                      acc += wm[(df * fw + dt) * cin + ci] * in->At(f0 + df, t0 + dt, ci);
                st.out.At(of, ot, m) = acc;
              }
            }
          }
        }
        break;
      }
      case LayerKind::kPool: {
        st.out.Resize(l.out.f, l.out.t, l.out.c);
        const bool record = l.spec.pool_kind != PoolKind::kLp && ctx.phase == Phase::kTrain;
        if (record && !ctx.replay) st.indices.assign(st.out.Size(), -1);
        uint64_t seed = 0;
        if (l.spec.pool_kind == PoolKind::kStochastic && ctx.phase == Phase::kTrain &&
            !ctx.replay) {
          seed = ctx.LayerSeed(ex.utterance_hash, l.layer_id);
        }
        double buf[kMaxPoolRegion];
        size_t lin = 0;
        for (int of = 0; of < l.out.f; of++) {
          for (int ot = 0; ot < l.out.t; ot++) {
            for (int c = 0; c < l.out.c; c++, lin++) {
              int n = GatherRegion(l, *in, of, ot, c, buf);
              std::span<const double> region(buf, static_cast<size_t>(n));
              double value = 0.0;
              switch (l.spec.pool_kind) {
                case PoolKind::kMax: {
                  if (ctx.replay && ctx.phase == Phase::kTrain) {
                    value = buf[st.indices[lin]];
                  } else {
                    int idx = 0;
                    value = PoolMaxRegion(region, &idx);
                    if (record && !ctx.replay) st.indices[lin] = idx;
                  }
                  break;
                }
                case PoolKind::kLp:
                  value =
                      PoolLpRegion(region, l.spec.p_exponent, l.spec.lp_normalize, l.spec.lp_abs);
                  break;
                case PoolKind::kStochastic: {
                  if (ctx.phase == Phase::kEval) {
                    value = PoolStochasticTest(region);
                  } else if (ctx.replay) {
                    int idx = st.indices[lin];
                    value = idx >= 0 ? buf[idx] : 0.0;
                  } else {
                    int idx = -1;
                    value = PoolStochasticTrain(region, seed, lin, &idx);
                    st.indices[lin] = idx;
                  }
                  break;
                }
              }
              st.out.At(of, ot, c) = value;
            }
          }
        }
        break;
      }
      case LayerKind::kRelu: {
        st.out.Resize(l.out.f, l.out.t, l.out.c);
        for (size_t k = 0; k < in->Size(); k++) st.out.v[k] = in->v[k] > 0.0 ? in->v[k] : 0.0;
        break;
      }
      case LayerKind::kSigmoid: {
        st.out.Resize(l.out.f, l.out.t, l.out.c);
        for (size_t k = 0; k < in->Size(); k++) st.out.v[k] = 1.0 / (1.0 + std::exp(-in->v[k]));
        break;
      }
      case LayerKind::kDropout: {
        st.out.Resize(l.out.f, l.out.t, l.out.c);
        if (ctx.phase == Phase::kEval || ctx.plan == nullptr) {
          st.out.v = in->v;
          st.mask.clear();
        } else if (ctx.replay) {
          double p = ctx.plan->ProbabilityFor(l.layer_id);
          double scale = 1.0 / (1.0 - p);
          for (size_t k = 0; k < in->Size(); k++) {
            st.out.v[k] = st.mask[k] ? in->v[k] * scale : 0.0;
          }
        } else {
          double p = ctx.plan->ProbabilityFor(l.layer_id);
          st.mask.assign(in->Size(), 1);
          DropoutApply(in->v, p, ctx.LayerSeed(ex.utterance_hash, l.layer_id), st.out.v, st.mask);
        }
        break;
      }
      case LayerKind::kFull: {
        st.out.Resize(l.out.f, 1, 1);
        const size_t n = in->Size();
        for (int u = 0; u < l.spec.units; u++) {
          const double* wu = w + static_cast<size_t>(u) * n;
          double acc = b[u];
          for (size_t k = 0; k < n; k++) acc += wu[k] * in->v[k];
          st.out.v[u] = acc;
        }
        break;
      }
      case LayerKind::kSoftmax: {
        st.out.Resize(l.out.f, 1, 1);
        double peak = *std::max_element(in->v.begin(), in->v.end());
        double total = 0.0;
        for (size_t k = 0; k < in->Size(); k++) {
          st.out.v[k] = std::exp(in->v[k] - peak);
          total += st.out.v[k];
        }
        for (auto& x : st.out.v) x /= total;
        break;
      }
    }
  }
}

std::span<const double> Engine::Logits(const Workspace& ws) const {
  const CompiledNet& net = *net_;
  int last = net.NumLayers() - 1;
  if (!net.HasSoftmax()) return ws.layers[last].out.v;
  if (last == net.TrunkBegin() && net.HasMerge()) return ws.merged.v;
  return ws.layers[last - 1].out.v;
}

std::span<const double> Engine::Posteriors(Workspace& ws) const {
  Require(net_->HasSoftmax(), kStage, "network has no softmax head");
  return ws.layers[net_->NumLayers() - 1].out.v;
}

double Engine::Loss(const Workspace& ws, const NetExample& ex, LossKind loss) const {
  if (loss == LossKind::kSoftmaxCrossEntropy) {
    Require(net_->HasSoftmax(), kStage, "cross-entropy requires a softmax head");
    Require(ex.label >= 0 && ex.label < net_->LogitsDim(), kStage, "label out of range");
    const auto& p = ws.layers[net_->NumLayers() - 1].out.v;
    return -std::log(std::max(p[ex.label], 1e-300));
  }
  auto z = Logits(ws);
  Require(ex.target.size() == z.size(), kStage, "target size mismatch");
  double acc = 0.0;
  for (size_t k = 0; k < z.size(); k++) {
    double diff = z[k] - ex.target[k];
    acc += 0.5 * diff * diff;
  }
  return acc;
}

void Engine::LossGradient(const Workspace& ws, const NetExample& ex, LossKind loss,
                          std::vector<double>& dlogits) const {
  auto z = Logits(ws);
  dlogits.resize(z.size());
  if (loss == LossKind::kSoftmaxCrossEntropy) {
    const auto& p = ws.layers[net_->NumLayers() - 1].out.v;
    for (size_t k = 0; k < p.size(); k++) dlogits[k] = p[k];
    dlogits[ex.label] -= 1.0;
  } else {
    for (size_t k = 0; k < z.size(); k++) dlogits[k] = z[k] - ex.target[k];
  }
}

void Engine::LossCurvatureProduct(const Workspace& ws, const NetExample& ex, LossKind loss,
                                  std::span<const double> r, std::vector<double>& u) const {
  (void)ex;
  u.assign(r.begin(), r.end());
  if (loss == LossKind::kSoftmaxCrossEntropy) {
    const auto& p = ws.layers[net_->NumLayers() - 1].out.v;
    double dot = 0.0;
    for (size_t k = 0; k < p.size(); k++) dot += p[k] * r[k];
    for (size_t k = 0; k < p.size(); k++) u[k] = p[k] * r[k] - p[k] * dot;
  }
}

void Engine::Backward(std::span<const double> params, const NetExample& ex, Workspace& ws,
                      std::span<const double> dlogits, std::span<double> grad_accum) const {
  const CompiledNet& net = *net_;
  const int num_streams = static_cast<int>(net.StreamBegin().size()) - 1;
  const int last = net.NumLayers() - 1;
  const int producer_end = net.HasSoftmax() ? last - 1 : last;

  // Seed the sensitivity at the logits producer.
  bool seed_merged = net.HasSoftmax() && last == net.TrunkBegin() && net.HasMerge();
  if (seed_merged) {
    ws.d_merged.Resize(static_cast<int>(net.MergedDim()), 1, 1);
    std::copy(dlogits.begin(), dlogits.end(), ws.d_merged.v.begin());
    // Split straight into the streams below (no trunk layers to walk).
    size_t off = 0;
    for (int s = 0; s < num_streams; s++) {
      int last_of_stream = net.StreamBegin()[s + 1] - 1;
      const CompiledLayer& sl = net.Layer(last_of_stream);
      LayerState& sst = ws.layers[last_of_stream];
      sst.d.Resize(sl.out.f, sl.out.t, sl.out.c);
      std::copy(ws.d_merged.v.begin() + off, ws.d_merged.v.begin() + off + sst.d.Size(),
                sst.d.v.begin());
      off += sst.d.Size();
    }
  } else {
    const CompiledLayer& pl = net.Layer(producer_end);
    LayerState& pst = ws.layers[producer_end];
    pst.d.Resize(pl.out.f, pl.out.t, pl.out.c);
    std::copy(dlogits.begin(), dlogits.end(), pst.d.v.begin());
  }

  for (int i = producer_end; i >= 0; i--) {
    const CompiledLayer& l = net.Layer(i);
    LayerState& st = ws.layers[i];

    // Resolve this layer's input tensor and the destination sensitivity.
    Tensor3* d_in;
    const Tensor3* in;
    bool first_of_stream = false;
    for (int s = 0; s < num_streams; s++) {
      if (net.StreamBegin()[s] == i) first_of_stream = true;
    }
    if (first_of_stream) {
      in = &ex.input;
      ws.d_input.Resize(ex.input.f, ex.input.t, ex.input.c);
      d_in = &ws.d_input;  // discarded
    } else if (i == net.TrunkBegin() && num_streams > 1) {
      in = &ws.merged;
      ws.d_merged.Resize(static_cast<int>(net.MergedDim()), 1, 1);
      d_in = &ws.d_merged;
    } else {
      in = &ws.layers[i - 1].out;
      const CompiledLayer& pl = net.Layer(i - 1);
      ws.layers[i - 1].d.Resize(pl.out.f, pl.out.t, pl.out.c);
      d_in = &ws.layers[i - 1].d;
    }

    const Tensor3& d_out = st.d;
    double* gw = grad_accum.data() + l.param_offset;
    double* gb = gw + l.weight_count;
    const double* w = params.data() + l.param_offset;

    switch (l.spec.kind) {
      case LayerKind::kConv: {
        const auto bands = EffectiveBands(l);
        const int fh = l.spec.filter_f, fw = l.spec.filter_t, cin = l.in.c, maps = l.spec.maps;
        const size_t band_w = static_cast<size_t>(maps) * fh * fw * cin;
        for (size_t bi = 0; bi < bands.size(); bi++) {
          const double* wb = w + bi * band_w;
          double* gwb = gw + bi * band_w;
          for (int j = 0; j < l.band_out_count[bi]; j++) {
            const int f0 = bands[bi].start + j * l.spec.stride_f;
            const int of = l.band_out_begin[bi] + j;
            for (int ot = 0; ot < l.out.t; ot++) {
              const int t0 = ot * l.spec.stride_t;
              for (int m = 0; m < maps; m++) {
                const double g = d_out.At(of, ot, m);
                if (g == 0.0) continue;
                const double* wm = wb + static_cast<size_t>(m) * fh * fw * cin;
                double* gwm = gwb + static_cast<size_t>(m) * fh * fw * cin;
                gb[bi * maps + m] += g;
                for (int df = 0; df < fh; df++)
                  for (int dt = 0; dt < fw; dt++)
                    for (int ci = 0; ci < cin; ci++) {
                      const size_t widx = (static_cast<size_t>(df) * fw + dt) * cin + ci;
                      gwm[widx] += g * in->At(f0 + df, t0 + dt, ci);
                      d_in->At(f0 + df, t0 + dt, ci) += g * wm[widx];
                    }
              }
            }
          }
        }
        break;
      }
      case LayerKind::kPool: {
        double buf[kMaxPoolRegion];
        size_t lin = 0;
        for (int of = 0; of < l.out.f; of++) {
          for (int ot = 0; ot < l.out.t; ot++) {
            for (int c = 0; c < l.out.c; c++, lin++) {
              const double g = d_out.At(of, ot, c);
              if (g == 0.0) continue;
              if (l.spec.pool_kind == PoolKind::kLp) {
                int n = GatherRegion(l, *in, of, ot, c, buf);
                double s = st.out.At(of, ot, c);
                for (int k = 0; k < n; k++) {
                  double term = LpTerm(buf[k], s, l.spec.p_exponent, l.spec.lp_normalize, n);
                  if (term != 0.0) ScatterRegion(l, *d_in, of, ot, c, k, g * term);
                }
              } else {
                Require(!st.indices.empty(), kStage,
                        "pooling backward without recorded indices (layer " +
                            std::to_string(l.layer_id) + ")");
                int idx = st.indices[lin];
                if (idx >= 0) ScatterRegion(l, *d_in, of, ot, c, idx, g);
              }
            }
          }
        }
        break;
      }
      case LayerKind::kRelu:
        for (size_t k = 0; k < in->Size(); k++) {
          if (in->v[k] > 0.0) d_in->v[k] += d_out.v[k];
        }
        break;
      case LayerKind::kSigmoid:
        for (size_t k = 0; k < in->Size(); k++) {
          double y = st.out.v[k];
          d_in->v[k] += d_out.v[k] * y * (1.0 - y);
        }
        break;
      case LayerKind::kDropout: {
        if (st.mask.empty()) {  // identity (eval phase or no plan)
          for (size_t k = 0; k < in->Size(); k++) d_in->v[k] += d_out.v[k];
        } else {
          double scale = 1.0 / (1.0 - l.spec.dropout_p);
          for (size_t k = 0; k < in->Size(); k++) {
            if (st.mask[k]) d_in->v[k] += d_out.v[k] * scale;
          }
        }
        break;
      }
      case LayerKind::kFull: {
        const size_t n = in->Size();
        for (int u = 0; u < l.spec.units; u++) {
          const double g = d_out.v[u];
          if (g == 0.0) continue;
          gb[u] += g;
          const double* wu = w + static_cast<size_t>(u) * n;
          double* gwu = gw + static_cast<size_t>(u) * n;
          for (size_t k = 0; k < n; k++) {
            gwu[k] += g * in->v[k];
            d_in->v[k] += g * wu[k];
          }
        }
        break;
      }
      case LayerKind::kSoftmax:
        Fail(kStage, "softmax reached in backward pass");
    }

    // Split the merged sensitivity back into the streams.
    if (i == net.TrunkBegin() && num_streams > 1) {
      size_t off = 0;
      for (int s = 0; s < num_streams; s++) {
        int last_of_stream = net.StreamBegin()[s + 1] - 1;
        const CompiledLayer& sl = net.Layer(last_of_stream);
        LayerState& sst = ws.layers[last_of_stream];
        sst.d.Resize(sl.out.f, sl.out.t, sl.out.c);
        std::copy(ws.d_merged.v.begin() + off, ws.d_merged.v.begin() + off + sst.d.Size(),
                  sst.d.v.begin());
        off += sst.d.Size();
      }
    }
  }
}

std::span<const double> Engine::RForward(std::span<const double> params, const NetExample& ex,
                                         Workspace& ws, std::span<const double> v) const {
  const CompiledNet& net = *net_;
  const int num_streams = static_cast<int>(net.StreamBegin().size()) - 1;
  const int last = net.NumLayers() - 1;
  const int stop = net.HasSoftmax() ? last - 1 : last;

  for (int i = 0; i <= stop; i++) {
    const CompiledLayer& l = net.Layer(i);
    LayerState& st = ws.layers[i];

    const Tensor3* in;
    const Tensor3* r_in = nullptr;
    bool first_of_stream = false;
    for (int s = 0; s < num_streams; s++) {
      if (net.StreamBegin()[s] == i) first_of_stream = true;
    }
    if (first_of_stream) {
      in = &ex.input;  // constant input: no directional term
    } else if (i == net.TrunkBegin() && num_streams > 1) {
      ws.r_merged.Resize(static_cast<int>(net.MergedDim()), 1, 1);
      size_t off = 0;
      for (int s = 0; s < num_streams; s++) {
        const Tensor3& r_s = ws.layers[net.StreamBegin()[s + 1] - 1].r_out;
        std::copy(r_s.v.begin(), r_s.v.end(), ws.r_merged.v.begin() + off);
        off += r_s.Size();
      }
      in = &ws.merged;
      r_in = &ws.r_merged;
    } else {
      in = &ws.layers[i - 1].out;
      r_in = &ws.layers[i - 1].r_out;
    }

    const double* w = params.data() + l.param_offset;
    const double* vw = v.data() + l.param_offset;
    const double* vb = vw + l.weight_count;
    st.r_out.Resize(l.out.f, l.out.t, l.out.c);

    switch (l.spec.kind) {
      case LayerKind::kConv: {
        const auto bands = EffectiveBands(l);
        const int fh = l.spec.filter_f, fw = l.spec.filter_t, cin = l.in.c, maps = l.spec.maps;
        const size_t band_w = static_cast<size_t>(maps) * fh * fw * cin;
        for (size_t bi = 0; bi < bands.size(); bi++) {
          const double* wb = w + bi * band_w;
          const double* vwb = vw + bi * band_w;
          for (int j = 0; j < l.band_out_count[bi]; j++) {
            const int f0 = bands[bi].start + j * l.spec.stride_f;
            const int of = l.band_out_begin[bi] + j;
            for (int ot = 0; ot < l.out.t; ot++) {
              const int t0 = ot * l.spec.stride_t;
              for (int m = 0; m < maps; m++) {
                const double* wm = wb + static_cast<size_t>(m) * fh * fw * cin;
                const double* vwm = vwb + static_cast<size_t>(m) * fh * fw * cin;
                double acc = vb[bi * maps + m];
                for (int df = 0; df < fh; df++)
                  for (int dt = 0; dt < fw; dt++)
                    for (int ci = 0; ci < cin; ci++) {
                      const size_t widx = (static_cast<size_t>(df) * fw + dt) * cin + ci;
                      acc += vwm[widx] * in->At(f0 + df, t0 + dt, ci);
                      if (r_in) acc += wm[widx] * r_in->At(f0 + df, t0 + dt, ci);
                    }
                st.r_out.At(of, ot, m) = acc;
              }
            }
          }
        }
        break;
      }
      case LayerKind::kPool: {
        Require(r_in != nullptr, kStage, "pooling cannot be the first layer");
        double buf[kMaxPoolRegion];
        size_t lin = 0;
        for (int of = 0; of < l.out.f; of++) {
          for (int ot = 0; ot < l.out.t; ot++) {
            for (int c = 0; c < l.out.c; c++, lin++) {
              double r_val = 0.0;
              if (l.spec.pool_kind == PoolKind::kLp) {
                int n = GatherRegion(l, *in, of, ot, c, buf);
                double s = st.out.At(of, ot, c);
                for (int k = 0; k < n; k++) {
                  double term = LpTerm(buf[k], s, l.spec.p_exponent, l.spec.lp_normalize, n);
                  if (term != 0.0) {
                    r_val += term * (l.spec.axis == Axis::kFrequency
                                         ? r_in->At(of * l.spec.pool_stride + k, ot, c)
                                         : r_in->At(of, ot * l.spec.pool_stride + k, c));
                  }
                }
              } else {
                Require(!st.indices.empty(), kStage,
                        "pooling directional pass without recorded indices (layer " +
                            std::to_string(l.layer_id) + ")");
                int idx = st.indices[lin];
                if (idx >= 0) {
                  r_val = l.spec.axis == Axis::kFrequency
                              ? r_in->At(of * l.spec.pool_stride + idx, ot, c)
                              : r_in->At(of, ot * l.spec.pool_stride + idx, c);
                }
              }
              st.r_out.At(of, ot, c) = r_val;
            }
          }
        }
        break;
      }
      case LayerKind::kRelu:
        Require(r_in != nullptr, kStage, "activation cannot be the first layer");
        for (size_t k = 0; k < in->Size(); k++) {
          st.r_out.v[k] = in->v[k] > 0.0 ? r_in->v[k] : 0.0;
        }
        break;
      case LayerKind::kSigmoid:
        Require(r_in != nullptr, kStage, "activation cannot be the first layer");
        for (size_t k = 0; k < in->Size(); k++) {
          double y = st.out.v[k];
          st.r_out.v[k] = r_in->v[k] * y * (1.0 - y);
        }
        break;
      case LayerKind::kDropout: {
        Require(r_in != nullptr, kStage, "dropout cannot be the first layer");
        if (st.mask.empty()) {
          st.r_out.v = r_in->v;
        } else {
          double scale = 1.0 / (1.0 - l.spec.dropout_p);
          for (size_t k = 0; k < in->Size(); k++) {
            st.r_out.v[k] = st.mask[k] ? r_in->v[k] * scale : 0.0;
          }
        }
        break;
      }
      case LayerKind::kFull: {
        const size_t n = in->Size();
        for (int u = 0; u < l.spec.units; u++) {
          const double* wu = w + static_cast<size_t>(u) * n;
          const double* vwu = vw + static_cast<size_t>(u) * n;
          double acc = vb[u];
          for (size_t k = 0; k < n; k++) {
            acc += vwu[k] * in->v[k];
            if (r_in) acc += wu[k] * r_in->v[k];
          }
          st.r_out.v[u] = acc;
        }
        break;
      }
      case LayerKind::kSoftmax:
        Fail(kStage, "softmax reached in directional pass");
    }
  }

  if (net.HasSoftmax() && last == net.TrunkBegin() && net.HasMerge()) return ws.r_merged.v;
  return ws.layers[stop].r_out.v;
}

std::vector<double> ForwardPosteriors(const CompiledNet& net, std::span<const double> params,
                                      const NetExample& ex, const StochasticContext& ctx) {
  Engine engine(net);
  Workspace ws;
  engine.Forward(params, ex, ctx, ws);
  auto p = engine.Posteriors(ws);
  return {p.begin(), p.end()};
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

FrameDataset::FrameDataset(const std::vector<feat::UtteranceFeatures>* utterances, int context,
                           bool include_non_local)
    : utterances_(utterances), context_(context), include_non_local_(include_non_local) {
  Require(context >= 0, kStage, "context must be >= 0");
  Require(!utterances->empty(), kStage, "empty utterance set");
  const auto& first = (*utterances)[0];
  int rows = include_non_local ? first.num_rows : first.num_rows - first.non_local_rows;
  input_shape_ = {rows, 2 * context + 1, first.num_channels};
  for (size_t u = 0; u < utterances->size(); u++) {
    const auto& utt = (*utterances)[u];
    int r = include_non_local ? utt.num_rows : utt.num_rows - utt.non_local_rows;
    Require(r == rows && utt.num_channels == first.num_channels, kStage,
            "inconsistent feature shapes across utterances");
    utterance_ids_.push_back(utt.utterance_id);
    utterance_hashes_.push_back(Fnv1a64(utt.utterance_id));
    for (int t = 0; t < utt.num_frames; t++) index_.emplace_back(static_cast<int>(u), t);
  }
}

void FrameDataset::Materialize(size_t i, NetExample& ex) const {
  const auto [u, frame] = index_[i];
  const auto& utt = (*utterances_)[u];
  Require(!utt.labels.empty(), kStage, "utterance " + utt.utterance_id + " has no labels");
  const int window = 2 * context_ + 1;
  ex.input.Resize(input_shape_.f, window, input_shape_.c);
  for (int w = 0; w < window; w++) {
    int src = std::clamp(frame + w - context_, 0, utt.num_frames - 1);
    for (int f = 0; f < input_shape_.f; f++) {
      for (int c = 0; c < input_shape_.c; c++) {
        ex.input.At(f, w, c) = utt.At(src, f, c);
      }
    }
  }
  ex.label = utt.labels[frame];
  ex.utterance_hash = utterance_hashes_[u];
}

std::vector<size_t> FrameDataset::ExamplesOfUtterances(std::span<const int> utt_positions) const {
  std::vector<uint8_t> wanted(utterance_ids_.size(), 0);
  for (int u : utt_positions) wanted[u] = 1;
  std::vector<size_t> out;
  for (size_t i = 0; i < index_.size(); i++) {
    if (wanted[index_[i].first]) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched operations (deterministic ordered reduction)
// ---------------------------------------------------------------------------

namespace {

/// Merges per-chunk contributions into the target strictly in chunk order,
/// so the result is independent of the worker count.
class OrderedAccumulator {
 public:
  explicit OrderedAccumulator(std::span<double> target) : target_(target) {}

  void Submit(int chunk, std::span<const double> part) {
    std::unique_lock<std::mutex> lock(m_);
    cv_.wait(lock, [&] { return next_ == chunk; });
    for (size_t i = 0; i < target_.size(); i++) target_[i] += part[i];
    next_++;
    cv_.notify_all();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  int next_ = 0;
  std::span<double> target_;
};

int ChunkCount(size_t n, int chunk) { return static_cast<int>((n + chunk - 1) / chunk); }

}  // namespace

double BatchLoss(const CompiledNet& net, std::span<const double> params, const FrameDataset& data,
                 std::span<const size_t> examples, const StochasticContext& ctx, LossKind loss,
                 const BatchOptions& opts) {
  Require(!examples.empty(), kStage, "empty example batch");
  Engine engine(net);
  const int chunks = ChunkCount(examples.size(), opts.chunk);
  std::vector<double> chunk_loss(chunks, 0.0);
  ParallelChunks(chunks, opts.threads, [&](int c) {
    thread_local Workspace ws;
    thread_local NetExample ex;
    double acc = 0.0;
    size_t lo = static_cast<size_t>(c) * opts.chunk;
    size_t hi = std::min(lo + opts.chunk, examples.size());
    for (size_t i = lo; i < hi; i++) {
      data.Materialize(examples[i], ex);
      engine.Forward(params, ex, ctx, ws);
      acc += engine.Loss(ws, ex, loss);
    }
    chunk_loss[c] = acc;
  });
  return PairwiseSum(chunk_loss) / static_cast<double>(examples.size());
}

double BatchGradient(const CompiledNet& net, std::span<const double> params,
                     const FrameDataset& data, std::span<const size_t> examples,
                     const StochasticContext& ctx, LossKind loss, std::span<double> grad_out,
                     const BatchOptions& opts) {
  Require(!examples.empty(), kStage, "empty example batch");
  Require(grad_out.size() == net.ParamCount(), kStage, "gradient buffer size mismatch");
  Engine engine(net);
  std::fill(grad_out.begin(), grad_out.end(), 0.0);
  const int chunks = ChunkCount(examples.size(), opts.chunk);
  std::vector<double> chunk_loss(chunks, 0.0);
  OrderedAccumulator reducer(grad_out);
  ParallelChunks(chunks, opts.threads, [&](int c) {
    thread_local Workspace ws;
    thread_local NetExample ex;
    thread_local std::vector<double> grad_buf;
    thread_local std::vector<double> dlogits;
    grad_buf.assign(net.ParamCount(), 0.0);
    double acc = 0.0;
    size_t lo = static_cast<size_t>(c) * opts.chunk;
    size_t hi = std::min(lo + opts.chunk, examples.size());
    for (size_t i = lo; i < hi; i++) {
      data.Materialize(examples[i], ex);
      engine.Forward(params, ex, ctx, ws);
      acc += engine.Loss(ws, ex, loss);
      engine.LossGradient(ws, ex, loss, dlogits);
      engine.Backward(params, ex, ws, dlogits, grad_buf);
    }
    chunk_loss[c] = acc;
    reducer.Submit(c, grad_buf);
  });
  const double scale = 1.0 / static_cast<double>(examples.size());
  for (auto& g : grad_out) g *= scale;
  return PairwiseSum(chunk_loss) * scale;
}

void BatchGaussNewtonProduct(const CompiledNet& net, std::span<const double> params,
                             const FrameDataset& data, std::span<const size_t> examples,
                             const StochasticContext& ctx, LossKind loss,
                             std::span<const double> v, std::span<double> out,
                             const BatchOptions& opts) {
  Require(!examples.empty(), kStage, "empty example batch");
  Require(v.size() == net.ParamCount() && out.size() == net.ParamCount(), kStage,
          "vector size mismatch");
  Engine engine(net);
  std::fill(out.begin(), out.end(), 0.0);
  const int chunks = ChunkCount(examples.size(), opts.chunk);
  OrderedAccumulator reducer(out);
  ParallelChunks(chunks, opts.threads, [&](int c) {
    thread_local Workspace ws;
    thread_local NetExample ex;
    thread_local std::vector<double> buf;
    thread_local std::vector<double> u;
    buf.assign(net.ParamCount(), 0.0);
    size_t lo = static_cast<size_t>(c) * opts.chunk;
    size_t hi = std::min(lo + opts.chunk, examples.size());
    for (size_t i = lo; i < hi; i++) {
      data.Materialize(examples[i], ex);
      engine.Forward(params, ex, ctx, ws);
      auto r = engine.RForward(params, ex, ws, v);
      engine.LossCurvatureProduct(ws, ex, loss, r, u);
      engine.Backward(params, ex, ws, u, buf);
    }
    reducer.Submit(c, buf);
  });
  const double scale = 1.0 / static_cast<double>(examples.size());
  for (auto& g : out) g *= scale;
}

// ---------------------------------------------------------------------------
// Parameter serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kParamMagic[4] = {'T', 'M', 'B', 'P'};
constexpr uint32_t kParamVersion = 1;

void WriteU32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void WriteU64(std::ostream& os, uint64_t v) {
  WriteU32(os, static_cast<uint32_t>(v));
  WriteU32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t ReadU32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t ReadU64(std::istream& is) {
  uint64_t lo = ReadU32(is);
  uint64_t hi = ReadU32(is);
  return lo | (hi << 32);
}

}  // namespace

void SaveParameters(const CompiledNet& net, std::span<const double> params,
                    const std::string& path) {
  Require(params.size() == net.ParamCount(), kStage, "parameter count mismatch");
  std::ofstream os(path, std::ios::binary);
  Require(static_cast<bool>(os), kStage, "cannot open " + path + " for writing");
  os.write(kParamMagic, 4);
  WriteU32(os, kParamVersion);
  WriteU64(os, params.size());
  auto table = net.OffsetTable();
  WriteU32(os, static_cast<uint32_t>(table.size()));
  for (const auto& [name, offset] : table) {
    WriteU32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    WriteU64(os, offset);
  }
  os.write(reinterpret_cast<const char*>(params.data()),
           static_cast<std::streamsize>(params.size() * sizeof(double)));
  WriteU64(os, Fnv1a64(params.data(), params.size() * sizeof(double)));
  Require(static_cast<bool>(os), kStage, "write failure on " + path);
}

std::vector<double> LoadParameters(const CompiledNet& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(static_cast<bool>(is), kStage, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  Require(static_cast<bool>(is) && std::memcmp(magic, kParamMagic, 4) == 0, kStage,
          path + ": bad magic");
  Require(ReadU32(is) == kParamVersion, kStage, path + ": unsupported version");
  uint64_t count = ReadU64(is);
  Require(count == net.ParamCount(), kStage,
          path + ": parameter count does not match the network");
  uint32_t layers = ReadU32(is);
  auto expected = net.OffsetTable();
  Require(layers == expected.size(), kStage, path + ": offset table does not match the network");
  for (const auto& [name, offset] : expected) {
    uint32_t len = ReadU32(is);
    std::string got(len, '\0');
    is.read(got.data(), len);
    uint64_t off = ReadU64(is);
    Require(static_cast<bool>(is) && got == name && off == offset, kStage,
            path + ": offset table mismatch at " + name);
  }
  std::vector<double> params(count);
  is.read(reinterpret_cast<char*>(params.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  uint64_t checksum = ReadU64(is);
  Require(static_cast<bool>(is), kStage, path + ": truncated payload");
  Require(checksum == Fnv1a64(params.data(), params.size() * sizeof(double)), kStage,
          path + ": checksum mismatch");
  return params;
}

}  // namespace net
}  // namespace timbre
