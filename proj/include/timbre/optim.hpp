// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Training: SGD with the halve-on-plateau schedule, and Hessian-free
// optimization (damped Gauss-Newton quadratic model minimized by CG over a
// fixed curvature batch) with dropout masks held fixed per utterance across
// all CG iterations of one HF iteration.

#ifndef TIMBRE_OPTIM_HPP
#define TIMBRE_OPTIM_HPP

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "timbre/net.hpp"

namespace timbre {
namespace optim {

// ---------------------------------------------------------------------------
// Conjugate gradient
// ---------------------------------------------------------------------------

struct CGOptions {
  double tolerance = 5e-4;  // relative per-iteration progress over the window
  int max_iters = 50;
  double residual_eps = 1e-12;  // absolute residual stop, relative to |b|
  bool record_residuals = false;
};

struct CGTrace {
  std::vector<double> phi;            // quadratic model value after each iteration
  std::vector<double> residual_norm;  // |r| after each iteration
  std::vector<std::vector<double>> residuals;  // populated when recorded
  std::string termination;  // progress | residual | max_iters | negative_curvature | non_finite
  int iterations = 0;
};

/// Applies the undamped curvature matrix: out = A * v.
using LinearOperator = std::function<void(std::span<const double>, std::span<double>)>;

/// Minimizes phi(d) = g.d + 1/2 d.(A + lambda I).d by conjugate gradient
/// from d = 0. Terminates when the relative phi progress over a trailing
/// window of max(10, ceil(0.1 k)) iterations falls below the tolerance, on
/// a vanishing residual, or at max_iters. Returns the best-phi iterate.
std::vector<double> RunCg(const LinearOperator& curvature, std::span<const double> gradient,
                          double lambda, const CGOptions& opts, CGTrace* trace = nullptr);

/// Levenberg-Marquardt damping update from the reduction ratio.
double UpdateLambda(double lambda, double rho);

// ---------------------------------------------------------------------------
// Hessian-free driver
// ---------------------------------------------------------------------------

/// What one HF iteration needs from the objective. BeginIteration fixes the
/// iteration's curvature batch and stochastic choices; Loss/Gradient run on
/// the gradient batch, CurvatureProduct on the curvature batch.
class HFObjective {
 public:
  virtual ~HFObjective() = default;
  virtual size_t Dim() const = 0;
  virtual void BeginIteration(int hf_iteration) = 0;
  virtual double Loss(std::span<const double> params) = 0;
  /// Returns the loss; fills the gradient.
  virtual double Gradient(std::span<const double> params, std::span<double> grad) = 0;
  virtual void CurvatureProduct(std::span<const double> params, std::span<const double> v,
                                std::span<double> out) = 0;
};

struct HFIterationResult {
  CGTrace trace;
  double loss_before = 0.0;
  double candidate_loss = 0.0;
  double predicted_reduction = 0.0;
  double rho = 0.0;
  bool accepted = false;
  bool aborted = false;
  std::string note;
};

/// One HF iteration: gradient, CG solve of the damped quadratic model, LM
/// damping update from the reduction ratio, and rho-gated acceptance. On a
/// negative-curvature breakdown the damping is raised and CG restarted
/// once; a second breakdown aborts the iteration.
HFIterationResult HfIteration(HFObjective& objective, std::vector<double>& params,
                              double& lambda, const CGOptions& cg, int hf_iteration);

// ---------------------------------------------------------------------------
// Network-backed objective
// ---------------------------------------------------------------------------

enum class HFDropoutMode { kNone, kFixedPerUtterance, kPerCgIteration };

/// Cross-entropy objective over a frame dataset. In fixed-per-utterance
/// mode, BeginIteration writes the per-(utterance, layer) seed registry for
/// the HF iteration and every evaluation reads it; the curvature product
/// refuses to run against a different registry generation than the
/// gradient used. In per-CG-iteration mode every evaluation draws fresh
/// masks, which is exactly the conjugacy-breaking behavior under study.
class NetHFObjective : public HFObjective {
 public:
  NetHFObjective(const net::CompiledNet& network, const net::FrameDataset& data,
                 const net::DropoutPlan* plan, HFDropoutMode mode, uint64_t master_seed,
                 double curvature_fraction, net::BatchOptions batch = {});

  size_t Dim() const override { return network_->ParamCount(); }
  void BeginIteration(int hf_iteration) override;
  double Loss(std::span<const double> params) override;
  double Gradient(std::span<const double> params, std::span<double> grad) override;
  void CurvatureProduct(std::span<const double> params, std::span<const double> v,
                        std::span<double> out) override;

  const net::SeedRegistry& Registry() const { return registry_; }
  const std::vector<int>& CurvatureUtterances() const { return curvature_utterances_; }
  /// Test hook: repopulates the registry mid-iteration so the gradient /
  /// curvature consistency check can be exercised.
  void DebugRepopulateRegistry(int hf_iteration);

 private:
  net::StochasticContext MakeContext();

  const net::CompiledNet* network_;
  const net::FrameDataset* data_;
  const net::DropoutPlan* plan_;
  HFDropoutMode mode_;
  uint64_t master_seed_;
  double curvature_fraction_;
  net::BatchOptions batch_;

  net::SeedRegistry registry_;
  std::vector<size_t> gradient_examples_;
  std::vector<size_t> curvature_examples_;
  std::vector<int> curvature_utterances_;
  int hf_iteration_ = -1;
  uint64_t evaluation_counter_ = 0;       // per-CG mask churn in redraw mode
  uint64_t gradient_fingerprint_ = 0;     // registry generation the gradient used
  bool gradient_done_ = false;
};

/// Writes one seed per (utterance, stochastic layer) for the HF iteration.
void AssignDropoutSeeds(net::SeedRegistry& registry, uint64_t master_seed, int hf_iteration,
                        std::span<const std::string> utterance_ids,
                        std::span<const int> layer_ids);

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

struct TrainRow {
  int iteration = 0;
  double loss = 0.0;
  double heldout_loss = 0.0;
  double lambda = 0.0;
  int cg_iters = 0;
  std::string cg_stop;
  bool accepted = true;
  double rho = 0.0;
  double rate = 0.0;      // SGD only
  bool annealed = false;  // SGD only
};

struct TrainResult {
  std::vector<TrainRow> rows;
  std::vector<CGTrace> traces;  // HF only
  int anneals = 0;              // SGD only
  bool diverged = false;
  std::string note;
};

struct HFConfig {
  int iterations = 10;
  double lambda_init = 1.0;
  CGOptions cg;
  double curvature_fraction = 0.25;
  HFDropoutMode dropout_mode = HFDropoutMode::kNone;
  uint64_t master_seed = 0;
};

/// Full HF training loop; heldout_loss is evaluated once per iteration
/// with stochastic layers disabled.
TrainResult TrainHf(const net::CompiledNet& network, const net::FrameDataset& train,
                    const net::FrameDataset& heldout, const net::DropoutPlan* plan,
                    const HFConfig& config, std::vector<double>& params,
                    net::BatchOptions batch = {});

struct SGDSchedule {
  double initial_rate = 0.1;
  double anneal_factor = 2.0;  // divisor applied on plateau
  double patience = 1e-3;      // required held-out improvement per epoch
  int max_anneals = 5;
  int minibatch_size = 32;
  int max_epochs = 50;
};

/// Minibatch SGD with per-presentation dropout masks. After every full
/// pass the held-out loss is measured; when it fails to improve by the
/// patience the rate is divided by the anneal factor, and training stops
/// after max_anneals reductions. Divergence restores the last epoch
/// checkpoint.
TrainResult SgdTrain(const net::CompiledNet& network, const net::FrameDataset& train,
                     const net::FrameDataset& heldout, const SGDSchedule& schedule,
                     const net::DropoutPlan* plan, uint64_t master_seed,
                     std::vector<double>& params, net::BatchOptions batch = {});

}  // namespace optim
}  // namespace timbre

#endif  // TIMBRE_OPTIM_HPP
