// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "timbre/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace timbre {
namespace optim {

namespace {

constexpr char kStage[] = "optim";

double Dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); i++) acc += a[i] * b[i];
  return acc;
}

bool AllFinite(std::span<const double> a) {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conjugate gradient
// ---------------------------------------------------------------------------

std::vector<double> RunCg(const LinearOperator& curvature, std::span<const double> gradient,
                          double lambda, const CGOptions& opts, CGTrace* trace) {
  const size_t n = gradient.size();
  Require(lambda >= 0.0, kStage, "negative damping");
  CGTrace local;
  CGTrace& tr = trace ? *trace : local;
  tr = CGTrace{};

  // Solve (A + lambda I) d = -g.
  std::vector<double> d(n, 0.0);
  std::vector<double> r(gradient.begin(), gradient.end());
  for (auto& x : r) x = -x;  // r = b - A d = -g at d = 0
  std::vector<double> p = r;
  std::vector<double> ap(n, 0.0);
  double rr = Dot(r, r);
  const double b_norm = std::sqrt(rr);

  std::vector<double> best = d;
  double best_phi = 0.0;  // phi(0) = 0

  for (int k = 1; k <= opts.max_iters; k++) {
    curvature(p, ap);
    if (lambda != 0.0) {
      for (size_t i = 0; i < n; i++) ap[i] += lambda * p[i];
    }
    double p_ap = Dot(p, ap);
    if (!std::isfinite(p_ap)) {
      tr.termination = "non_finite";
      break;
    }
    if (p_ap <= 0.0) {
      tr.termination = "negative_curvature";
      break;
    }
    double alpha = rr / p_ap;
    for (size_t i = 0; i < n; i++) {
      d[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    double rr_new = Dot(r, r);
    if (!std::isfinite(rr_new) || !AllFinite(d)) {
      tr.termination = "non_finite";
      break;
    }

    // phi(d) = g.d + 1/2 d.(A+lambda I)d = 1/2 (g.d - d.r), using the
    // residual recurrence.
    double phi = 0.5 * (Dot(gradient, d) - Dot(d, r));
    tr.phi.push_back(phi);
    tr.residual_norm.push_back(std::sqrt(rr_new));
    if (opts.record_residuals) tr.residuals.push_back(r);
    tr.iterations = k;
    if (phi < best_phi) {
      best_phi = phi;
      best = d;
    }

    if (std::sqrt(rr_new) <= opts.residual_eps * std::max(b_norm, 1.0)) {
      tr.termination = "residual";
      break;
    }
    int window = std::max(10, static_cast<int>(std::ceil(0.1 * k)));
    if (k > window && phi < 0.0) {
      double past = tr.phi[static_cast<size_t>(k - window - 1)];
      double progress = (past - phi) / (-phi);
      if (progress < window * opts.tolerance) {
        tr.termination = "progress";
        break;
      }
    }

    double beta = rr_new / rr;
    rr = rr_new;
    for (size_t i = 0; i < n; i++) p[i] = r[i] + beta * p[i];
  }
  if (tr.termination.empty()) tr.termination = "max_iters";
  return best;
}

double UpdateLambda(double lambda, double rho) {
  Require(std::isfinite(lambda), kStage, "non-finite damping");
  if (!std::isfinite(rho) || rho < 0.25) return lambda * 1.5;
  if (rho > 0.75) return lambda * (2.0 / 3.0);
  return lambda;
}

// ---------------------------------------------------------------------------
// HF iteration
// ---------------------------------------------------------------------------

HFIterationResult HfIteration(HFObjective& objective, std::vector<double>& params, double& lambda,
                              const CGOptions& cg, int hf_iteration) {
  HFIterationResult res;
  objective.BeginIteration(hf_iteration);

  std::vector<double> grad(objective.Dim(), 0.0);
  res.loss_before = objective.Gradient(params, grad);
  Require(std::isfinite(res.loss_before), kStage, "non-finite loss");

  LinearOperator op = [&](std::span<const double> v, std::span<double> out) {
    objective.CurvatureProduct(params, v, out);
  };

  std::vector<double> direction = RunCg(op, grad, lambda, cg, &res.trace);
  if (res.trace.termination == "negative_curvature") {
    // Raise the damping and restart once.
    lambda *= 1.5;
    res.note = "negative curvature, damping raised and CG restarted";
    direction = RunCg(op, grad, lambda, cg, &res.trace);
    if (res.trace.termination == "negative_curvature") {
      res.aborted = true;
      res.note = "negative curvature twice, iteration aborted";
      return res;
    }
  }

  // Predicted reduction under the damped quadratic model.
  double phi = res.trace.phi.empty() ? 0.0 : *std::min_element(res.trace.phi.begin(),
                                                               res.trace.phi.end());
  res.predicted_reduction = -phi;

  std::vector<double> candidate(params.size());
  for (size_t i = 0; i < params.size(); i++) candidate[i] = params[i] + direction[i];
  res.candidate_loss = objective.Loss(candidate);

  double actual = res.loss_before - res.candidate_loss;
  res.rho = res.predicted_reduction > 0.0
                ? actual / res.predicted_reduction
                : -std::numeric_limits<double>::infinity();
  lambda = UpdateLambda(lambda, res.rho);

  if (actual > 0.0 && std::isfinite(res.candidate_loss)) {
    params = std::move(candidate);
    res.accepted = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Network objective
// ---------------------------------------------------------------------------

NetHFObjective::NetHFObjective(const net::CompiledNet& network, const net::FrameDataset& data,
                               const net::DropoutPlan* plan, HFDropoutMode mode,
                               uint64_t master_seed, double curvature_fraction,
                               net::BatchOptions batch)
    : network_(&network),
      data_(&data),
      plan_(plan),
      mode_(mode),
      master_seed_(master_seed),
      curvature_fraction_(curvature_fraction),
      batch_(batch) {
  Require(curvature_fraction > 0.0 && curvature_fraction <= 1.0, kStage,
          "curvature fraction must lie in (0, 1]");
  gradient_examples_.resize(data.NumExamples());
  std::iota(gradient_examples_.begin(), gradient_examples_.end(), 0);
}

void NetHFObjective::BeginIteration(int hf_iteration) {
  hf_iteration_ = hf_iteration;
  evaluation_counter_ = 0;
  gradient_done_ = false;

  // Fixed curvature batch for all CG iterations: a deterministic sample of
  // the utterances, redrawn once per HF iteration.
  const int num_utts = data_->NumUtterances();
  std::vector<int> order(num_utts);
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(MixKey(master_seed_, 0xcb0105u, static_cast<uint64_t>(hf_iteration)));
  for (int i = num_utts - 1; i > 0; i--) {
    int j = static_cast<int>(rng.Below(static_cast<uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }
  int take = std::max(1, static_cast<int>(std::ceil(curvature_fraction_ * num_utts)));
  curvature_utterances_.assign(order.begin(), order.begin() + take);
  std::sort(curvature_utterances_.begin(), curvature_utterances_.end());
  curvature_examples_ = data_->ExamplesOfUtterances(curvature_utterances_);

  if (mode_ == HFDropoutMode::kFixedPerUtterance) {
    AssignDropoutSeeds(registry_, master_seed_, hf_iteration, data_->UtteranceIds(),
                       network_->StochasticLayerIds());
  }
}

void NetHFObjective::DebugRepopulateRegistry(int hf_iteration) {
  AssignDropoutSeeds(registry_, master_seed_, hf_iteration, data_->UtteranceIds(),
                     network_->StochasticLayerIds());
}

net::StochasticContext NetHFObjective::MakeContext() {
  net::StochasticContext ctx;
  ctx.phase = net::Phase::kTrain;
  ctx.master_seed = master_seed_;
  switch (mode_) {
    case HFDropoutMode::kNone:
      ctx.plan = nullptr;
      // Stochastic pooling, when present, keeps one fixed draw per
      // iteration so the curvature operator stays fixed.
      ctx.salt = static_cast<uint64_t>(hf_iteration_);
      break;
    case HFDropoutMode::kFixedPerUtterance:
      ctx.plan = plan_;
      ctx.registry = &registry_;
      break;
    case HFDropoutMode::kPerCgIteration:
      ctx.plan = plan_;
      ctx.salt = MixKey(static_cast<uint64_t>(hf_iteration_), 0x706572u, evaluation_counter_++);
      break;
  }
  return ctx;
}

double NetHFObjective::Loss(std::span<const double> params) {
  return net::BatchLoss(*network_, params, *data_, gradient_examples_, MakeContext(),
                        net::LossKind::kSoftmaxCrossEntropy, batch_);
}

double NetHFObjective::Gradient(std::span<const double> params, std::span<double> grad) {
  net::StochasticContext ctx = MakeContext();
  if (mode_ == HFDropoutMode::kFixedPerUtterance) {
    gradient_fingerprint_ = registry_.Fingerprint();
    gradient_done_ = true;
  }
  return net::BatchGradient(*network_, params, *data_, gradient_examples_, ctx,
                            net::LossKind::kSoftmaxCrossEntropy, grad, batch_);
}

void NetHFObjective::CurvatureProduct(std::span<const double> params, std::span<const double> v,
                                      std::span<double> out) {
  net::StochasticContext ctx = MakeContext();
  if (mode_ == HFDropoutMode::kFixedPerUtterance) {
    Require(gradient_done_ && registry_.Fingerprint() == gradient_fingerprint_, kStage,
            "dropout seed registry changed between the gradient and curvature phases of HF "
            "iteration " +
                std::to_string(hf_iteration_));
  }
  net::BatchGaussNewtonProduct(*network_, params, *data_, curvature_examples_, ctx,
                               net::LossKind::kSoftmaxCrossEntropy, v, out, batch_);
}

void AssignDropoutSeeds(net::SeedRegistry& registry, uint64_t master_seed, int hf_iteration,
                        std::span<const std::string> utterance_ids,
                        std::span<const int> layer_ids) {
  registry.Populate(master_seed, hf_iteration, utterance_ids, layer_ids);
}

// ---------------------------------------------------------------------------
// HF training loop
// ---------------------------------------------------------------------------

TrainResult TrainHf(const net::CompiledNet& network, const net::FrameDataset& train,
                    const net::FrameDataset& heldout, const net::DropoutPlan* plan,
                    const HFConfig& config, std::vector<double>& params,
                    net::BatchOptions batch) {
  Require(params.size() == network.ParamCount(), kStage, "parameter size mismatch");
  NetHFObjective objective(network, train, plan, config.dropout_mode, config.master_seed,
                           config.curvature_fraction, batch);

  std::vector<size_t> heldout_examples(heldout.NumExamples());
  std::iota(heldout_examples.begin(), heldout_examples.end(), 0);
  net::StochasticContext eval_ctx;  // dropout off, stochastic pooling averaged

  TrainResult result;
  double lambda = config.lambda_init;
  for (int iter = 1; iter <= config.iterations; iter++) {
    HFIterationResult hf = HfIteration(objective, params, lambda, config.cg, iter);
    TrainRow row;
    row.iteration = iter;
    row.loss = hf.accepted ? hf.candidate_loss : hf.loss_before;
    row.heldout_loss =
        net::BatchLoss(network, params, heldout, heldout_examples, eval_ctx,
                       net::LossKind::kSoftmaxCrossEntropy, batch);
    row.lambda = lambda;
    row.cg_iters = hf.trace.iterations;
    row.cg_stop = hf.trace.termination;
    row.accepted = hf.accepted;
    row.rho = hf.rho;
    result.rows.push_back(row);
    result.traces.push_back(hf.trace);
    if (hf.aborted) {
      result.note = hf.note;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

TrainResult SgdTrain(const net::CompiledNet& network, const net::FrameDataset& train,
                     const net::FrameDataset& heldout, const SGDSchedule& schedule,
                     const net::DropoutPlan* plan, uint64_t master_seed,
                     std::vector<double>& params, net::BatchOptions batch) {
  Require(params.size() == network.ParamCount(), kStage, "parameter size mismatch");
  Require(schedule.initial_rate >= 0.0 && schedule.minibatch_size >= 1, kStage, "bad schedule");
  Require(schedule.anneal_factor > 1.0, kStage, "anneal factor must exceed 1");

  const size_t n = train.NumExamples();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<size_t> heldout_examples(heldout.NumExamples());
  std::iota(heldout_examples.begin(), heldout_examples.end(), 0);
  net::StochasticContext eval_ctx;

  TrainResult result;
  std::vector<double> grad(network.ParamCount());
  double rate = schedule.initial_rate;
  double prev_heldout = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= schedule.max_epochs; epoch++) {
    // Deterministic reshuffle per epoch.
    CounterRng rng(MixKey(master_seed, 0x5347440eULL, static_cast<uint64_t>(epoch)));
    for (size_t i = n - 1; i > 0; i--) {
      size_t j = rng.Below(i + 1);
      std::swap(order[i], order[j]);
    }

    std::vector<double> checkpoint = params;
    std::vector<double> batch_losses;
    size_t step = 0;
    for (size_t lo = 0; lo < n; lo += schedule.minibatch_size, step++) {
      size_t hi = std::min(lo + schedule.minibatch_size, n);
      std::span<const size_t> minibatch(order.data() + lo, hi - lo);
      net::StochasticContext ctx;
      ctx.phase = net::Phase::kTrain;
      ctx.plan = plan;
      ctx.master_seed = master_seed;
      // Masks are redrawn for every presentation.
      ctx.salt = MixKey(static_cast<uint64_t>(epoch), step);
      double loss = net::BatchGradient(network, params, train, minibatch, ctx,
                                       net::LossKind::kSoftmaxCrossEntropy, grad, batch);
      batch_losses.push_back(loss);
      for (size_t i = 0; i < params.size(); i++) params[i] -= rate * grad[i];
    }

    double train_loss = PairwiseSum(batch_losses) / static_cast<double>(batch_losses.size());
    if (!std::isfinite(train_loss) ||
        !std::all_of(params.begin(), params.end(), [](double x) { return std::isfinite(x); })) {
      params = checkpoint;
      result.diverged = true;
      result.note = "divergence at epoch " + std::to_string(epoch) + ", checkpoint restored";
      break;
    }

    double heldout_loss = net::BatchLoss(network, params, heldout, heldout_examples, eval_ctx,
                                         net::LossKind::kSoftmaxCrossEntropy, batch);
    TrainRow row;
    row.iteration = epoch;
    row.loss = train_loss;
    row.heldout_loss = heldout_loss;
    row.rate = rate;

    if (prev_heldout - heldout_loss < schedule.patience) {
      rate /= schedule.anneal_factor;
      result.anneals++;
      row.annealed = true;
    }
    prev_heldout = heldout_loss;
    result.rows.push_back(row);
    if (result.anneals >= schedule.max_anneals) break;
  }
  return result;
}

}  // namespace optim
}  // namespace timbre
