// Copyright 2026 Timbre Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "timbre/optim.hpp"

using namespace timbre;
using namespace timbre::optim;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd RandomSpd(int n, uint64_t key, double eig_lo = 0.5, double eig_hi = 10.0) {
  CounterRng rng(key);
  MatrixXd m(n, n);
  for (int r = 0; r < n; r++)
    for (int c = 0; c < n; c++) m(r, c) = rng.Gaussian();
  Eigen::HouseholderQR<MatrixXd> qr(m);
  MatrixXd q = qr.householderQ();
  VectorXd eigs(n);
  for (int i = 0; i < n; i++) eigs[i] = eig_lo + (eig_hi - eig_lo) * rng.Uniform();
  return q * eigs.asDiagonal() * q.transpose();
}

LinearOperator DenseOperator(const MatrixXd& a) {
  return [&a](std::span<const double> v, std::span<double> out) {
    Eigen::Map<const VectorXd> vv(v.data(), v.size());
    Eigen::Map<VectorXd> oo(out.data(), out.size());
    oo = a * vv;
  };
}

/// L(theta) = 1/2 theta.A theta - b.theta; the Gauss-Newton matrix is A.
class QuadraticObjective : public HFObjective {
 public:
  QuadraticObjective(MatrixXd a, VectorXd b) : a_(std::move(a)), b_(std::move(b)) {}
  size_t Dim() const override { return static_cast<size_t>(b_.size()); }
  void BeginIteration(int) override {}
  double Loss(std::span<const double> params) override {
    Eigen::Map<const VectorXd> t(params.data(), params.size());
    return 0.5 * t.dot(a_ * t) - b_.dot(t);
  }
  double Gradient(std::span<const double> params, std::span<double> grad) override {
    Eigen::Map<const VectorXd> t(params.data(), params.size());
    Eigen::Map<VectorXd> g(grad.data(), grad.size());
    g = a_ * t - b_;
    return Loss(params);
  }
  void CurvatureProduct(std::span<const double>, std::span<const double> v,
                        std::span<double> out) override {
    Eigen::Map<const VectorXd> vv(v.data(), v.size());
    Eigen::Map<VectorXd> oo(out.data(), out.size());
    oo = a_ * vv;
  }
  const MatrixXd& a() const { return a_; }
  const VectorXd& b() const { return b_; }

 private:
  MatrixXd a_;
  VectorXd b_;
};

std::vector<feat::UtteranceFeatures> ToyCorpus(int num_utts, int frames, int dim, int classes,
                                               uint64_t key, double separation = 2.0) {
  std::vector<feat::UtteranceFeatures> utts(num_utts);
  CounterRng rng(key);
  for (int u = 0; u < num_utts; u++) {
    auto& utt = utts[u];
    utt.utterance_id = "utt" + std::to_string(u);
    utt.speaker_id = "spk" + std::to_string(u % 3);
    utt.Resize(frames, dim, 1);
    utt.labels.resize(frames);
    for (int t = 0; t < frames; t++) {
      int label = static_cast<int>(rng.Below(classes));
      utt.labels[t] = label;
      for (int f = 0; f < dim; f++) {
        double center = (f % classes == label) ? separation : 0.0;
        utt.At(t, f, 0) = center + rng.Gaussian();
      }
    }
  }
  return utts;
}

}  // namespace

// ---------------------------------------------------------------------------
// CG
// ---------------------------------------------------------------------------

TEST_CASE("cg: identity operator returns -g in one iteration") {
  std::vector<double> g{1.0, -2.0, 3.0};
  auto identity = [](std::span<const double> v, std::span<double> out) {
    std::copy(v.begin(), v.end(), out.begin());
  };
  CGTrace trace;
  CGOptions opts;
  auto d = RunCg(identity, g, 0.0, opts, &trace);
  CHECK(trace.iterations == 1);
  CHECK(trace.termination == "residual");
  for (size_t i = 0; i < g.size(); i++) CHECK(d[i] == doctest::Approx(-g[i]).epsilon(1e-14));
}

TEST_CASE("cg: SPD systems solved exactly with orthogonal residuals and monotone phi") {
  for (int n : {8, 20}) {
    MatrixXd a = RandomSpd(n, 100 + n);
    CounterRng rng(7);
    VectorXd b(n);
    for (int i = 0; i < n; i++) b[i] = rng.Gaussian();
    std::vector<double> gradient(n);
    for (int i = 0; i < n; i++) gradient[i] = -b[i];  // solve A d = b

    CGOptions opts;
    opts.tolerance = 0.0;  // run to convergence
    opts.max_iters = n;
    opts.record_residuals = true;
    CGTrace trace;
    auto d = RunCg(DenseOperator(a), gradient, 0.0, opts, &trace);

    VectorXd expect = a.ldlt().solve(b);
    for (int i = 0; i < n; i++) CHECK(std::abs(d[i] - expect[i]) < 1e-8);
    CHECK(trace.iterations <= n);

    for (size_t i = 1; i < trace.phi.size(); i++) {
      CHECK(trace.phi[i] <= trace.phi[i - 1] + 1e-12 * (1.0 + std::abs(trace.phi[i - 1])));
    }
    for (size_t i = 0; i < trace.residuals.size(); i++) {
      for (size_t j = i + 1; j < trace.residuals.size(); j++) {
        Eigen::Map<const VectorXd> ri(trace.residuals[i].data(), n);
        Eigen::Map<const VectorXd> rj(trace.residuals[j].data(), n);
        double ni = ri.norm(), nj = rj.norm();
        if (ni < 1e-13 || nj < 1e-13) continue;
        CHECK(std::abs(ri.dot(rj)) / (ni * nj) < 1e-6);
      }
    }
  }
}

TEST_CASE("cg: negative curvature is reported") {
  MatrixXd a = -MatrixXd::Identity(4, 4);
  std::vector<double> g{1.0, 1.0, 1.0, 1.0};
  CGTrace trace;
  RunCg(DenseOperator(a), g, 0.0, CGOptions{}, &trace);
  CHECK(trace.termination == "negative_curvature");
}

TEST_CASE("update_lambda follows the LM rule") {
  CHECK(UpdateLambda(1.0, 0.5) == 1.0);
  CHECK(UpdateLambda(1.0, 0.1) == doctest::Approx(1.5));
  CHECK(UpdateLambda(1.5, 0.9) == doctest::Approx(1.0));
  CHECK(UpdateLambda(2.0, -0.5) == doctest::Approx(3.0));
}

// ---------------------------------------------------------------------------
// HF on the quadratic rig
// ---------------------------------------------------------------------------

TEST_CASE("hf: quadratic rig reaches the minimizer in one iteration") {
  const int n = 10;
  MatrixXd a = RandomSpd(n, 42);
  CounterRng rng(3);
  VectorXd b(n);
  for (int i = 0; i < n; i++) b[i] = rng.Gaussian();
  QuadraticObjective obj(a, b);

  std::vector<double> params(n, 0.0);
  double lambda = 0.0;
  CGOptions cg;
  cg.tolerance = 0.0;
  cg.max_iters = 10;
  HFIterationResult res = HfIteration(obj, params, lambda, cg, 1);

  VectorXd minimizer = a.ldlt().solve(b);
  CHECK(res.accepted);
  CHECK(res.trace.iterations <= 10);
  for (int i = 0; i < n; i++) CHECK(std::abs(params[i] - minimizer[i]) < 1e-8);
  // rho is essentially 1 on an exactly quadratic objective.
  CHECK(res.rho == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("hf: huge damping turns the step into scaled gradient descent") {
  const int n = 6;
  MatrixXd a = RandomSpd(n, 11);
  CounterRng rng(5);
  VectorXd b(n);
  for (int i = 0; i < n; i++) b[i] = rng.Gaussian();
  QuadraticObjective obj(a, b);

  std::vector<double> params(n);
  for (int i = 0; i < n; i++) params[i] = rng.Gaussian();
  std::vector<double> grad(n);
  obj.Gradient(params, grad);

  const double lambda = 1e8;
  CGOptions cg;
  cg.tolerance = 0.0;
  cg.max_iters = 20;
  CGTrace trace;
  LinearOperator op = [&](std::span<const double> v, std::span<double> out) {
    obj.CurvatureProduct(params, v, out);
  };
  auto d = RunCg(op, grad, lambda, cg, &trace);

  double dot = 0.0, dn = 0.0, gn = 0.0;
  for (int i = 0; i < n; i++) {
    dot += d[i] * (-grad[i]);
    dn += d[i] * d[i];
    gn += grad[i] * grad[i];
  }
  double cosine = dot / std::sqrt(dn * gn);
  CHECK(cosine > 0.9999);  // within 1% of the -g direction
  // And the magnitude approaches |g| / lambda.
  CHECK(std::sqrt(dn) == doctest::Approx(std::sqrt(gn) / lambda).epsilon(1e-4));
}

TEST_CASE("hf: step norm shrinks monotonically as damping grows") {
  const int n = 8;
  MatrixXd a = RandomSpd(n, 21);
  CounterRng rng(9);
  VectorXd b(n);
  for (int i = 0; i < n; i++) b[i] = rng.Gaussian();
  QuadraticObjective obj(a, b);
  std::vector<double> params(n, 0.25);
  std::vector<double> grad(n);
  obj.Gradient(params, grad);
  LinearOperator op = [&](std::span<const double> v, std::span<double> out) {
    obj.CurvatureProduct(params, v, out);
  };
  CGOptions cg;
  cg.tolerance = 0.0;
  cg.max_iters = 50;
  double prev = std::numeric_limits<double>::infinity();
  for (double lambda : {0.1, 1.0, 10.0, 100.0, 1e4}) {
    auto d = RunCg(op, grad, lambda, cg, nullptr);
    double norm = 0.0;
    for (double x : d) norm += x * x;
    norm = std::sqrt(norm);
    CHECK(norm < prev);
    prev = norm;
  }
}

// ---------------------------------------------------------------------------
// Network objective: fixed masks
// ---------------------------------------------------------------------------

TEST_CASE("hf objective: curvature product is bit-identical within an iteration") {
  auto utts = ToyCorpus(6, 10, 8, 3, 77);
  net::FrameDataset data(&utts, 1);
  net::NetworkSpec spec;
  spec.streams.push_back({net::FullLayer(12), net::ReluLayer(), net::DropoutLayer(0.5),
                          net::FullLayer(3), net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  net::DropoutPlan plan = network.MakeDropoutPlan(5, net::DropoutPlan::Mode::kFixedPerUtterance);

  NetHFObjective obj(network, data, &plan, HFDropoutMode::kFixedPerUtterance, 5, 0.5);
  obj.BeginIteration(1);
  std::vector<double> params = network.InitParameters(2);
  std::vector<double> grad(network.ParamCount());
  obj.Gradient(params, grad);

  CounterRng rng(4);
  std::vector<double> v(network.ParamCount());
  for (auto& x : v) x = rng.Gaussian();
  std::vector<double> out1(network.ParamCount()), out2(network.ParamCount());
  obj.CurvatureProduct(params, v, out1);
  obj.CurvatureProduct(params, v, out2);
  for (size_t i = 0; i < out1.size(); i++) CHECK(out1[i] == out2[i]);

  // Changing the registry between the gradient and curvature phases is the
  // hard error the fixed-mask rule exists to prevent.
  obj.DebugRepopulateRegistry(2);
  CHECK_THROWS_AS(obj.CurvatureProduct(params, v, out1), Error);
}

TEST_CASE("hf objective: curvature batch is a fixed utterance subset per iteration") {
  auto utts = ToyCorpus(8, 6, 6, 2, 11);
  net::FrameDataset data(&utts, 0);
  net::NetworkSpec spec;
  spec.streams.push_back({net::FullLayer(6), net::ReluLayer(), net::FullLayer(2),
                          net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  NetHFObjective obj(network, data, nullptr, HFDropoutMode::kNone, 9, 0.25);

  obj.BeginIteration(1);
  auto batch1 = obj.CurvatureUtterances();
  CHECK(batch1.size() == 2);  // ceil(0.25 * 8)
  obj.BeginIteration(2);
  auto batch2 = obj.CurvatureUtterances();
  CHECK(batch2.size() == 2);

  NetHFObjective obj_replay(network, data, nullptr, HFDropoutMode::kNone, 9, 0.25);
  obj_replay.BeginIteration(1);
  CHECK(obj_replay.CurvatureUtterances() == batch1);
}

TEST_CASE("hf: end-to-end determinism on a small CNN") {
  auto utts = ToyCorpus(6, 8, 8, 3, 13);
  net::FrameDataset data(&utts, 1);
  auto heldout_utts = ToyCorpus(2, 8, 8, 3, 14);
  net::FrameDataset heldout(&heldout_utts, 1);

  net::NetworkSpec spec;
  spec.streams.push_back({net::ConvLayer(net::Sharing::kFull, 2, 3, 3), net::ReluLayer(),
                          net::PoolLayer(net::PoolKind::kMax, net::Axis::kFrequency, 2, 2),
                          net::FullLayer(8), net::ReluLayer(), net::DropoutLayer(0.5),
                          net::FullLayer(3), net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  net::DropoutPlan plan = network.MakeDropoutPlan(3, net::DropoutPlan::Mode::kFixedPerUtterance);

  HFConfig config;
  config.iterations = 3;
  config.cg.max_iters = 12;
  config.dropout_mode = HFDropoutMode::kFixedPerUtterance;
  config.master_seed = 3;

  std::vector<double> params1 = network.InitParameters(1);
  std::vector<double> params2 = params1;
  TrainResult r1 = TrainHf(network, data, heldout, &plan, config, params1);
  TrainResult r2 = TrainHf(network, data, heldout, &plan, config, params2);
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (size_t i = 0; i < params1.size(); i++) CHECK(params1[i] == params2[i]);
  for (size_t i = 0; i < r1.rows.size(); i++) {
    CHECK(r1.rows[i].loss == r2.rows[i].loss);
    CHECK(r1.rows[i].heldout_loss == r2.rows[i].heldout_loss);
    CHECK(r1.rows[i].lambda == r2.rows[i].lambda);
  }
  // Accepted steps never increase the fixed-mask training loss.
  for (const auto& trace : r1.traces) {
    for (size_t i = 1; i < trace.phi.size(); i++) {
      CHECK(trace.phi[i] <= trace.phi[i - 1] + 1e-10 * (1.0 + std::abs(trace.phi[i - 1])));
    }
  }
}

// ---------------------------------------------------------------------------
// SGD schedule
// ---------------------------------------------------------------------------

TEST_CASE("sgd: convex toy improves held-out loss over the first epochs") {
  auto utts = ToyCorpus(10, 20, 6, 2, 31, 3.0);
  net::FrameDataset data(&utts, 0);
  auto heldout_utts = ToyCorpus(3, 20, 6, 2, 32, 3.0);
  net::FrameDataset heldout(&heldout_utts, 0);

  net::NetworkSpec spec;
  spec.streams.push_back({net::FullLayer(2), net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  std::vector<double> params(network.ParamCount(), 0.0);

  SGDSchedule sched;
  sched.initial_rate = 0.2;
  sched.patience = 1e-9;
  sched.max_epochs = 5;
  TrainResult res = SgdTrain(network, data, heldout, sched, nullptr, 17, params);
  REQUIRE(res.rows.size() >= 3);
  CHECK(res.rows[1].heldout_loss < res.rows[0].heldout_loss);
  CHECK(res.rows[2].heldout_loss < res.rows[1].heldout_loss);
  CHECK_FALSE(res.diverged);
}

TEST_CASE("sgd: always-improving run never anneals") {
  auto utts = ToyCorpus(10, 20, 6, 2, 41, 3.0);
  net::FrameDataset data(&utts, 0);
  auto heldout_utts = ToyCorpus(3, 20, 6, 2, 42, 3.0);
  net::FrameDataset heldout(&heldout_utts, 0);
  net::NetworkSpec spec;
  spec.streams.push_back({net::FullLayer(2), net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  std::vector<double> params(network.ParamCount(), 0.0);

  SGDSchedule sched;
  sched.initial_rate = 0.2;
  sched.patience = 1e-12;
  sched.max_epochs = 4;
  TrainResult res = SgdTrain(network, data, heldout, sched, nullptr, 19, params);
  CHECK(res.anneals == 0);
  CHECK(res.rows.size() == 4);  // ran to the epoch cap
}

TEST_CASE("sgd: never-improving run anneals exactly 5 times, halving the rate") {
  auto utts = ToyCorpus(4, 10, 5, 2, 51);
  net::FrameDataset data(&utts, 0);
  net::NetworkSpec spec;
  spec.streams.push_back({net::FullLayer(2), net::SoftmaxLayer()});
  net::CompiledNet network = net::CompiledNet::Compile(spec, data.InputShape());
  std::vector<double> params(network.ParamCount(), 0.0);

  SGDSchedule sched;
  sched.initial_rate = 0.5;
  sched.patience = 1e18;  // no improvement can ever satisfy this
  sched.max_anneals = 5;
  sched.max_epochs = 100;
  TrainResult res = SgdTrain(network, data, data, sched, nullptr, 23, params);
  CHECK(res.anneals == 5);
  // Epoch 1 has no previous held-out loss to compare against; the five
  // failed comparisons follow, and training stops right after the fifth.
  REQUIRE(res.rows.size() == 6);
  CHECK_FALSE(res.rows[0].annealed);
  for (int k = 1; k < 6; k++) {
    CHECK(res.rows[k].annealed);
    CHECK(res.rows[k].rate == 0.5 / std::pow(2.0, k - 1));  // exact halving
  }
}
