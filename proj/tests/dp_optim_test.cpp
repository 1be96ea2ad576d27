//
// Copyright 2026 The dplora Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "dplora/autodiff.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/nn.hpp"
#include "dplora/ops.hpp"
#include "grad_check.hpp"

namespace dplora {
namespace {

GradientMap MakeMap(std::vector<std::vector<Real>> values) {
  GradientMap g;
  for (std::size_t i = 0; i < values.size(); ++i) g.names.push_back("p" + std::to_string(i));
  g.values = std::move(values);
  return g;
}

GradientMap RandomMap(SeededRng& rng, double scale) {
  std::vector<std::vector<Real>> v{std::vector<Real>(5), std::vector<Real>(3), std::vector<Real>(7)};
  for (auto& p : v)
    for (auto& x : p) x = static_cast<Real>(scale * rng.Normal());
  return MakeMap(std::move(v));
}

// Norm of the concatenated vector, computed independently of GradientMap.
double ConcatNorm(const GradientMap& g) {
  std::vector<double> flat;
  for (const auto& p : g.values) flat.insert(flat.end(), p.begin(), p.end());
  double s = 0.0;
  for (double x : flat) s += x * x;
  return std::sqrt(s);
}

TEST_CASE("clip a 3-4-5 vector") {
  GradientMap c = ClipPerSample(MakeMap({{3, 4}}), 1.0);
  CHECK(c.values[0][0] == doctest::Approx(0.6));
  CHECK(c.values[0][1] == doctest::Approx(0.8));
}

TEST_CASE("clip leaves small gradients untouched") {
  GradientMap g = MakeMap({{0.3f, 0.4f}});
  CHECK(ClipPerSample(g, 1.0).values == g.values);
}

TEST_CASE("clip uses one global norm across parameters") {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    GradientMap g = RandomMap(rng, trial % 2 ? 0.2 : 2.0);
    GradientMap c = ClipPerSample(g, 2.0);
    CHECK(std::abs(ConcatNorm(c) - std::min(ConcatNorm(g), 2.0)) < 1e-6);
    // Direction preserved: same ratio across every coordinate.
    const double ratio = c.values[1][0] / g.values[1][0];
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < g.values[p].size(); ++i)
        CHECK(c.values[p][i] == doctest::Approx(ratio * g.values[p][i]).epsilon(1e-5));
  }
}

TEST_CASE("clip rejects non-finite entries") {
  GradientMap g = MakeMap({{1.0f, std::numeric_limits<Real>::quiet_NaN()}});
  CHECK_THROWS_AS(ClipPerSample(g, 1.0), NumericalError);
  CHECK_THROWS_AS(ClipPerSample(MakeMap({{1.0f}}), 0.0), std::invalid_argument);
}

TEST_CASE("clip bound holds for every per-sample map over 1000 random batches") {
  SeededRng rng(17);
  const double c = 1.0;
  int checked = 0, violations = 0;
  for (int batch = 0; batch < 1000; ++batch) {
    const int b = 1 + static_cast<int>(rng.UniformInt(8));
    for (int i = 0; i < b; ++i) {
      GradientMap g = RandomMap(rng, std::exp(4.0 * rng.Uniform() - 2.0));
      ++checked;
      if (ConcatNorm(ClipPerSample(g, c)) > c + 1e-6) ++violations;
    }
  }
  CHECK(checked > 1000);
  CHECK(violations == 0);
}

TEST_CASE("one example changes the pre-noise sum by at most C") {
  SeededRng rng(23);
  const double c = 1.5;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<GradientMap> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(RandomMap(rng, 1.0));
    GradientMap layout = batch[0].ZerosLike();
    SeededRng unused(0);
    // sigma = 0 and expected batch 1 expose the raw clipped sum.
    auto with = Privatize(batch, layout, c, 0.0, 1.0, unused);
    std::vector<GradientMap> without(batch.begin(), batch.end() - 1);
    auto less = Privatize(without, layout, c, 0.0, 1.0, unused);
    GradientMap diff = with.grad;
    diff.AddScaled(less.grad, -1.0f);
    CHECK(ConcatNorm(diff) <= c + 1e-5);
  }
}

TEST_CASE("noiseless privatize is the clipped sum over the expected batch") {
  GradientMap g1 = MakeMap({{0.1f, 0.2f}}), g2 = MakeMap({{0.3f, -0.1f}});
  std::vector<GradientMap> batch{g1, g2};
  SeededRng rng(1);
  auto out = Privatize(batch, g1.ZerosLike(), 1.0, 0.0, 4.0, rng);
  CHECK(out.non_private);
  CHECK(out.realized_batch == 2);
  CHECK(out.grad.values[0][0] == doctest::Approx((0.1 + 0.3) / 4.0));
  CHECK(out.grad.values[0][1] == doctest::Approx((0.2 - 0.1) / 4.0));
  CHECK(rng.counter() == 0);
}

TEST_CASE("an empty Poisson draw yields pure noise") {
  GradientMap layout = MakeMap({{0, 0, 0}});
  SeededRng rng(9), replay(9);
  auto out = Privatize({}, layout, 2.0, 1.5, 8.0, rng);
  for (int i = 0; i < 3; ++i) {
    const double expected = 1.5 * 2.0 / 8.0 * replay.Normal();
    CHECK(out.grad.values[0][i] == doctest::Approx(expected).epsilon(1e-6));
    CHECK(out.grad.values[0][i] != 0.0f);
  }
  SeededRng r2(1);
  CHECK_THROWS_AS(Privatize({}, layout, 1.0, 0.0, 8.0, r2), std::invalid_argument);
}

TEST_CASE("noise term has standard deviation sigma * C / expected_batch") {
  GradientMap layout = MakeMap({std::vector<Real>(10)});
  SeededRng rng(2024);
  double sum = 0.0, sq = 0.0;
  const int draws = 10000;
  for (int d = 0; d < draws / 10; ++d) {
    auto out = Privatize({}, layout, 1.0, 1.0, 4.0, rng);
    for (Real v : out.grad.values[0]) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
  }
  const double mean = sum / draws;
  const double sd = std::sqrt(sq / draws - mean * mean);
  const double se = 0.25 / std::sqrt(2.0 * draws);
  CHECK(std::abs(sd - 0.25) < 3.0 * se);
}

TEST_CASE("sgd and adam update arithmetic") {
  ParamStore params;
  params.Add("w", Tensor::FromData({1}, {1.0f}));
  Optimizer sgd({.rule = UpdateRule::kSgd, .learning_rate = 0.1});
  GradientMap g{{"w"}, {{0.5f}}};
  sgd.Apply(params, g);
  CHECK(params.Get("w").at(0) == doctest::Approx(0.95));

  ParamStore p2;
  p2.Add("w", Tensor::FromData({2}, {0.0f, 0.0f}));
  Optimizer adam({.rule = UpdateRule::kAdam, .learning_rate = 1e-3});
  adam.Apply(p2, GradientMap{{"w"}, {{0.7f, -3.0f}}});
  CHECK(p2.Get("w").at(0) == doctest::Approx(-1e-3).epsilon(1e-4));
  CHECK(p2.Get("w").at(1) == doctest::Approx(1e-3).epsilon(1e-4));
}

TEST_CASE("optimizer rejects frozen parameters and shape mismatches") {
  ParamStore params;
  params.Add("w", Tensor::FromData({2}, {1.0f, 1.0f}));
  Optimizer sgd({.rule = UpdateRule::kSgd, .learning_rate = 0.1});
  CHECK_THROWS_AS(sgd.Apply(params, GradientMap{{"w"}, {{1.0f}}}), ShapeError);
  params.SetTrainable("w", false);
  CHECK_THROWS(sgd.Apply(params, GradientMap{{"w"}, {{1.0f, 1.0f}}}));
}

struct TinyNet {
  ParamStore params;
  Linear l1, l2;
  explicit TinyNet(std::uint64_t seed) {
    SeededRng rng(seed);
    l1 = Linear::Create(params, "l1", 4, 6, true, rng);
    l2 = Linear::Create(params, "l2", 6, 1, true, rng);
  }
  Tensor Losses(const Tensor& x, const Tensor& y) const {
    Tensor out = l2.Forward(ops::Silu(l1.Forward(x)));
    return ops::MeanTrailing(ops::Square(ops::Sub(out, y)), 1);
  }
};

double MaxRelParamDiff(const ParamStore& a, const ParamStore& b) {
  double worst = 0.0;
  for (std::size_t p = 0; p < a.entries().size(); ++p) {
    auto x = a.entries()[p].tensor.data(), y = b.entries()[p].tensor.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(x[i]) - y[i]) /
                                  std::max({std::abs(static_cast<double>(y[i])), 1e-6}));
    }
  }
  return worst;
}

TEST_CASE("sigma = 0 with a huge clip norm reproduces plain SGD") {
  TinyNet dp(31), plain(31);
  SeededRng data(32);
  const int batch = 8;
  Tensor x = testing::RandomTensor({batch, 4}, data), y = testing::RandomTensor({batch, 1}, data);
  Optimizer dp_opt({.rule = UpdateRule::kSgd, .learning_rate = 0.05});
  Optimizer plain_opt({.rule = UpdateRule::kSgd, .learning_rate = 0.05});
  SeededRng noise(33);
  for (int step = 0; step < 10; ++step) {
    auto per_example = PerExampleGradientsLoop(
        batch,
        [&](int i) { return ops::Sum(dp.Losses(ops::Slice(x, 0, i, 1), ops::Slice(y, 0, i, 1))); },
        dp.params);
    auto g = Privatize(per_example, TrainableLayout(dp.params), 1e9, 0.0, batch, noise);
    DpStep(dp_opt, dp.params, g, nullptr);

    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = ops::Mean(plain.Losses(x, y));
    }
    tape.Backward(loss);
    plain_opt.Apply(plain.params, CollectGradients(tape, plain.params));
    CHECK(MaxRelParamDiff(dp.params, plain.params) < 1e-5);
  }
}

TEST_CASE("DP step charges the ledger first and only touches adapters") {
  ParamStore params;
  Tensor base = params.Add("base", Tensor::FromData({2}, {1.0f, 2.0f}));
  params.Add("adapter", Tensor::FromData({2}, {0.0f, 0.0f}), ParamGroup::kAdapter);
  params.TrainAdaptersOnly();
  const std::vector<Real> base_before(base.data().begin(), base.data().end());

  const double sigma = CalibrateSigma({1.0, 1e-5}, 0.5, 3);
  PrivacyLedger ledger(0.5, sigma, 1e-5, 1.0);
  Optimizer opt({.rule = UpdateRule::kAdam, .learning_rate = 0.01});
  SeededRng noise(5);
  GradientMap layout = TrainableLayout(params);
  REQUIRE(layout.names == std::vector<std::string>{"adapter"});
  for (int s = 0; s < 3; ++s) {
    std::vector<GradientMap> batch{GradientMap{{"adapter"}, {{0.3f, -0.2f}}}};
    DpStep(opt, params, Privatize(batch, layout, 1.0, sigma, 2.0, noise), &ledger);
  }
  CHECK(ledger.steps() == 3);
  const std::vector<Real> adapter_before(params.Get("adapter").data().begin(),
                                         params.Get("adapter").data().end());
  std::vector<GradientMap> batch{GradientMap{{"adapter"}, {{0.3f, -0.2f}}}};
  CHECK_THROWS_AS(DpStep(opt, params, Privatize(batch, layout, 1.0, sigma, 2.0, noise), &ledger),
                  PrivacyHardStop);
  CHECK(std::vector<Real>(params.Get("adapter").data().begin(),
                          params.Get("adapter").data().end()) == adapter_before);
  CHECK(std::vector<Real>(base.data().begin(), base.data().end()) == base_before);
  CHECK_THROWS(DpStep(opt, params, Privatize(batch, layout, 1.0, sigma, 2.0, noise), nullptr));
}

}  // namespace
}  // namespace dplora
