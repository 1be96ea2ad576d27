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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "dplora/autodiff.hpp"
#include "dplora/diffusion.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/ops.hpp"
#include "grad_check.hpp"

namespace dplora {
namespace {

std::vector<Real> Values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor Normal(Shape shape, SeededRng& rng) {
  Tensor t = Tensor::Zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<Real>(rng.Normal());
  return t;
}

DenoiserConfig SmallDenoiser() {
  return {.latent_channels = 3, .latent_size = 4, .channels = 16, .num_heads = 2,
          .num_classes = 10, .embed_dim = 5};
}

TEST_CASE("linear schedule invariants") {
  const auto s = NoiseSchedule::Linear();
  CHECK(s.steps() == 1000);
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 1e-4));
  CHECK(s.alpha_bar(s.steps()) < 0.01);
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK_THROWS_AS(s.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s.beta(1001), std::out_of_range);
  CHECK_THROWS_AS(NoiseSchedule::Linear(10, 0.0, 0.02), std::invalid_argument);
}

TEST_CASE("strided schedule keeps cumulative products at kept steps") {
  const auto full = NoiseSchedule::Linear();
  const auto s = full.Strided(50);
  CHECK(s.strided());
  CHECK_FALSE(full.Strided(1000).strided());
  CHECK(s.steps() == 50);
  CHECK(s.model_timestep(50) == 999);
  CHECK(s.model_timestep(1) == 19);
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.alpha_bar(t) == full.alpha_bar(20 * t));
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) == doctest::Approx(s.alpha_bar(t - 1) * s.alpha(t)).epsilon(1e-12));
  }
}

TEST_CASE("forward process limits") {
  SeededRng rng(1);
  Tensor z0 = Normal({2, 3, 2, 2}, rng), eps = Normal({2, 3, 2, 2}, rng);
  const auto s = NoiseSchedule::Linear();
  std::vector<int> zero{0, 0};
  CHECK(Values(QSample(z0, zero, eps, s)) == Values(z0));

  // A single near-total-noise step: alpha_bar = 1e-12.
  const auto noisy = NoiseSchedule::Linear(1, 1.0 - 1e-12, 1.0 - 1e-12);
  std::vector<int> one{1, 1};
  Tensor z = QSample(z0, one, eps, noisy);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == doctest::Approx(eps.at(i)).epsilon(1e-5));
  std::vector<int> bad{0, 1001};
  CHECK_THROWS_AS(QSample(z0, bad, eps, s), std::out_of_range);
}

TEST_CASE("forward process preserves unit variance") {
  const auto s = NoiseSchedule::Linear();
  const int n = 10000;
  for (int t : {1, 100, 500, 1000}) {
    SeededRng rng(static_cast<std::uint64_t>(t));
    Tensor z0 = Normal({n, 1}, rng), eps = Normal({n, 1}, rng);
    std::vector<int> ts(n, t);
    Tensor z = QSample(z0, ts, eps, s);
    double sum = 0.0, sq = 0.0;
    for (Real v : z.data()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double var = (sq - sum * sum / n) / (n - 1);
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("loss of a perfect predictor is zero and of a zero predictor is the noise power") {
  SeededRng rng(2);
  const auto s = NoiseSchedule::Linear();
  Tensor z0 = Normal({4, 3, 4, 4}, rng), eps = Normal({4, 3, 4, 4}, rng);
  std::vector<int> t{1, 10, 500, 1000}, labels{0, 1, 2, 3};
  EpsPredictor oracle = [&](const Tensor&, std::span<const int>, std::span<const int>) {
    return eps;
  };
  CHECK(Values(DdpmLoss(oracle, s, z0, labels, t, eps)) == std::vector<Real>(4, 0.0f));

  ParamStore params;
  Denoiser d = Denoiser::Create(params, SmallDenoiser(), rng);
  for (const char* name : {"denoiser.conv_out.weight", "denoiser.conv_out.bias"}) {
    for (auto& v : params.Get(name).mutable_data()) v = 0.0f;
  }
  Tensor loss = DdpmLoss(d, s, z0, labels, t, eps);
  REQUIRE(loss.shape() == Shape{4});
  for (int i = 0; i < 4; ++i) {
    double power = 0.0;
    for (int j = 0; j < 48; ++j) power += static_cast<double>(eps.at(i * 48 + j)) * eps.at(i * 48 + j);
    CHECK(loss.at(i) == doctest::Approx(power / 48.0).epsilon(1e-6));
  }
  std::vector<int> bad{0, 1, 1, 1};
  CHECK_THROWS_AS(DdpmLoss(d, s, z0, labels, bad, eps), std::out_of_range);
}

TEST_CASE("denoiser shapes, sites and adapter budget") {
  ParamStore params;
  SeededRng rng(3);
  Denoiser d = Denoiser::Create(params, {}, rng);
  Tensor z = Normal({2, 3, 4, 4}, rng);
  std::vector<int> t{0, 999}, labels{8, 9};
  CHECK(d.Forward(z, t, labels).shape() == z.shape());
  std::vector<int> bad_labels{8, 10};
  CHECK_THROWS_AS(d.Forward(z, t, bad_labels), std::out_of_range);
  CHECK_THROWS_AS(d.Forward(Normal({2, 3, 8, 8}, rng), t, labels), ShapeError);

  auto sites = d.AdapterSites();
  CHECK(sites.size() == 5);
  // Reference widths: self qkv 64->192, self out 64->64, cross q 64->64,
  // cross kv 5->128, cross out 64->64.
  const std::int64_t per_rank = (64 + 192) + (64 + 64) + (64 + 64) + (5 + 128) + (64 + 64);
  for (int r : {8, 16, 32, 64}) CHECK(DeltaParamCount(sites, {}, r) == per_rank * r);
  CHECK(DeltaParamCount(sites, AdapterPlacement::Parse("qkv"), 16) == 16 * (256 + 128 + 133));
  const std::int64_t base = params.CountParameters();
  AttachLora(sites, params, {.rank = 16}, rng);
  const std::int64_t adapters = params.CountParameters(ParamGroup::kAdapter);
  CHECK(adapters == per_rank * 16);
  CHECK(static_cast<double>(adapters) / base < 0.05);
  // Conditioning embedder and ResBlocks stay frozen.
  CHECK_FALSE(params.trainable("cond.embedding"));
  CHECK_FALSE(params.trainable("denoiser.res_in0.conv1.weight"));

  ParamStore uncond_params;
  Denoiser u = Denoiser::Create(uncond_params, {.conditional = false}, rng);
  CHECK(u.AdapterSites().size() == 2);
  CHECK_FALSE(uncond_params.Contains("cond.embedding"));
}

TEST_CASE("per-example losses follow a permutation of the batch") {
  ParamStore params;
  SeededRng rng(4);
  Denoiser d = Denoiser::Create(params, SmallDenoiser(), rng);
  const auto s = NoiseSchedule::Linear();
  Tensor z0 = Normal({4, 3, 4, 4}, rng), eps = Normal({4, 3, 4, 4}, rng);
  std::vector<int> t{3, 300, 600, 900}, labels{1, 5, 7, 2};
  Tensor loss = DdpmLoss(d, s, z0, labels, t, eps);
  const std::vector<int> perm{2, 0, 3, 1};
  std::vector<Real> pz, pe;
  std::vector<int> pt, pl;
  for (int i : perm) {
    auto zr = z0.data().subspan(i * 48, 48), er = eps.data().subspan(i * 48, 48);
    pz.insert(pz.end(), zr.begin(), zr.end());
    pe.insert(pe.end(), er.begin(), er.end());
    pt.push_back(t[i]);
    pl.push_back(labels[i]);
  }
  Tensor permuted = DdpmLoss(d, s, Tensor::FromData(z0.shape(), pz), pl, pt,
                             Tensor::FromData(eps.shape(), pe));
  for (int j = 0; j < 4; ++j) CHECK(permuted.at(j) == doctest::Approx(loss.at(perm[j])).epsilon(1e-5));
}

TEST_CASE("noise multiplicity with k = 1 equals the plain loss on the same draw") {
  ParamStore params;
  SeededRng rng(5);
  Denoiser d = Denoiser::Create(params, SmallDenoiser(), rng);
  const auto s = NoiseSchedule::Linear();
  Tensor z0 = Normal({3, 3, 4, 4}, rng);
  std::vector<int> labels{0, 4, 9};
  SeededRng draw_rng(6);
  auto draws = MultiplicityDraws::Draw(3, 1, {3, 4, 4}, s, draw_rng);
  Tensor nm = NoiseMultiplicityLoss(d, s, z0, labels, draws);
  Tensor plain = DdpmLoss(d, s, z0, labels, draws.t, draws.eps);
  CHECK(Values(nm) == Values(plain));
  SeededRng bad(1);
  CHECK_THROWS_AS(NoiseMultiplicityLoss(d, s, z0, labels, 0, bad), std::invalid_argument);

  // Example slices of a draw reproduce the batched multiplicity loss.
  auto draws4 = MultiplicityDraws::Draw(3, 4, {3, 4, 4}, s, draw_rng);
  Tensor batched = NoiseMultiplicityLoss(d, s, z0, labels, draws4);
  for (int i = 0; i < 3; ++i) {
    Tensor zi = ops::Slice(z0, 0, i, 1);
    Tensor single = NoiseMultiplicityLoss(d, s, zi, std::span<const int>(&labels[i], 1),
                                          draws4.Example(i));
    CHECK(single.item() == doctest::Approx(batched.at(i)).epsilon(1e-5));
  }
}

TEST_CASE("loss variance falls as the multiplicity grows") {
  ParamStore params;
  SeededRng rng(7);
  Denoiser d = Denoiser::Create(params, SmallDenoiser(), rng);
  const auto s = NoiseSchedule::Linear();
  const int batch = 8, repeats = 30;
  Tensor z0 = Normal({batch, 3, 4, 4}, rng);
  std::vector<int> labels(batch);
  std::iota(labels.begin(), labels.end(), 0);
  std::vector<double> variances;
  for (int k : {1, 2, 4, 8}) {
    SeededRng draw_rng(100 + k);
    std::vector<double> sum(batch, 0.0), sq(batch, 0.0);
    for (int r = 0; r < repeats; ++r) {
      Tensor loss = NoiseMultiplicityLoss(d, s, z0, labels, k, draw_rng);
      for (int i = 0; i < batch; ++i) {
        sum[i] += loss.at(i);
        sq[i] += static_cast<double>(loss.at(i)) * loss.at(i);
      }
    }
    double mean_var = 0.0;
    for (int i = 0; i < batch; ++i) {
      mean_var += (sq[i] - sum[i] * sum[i] / repeats) / (repeats - 1) / batch;
    }
    variances.push_back(mean_var);
  }
  INFO(variances[0] << " " << variances[1] << " " << variances[2] << " " << variances[3]);
  for (std::size_t i = 1; i < variances.size(); ++i) CHECK(variances[i] < variances[i - 1]);
}

TEST_CASE("one reverse step from t = 1 with the true noise recovers the clean latent") {
  SeededRng rng(8);
  const auto s = NoiseSchedule::Linear();
  Tensor z0 = Normal({2, 3, 4, 4}, rng), eps = Normal({2, 3, 4, 4}, rng);
  std::vector<int> one{1, 1};
  Tensor z1 = QSample(z0, one, eps, s);
  SeededRng step_rng(9);
  Tensor back = ReverseStep(z1, 1, eps, s, step_rng);
  for (std::int64_t i = 0; i < z0.numel(); ++i) CHECK(std::abs(back.at(i) - z0.at(i)) < 1e-4);
  CHECK(step_rng.counter() == 0);
}

TEST_CASE("sampling is deterministic under a fixed seed") {
  ParamStore params;
  SeededRng init(10);
  Denoiser d = Denoiser::Create(params, SmallDenoiser(), init);
  ParamStore ae_params;
  Autoencoder ae = Autoencoder::Create(ae_params, {.base_channels = 4}, init);
  const auto s = NoiseSchedule::Linear().Strided(10);
  std::vector<int> labels{0, 1, 2, 3, 4};
  SeededRng a(11), b(11);
  Tensor first = Sample(d, ae, s, labels, a, 2);
  Tensor second = Sample(d, ae, s, labels, b, 2);
  CHECK(first.shape() == Shape{5, 1, 32, 32});
  CHECK(Values(first) == Values(second));
}

TEST_CASE("non-finite latents are reported with their step") {
  const auto s = NoiseSchedule::Linear(20);
  EpsPredictor broken = [](const Tensor& z, std::span<const int> t, std::span<const int>) {
    Tensor out = Tensor::Zeros(z.shape());
    if (t[0] < 10) out.mutable_data()[0] = std::numeric_limits<Real>::infinity();
    return out;
  };
  SeededRng rng(12);
  std::vector<int> labels{0};
  try {
    SampleLatents(broken, s, {1, 2, 2}, labels, rng);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("t=10") != std::string::npos);
  }
}

// Exact noise prediction for latents drawn from
// sum_k w_k N(mu_k * 1, s^2 I) under the forward process of `schedule`.
EpsPredictor MixtureOracle(const NoiseSchedule& schedule, std::vector<double> weights,
                           std::vector<double> means, double s) {
  return [=, &schedule](const Tensor& z, std::span<const int> model_t, std::span<const int>) {
    const std::int64_t d = z.numel() / z.dim(0);
    Tensor out = Tensor::Zeros(z.shape());
    auto o = out.mutable_data();
    for (std::int64_t i = 0; i < z.dim(0); ++i) {
      const double bar = schedule.alpha_bar(model_t[i] + 1);
      const double var = bar * s * s + 1.0 - bar;
      std::vector<double> log_post(weights.size());
      for (std::size_t k = 0; k < weights.size(); ++k) {
        log_post[k] = std::log(weights[k]);
        for (std::int64_t j = 0; j < d; ++j) {
          const double diff = z.at(i * d + j) - std::sqrt(bar) * means[k];
          log_post[k] -= diff * diff / (2.0 * var);
        }
      }
      const double top = *std::max_element(log_post.begin(), log_post.end());
      double norm = 0.0;
      for (double& l : log_post) norm += (l = std::exp(l - top));
      for (std::int64_t j = 0; j < d; ++j) {
        double score = 0.0;
        for (std::size_t k = 0; k < weights.size(); ++k) {
          score -= log_post[k] / norm * (z.at(i * d + j) - std::sqrt(bar) * means[k]) / var;
        }
        o[i * d + j] = static_cast<Real>(-std::sqrt(1.0 - bar) * score);
      }
    }
    return out;
  };
}

double PositiveFraction(const Tensor& z) {
  const std::int64_t d = z.numel() / z.dim(0);
  int positive = 0;
  for (std::int64_t i = 0; i < z.dim(0); ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += z.at(i * d + j);
    if (mean > 0.0) ++positive;
  }
  return static_cast<double>(positive) / static_cast<double>(z.dim(0));
}

TEST_CASE("the sampler with an exact predictor reproduces mixture weights") {
  const auto full = NoiseSchedule::Linear();
  const auto oracle = MixtureOracle(full, {0.3, 0.7}, {-1.0, 1.0}, 0.2);
  std::vector<int> labels(1000, 0);
  for (const auto& s : {full, full.Strided(50)}) {
    SeededRng rng(21);
    CHECK(std::abs(PositiveFraction(SampleLatents(oracle, s, {1, 2, 2}, labels, rng)) - 0.7) < 0.05);
  }
}

TEST_CASE("sampling a trained toy model reproduces mixture weights") {
  // Latents 1x2x2 drawn from 0.3 * N(-1, 0.2^2) + 0.7 * N(+1, 0.2^2), with
  // all four coordinates sharing the component.
  const double weight_positive = 0.7;
  DenoiserConfig config{.latent_channels = 1, .latent_size = 2, .channels = 16, .num_heads = 2,
                        .conditional = false};
  ParamStore params;
  SeededRng init(13);
  Denoiser d = Denoiser::Create(params, config, init);
  const auto schedule = NoiseSchedule::Linear(200, 1e-4, 0.1);
  const double lr = 2e-3;
  const int steps = 1500, batch = 256;
  Optimizer opt({.rule = UpdateRule::kAdam, .learning_rate = lr});
  SeededRng data(14);
  for (int step = 0; step < steps; ++step) {
    // Linear decay to zero; a constant step size leaves the learned mixture
    // weights visibly biased towards the majority mode.
    opt.set_learning_rate(lr * (1.0 - static_cast<double>(step) / steps));
    Tensor z0 = Tensor::Zeros({batch, 1, 2, 2});
    auto v = z0.mutable_data();
    for (int i = 0; i < batch; ++i) {
      const double mode = data.Bernoulli(weight_positive) ? 1.0 : -1.0;
      for (int j = 0; j < 4; ++j) v[i * 4 + j] = static_cast<Real>(mode + 0.2 * data.Normal());
    }
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = ops::Mean(NoiseMultiplicityLoss(d, schedule, z0, {}, 1, data));
    }
    Backward(tape, loss, params);
    opt.Apply(params, CollectGradients(tape, params));
  }
  const int n = 1000;
  std::vector<int> labels(n, 0);
  SeededRng sample_rng(15);
  Tensor z = SampleLatents(PredictorFor(d), schedule, {1, 2, 2}, labels, sample_rng);
  const double fraction = PositiveFraction(z);
  INFO("positive fraction " << fraction);
  CHECK(std::abs(fraction - weight_positive) < 0.05);
}

TEST_CASE("autoencoder shapes and configuration checks") {
  ParamStore params;
  SeededRng rng(16);
  Autoencoder ae = Autoencoder::Create(params, {}, rng);
  CHECK(ae.config().downsample() == 8);
  CHECK(ae.LatentShape() == Shape{3, 4, 4});
  Tensor x = testing::RandomTensor({2, 1, 32, 32}, rng);
  Tensor z = ae.Encode(x);
  CHECK(z.shape() == Shape{2, 3, 4, 4});
  CHECK(ae.Decode(z).shape() == x.shape());
  CHECK_THROWS_AS(ae.Encode(testing::RandomTensor({2, 1, 28, 28}, rng)), ShapeError);
  ParamStore other;
  CHECK_THROWS_AS(Autoencoder::Create(other, {.image_size = 30}, rng), std::invalid_argument);
}

TEST_CASE("a pass-through autoencoder learns a constant image quickly") {
  ParamStore params;
  SeededRng rng(17);
  AutoencoderConfig config{.image_size = 8, .base_channels = 8, .channel_mult = {1},
                           .latent_channels = 1};
  Autoencoder ae = Autoencoder::Create(params, config, rng);
  Tensor images = Tensor::Full({32, 1, 8, 8}, 0.5f);
  // One batch per epoch: 100 optimizer steps.
  PretrainAutoencoder(ae, params, images,
                      {.epochs = 100, .batch_size = 32, .learning_rate = 1e-2}, rng);
  CHECK(ReconstructionMse(ae, images) < 1e-3);
  CHECK(std::isfinite(ae.latent_scale()));
}

TEST_CASE("autoencoder divergence names the step") {
  ParamStore params;
  SeededRng rng(18);
  AutoencoderConfig config{.image_size = 8, .base_channels = 4, .channel_mult = {1, 2}};
  Autoencoder ae = Autoencoder::Create(params, config, rng);
  Tensor images = Tensor::Full({4, 1, 8, 8}, 0.1f);
  images.mutable_data()[3] = std::numeric_limits<Real>::quiet_NaN();
  try {
    PretrainAutoencoder(ae, params, images, {.epochs = 1, .batch_size = 4}, rng);
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

}  // namespace
}  // namespace dplora
