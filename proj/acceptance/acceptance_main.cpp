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

// Acceptance runner: checks the ten release criteria of the library end to
// end and prints one PASS/FAIL line per criterion. Criterion 9 runs the full
// desk experiment (tens of minutes); --only selects a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "frechet_oracle.hpp"
#include "grad_check.hpp"
#include "json.hpp"
#include "rdp_oracle.hpp"
#include "dplora/accountant.hpp"
#include "dplora/autodiff.hpp"
#include "dplora/checkpoint.hpp"
#include "dplora/data.hpp"
#include "dplora/diffusion.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/eval.hpp"
#include "dplora/lora.hpp"
#include "dplora/nn.hpp"
#include "dplora/ops.hpp"
#include "dplora/pipeline.hpp"

namespace dplora {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Options {
  fs::path work;
  fs::path desk_config;
  std::string cli;
  std::string gradcheck;
  bool ablation = true;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double Seconds(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string Format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return buf;
}

struct CommandResult {
  int status = -1;
  std::string output;
};

// Runs a shell command, capturing stdout and the exit status.
CommandResult RunCommand(const std::string& command) {
  CommandResult r;
  FILE* pipe = popen(command.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Tensor Normal(Shape shape, SeededRng& rng) {
  Tensor t = Tensor::Zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<Real>(rng.Normal());
  return t;
}

double MaxAbsDiff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return worst;
}

// ---- 1. gradient correctness -------------------------------------------------

Outcome GradientCorrectness(const Options& opt) {
  const auto start = Clock::now();
  const CommandResult r = RunCommand(opt.gradcheck + " 2>&1");
  const double seconds = Seconds(start);
  std::string summary;
  std::istringstream lines(r.output);
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("summary ", 0) == 0) summary = line.substr(8);
  }
  if (summary.empty()) return {false, "gradient check helper failed: " + r.output};
  return {r.status == 0 && seconds < 60.0,
          summary + Format(", wall %.1f s (float64 build, tolerance 1e-3, limit 60 s)", seconds)};
}

// ---- 2. clipping invariant ---------------------------------------------------

GradientMap RandomMap(SeededRng& rng, double scale) {
  GradientMap g;
  for (int p = 0; p < 3; ++p) {
    g.names.push_back("p" + std::to_string(p));
    g.values.emplace_back(static_cast<std::size_t>(3 + 2 * p));
    for (auto& x : g.values.back()) x = static_cast<Real>(scale * rng.Normal());
  }
  return g;
}

double ConcatNorm(const GradientMap& g) {
  double s = 0.0;
  for (const auto& p : g.values)
    for (double x : p) s += x * x;
  return std::sqrt(s);
}

Outcome ClippingInvariant() {
  SeededRng rng(2001);
  const double c = 1.0;
  int maps = 0, violations = 0;
  double worst_norm = 0.0, worst_change = 0.0;
  int changes = 0, change_violations = 0;
  for (int batch = 0; batch < 1000; ++batch) {
    const int b = 2 + static_cast<int>(rng.UniformInt(15));
    std::vector<GradientMap> per_example;
    for (int i = 0; i < b; ++i) {
      per_example.push_back(RandomMap(rng, std::exp(6.0 * rng.Uniform() - 3.0)));
      const double norm = ConcatNorm(ClipPerSample(per_example.back(), c));
      worst_norm = std::max(worst_norm, norm);
      ++maps;
      if (norm > c + 1e-6) ++violations;
    }
    // Removing the last example: sigma = 0 and expected batch 1 expose the
    // pre-noise clipped sum.
    const GradientMap layout = per_example[0].ZerosLike();
    SeededRng unused(0);
    PrivatizedGradient with = Privatize(per_example, layout, c, 0.0, 1.0, unused);
    std::vector<GradientMap> without(per_example.begin(), per_example.end() - 1);
    PrivatizedGradient less = Privatize(without, layout, c, 0.0, 1.0, unused);
    GradientMap diff = with.grad;
    diff.AddScaled(less.grad, -1.0f);
    const double change = ConcatNorm(diff);
    worst_change = std::max(worst_change, change);
    ++changes;
    if (change > c + 1e-5) ++change_violations;
  }
  return {violations == 0 && change_violations == 0,
          Format("%d/%d clipped maps within C + 1e-6 (max norm %.9f); %d/%d add/remove changes "
                 "within C (max %.7f)",
                 maps - violations, maps, worst_norm, changes - change_violations, changes,
                 worst_change)};
}

// ---- 3. non-private degeneracy -----------------------------------------------

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
                                  std::max(std::abs(static_cast<double>(y[i])), 1e-6));
    }
  }
  return worst;
}

Outcome NonPrivateDegeneracy() {
  TinyNet dp(31), plain(31);
  SeededRng data(32);
  const int batch = 8;
  Tensor x = testing::RandomTensor({batch, 4}, data), y = testing::RandomTensor({batch, 1}, data);
  Optimizer dp_opt({.rule = UpdateRule::kSgd, .learning_rate = 0.05});
  Optimizer plain_opt({.rule = UpdateRule::kSgd, .learning_rate = 0.05});
  SeededRng noise(33);
  double worst = 0.0, moved = 0.0;
  TinyNet initial(31);
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
    worst = std::max(worst, MaxRelParamDiff(dp.params, plain.params));
  }
  moved = MaxRelParamDiff(plain.params, initial.params);
  return {worst < 1e-5 && moved > 1e-3,
          Format("max relative parameter gap %.2e over 10 steps (limit 1e-5); parameters moved "
                 "%.2e from init",
                 worst, moved)};
}

// ---- 4. accountant -----------------------------------------------------------

Outcome AccountantExactness() {
  std::vector<std::string> failures;
  // q = 1, one step: the Gaussian mechanism closed form.
  double closed_gap = 0.0;
  for (double sigma : {0.5, 1.0, 1.02, 3.7}) {
    const RdpCurve one = Compose(RdpSubsampledGaussian(1.0, sigma), 1);
    for (std::size_t i = 0; i < one.orders.size(); ++i) {
      closed_gap = std::max(closed_gap,
                            std::abs(one.eps_rdp[i] - one.orders[i] / (2 * sigma * sigma)));
    }
  }
  if (closed_gap > 1e-12) failures.push_back("closed form");

  // Calibration round trip: within 0.1% below the target, never above.
  double worst_round_trip = 0.0;
  bool overshoot = false;
  for (double eps : {1.0, 3.0, 10.0}) {
    for (double q : {0.01, 0.04}) {
      for (std::int64_t steps : {100, 1000}) {
        const double sigma = CalibrateSigma({eps, 1e-5}, q, steps);
        const double got = ComputeEpsilon({q, sigma, steps}, 1e-5).epsilon;
        if (got > eps) overshoot = true;
        worst_round_trip = std::max(worst_round_trip, (eps - got) / eps);
      }
    }
  }
  if (overshoot || worst_round_trip > 1e-3) failures.push_back("calibration");

  // Monotonicity over a 5 x 5 x 5 grid.
  const double sigmas[5] = {0.6, 0.9, 1.3, 2.0, 4.0};
  const std::int64_t steps[5] = {1, 10, 100, 1000, 5000};
  const double qs[5] = {0.001, 0.01, 0.05, 0.2, 1.0};
  double eps[5][5][5];
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 5; ++k)
        eps[i][j][k] = ComputeEpsilon({qs[k], sigmas[i], steps[j]}, 1e-5).epsilon;
  int monotone_violations = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 5; ++k) {
        if (i + 1 < 5 && eps[i + 1][j][k] > eps[i][j][k]) ++monotone_violations;
        if (j + 1 < 5 && eps[i][j + 1][k] < eps[i][j][k]) ++monotone_violations;
        if (k + 1 < 5 && eps[i][j][k + 1] < eps[i][j][k]) ++monotone_violations;
      }
  if (monotone_violations) failures.push_back("monotonicity");

  // Subsampled curve against direct numerical integration.
  double oracle_gap = 0.0;
  int oracle_points = 0;
  for (double q : {0.003, 0.04, 0.3}) {
    for (double sigma : {0.7, 1.02, 4.0}) {
      const RdpCurve c = RdpSubsampledGaussian(q, sigma);
      for (std::size_t i = 0; i < c.orders.size(); ++i) {
        const double oracle = testing::OracleRdp(q, sigma, c.orders[i]);
        oracle_gap = std::max(oracle_gap, std::abs(c.eps_rdp[i] - oracle) / std::abs(oracle));
        ++oracle_points;
      }
    }
  }
  if (oracle_gap > 1e-6) failures.push_back("oracle");

  std::string detail = Format(
      "closed-form gap %.1e (limit 1e-12); calibration shortfall max %.4f%%, overshoot %s; "
      "%d monotonicity violations on 5x5x5; oracle max rel gap %.1e over %d points (limit 1e-6)",
      closed_gap, 100 * worst_round_trip, overshoot ? "yes" : "none", monotone_violations,
      oracle_gap, oracle_points);
  for (const auto& f : failures) detail += "; failed: " + f;
  return {failures.empty(), detail};
}

// ---- 5. LoRA identity and merge ----------------------------------------------

Outcome LoraIdentityAndMerge() {
  ParamStore params;
  SeededRng init(501);
  Denoiser d = Denoiser::Create(params, {}, init);
  SeededRng data(502);
  const int n = 100;
  Tensor z = Normal({n, 3, 4, 4}, data);
  std::vector<int> t(n), labels(n);
  for (int i = 0; i < n; ++i) {
    t[i] = static_cast<int>(data.UniformInt(1000));
    labels[i] = static_cast<int>(data.UniformInt(10));
  }
  const Tensor base = d.Forward(z, t, labels);
  const std::int64_t base_params = params.CountParameters();
  auto sites = d.AdapterSites();
  AttachLora(sites, params, {.rank = 16, .alpha = 16.0}, init);
  const std::int64_t adapter_params = params.CountParameters(ParamGroup::kAdapter);
  const Tensor attached = d.Forward(z, t, labels);
  bool identical = true;
  for (std::int64_t i = 0; i < base.numel(); ++i) identical &= base.at(i) == attached.at(i);

  // Train-like adapters: random B so the correction is nonzero.
  for (const auto& site : sites) {
    Tensor b = site.linear->adapter().b;
    for (auto& v : b.mutable_data()) v = static_cast<Real>(0.05 * init.Normal());
  }
  const Tensor adapted = d.Forward(z, t, labels);
  for (const auto& site : sites) site.linear->MergeAdapter();
  const Tensor merged = d.Forward(z, t, labels);
  const double merge_gap = MaxAbsDiff(adapted, merged);
  const double correction = MaxAbsDiff(adapted, base);
  const double fraction =
      static_cast<double>(adapter_params) / static_cast<double>(base_params + adapter_params);
  return {identical && merge_gap < 1e-5 && correction > 1e-3 && fraction < 0.05,
          Format("init output %s base output; merged vs adapter forward max-abs %.2e on %d inputs "
                 "(limit 1e-5, adapter effect %.2e); adapters %lld of %lld parameters = %.2f%% "
                 "(limit 5%%)",
                 identical ? "bit-identical to" : "DIFFERS from", merge_gap, n, correction,
                 static_cast<long long>(adapter_params),
                 static_cast<long long>(base_params + adapter_params), 100 * fraction)};
}

// ---- 6. schedule and forward process -----------------------------------------

Outcome ScheduleAndForwardProcess() {
  const NoiseSchedule s = NoiseSchedule::Linear();
  bool decreasing = true;
  for (int t = 1; t <= s.steps(); ++t) decreasing &= s.alpha_bar(t) < s.alpha_bar(t - 1);
  const double terminal = s.alpha_bar(s.steps());
  const int n = 10000;
  const double se = std::sqrt(2.0 / (n - 1));
  double worst_z = 0.0;
  for (int t : {1, 10, 100, 250, 500, 750, 1000}) {
    SeededRng rng(600 + static_cast<std::uint64_t>(t));
    Tensor z0 = Normal({n, 1}, rng), eps = Normal({n, 1}, rng);
    std::vector<int> ts(n, t);
    Tensor z = QSample(z0, ts, eps, s);
    double sum = 0.0, sq = 0.0;
    for (Real v : z.data()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double var = (sq - sum * sum / n) / (n - 1);
    worst_z = std::max(worst_z, std::abs(var - 1.0) / se);
  }
  return {decreasing && terminal < 0.01 && worst_z < 3.0,
          Format("alpha_bar strictly decreasing: %s; terminal alpha_bar %.5f (limit 0.01); "
                 "worst q_sample variance deviation %.2f SE over 10,000 draws at 7 timesteps",
                 decreasing ? "yes" : "no", terminal, worst_z)};
}

// ---- 7. desk-FID metric ------------------------------------------------------

Outcome FidMetric() {
  SeededRng rng(701);
  double self = 0.0;
  for (int d : {1, 6, 64}) {
    const GaussianStats a = testing::FromEigen(Eigen::VectorXd::Random(d), testing::RandomSpd(d, rng));
    self = std::max(self, std::abs(FrechetDistance(a, a)));
  }
  const GaussianStats one_a =
      testing::FromEigen(Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Identity(1, 1));
  const GaussianStats one_b =
      testing::FromEigen(Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Identity(1, 1));
  const double one_d = FrechetDistance(one_a, one_b);
  double oracle_gap = 0.0;
  for (int d : {2, 8, 64}) {
    for (int trial = 0; trial < 3; ++trial) {
      const Eigen::MatrixXd sa = testing::RandomSpd(d, rng), sb = testing::RandomSpd(d, rng);
      Eigen::VectorXd ma(d), mb(d);
      for (int i = 0; i < d; ++i) {
        ma(i) = rng.Normal();
        mb(i) = rng.Normal();
      }
      const double oracle = testing::OracleFrechet(ma, sa, mb, sb);
      const double got =
          FrechetDistance(testing::FromEigen(ma, sa), testing::FromEigen(mb, sb));
      oracle_gap = std::max(oracle_gap, std::abs(got - oracle) / oracle);
    }
  }
  return {self < 1e-6 && std::abs(one_d - 1.0) < 1e-6 && oracle_gap < 1e-5,
          Format("self-distance max %.1e (limit 1e-6); 1-D unit shift %.9f (target 1 +- 1e-6); "
                 "Denman-Beavers oracle max rel gap %.1e (limit 1e-5)",
                 self, one_d, oracle_gap)};
}

// ---- 8. noise multiplicity ---------------------------------------------------

Outcome NoiseMultiplicity() {
  const std::vector<int> ks{1, 2, 4, 8};
  const NoiseSchedule schedule = NoiseSchedule::Linear();

  // Variance of each example's k-averaged loss over 30 independent repeats.
  ParamStore params;
  SeededRng init(801);
  Denoiser d = Denoiser::Create(params, {}, init);
  const int batch = 16, repeats = 30;
  SeededRng data(802);
  Tensor z0 = Normal({batch, 3, 4, 4}, data);
  std::vector<int> labels(batch);
  for (int i = 0; i < batch; ++i) labels[i] = 8 + i % 2;
  std::vector<double> variances;
  for (int k : ks) {
    SeededRng draw_rng(810 + static_cast<std::uint64_t>(k));
    std::vector<double> sum(batch, 0.0), sq(batch, 0.0);
    for (int r = 0; r < repeats; ++r) {
      const Tensor loss = NoiseMultiplicityLoss(d, schedule, z0, labels, k, draw_rng);
      for (int i = 0; i < batch; ++i) {
        sum[i] += loss.at(i);
        sq[i] += static_cast<double>(loss.at(i)) * loss.at(i);
      }
    }
    double mean_var = 0.0;
    for (int i = 0; i < batch; ++i)
      mean_var += (sq[i] - sum[i] * sum[i] / repeats) / (repeats - 1) / batch;
    variances.push_back(mean_var);
  }

  // Wall time of one DP fine-tuning epoch (q = 0.04 over 800 latents) per k,
  // with identical Poisson batches.
  std::vector<double> epoch_seconds;
  const int threads = ThreadsFromEnvironment();
  const std::int64_t population = 800;
  SeededRng latents_rng(803);
  const Tensor latents = Normal({population, 3, 4, 4}, latents_rng);
  for (int k : ks) {
    ParamStore p;
    SeededRng rng(804);
    Denoiser model = Denoiser::Create(p, {}, rng);
    AttachLora(model.AdapterSites(), p, {.rank = 16, .alpha = 16.0}, rng);
    Optimizer optimizer({.rule = UpdateRule::kAdam, .learning_rate = 1e-3});
    PoissonSampler sampler(population, 0.04, StreamFor(0, RngStream::kDataSampling));
    SeededRng noise = StreamFor(0, RngStream::kDpNoise);
    SeededRng diffusion = StreamFor(0, RngStream::kDiffusionNoise);
    const GradientMap layout = TrainableLayout(p);
    PrivacyLedger ledger(0.04, 1.0, 1e-5, 1e9);
    const auto start = Clock::now();
    for (int step = 0; step < 25; ++step) {
      const std::vector<std::int64_t> rows = sampler.Next();
      const int b = static_cast<int>(rows.size());
      const Tensor z = GatherRows(latents, rows);
      std::vector<int> y;
      for (std::int64_t r : rows) y.push_back(8 + static_cast<int>(r % 2));
      const MultiplicityDraws draws = MultiplicityDraws::Draw(b, k, {3, 4, 4}, schedule, diffusion);
      auto per_example = PerExampleGradientsLoop(
          b,
          [&](int i) {
            return ops::Sum(NoiseMultiplicityLoss(model, schedule, SliceRows(z, i, 1),
                                                  std::span(y).subspan(i, 1), draws.Example(i)));
          },
          p, threads);
      DpStep(optimizer, p, Privatize(per_example, layout, 1.0, 1.0, 32.0, noise), &ledger);
    }
    epoch_seconds.push_back(Seconds(start));
  }

  bool variance_falls = true, time_grows = true;
  for (std::size_t i = 1; i < ks.size(); ++i) {
    variance_falls &= variances[i] < variances[i - 1];
    time_grows &= epoch_seconds[i] > epoch_seconds[i - 1];
  }
  std::string detail = "per-example loss variance (30 repeats) k=1,2,4,8:";
  for (double v : variances) detail += Format(" %.4g", v);
  detail += "; epoch wall time s:";
  for (double s : epoch_seconds) detail += Format(" %.2f", s);
  return {variance_falls && time_grows, detail};
}

// ---- 9. desk experiment ------------------------------------------------------

RunContext DeskContext(const Options& opt, const fs::path& out, std::int64_t seed) {
  RunContext ctx;
  ctx.config = ExperimentConfig::Load(opt.desk_config);
  ctx.config.run.seed = seed;
  ctx.out_dir = out;
  ctx.log = &std::cerr;
  fs::create_directories(out);
  return ctx;
}

void UsePretrained(RunContext& ctx, const fs::path& pretrain) {
  ctx.config.paths.autoencoder = (pretrain / "autoencoder.ckpt").string();
  ctx.config.paths.denoiser = (pretrain / "denoiser.ckpt").string();
  ctx.config.paths.features = (pretrain / "features.ckpt").string();
}

Outcome DeskExperiment(const Options& opt) {
  const auto start = Clock::now();
  const fs::path root = opt.work / "desk";
  fs::remove_all(root);
  const fs::path pretrain = root / "pretrain";
  {
    RunContext ctx = DeskContext(opt, pretrain, 0);
    const json ae = RunPretrainAutoencoder(ctx);
    std::cerr << "desk: autoencoder " << ae.dump() << "\n";
    RunPretrainDenoiser(ctx);
  }
  const double pretrain_seconds = Seconds(start);

  bool all_ok = true;
  std::string detail;
  json seeds = json::array();
  for (std::int64_t seed : {0, 1, 2}) {
    const auto seed_start = Clock::now();
    RunContext ctx = DeskContext(opt, root / ("seed" + std::to_string(seed)), seed);
    UsePretrained(ctx, pretrain);
    const json ft = RunFinetune(ctx);
    ctx.config.sampling.use_adapters = true;
    RunGenerate(ctx);
    ctx.config.sampling.use_adapters = false;
    RunGenerate(ctx);
    ctx.config.sampling.use_adapters = true;
    const json ev = RunEvaluate(ctx);
    const double improvement = ev["fid_improvement"].get<double>();
    const double gain = ev["accuracy_gain"].get<double>();
    const double spent = ft["epsilon_spent"].get<double>();
    const bool ok = improvement >= 0.20 && gain > 0.0 && spent <= ctx.config.budget.epsilon;
    all_ok &= ok;
    detail += Format(
        "seed %lld: FID %.3f vs frozen %.3f (%.1f%% better), accuracy %.3f vs %.3f, eps %.3f, "
        "%.0f s; ",
        static_cast<long long>(seed), ev["finetuned"]["desk_fid"].get<double>(),
        ev["frozen"]["desk_fid"].get<double>(), 100 * improvement,
        ev["finetuned"]["accuracy_mean"].get<double>(),
        ev["frozen"]["accuracy_mean"].get<double>(), spent, Seconds(seed_start));
    seeds.push_back({{"seed", seed}, {"finetune", ft}, {"evaluate", ev}});
  }
  const double total = Seconds(start);
  all_ok &= total < 2 * 3600.0;
  detail += Format("pretraining %.0f s, total %.0f s (limit 7200 s)", pretrain_seconds, total);
  std::ofstream(root / "desk-summary.json") << json{{"seeds", seeds}, {"total_seconds", total}}.dump(2)
                                            << "\n";

  if (opt.ablation) {
    // Reported, not gating.
    const auto ablate_start = Clock::now();
    RunContext ctx = DeskContext(opt, root / "ablate", 0);
    UsePretrained(ctx, pretrain);
    try {
      const json ab = RunAblation(ctx);
      std::string shape = " | ablation (not gating, " + Format("%.0f s", Seconds(ablate_start)) + "):";
      for (const char* factor : {"rank", "k", "placement"}) {
        shape += std::string(" ") + factor;
        for (const auto& row : ab[factor]) {
          shape += " " + row[factor].dump() + "=" +
                   (row["desk_fid"].is_null() ? std::string("NA")
                                              : Format("%.3f", row["desk_fid"].get<double>()));
        }
        shape += ";";
      }
      detail += shape + " tables in " + (root / "ablate").string();
    } catch (const std::exception& e) {
      detail += std::string(" | ablation failed: ") + e.what();
    }
  }
  return {all_ok, detail};
}

// ---- 10. privacy hard stop ---------------------------------------------------

Outcome PrivacyHardStopCriterion(const Options& opt) {
  const fs::path dir = opt.work / "hardstop";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string data_dir = DPLORA_DATA_DIR;
  // Real digits, a deliberately small model: the property under test is the
  // ledger, not sample quality.
  const std::string common = "[data]\nimages: string = " + data_dir +
                             "/digits5k-images-idx3-ubyte\nlabels: string = " + data_dir +
                             "/digits5k-labels-idx1-ubyte\n"
                             "[mechanism]\nexpected_batch: int = 32\nk: int = 1\n"
                             "[lora]\nrank: int = 4\nalpha: float = 4\n"
                             "[autoencoder]\nbase_channels: int = 4\nchannel_mult: ints = 1, 2, 2, 2\n"
                             "latent_channels: int = 2\nepochs: int = 1\nmse_threshold: float = 1.0\n"
                             "[denoiser]\nchannels: int = 16\nepochs: int = 1\n";
  auto config = [&](const std::string& name, std::int64_t max_steps) {
    std::string text = common;
    const std::string key = "[mechanism]\nexpected_batch: int = 32\n";
    text.replace(text.find(key), key.size(),
                 key + "max_steps: int = " + std::to_string(max_steps) + "\n");
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  };
  const std::string cfg100 = config("budget100.cfg", 100);
  const std::string cfg101 = config("budget101.cfg", 101);
  const std::string out = (dir / "run").string();
  auto cli = [&](const std::string& args) {
    return RunCommand(opt.cli + " " + args + " --quiet --out " + out + " 2>&1").status;
  };
  if (int s = cli("pretrain-ae --config " + cfg100); s != 0)
    return {false, Format("pretrain-ae exited %d", s)};
  if (int s = cli("pretrain-ldm --config " + cfg100); s != 0)
    return {false, Format("pretrain-ldm exited %d", s)};
  const int first = cli("finetune-dp --config " + cfg100);
  if (first != 0) return {false, Format("100-step fine-tuning exited %d", first)};
  const fs::path adapters = fs::path(out) / "adapters.ckpt";
  const fs::path before_path = dir / "after-100-steps.ckpt";
  fs::copy_file(adapters, before_path, fs::copy_options::overwrite_existing);
  const PrivacyLedger before(LoadLedger(Checkpoint::Load(before_path)));

  // The budget was calibrated for exactly 100 steps: one more must not fit.
  const PrivacyBudget spent100 = before.Spent();
  const bool exhausted = !before.CanStep();

  const int second = cli("finetune-dp --config " + cfg101 + " --resume " + adapters.string());
  const PrivacyLedger after(LoadLedger(Checkpoint::Load(adapters)));
  const auto& a = before.state();
  const auto& b = after.state();
  auto same_bits = [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; };
  const bool restored = a.steps == 100 && b.steps == 100 && same_bits(a.q, b.q) &&
                        same_bits(a.sigma, b.sigma) && same_bits(a.delta, b.delta) &&
                        same_bits(a.budget_epsilon, b.budget_epsilon) &&
                        same_bits(spent100.epsilon, after.Spent().epsilon);
  return {second == kExitPrivacyHardStop && exhausted && restored,
          Format("100 steps spent eps %.6f of %.6f (sigma %.6f, q %.4f); one more step fits: %s; "
                 "step 101 exit code %d (expected %d); ledger after refusal: steps %lld, "
                 "bit-identical: %s",
                 spent100.epsilon, a.budget_epsilon, a.sigma, a.q, exhausted ? "no" : "yes", second,
                 static_cast<int>(kExitPrivacyHardStop), static_cast<long long>(b.steps),
                 restored ? "yes" : "no")};
}

}  // namespace
}  // namespace dplora

int main(int argc, char** argv) {
  using namespace dplora;
  Options opt;
  std::string only;
  opt.work = DPLORA_ACCEPTANCE_WORK_DIR;
  opt.desk_config = fs::path(DPLORA_SOURCE_DIR) / "configs" / "desk.cfg";
  opt.cli = DPLORA_CLI_PATH;
  opt.gradcheck = DPLORA_GRADCHECK_PATH;
  bool skip_ablation = false;
  CLI::App app{"dplora acceptance runner"};
  app.add_option("--work", opt.work, "Scratch directory for experiment outputs");
  app.add_option("--desk-config", opt.desk_config, "Desk experiment configuration");
  app.add_option("--only", only, "Comma-separated criteria to run (default: all)");
  app.add_flag("--skip-ablation", skip_ablation, "Do not run the (non-gating) ablation grid");
  CLI11_PARSE(app, argc, argv);
  opt.ablation = !skip_ablation;

  std::set<int> selected;
  std::stringstream list(only);
  for (std::string item; std::getline(list, item, ',');) {
    if (!item.empty()) selected.insert(std::stoi(item));
  }

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", [&] { return GradientCorrectness(opt); }},
      {"clipping invariant", ClippingInvariant},
      {"non-private degeneracy", NonPrivateDegeneracy},
      {"accountant exactness and calibration", AccountantExactness},
      {"LoRA identity and merge", LoraIdentityAndMerge},
      {"schedule and forward process", ScheduleAndForwardProcess},
      {"desk-FID metric", FidMetric},
      {"noise multiplicity", NoiseMultiplicity},
      {"end-to-end desk experiment", [&] { return DeskExperiment(opt); }},
      {"privacy hard stop", [&] { return PrivacyHardStopCriterion(opt); }},
  };
  fs::create_directories(opt.work);
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    ++ran;
    Outcome o;
    const auto start = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                Seconds(start), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
