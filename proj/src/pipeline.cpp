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

#include "dplora/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include "dplora/accountant.hpp"
#include "dplora/autodiff.hpp"
#include "dplora/checkpoint.hpp"
#include "dplora/diffusion.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/eval.hpp"
#include "dplora/lora.hpp"
#include "dplora/ops.hpp"
#include "dplora/report.hpp"

namespace dplora {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

// Child streams of the master seed used for weight initialisation; the three
// experiment streams (data sampling, DP noise, diffusion noise) use ids 1-3.
enum class InitStream : std::uint64_t {
  kAutoencoder = 101,
  kDenoiser = 102,
  kAdapters = 103,
  kFeatures = 104,
  kDropout = 105,
  kSampling = 106,
};

SeededRng InitRng(const ExperimentConfig& c, InitStream s) {
  return SeededRng(static_cast<std::uint64_t>(c.run.seed)).Derive(static_cast<std::uint64_t>(s));
}
SeededRng Stream(const ExperimentConfig& c, RngStream s) {
  return StreamFor(static_cast<std::uint64_t>(c.run.seed), s);
}

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

std::string Hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void Log(const RunContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

std::string Fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

ReportWriter OpenReport(const RunContext& ctx, const std::string& stage) {
  ReportWriter report(ArtifactPaths::Report(ctx, stage));
  report.Write({{"event", "config"},
                {"stage", stage},
                {"seed", ctx.config.run.seed},
                {"config_hash", Hex64(ctx.config.Hash())},
                {"config", ctx.config.Dump()}});
  return report;
}

void StampCheckpoint(Checkpoint& ckpt, const RunContext& ctx, const std::string& stage) {
  ckpt.Set("stage", stage);
  ckpt.Set("config_hash", Hex64(ctx.config.Hash()));
  ckpt.Set("config", ctx.config.Dump());
}

Checkpoint LoadDependency(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) {
    throw MissingDependencyError("missing " + what + " checkpoint " + path.string() +
                                 " (run the stage that produces it first)");
  }
  return Checkpoint::Load(path);
}

AutoencoderConfig AeConfig(const ExperimentConfig& c) {
  AutoencoderConfig a;
  a.image_size = static_cast<int>(c.data.image_size);
  a.image_channels = 1;
  a.base_channels = static_cast<int>(c.autoencoder.base_channels);
  a.channel_mult.assign(c.autoencoder.channel_mult.begin(), c.autoencoder.channel_mult.end());
  a.latent_channels = static_cast<int>(c.autoencoder.latent_channels);
  return a;
}

DenoiserConfig DnConfig(const ExperimentConfig& c) {
  const AutoencoderConfig a = AeConfig(c);
  DenoiserConfig d;
  d.latent_channels = a.latent_channels;
  d.latent_size = a.latent_size();
  d.channels = static_cast<int>(c.denoiser.channels);
  d.num_heads = static_cast<int>(c.denoiser.num_heads);
  d.num_res_blocks = static_cast<int>(c.denoiser.num_res_blocks);
  d.conditional = c.denoiser.conditional;
  d.num_classes = static_cast<int>(c.denoiser.num_classes);
  d.embed_dim = static_cast<int>(c.denoiser.embed_dim);
  return d;
}

NoiseSchedule TrainingSchedule(const ExperimentConfig& c) {
  return NoiseSchedule::Linear(static_cast<int>(c.denoiser.timesteps), c.denoiser.beta_start,
                               c.denoiser.beta_end);
}

NoiseSchedule SamplingSchedule(const ExperimentConfig& c) {
  NoiseSchedule s = TrainingSchedule(c);
  return c.sampling.steps < c.denoiser.timesteps ? s.Strided(static_cast<int>(c.sampling.steps))
                                                 : s;
}

Autoencoder LoadAutoencoder(const RunContext& ctx, ParamStore& params) {
  SeededRng rng = InitRng(ctx.config, InitStream::kAutoencoder);
  Autoencoder ae = Autoencoder::Create(params, AeConfig(ctx.config), rng);
  Checkpoint ckpt = LoadDependency(ArtifactPaths::For(ctx).autoencoder, "autoencoder");
  RestoreParams(ckpt, params, true);
  ae.set_latent_scale(static_cast<Real>(ckpt.GetDouble("latent_scale")));
  return ae;
}

Denoiser LoadDenoiser(const RunContext& ctx, ParamStore& params) {
  SeededRng rng = InitRng(ctx.config, InitStream::kDenoiser);
  Denoiser denoiser = Denoiser::Create(params, DnConfig(ctx.config), rng);
  RestoreParams(LoadDependency(ArtifactPaths::For(ctx).denoiser, "denoiser"), params, true);
  return denoiser;
}

LoraOptions LoraFrom(const ExperimentConfig& c) {
  return {.placement = AdapterPlacement::Parse(c.lora.placement),
          .rank = static_cast<int>(c.lora.rank),
          .alpha = static_cast<Real>(c.lora.alpha),
          .dropout = static_cast<Real>(c.lora.dropout)};
}

void Shuffle(std::vector<std::int64_t>& order, SeededRng& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i) {
    std::swap(order[i], order[rng.UniformInt(static_cast<std::uint64_t>(i + 1))]);
  }
}

std::int64_t FinetuneSteps(const ExperimentConfig& c, std::int64_t dataset_size) {
  if (c.mechanism.max_steps > 0) return c.mechanism.max_steps;
  const double q = static_cast<double>(c.mechanism.expected_batch) / dataset_size;
  return static_cast<std::int64_t>(std::llround(c.mechanism.epochs / q));
}

double SamplingRate(const ExperimentConfig& c, std::int64_t dataset_size) {
  if (dataset_size < 1) throw ConfigError("the private training split is empty");
  const double q = static_cast<double>(c.mechanism.expected_batch) / dataset_size;
  if (q > 1.0) {
    throw ConfigError("mechanism.expected_batch exceeds the private training set size " +
                      std::to_string(dataset_size));
  }
  return q;
}

// Labels for generation: the private classes, interleaved so that any grid
// prefix shows every class.
std::vector<int> GenerationLabels(const ExperimentConfig& c, const DataSplits& splits) {
  std::vector<int> classes(c.data.private_classes.begin(), c.data.private_classes.end());
  std::sort(classes.begin(), classes.end());
  std::int64_t per_class = c.sampling.samples_per_class;
  if (per_class == 0) {
    per_class = splits.private_train.size() / static_cast<std::int64_t>(classes.size());
  }
  std::vector<int> labels;
  for (std::int64_t i = 0; i < per_class; ++i)
    for (int y : classes) labels.push_back(y);
  return labels;
}

// The frozen feature network, trained on public data on first use.
struct FeatureSetup {
  ParamStore params;
  FeatureExtractor extractor;
  GaussianStats real;
  std::string tag;
};

std::unique_ptr<FeatureSetup> PrepareFeatures(const RunContext& ctx, const DataSplits& splits) {
  const ArtifactPaths paths = ArtifactPaths::For(ctx);
  auto setup = std::make_unique<FeatureSetup>();
  SeededRng rng = InitRng(ctx.config, InitStream::kFeatures);
  setup->extractor =
      FeatureExtractor::Create(setup->params, static_cast<int>(ctx.config.denoiser.num_classes), rng);
  if (fs::exists(paths.features)) {
    RestoreParams(Checkpoint::Load(paths.features), setup->params, true);
  } else {
    RequireConsumable(splits.public_train, Consumer::kNonPrivateTraining);
    Log(ctx, "training feature extractor on " + std::to_string(splits.public_train.size()) +
                 " public images");
    setup->extractor.Train(setup->params, splits.public_train.images, splits.public_train.labels,
                           {.epochs = static_cast<int>(ctx.config.eval.feature_epochs)}, rng);
    Checkpoint ckpt;
    StoreParams(ckpt, setup->params);
    StampCheckpoint(ckpt, ctx, "features");
    ckpt.Save(paths.features);
  }
  RequireConsumable(splits.private_test, Consumer::kEvaluationReference);
  const auto& px = splits.private_test.images.data();
  setup->tag = setup->extractor.VersionTag(setup->params) + "-real-" +
               Hex64(Fnv1a(px.data(), px.size_bytes()));
  try {
    setup->real = LoadStats(paths.real_stats, setup->tag);
  } catch (const std::exception&) {
    setup->real = FeatureStats(setup->extractor, splits.private_test.images);
    SaveStats(paths.real_stats, setup->tag, setup->real);
  }
  return setup;
}

double DeskFid(const FeatureSetup& setup, const Tensor& images) {
  return FrechetDistance(FeatureStats(setup.extractor, images), setup.real);
}

}  // namespace

int ExitCodeFor(const std::exception& e) {
  if (dynamic_cast<const PrivacyHardStop*>(&e)) return kExitPrivacyHardStop;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumericalFailure;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const PrivacyDomainError*>(&e) ||
      dynamic_cast<const MissingDependencyError*>(&e) || dynamic_cast<const FirewallError*>(&e) ||
      dynamic_cast<const DataFormatError*>(&e) || dynamic_cast<const CheckpointError*>(&e) ||
      dynamic_cast<const std::invalid_argument*>(&e)) {
    return kExitConfigError;
  }
  return kExitFailure;
}

DataSplits LoadSplits(const ExperimentConfig& c) {
  const int size = static_cast<int>(c.data.image_size);
  Dataset all;
  switch (ParseSourceFormat(c.data.format)) {
    case SourceFormat::kIdx:
      all = IngestIdx(c.Resolve(c.data.images), c.Resolve(c.data.labels), size, Split::kTrain,
                      Sensitivity::kPublic);
      break;
    case SourceFormat::kRawTensor:
      all = IngestRawTensor(c.Resolve(c.data.images),
                            c.data.labels.empty() ? fs::path() : c.Resolve(c.data.labels), size,
                            Split::kTrain, Sensitivity::kPublic);
      break;
    case SourceFormat::kSyntheticShapes:
      all = SyntheticShapes(c.data.synthetic_count, static_cast<std::uint64_t>(c.data.split_seed),
                            size);
      break;
  }
  if (!all.labelled()) throw ConfigError("the experiment needs labelled data");
  for (int y : all.labels) {
    if (y < 0 || y >= c.denoiser.num_classes) {
      throw ConfigError("label " + std::to_string(y) + " outside denoiser.num_classes");
    }
  }
  const std::set<int> private_classes(c.data.private_classes.begin(), c.data.private_classes.end());
  const auto seed = static_cast<std::uint64_t>(c.data.split_seed);
  DataSplits s;
  Dataset pub = SelectClasses(all, private_classes, false);
  pub.name = all.name + ":public";
  std::tie(s.public_train, s.public_holdout) =
      TrainTestSplit(pub, c.data.public_holdout_fraction, seed);
  Dataset priv = SelectClasses(all, private_classes, true);
  priv.name = all.name + ":private";
  priv.sensitivity = Sensitivity::kPrivate;
  std::tie(s.private_train, s.private_test) =
      TrainTestSplit(priv, c.data.private_test_fraction, seed + 1);
  return s;
}

ArtifactPaths ArtifactPaths::For(const RunContext& ctx) {
  const auto& p = ctx.config.paths;
  auto pick = [&](const std::string& override_path, const char* name) {
    return override_path.empty() ? ctx.out_dir / name : ctx.config.Resolve(override_path);
  };
  ArtifactPaths a;
  a.autoencoder = pick(p.autoencoder, "autoencoder.ckpt");
  a.denoiser = pick(p.denoiser, "denoiser.ckpt");
  a.adapters = pick(p.adapters, "adapters.ckpt");
  a.features = pick(p.features, "features.ckpt");
  a.real_stats = fs::path(a.features).replace_extension(".stats");
  return a;
}

fs::path ArtifactPaths::Samples(const RunContext& ctx, bool adapters) {
  return ctx.out_dir / (adapters ? "samples-finetuned.raw" : "samples-frozen.raw");
}
fs::path ArtifactPaths::SampleLabels(const RunContext& ctx, bool adapters) {
  return ctx.out_dir / (adapters ? "samples-finetuned.labels" : "samples-frozen.labels");
}
fs::path ArtifactPaths::Grid(const RunContext& ctx, bool adapters) {
  return ctx.out_dir / (adapters ? "grid-finetuned.pgm" : "grid-frozen.pgm");
}
fs::path ArtifactPaths::Report(const RunContext& ctx, const std::string& stage) {
  return ctx.out_dir / (stage + ".jsonl");
}

json RunPretrainAutoencoder(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(c);
  RequireConsumable(splits.public_train, Consumer::kNonPrivateTraining);
  ParamStore params;
  SeededRng init = InitRng(c, InitStream::kAutoencoder);
  Autoencoder ae = Autoencoder::Create(params, AeConfig(c), init);
  if (ctx.resume) RestoreParams(Checkpoint::Load(*ctx.resume), params, true);
  ReportWriter report = OpenReport(ctx, "pretrain_ae");
  const std::int64_t n = splits.public_train.size();
  const std::int64_t steps_per_epoch = (n + c.autoencoder.batch_size - 1) / c.autoencoder.batch_size;
  Log(ctx, "pretrain-ae: " + std::to_string(n) + " public images, " +
               std::to_string(params.CountParameters()) + " parameters");
  SeededRng data_rng = Stream(c, RngStream::kDataSampling);
  AutoencoderTraining options{
      .epochs = static_cast<int>(c.autoencoder.epochs),
      .batch_size = static_cast<int>(c.autoencoder.batch_size),
      .learning_rate = c.autoencoder.learning_rate,
      .on_epoch = [&](int epoch, double loss) {
        report.Write({{"stage", "pretrain_ae"},
                      {"epoch", epoch + 1},
                      {"step", (epoch + 1) * steps_per_epoch},
                      {"loss", loss},
                      {"epsilon_spent", nullptr},
                      {"realized_batch_mean", c.autoencoder.batch_size},
                      {"wall_time", Seconds(start)}});
        Log(ctx, "  epoch " + std::to_string(epoch + 1) + " loss " + Fixed(loss, 5));
      }};
  const double train_loss = PretrainAutoencoder(ae, params, splits.public_train.images, options, data_rng);
  const double mse = splits.public_holdout.size() > 0
                         ? ReconstructionMse(ae, splits.public_holdout.images)
                         : train_loss;
  Checkpoint ckpt;
  StoreParams(ckpt, params);
  StampCheckpoint(ckpt, ctx, "pretrain_ae");
  ckpt.SetDouble("latent_scale", ae.latent_scale());
  ckpt.SetDouble("holdout_mse", mse);
  const fs::path out = ArtifactPaths::For(ctx).autoencoder;
  ckpt.Save(out);
  json summary = {{"event", "done"},
                  {"stage", "pretrain_ae"},
                  {"train_loss", train_loss},
                  {"holdout_mse", mse},
                  {"mse_threshold", c.autoencoder.mse_threshold},
                  {"latent_scale", ae.latent_scale()},
                  {"parameters", params.CountParameters()},
                  {"checkpoint", out.string()},
                  {"wall_time", Seconds(start)}};
  report.Write(summary);
  Log(ctx, "pretrain-ae: held-out reconstruction MSE " + Fixed(mse, 5));
  if (!(mse < c.autoencoder.mse_threshold)) {
    throw QualityGateError("held-out reconstruction MSE " + Fixed(mse, 5) +
                           " is not below the threshold " + Fixed(c.autoencoder.mse_threshold, 5));
  }
  return summary;
}

json RunPretrainDenoiser(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(c);
  RequireConsumable(splits.public_train, Consumer::kNonPrivateTraining);
  ParamStore ae_params;
  const Autoencoder ae = LoadAutoencoder(ctx, ae_params);
  const Tensor latents = EncodeLatents(ae, splits.public_train.images);
  const std::vector<int>& labels = splits.public_train.labels;

  ParamStore params;
  SeededRng init = InitRng(c, InitStream::kDenoiser);
  Denoiser denoiser = Denoiser::Create(params, DnConfig(c), init);
  if (ctx.resume) RestoreParams(Checkpoint::Load(*ctx.resume), params, true);
  const NoiseSchedule schedule = TrainingSchedule(c);
  Optimizer optimizer({.rule = UpdateRule::kAdam, .learning_rate = c.denoiser.learning_rate});
  SeededRng data_rng = Stream(c, RngStream::kDataSampling);
  SeededRng noise_rng = Stream(c, RngStream::kDiffusionNoise);
  ReportWriter report = OpenReport(ctx, "pretrain_ldm");

  const std::int64_t n = latents.dim(0);
  const std::int64_t batch = c.denoiser.batch_size;
  const std::int64_t steps_per_epoch = (n + batch - 1) / batch;
  const std::int64_t total = steps_per_epoch * c.denoiser.epochs;
  Log(ctx, "pretrain-ldm: " + std::to_string(n) + " public latents, " +
               std::to_string(params.CountParameters()) + " parameters, " +
               std::to_string(total) + " steps");
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const fs::path out = ArtifactPaths::For(ctx).denoiser;
  std::int64_t step = 0;
  double epoch_loss = 0.0;
  for (std::int64_t epoch = 0; epoch < c.denoiser.epochs; ++epoch) {
    Shuffle(order, data_rng);
    double sum = 0.0;
    for (std::int64_t first = 0; first < n; first += batch, ++step) {
      const std::int64_t count = std::min(batch, n - first);
      const auto rows = std::span<const std::int64_t>(order).subspan(first, count);
      const Tensor z0 = GatherRows(latents, rows);
      std::vector<int> y;
      for (std::int64_t r : rows) y.push_back(labels[r]);
      const MultiplicityDraws draws = MultiplicityDraws::Draw(
          static_cast<int>(count), 1, ae.LatentShape(), schedule, noise_rng);
      if (c.denoiser.lr_decay) {
        optimizer.set_learning_rate(c.denoiser.learning_rate *
                                    (1.0 - static_cast<double>(step) / total));
      }
      Tape tape;
      Tensor loss;
      try {
        TapeScope scope(tape);
        loss = ops::Mean(DdpmLoss(denoiser, schedule, z0, y, draws.t, draws.eps));
      } catch (const NumericalError& e) {
        throw NumericalError("denoiser pretraining diverged at step " + std::to_string(step) +
                             ": " + e.what());
      }
      if (!std::isfinite(loss.item())) {
        throw NumericalError("denoiser loss is not finite at step " + std::to_string(step));
      }
      Backward(tape, loss, params);
      optimizer.Apply(params, CollectGradients(tape, params));
      sum += loss.item();
    }
    epoch_loss = sum / static_cast<double>(steps_per_epoch);
    report.Write({{"stage", "pretrain_ldm"},
                  {"epoch", epoch + 1},
                  {"step", step},
                  {"loss", epoch_loss},
                  {"epsilon_spent", nullptr},
                  {"realized_batch_mean", static_cast<double>(n) / steps_per_epoch},
                  {"wall_time", Seconds(start)}});
    Log(ctx, "  epoch " + std::to_string(epoch + 1) + " loss " + Fixed(epoch_loss, 5) + " (" +
                 Fixed(Seconds(start), 1) + " s)");
    Checkpoint ckpt;
    StoreParams(ckpt, params);
    StampCheckpoint(ckpt, ctx, "pretrain_ldm");
    ckpt.SetInt("epoch", epoch + 1);
    ckpt.Save(out);
  }
  json summary = {{"event", "done"},
                  {"stage", "pretrain_ldm"},
                  {"final_loss", epoch_loss},
                  {"steps", step},
                  {"parameters", params.CountParameters()},
                  {"checkpoint", out.string()},
                  {"wall_time", Seconds(start)}};
  report.Write(summary);
  return summary;
}

json RunFinetune(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(c);
  const Dataset& data = splits.private_train;
  RequireConsumable(data, Consumer::kDpTraining);
  const std::int64_t n = data.size();
  const double q = SamplingRate(c, n);
  const std::int64_t total_steps = FinetuneSteps(c, n);
  const PrivacyBudget budget = PrivacyBudget::ForDataset(c.budget.epsilon, c.budget.delta, n);

  ParamStore ae_params;
  const Autoencoder ae = LoadAutoencoder(ctx, ae_params);
  const Tensor latents = EncodeLatents(ae, data.images);
  ParamStore params;
  Denoiser denoiser = LoadDenoiser(ctx, params);
  const LoraOptions lora = LoraFrom(c);
  SeededRng lora_rng = InitRng(c, InitStream::kAdapters);
  AttachLora(denoiser.AdapterSites(), params, lora, lora_rng);
  const std::int64_t adapter_params = params.CountParameters(ParamGroup::kAdapter);

  ReportWriter report = OpenReport(ctx, "finetune_dp");
  Optimizer optimizer({.rule = UpdateRule::kAdam, .learning_rate = c.mechanism.learning_rate});
  SeededRng data_rng = Stream(c, RngStream::kDataSampling);
  SeededRng noise_rng = Stream(c, RngStream::kDpNoise);
  SeededRng diffusion_rng = Stream(c, RngStream::kDiffusionNoise);
  std::optional<PrivacyLedger> ledger;
  if (ctx.resume) {
    const Checkpoint ckpt = Checkpoint::Load(*ctx.resume);
    if (!HasLedger(ckpt)) throw CheckpointError(ctx.resume->string() + " holds no privacy ledger");
    if (ckpt.Has("config_hash") && ckpt.Get("config_hash") != Hex64(c.Hash())) {
      Log(ctx, "warning: resuming from a checkpoint written under a different config");
      report.Write({{"event", "warning"},
                    {"message", "config hash mismatch on resume"},
                    {"checkpoint_config_hash", ckpt.Get("config_hash")}});
    }
    RestoreParams(ckpt, params, false);
    optimizer.set_state(LoadOptimizer(ckpt));
    data_rng = LoadRng(ckpt, "data");
    noise_rng = LoadRng(ckpt, "noise");
    diffusion_rng = LoadRng(ckpt, "diffusion");
    ledger.emplace(LoadLedger(ckpt));
    Log(ctx, "finetune-dp: resumed at step " + std::to_string(ledger->steps()) + ", epsilon " +
                 Fixed(ledger->Spent().epsilon) + " of " + Fixed(ledger->state().budget_epsilon));
  } else {
    const double sigma = CalibrateSigma(budget, q, total_steps);
    ledger.emplace(q, sigma, budget.delta, budget.epsilon);
  }
  const double sigma = ledger->state().sigma;
  const NoiseSchedule schedule = TrainingSchedule(c);
  const GradientMap layout = TrainableLayout(params);
  PoissonSampler sampler(n, ledger->state().q, data_rng);
  const int threads = ThreadsFromEnvironment();
  const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, std::llround(1.0 / q));
  const fs::path out = ArtifactPaths::For(ctx).adapters;
  Log(ctx, "finetune-dp: N=" + std::to_string(n) + " q=" + Fixed(q) + " sigma=" + Fixed(sigma) +
               " steps=" + std::to_string(total_steps) + " adapter parameters " +
               std::to_string(adapter_params) + " of " + std::to_string(params.CountParameters()));

  auto save = [&](const SeededRng& d, const SeededRng& z, const SeededRng& f) {
    Checkpoint ckpt;
    StoreParams(ckpt, params, ParamGroup::kAdapter);
    StampCheckpoint(ckpt, ctx, "finetune_dp");
    StoreLedger(ckpt, ledger->state());
    StoreOptimizer(ckpt, optimizer.state());
    StoreRng(ckpt, "data", d);
    StoreRng(ckpt, "noise", z);
    StoreRng(ckpt, "diffusion", f);
    ckpt.SetInt("lora/rank", lora.rank);
    ckpt.SetDouble("lora/alpha", lora.alpha);
    ckpt.Set("lora/placement", lora.placement.ToString());
    ckpt.SetInt("mechanism/k", c.mechanism.k);
    ckpt.SetDouble("mechanism/clip_norm", c.mechanism.clip_norm);
    ckpt.Save(out);
  };

  double loss_sum = 0.0, batch_sum = 0.0;
  std::int64_t loss_count = 0, epoch_steps = 0;
  const auto train_start = Clock::now();
  std::int64_t step = ledger->steps();
  auto emit = [&]() {
    report.Write({{"stage", "finetune_dp"},
                  {"epoch", (step + steps_per_epoch - 1) / steps_per_epoch},
                  {"step", step},
                  {"loss", loss_count ? json(loss_sum / loss_count) : json(nullptr)},
                  {"epsilon_spent", ledger->Spent().epsilon},
                  {"realized_batch_mean", epoch_steps ? batch_sum / epoch_steps : 0.0},
                  {"sigma", sigma},
                  {"wall_time", Seconds(start)}});
    Log(ctx, "  step " + std::to_string(step) + " loss " +
                 (loss_count ? Fixed(loss_sum / loss_count, 5) : std::string("-")) + " epsilon " +
                 Fixed(ledger->Spent().epsilon) + " (" + Fixed(Seconds(start), 1) + " s)");
    loss_sum = batch_sum = 0.0;
    loss_count = epoch_steps = 0;
  };

  bool interrupted = false;
  for (; step < total_steps;) {
    if (ctx.stop_after_step && step >= *ctx.stop_after_step) {
      interrupted = true;
      break;
    }
    // Stream positions before this step, so a refused step can be replayed.
    const SeededRng data_before = sampler.rng(), noise_before = noise_rng,
                    diffusion_before = diffusion_rng;
    const std::vector<std::int64_t> rows = sampler.Next();
    const int b = static_cast<int>(rows.size());
    const Tensor z0 = GatherRows(latents, rows);
    std::vector<int> labels;
    for (std::int64_t r : rows) labels.push_back(data.labels[r]);
    const MultiplicityDraws draws = MultiplicityDraws::Draw(
        b, static_cast<int>(c.mechanism.k), ae.LatentShape(), schedule, diffusion_rng);
    std::vector<double> losses(static_cast<std::size_t>(b));
    const SeededRng dropout_base = InitRng(c, InitStream::kDropout).Derive(step);
    std::vector<GradientMap> per_example;
    try {
      per_example = PerExampleGradientsLoop(
          b,
          [&](int i) {
            const MultiplicityDraws mine = draws.Example(i);
            SeededRng dropout = dropout_base.Derive(static_cast<std::uint64_t>(i));
            Tensor loss = ops::Sum(NoiseMultiplicityLoss(
                denoiser, schedule, SliceRows(z0, i, 1), std::span(labels).subspan(i, 1), mine,
                lora.dropout > 0 ? &dropout : nullptr));
            losses[i] = loss.item();
            return loss;
          },
          params, threads);
    } catch (const NumericalError& e) {
      throw NumericalError("fine-tuning diverged at step " + std::to_string(step + 1) + ": " +
                           e.what());
    }
    for (double l : losses) {
      if (!std::isfinite(l)) {
        throw NumericalError("fine-tuning loss is not finite at step " + std::to_string(step + 1));
      }
    }
    const PrivatizedGradient g =
        Privatize(per_example, layout, c.mechanism.clip_norm, sigma,
                  static_cast<double>(c.mechanism.expected_batch), noise_rng);
    if (c.mechanism.lr_decay) {
      optimizer.set_learning_rate(c.mechanism.learning_rate *
                                  (1.0 - static_cast<double>(step) / total_steps));
    }
    try {
      DpStep(optimizer, params, g, &*ledger);
    } catch (const PrivacyHardStop& e) {
      if (epoch_steps) emit();
      save(data_before, noise_before, diffusion_before);
      report.Write({{"event", "hard_stop"},
                    {"stage", "finetune_dp"},
                    {"step", step + 1},
                    {"epsilon_spent", ledger->Spent().epsilon},
                    {"budget_epsilon", ledger->state().budget_epsilon},
                    {"message", e.what()},
                    {"checkpoint", out.string()}});
      throw;
    }
    ++step;
    for (double l : losses) loss_sum += l;
    loss_count += b;
    batch_sum += b;
    ++epoch_steps;
    if (step % steps_per_epoch == 0 || step == total_steps) {
      emit();
      save(sampler.rng(), noise_rng, diffusion_rng);
    }
  }
  const double train_time = Seconds(train_start);
  if (epoch_steps) emit();
  save(sampler.rng(), noise_rng, diffusion_rng);
  const double epochs_run = static_cast<double>(total_steps) * q;
  json summary = {{"event", "done"},
                  {"stage", "finetune_dp"},
                  {"interrupted", interrupted},
                  {"steps", ledger->steps()},
                  {"q", ledger->state().q},
                  {"sigma", sigma},
                  {"epsilon_spent", ledger->Spent().epsilon},
                  {"delta", ledger->state().delta},
                  {"budget_epsilon", ledger->state().budget_epsilon},
                  {"adapter_parameters", adapter_params},
                  {"total_parameters", params.CountParameters()},
                  {"k", c.mechanism.k},
                  {"rank", lora.rank},
                  {"placement", lora.placement.ToString()},
                  {"train_time", train_time},
                  {"time_per_epoch", epochs_run > 0 ? train_time / epochs_run : 0.0},
                  {"checkpoint", out.string()},
                  {"wall_time", Seconds(start)}};
  report.Write(summary);
  return summary;
}

json RunGenerate(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(c);
  ParamStore ae_params;
  const Autoencoder ae = LoadAutoencoder(ctx, ae_params);
  ParamStore params;
  Denoiser denoiser = LoadDenoiser(ctx, params);
  const bool adapters = c.sampling.use_adapters;
  if (adapters) {
    const Checkpoint ckpt = LoadDependency(ArtifactPaths::For(ctx).adapters, "adapter");
    if (!IsAdapterOnly(ckpt)) throw CheckpointError("the adapter checkpoint is not adapter-only");
    LoraOptions lora = LoraFrom(c);
    lora.rank = static_cast<int>(ckpt.GetInt("lora/rank"));
    lora.alpha = static_cast<Real>(ckpt.GetDouble("lora/alpha"));
    lora.placement = AdapterPlacement::Parse(ckpt.Get("lora/placement"));
    lora.dropout = 0.0f;
    SeededRng lora_rng = InitRng(c, InitStream::kAdapters);
    AttachLora(denoiser.AdapterSites(), params, lora, lora_rng);
    RestoreParams(ckpt, params, false);
  }
  const std::vector<int> labels = GenerationLabels(c, splits);
  // The same stream for both models: the frozen and fine-tuned samples share
  // their starting noise.
  SeededRng rng = InitRng(c, InitStream::kSampling);
  const NoiseSchedule schedule = SamplingSchedule(c);
  Log(ctx, std::string("generate: ") + std::to_string(labels.size()) + " images from the " +
               (adapters ? "fine-tuned" : "frozen") + " model, " +
               std::to_string(schedule.steps()) + " reverse steps");
  const Tensor images =
      Sample(denoiser, ae, schedule, labels, rng, static_cast<int>(c.sampling.chunk_size));
  images.CheckFinite("generated images");
  const fs::path samples = ArtifactPaths::Samples(ctx, adapters);
  fs::create_directories(ctx.out_dir);
  WriteRawTensorImages(samples, images);
  std::vector<std::uint8_t> bytes(labels.begin(), labels.end());
  WriteIdxLabels(ArtifactPaths::SampleLabels(ctx, adapters), bytes);
  const fs::path grid = ArtifactPaths::Grid(ctx, adapters);
  WriteImageGrid(grid, images);
  ReportWriter report = OpenReport(ctx, "generate");
  json summary = {{"event", "done"},
                  {"stage", "generate"},
                  {"model", adapters ? "finetuned" : "frozen"},
                  {"images", labels.size()},
                  {"reverse_steps", schedule.steps()},
                  {"strided_sampler", schedule.strided()},
                  {"samples", samples.string()},
                  {"grid", grid.string()},
                  {"grid_hash", FileHash(grid)},
                  {"wall_time", Seconds(start)}};
  report.Write(summary);
  return summary;
}

json RunEvaluate(const RunContext& ctx) {
  const auto& c = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(c);
  const auto features = PrepareFeatures(ctx, splits);
  const Dataset& real = splits.private_test;
  ReportWriter report = OpenReport(ctx, "evaluate");
  json summary = {{"event", "done"},
                  {"stage", "evaluate"},
                  {"reference", real.name},
                  {"reference_size", real.size()},
                  {"feature_tag", features->tag}};
  std::map<std::string, std::pair<double, double>> results;  // model -> (fid, accuracy)
  for (bool adapters : {true, false}) {
    const fs::path samples = ArtifactPaths::Samples(ctx, adapters);
    if (!fs::exists(samples)) continue;
    const std::string model = adapters ? "finetuned" : "frozen";
    const Tensor images = ReadRawTensorImages(samples, static_cast<int>(c.data.image_size));
    const std::vector<int> labels = ReadIdxLabels(ArtifactPaths::SampleLabels(ctx, adapters));
    const double fid = DeskFid(*features, images);
    std::vector<double> accuracies;
    AccuracyReport first;
    for (std::int64_t s = 0; s < c.eval.classifier_seeds; ++s) {
      AccuracyReport r = DownstreamAccuracy(
          images, labels, real.images, real.labels,
          {.arch = ParseClassifierArch(c.eval.classifier),
           .epochs = static_cast<int>(c.eval.classifier_epochs),
           .seed = static_cast<std::uint64_t>(c.run.seed * 1000 + s)});
      if (s == 0) first = r;
      accuracies.push_back(r.accuracy);
    }
    const double mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / accuracies.size();
    double var = 0.0;
    for (double a : accuracies) var += (a - mean) * (a - mean);
    const double sd = accuracies.size() > 1 ? std::sqrt(var / (accuracies.size() - 1)) : 0.0;
    summary[model] = {{"desk_fid", fid},
                      {"accuracy_mean", mean},
                      {"accuracy_sd", sd},
                      {"accuracies", accuracies},
                      {"classes", first.classes},
                      {"confusion", first.confusion},
                      {"samples", images.dim(0)}};
    results[model] = {fid, mean};
    Log(ctx, "evaluate: " + model + " desk-FID " + Fixed(fid, 3) + ", accuracy " + Fixed(mean, 4) +
                 " +- " + Fixed(sd, 4));
  }
  if (results.empty()) {
    throw MissingDependencyError("no generated samples in " + ctx.out_dir.string() +
                                 " (run generate first)");
  }
  if (results.size() == 2) {
    const auto [fid_ft, acc_ft] = results["finetuned"];
    const auto [fid_fr, acc_fr] = results["frozen"];
    summary["fid_improvement"] = fid_fr > 0 ? (fid_fr - fid_ft) / fid_fr : 0.0;
    summary["accuracy_gain"] = acc_ft - acc_fr;
  }
  summary["wall_time"] = Seconds(start);
  report.Write(summary);
  return summary;
}

json RunAblation(const RunContext& ctx) {
  const auto& base = ctx.config;
  const auto start = Clock::now();
  const DataSplits splits = LoadSplits(base);
  const auto features = PrepareFeatures(ctx, splits);
  const ArtifactPaths shared = ArtifactPaths::For(ctx);
  ReportWriter report = OpenReport(ctx, "ablate");

  struct Cell {
    std::int64_t rank, k;
    std::string placement;
    auto key() const { return std::tie(rank, k, placement); }
  };
  struct Outcome {
    bool ok = false;
    std::string error;
    double fid = 0.0, time_per_epoch = 0.0;
    std::int64_t delta_params = 0;
  };
  std::map<std::tuple<std::int64_t, std::int64_t, std::string>, Outcome> done;
  auto run_cell = [&](const Cell& cell) -> const Outcome& {
    auto found = done.find(cell.key());
    if (found != done.end()) return found->second;
    RunContext cc = ctx;
    cc.resume.reset();
    cc.config.lora.rank = cell.rank;
    cc.config.mechanism.k = cell.k;
    cc.config.lora.placement = cell.placement;
    cc.config.mechanism.epochs = base.ablate.epochs;
    cc.config.sampling.samples_per_class = base.ablate.samples_per_class;
    cc.config.sampling.use_adapters = true;
    cc.config.paths.autoencoder = fs::absolute(shared.autoencoder).string();
    cc.config.paths.denoiser = fs::absolute(shared.denoiser).string();
    cc.config.paths.features = fs::absolute(shared.features).string();
    cc.config.paths.adapters.clear();
    cc.out_dir = ctx.out_dir / "ablate" /
                 ("r" + std::to_string(cell.rank) + "-k" + std::to_string(cell.k) + "-" + cell.placement);
    Log(ctx, "ablate: cell rank=" + std::to_string(cell.rank) + " k=" + std::to_string(cell.k) +
                 " placement=" + cell.placement);
    Outcome o;
    try {
      const json ft = RunFinetune(cc);
      RunGenerate(cc);
      const Tensor images = ReadRawTensorImages(ArtifactPaths::Samples(cc, true),
                                                static_cast<int>(base.data.image_size));
      o.fid = DeskFid(*features, images);
      o.delta_params = ft["adapter_parameters"].get<std::int64_t>();
      o.time_per_epoch = ft["time_per_epoch"].get<double>();
      o.ok = true;
    } catch (const std::exception& e) {
      o.error = e.what();
      Log(ctx, std::string("ablate: cell failed: ") + e.what());
    }
    json record = {{"stage", "ablate"},
                   {"rank", cell.rank},
                   {"k", cell.k},
                   {"placement", cell.placement},
                   {"status", o.ok ? "ok" : "failed"}};
    if (o.ok) {
      record["desk_fid"] = o.fid;
      record["delta_param_count"] = o.delta_params;
      record["time_per_epoch"] = o.time_per_epoch;
    } else {
      record["error"] = o.error;
    }
    report.Write(record);
    return done.emplace(cell.key(), o).first->second;
  };

  auto status = [](const Outcome& o) { return o.ok ? std::string("ok") : "failed: " + o.error; };
  auto fid_text = [](const Outcome& o) { return o.ok ? Fixed(o.fid, 4) : std::string("NA"); };
  const std::string base_placement = base.lora.placement;
  std::ofstream all(ctx.out_dir / "ablate.tsv");
  all << "factor\trank\tk\tplacement\tdesk_fid\tdelta_param_count\ttime_per_epoch_s\tstatus\n";
  auto row_all = [&](const char* factor, const Cell& cell, const Outcome& o) {
    all << factor << '\t' << cell.rank << '\t' << cell.k << '\t' << cell.placement << '\t'
        << fid_text(o) << '\t' << o.delta_params << '\t' << Fixed(o.time_per_epoch, 3) << '\t'
        << status(o) << '\n';
    all.flush();
  };

  json summary = {{"event", "done"}, {"stage", "ablate"}};
  {
    std::ofstream t(ctx.out_dir / "ablate-k.tsv");
    t << "k\tdesk_fid\ttime_per_epoch_s\tstatus\n";
    for (std::int64_t k : base.ablate.ks) {
      const Cell cell{base.lora.rank, k, base_placement};
      const Outcome& o = run_cell(cell);
      t << k << '\t' << fid_text(o) << '\t' << Fixed(o.time_per_epoch, 3) << '\t' << status(o) << '\n';
      row_all("k", cell, o);
      summary["k"].push_back({{"k", k}, {"desk_fid", o.ok ? json(o.fid) : json(nullptr)},
                              {"time_per_epoch", o.time_per_epoch}, {"status", status(o)}});
    }
  }
  {
    std::ofstream t(ctx.out_dir / "ablate-rank.tsv");
    t << "rank\tdelta_param_count\tdesk_fid\tstatus\n";
    for (std::int64_t r : base.ablate.ranks) {
      const Cell cell{r, base.mechanism.k, base_placement};
      const Outcome& o = run_cell(cell);
      t << r << '\t' << o.delta_params << '\t' << fid_text(o) << '\t' << status(o) << '\n';
      row_all("rank", cell, o);
      summary["rank"].push_back({{"rank", r}, {"desk_fid", o.ok ? json(o.fid) : json(nullptr)},
                                 {"delta_param_count", o.delta_params}, {"status", status(o)}});
    }
  }
  {
    std::ofstream t(ctx.out_dir / "ablate-placement.tsv");
    t << "placement\tdelta_param_count\tdesk_fid\tstatus\n";
    for (const std::string& p : base.ablate.placements) {
      const Cell cell{base.lora.rank, base.mechanism.k, p};
      const Outcome& o = run_cell(cell);
      t << p << '\t' << o.delta_params << '\t' << fid_text(o) << '\t' << status(o) << '\n';
      row_all("placement", cell, o);
      summary["placement"].push_back({{"placement", p},
                                      {"desk_fid", o.ok ? json(o.fid) : json(nullptr)},
                                      {"delta_param_count", o.delta_params},
                                      {"status", status(o)}});
    }
  }
  summary["cells"] = done.size();
  summary["wall_time"] = Seconds(start);
  report.Write(summary);
  return summary;
}

json RunStage(const RunContext& ctx) {
  const std::string& stage = ctx.config.run.stage;
  if (stage == "pretrain_ae") return RunPretrainAutoencoder(ctx);
  if (stage == "pretrain_ldm") return RunPretrainDenoiser(ctx);
  if (stage == "finetune_dp") return RunFinetune(ctx);
  if (stage == "generate") return RunGenerate(ctx);
  if (stage == "evaluate") return RunEvaluate(ctx);
  if (stage == "ablate") return RunAblation(ctx);
  throw ConfigError("unknown stage '" + stage + "'");
}

json AccountantSummary(const ExperimentConfig& config, std::optional<double> sigma) {
  const DataSplits splits = LoadSplits(config);
  const std::int64_t n = splits.private_train.size();
  const double q = SamplingRate(config, n);
  const std::int64_t steps = FinetuneSteps(config, n);
  const PrivacyBudget budget =
      PrivacyBudget::ForDataset(config.budget.epsilon, config.budget.delta, n);
  const double s = sigma ? *sigma : CalibrateSigma(budget, q, steps);
  const DpConversion spent = ComputeEpsilon({.q = q, .sigma = s, .steps = steps}, budget.delta);
  return {{"dataset_size", n},
          {"expected_batch", config.mechanism.expected_batch},
          {"q", q},
          {"steps", steps},
          {"delta", budget.delta},
          {"target_epsilon", budget.epsilon},
          {"sigma", s},
          {"sigma_calibrated", !sigma.has_value()},
          {"epsilon", spent.epsilon},
          {"optimal_order", spent.order},
          {"within_budget", spent.epsilon <= budget.epsilon}};
}

}  // namespace dplora
