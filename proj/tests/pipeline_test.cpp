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

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "dplora/checkpoint.hpp"
#include "dplora/pipeline.hpp"
#include "dplora/report.hpp"

namespace dplora {
namespace {

namespace fs = std::filesystem;

// A pipeline small enough to run every stage in seconds: synthetic shapes,
// a two-level autoencoder and a narrow denoiser.
constexpr const char* kTinyConfig = R"(
[data]
format: string = synthetic-shapes
synthetic_count: int = 600
private_classes: ints = 2, 3
private_test_fraction: float = 0.35
[mechanism]
expected_batch: int = 8
max_steps: int = 6
k: int = 2
learning_rate: float = 1e-2
[lora]
rank: int = 2
alpha: float = 2
[autoencoder]
base_channels: int = 4
channel_mult: ints = 1, 2, 2, 2
latent_channels: int = 2
epochs: int = 1
mse_threshold: float = 1.0
[denoiser]
channels: int = 16
num_classes: int = 4
embed_dim: int = 4
timesteps: int = 50
beta_end: float = 0.2
epochs: int = 1
batch_size: int = 32
[sampling]
steps: int = 10
samples_per_class: int = 40
[eval]
feature_epochs: int = 1
classifier_epochs: int = 1
classifier_seeds: int = 1
[ablate]
ranks: ints = 2, 4
ks: ints = 2
placements: strings = both
epochs: int = 1
samples_per_class: int = 40
)";

RunContext Context(const fs::path& out, const std::string& extra = "") {
  RunContext ctx;
  ctx.config = ExperimentConfig::Parse(std::string(kTinyConfig) + extra);
  ctx.out_dir = out;
  fs::create_directories(out);
  return ctx;
}

// Pretrained models shared by every test, built once.
const fs::path& Pretrained() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "dplora_pipeline_pretrained";
    fs::remove_all(d);
    RunContext ctx = Context(d);
    RunPretrainAutoencoder(ctx);
    RunPretrainDenoiser(ctx);
    return d;
  }();
  return dir;
}

// A fresh output directory that reads the shared pretrained checkpoints.
RunContext FineTuneContext(const std::string& name, const std::string& extra = "") {
  const fs::path out = fs::temp_directory_path() / name;
  fs::remove_all(out);
  const fs::path pre = Pretrained();
  return Context(out, extra + "\n[paths]\nautoencoder: string = " + (pre / "autoencoder.ckpt").string() +
                          "\ndenoiser: string = " + (pre / "denoiser.ckpt").string() + "\n");
}

std::vector<Real> AdapterValues(const fs::path& ckpt_path) {
  const Checkpoint c = Checkpoint::Load(ckpt_path);
  std::vector<Real> values;
  for (const auto& [name, t] : c.tensors()) {
    if (name.rfind("param/", 0) == 0) values.insert(values.end(), t.data().begin(), t.data().end());
  }
  return values;
}

TEST_CASE("splits separate public and private classes") {
  const ExperimentConfig c = ExperimentConfig::Parse(kTinyConfig);
  const DataSplits s = LoadSplits(c);
  for (int y : s.public_train.labels) CHECK((y == 0 || y == 1));
  for (int y : s.public_holdout.labels) CHECK((y == 0 || y == 1));
  for (int y : s.private_train.labels) CHECK((y == 2 || y == 3));
  for (int y : s.private_test.labels) CHECK((y == 2 || y == 3));
  CHECK(s.public_train.size() + s.public_holdout.size() + s.private_train.size() +
            s.private_test.size() ==
        600);
  CHECK(s.private_train.sensitivity == Sensitivity::kPrivate);
  CHECK(s.private_test.sensitivity == Sensitivity::kPrivate);
  CHECK(s.private_test.split == Split::kTest);
  CHECK(s.public_train.sensitivity == Sensitivity::kPublic);
  CHECK_THROWS_AS(RequireConsumable(s.private_train, Consumer::kNonPrivateTraining), FirewallError);
}

TEST_CASE("stages refuse to run without their dependencies") {
  const fs::path out = fs::temp_directory_path() / "dplora_pipeline_missing";
  fs::remove_all(out);
  RunContext ctx = Context(out);
  for (auto stage : {RunPretrainDenoiser, RunFinetune, RunGenerate, RunEvaluate}) {
    try {
      stage(ctx);
      FAIL("stage ran without its inputs");
    } catch (const MissingDependencyError& e) {
      CHECK(ExitCodeFor(e) == kExitConfigError);
    }
  }
  fs::remove_all(out);
}

TEST_CASE("exit codes by failure kind") {
  CHECK(ExitCodeFor(PrivacyHardStop("x")) == kExitPrivacyHardStop);
  CHECK(ExitCodeFor(NumericalError("x")) == kExitNumericalFailure);
  CHECK(ExitCodeFor(QualityGateError("x")) == kExitNumericalFailure);
  CHECK(ExitCodeFor(ConfigError("x")) == kExitConfigError);
  CHECK(ExitCodeFor(PrivacyDomainError("x")) == kExitConfigError);
  CHECK(ExitCodeFor(FirewallError("x")) == kExitConfigError);
  CHECK(ExitCodeFor(std::runtime_error("x")) == kExitFailure);
}

TEST_CASE("autoencoder quality gate fails the stage after checkpointing") {
  const fs::path out = fs::temp_directory_path() / "dplora_pipeline_gate";
  fs::remove_all(out);
  RunContext ctx = Context(out);
  ctx.config.autoencoder.mse_threshold = 1e-9;
  CHECK_THROWS_AS(RunPretrainAutoencoder(ctx), QualityGateError);
  CHECK(fs::exists(out / "autoencoder.ckpt"));
  fs::remove_all(out);
}

TEST_CASE("fine-tuning writes adapters, ledger and per-epoch reports") {
  RunContext ctx = FineTuneContext("dplora_pipeline_ft");
  const auto summary = RunFinetune(ctx);
  CHECK(summary["steps"] == 6);
  CHECK(summary["epsilon_spent"].get<double>() <= 10.0);
  CHECK(summary["epsilon_spent"].get<double>() >= 10.0 * (1 - 1e-3));
  const Checkpoint c = Checkpoint::Load(ctx.out_dir / "adapters.ckpt");
  CHECK(IsAdapterOnly(c));
  for (const auto& [name, t] : c.tensors()) {
    if (name.rfind("param/", 0) == 0) CHECK(name.find("lora_") != std::string::npos);
  }
  CHECK(LoadLedger(c).steps == 6);
  const auto records = ReadReport(ArtifactPaths::Report(ctx, "finetune_dp"));
  REQUIRE(records.size() >= 3);
  CHECK(records.front()["event"] == "config");
  CHECK(records.front()["config"].get<std::string>() == ctx.config.Dump());
  int epochs = 0;
  for (const auto& r : records) {
    if (!r.contains("epoch")) continue;
    ++epochs;
    for (const char* key : {"step", "loss", "epsilon_spent", "realized_batch_mean", "wall_time"}) {
      CHECK(r.contains(key));
    }
  }
  CHECK(epochs >= 1);
}

TEST_CASE("resumed fine-tuning follows the uninterrupted trajectory") {
  RunContext full = FineTuneContext("dplora_pipeline_full");
  RunFinetune(full);
  RunContext part = FineTuneContext("dplora_pipeline_part");
  part.stop_after_step = 3;
  CHECK(RunFinetune(part)["interrupted"] == true);
  CHECK(LoadLedger(Checkpoint::Load(part.out_dir / "adapters.ckpt")).steps == 3);
  CHECK(AdapterValues(part.out_dir / "adapters.ckpt") !=
        AdapterValues(full.out_dir / "adapters.ckpt"));
  part.stop_after_step.reset();
  part.resume = part.out_dir / "adapters.ckpt";
  CHECK(RunFinetune(part)["interrupted"] == false);

  const Checkpoint a = Checkpoint::Load(full.out_dir / "adapters.ckpt");
  const Checkpoint b = Checkpoint::Load(part.out_dir / "adapters.ckpt");
  CHECK(AdapterValues(full.out_dir / "adapters.ckpt") ==
        AdapterValues(part.out_dir / "adapters.ckpt"));
  CHECK(LoadLedger(a) == LoadLedger(b));
  CHECK(LoadOptimizer(a).first_moment == LoadOptimizer(b).first_moment);
  for (const char* stream : {"data", "noise", "diffusion"}) {
    CHECK(LoadRng(a, stream) == LoadRng(b, stream));
  }
}

TEST_CASE("an exhausted ledger hard-stops a resumed run and keeps its state") {
  RunContext ctx = FineTuneContext("dplora_pipeline_stop");
  RunFinetune(ctx);
  const fs::path ckpt = ctx.out_dir / "adapters.ckpt";
  const PrivacyLedger::State before = LoadLedger(Checkpoint::Load(ckpt));
  const auto adapters_before = AdapterValues(ckpt);

  // One step past the calibrated budget.
  RunContext more = ctx;
  more.config = ExperimentConfig::Parse(ctx.config.Dump() + "");
  more.config.mechanism.max_steps = 7;
  more.resume = ckpt;
  try {
    RunFinetune(more);
    FAIL("the seventh step was not refused");
  } catch (const PrivacyHardStop& e) {
    CHECK(ExitCodeFor(e) == kExitPrivacyHardStop);
  }
  const PrivacyLedger::State after = LoadLedger(Checkpoint::Load(ckpt));
  CHECK(after.steps == before.steps);
  CHECK(after.sigma == before.sigma);
  CHECK(after.q == before.q);
  CHECK(after.budget_epsilon == before.budget_epsilon);
  CHECK(after.hard_stopped);
  CHECK(PrivacyLedger(after).Spent().epsilon == PrivacyLedger(before).Spent().epsilon);
  CHECK(AdapterValues(ckpt) == adapters_before);
  bool logged = false;
  for (const auto& r : ReadReport(ArtifactPaths::Report(more, "finetune_dp"))) {
    logged |= r.value("event", "") == "hard_stop";
  }
  CHECK(logged);

  // A stopped ledger refuses even a run with no steps left to take... and
  // every later resume.
  more.config.mechanism.max_steps = 8;
  CHECK_THROWS_AS(RunFinetune(more), PrivacyHardStop);
}

TEST_CASE("an unattainable budget refuses to start") {
  RunContext ctx = FineTuneContext("dplora_pipeline_infeasible", "[budget]\nepsilon: float = 1e-4\n");
  CHECK_THROWS_AS(RunFinetune(ctx), PrivacyDomainError);
  CHECK_FALSE(fs::exists(ctx.out_dir / "adapters.ckpt"));
  RunContext loose = FineTuneContext("dplora_pipeline_delta", "[budget]\ndelta: float = 0.5\n");
  CHECK_THROWS_AS(RunFinetune(loose), PrivacyDomainError);
}

TEST_CASE("generation is deterministic and evaluation compares both models") {
  RunContext ctx = FineTuneContext("dplora_pipeline_gen");
  RunFinetune(ctx);
  const auto first = RunGenerate(ctx);
  const auto again = RunGenerate(ctx);
  CHECK(first["grid_hash"] == again["grid_hash"]);
  CHECK(first["images"] == 80);
  CHECK(first["strided_sampler"] == true);
  CHECK(fs::exists(ctx.out_dir / "grid-finetuned.pgm"));
  ctx.config.sampling.use_adapters = false;
  const auto frozen = RunGenerate(ctx);
  CHECK(frozen["model"] == "frozen");
  // The tiny decoder is barely trained, so compare the raw samples rather
  // than the 8-bit grid.
  CHECK(FileHash(ArtifactPaths::Samples(ctx, false)) != FileHash(ArtifactPaths::Samples(ctx, true)));

  const auto eval = RunEvaluate(ctx);
  CHECK(eval.contains("finetuned"));
  CHECK(eval.contains("frozen"));
  CHECK(eval.contains("fid_improvement"));
  CHECK(eval["finetuned"]["desk_fid"].get<double>() >= 0.0);
  CHECK(eval["finetuned"]["classes"] == std::vector<int>{2, 3});
  // The real-statistics cache is reused by a second evaluation.
  CHECK(fs::exists(ctx.out_dir / "features.stats"));
  CHECK(RunEvaluate(ctx)["finetuned"]["desk_fid"] == eval["finetuned"]["desk_fid"]);
}

TEST_CASE("ablation emits one row per cell and tracks adapter size") {
  RunContext ctx = FineTuneContext("dplora_pipeline_ablate");
  const auto summary = RunAblation(ctx);
  CHECK(summary["cells"] == 2);  // (r=2, k=2) is shared by the k and rank sweeps
  REQUIRE(summary["rank"].size() == 2);
  const auto r2 = summary["rank"][0]["delta_param_count"].get<std::int64_t>();
  const auto r4 = summary["rank"][1]["delta_param_count"].get<std::int64_t>();
  CHECK(r4 == 2 * r2);
  for (const char* table : {"ablate.tsv", "ablate-k.tsv", "ablate-rank.tsv", "ablate-placement.tsv"}) {
    CHECK(fs::exists(ctx.out_dir / table));
  }
  std::ifstream in(ctx.out_dir / "ablate-rank.tsv");
  std::string header, row1, row2, extra;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK(header == "rank\tdelta_param_count\tdesk_fid\tstatus");
  CHECK(row1.rfind("2\t", 0) == 0);
  CHECK(row2.find("\tok") != std::string::npos);
  CHECK_FALSE(std::getline(in, extra));
}

TEST_CASE("a failing ablation cell is recorded and the sweep continues") {
  // Rank 0 cannot be attached; the other cell still runs.
  RunContext ctx = FineTuneContext("dplora_pipeline_ablate_fail");
  ctx.config.ablate.ranks = {0, 2};
  const auto summary = RunAblation(ctx);
  REQUIRE(summary["rank"].size() == 2);
  CHECK(summary["rank"][0]["status"].get<std::string>().rfind("failed", 0) == 0);
  CHECK(summary["rank"][1]["status"] == "ok");
}

}  // namespace
}  // namespace dplora
