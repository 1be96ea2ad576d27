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

// Experiment orchestration: the two-stage protocol (public pretraining of an
// autoencoder and a latent denoiser, then DP fine-tuning of LoRA adapters on
// private data), generation, evaluation and ablation sweeps. Every stage
// writes checkpoints and a JSON-lines report under the output directory.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "dplora/config.hpp"
#include "dplora/data.hpp"

namespace dplora {

// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitSuccess = 0,
  kExitFailure = 1,  // anything not covered below (I/O, internal errors)
  kExitConfigError = 2,
  kExitPrivacyHardStop = 3,
  kExitNumericalFailure = 4,
};

// Maps an exception escaping a stage to its exit code.
int ExitCodeFor(const std::exception& error);

// A stage was started before the stages it depends on produced their
// checkpoints.
class MissingDependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The held-out autoencoder reconstruction error exceeded the configured
// threshold.
class QualityGateError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Public classes train the base models; the configured private classes are
// split into a DP training part and a test part that serves as the real
// reference for evaluation.
struct DataSplits {
  Dataset public_train;
  Dataset public_holdout;
  Dataset private_train;
  Dataset private_test;
};
DataSplits LoadSplits(const ExperimentConfig& config);

struct RunContext {
  ExperimentConfig config;
  std::filesystem::path out_dir = ".";
  // Fine-tuning resumes exactly (ledger, optimizer, RNG counters); the
  // pretraining stages warm-start from the checkpoint's weights.
  std::optional<std::filesystem::path> resume;
  // Fine-tuning checkpoints and returns once the ledger reaches this many
  // steps, as if interrupted; a later --resume continues the same run.
  std::optional<std::int64_t> stop_after_step;
  // Progress lines; null for silence.
  std::ostream* log = nullptr;
};

// Where a run reads and writes its artifacts.
struct ArtifactPaths {
  std::filesystem::path autoencoder;
  std::filesystem::path denoiser;
  std::filesystem::path adapters;
  std::filesystem::path features;
  std::filesystem::path real_stats;

  static ArtifactPaths For(const RunContext& ctx);
  // Samples of the fine-tuned (or frozen) model: raw tensor, IDX labels, grid.
  static std::filesystem::path Samples(const RunContext& ctx, bool adapters);
  static std::filesystem::path SampleLabels(const RunContext& ctx, bool adapters);
  static std::filesystem::path Grid(const RunContext& ctx, bool adapters);
  static std::filesystem::path Report(const RunContext& ctx, const std::string& stage);
};

// Each returns a JSON summary of what the stage did.
nlohmann::json RunPretrainAutoencoder(const RunContext& ctx);
nlohmann::json RunPretrainDenoiser(const RunContext& ctx);
// Throws PrivacyHardStop (after checkpointing the final state) if the ledger
// refuses a step, and PrivacyDomainError before training if no noise level
// meets the budget.
nlohmann::json RunFinetune(const RunContext& ctx);
nlohmann::json RunGenerate(const RunContext& ctx);
// Desk-FID against the private test split and downstream two-class accuracy
// for every sample set present (fine-tuned and/or frozen).
nlohmann::json RunEvaluate(const RunContext& ctx);
// One-factor-at-a-time sweeps over rank, k and placement around the base
// config, written as tab-separated tables. Failed cells are recorded and the
// sweep continues.
nlohmann::json RunAblation(const RunContext& ctx);
// Dispatches on config.run.stage.
nlohmann::json RunStage(const RunContext& ctx);

// Noise level, epsilon and step count implied by the config for the private
// training split (or an explicit noise level when given).
nlohmann::json AccountantSummary(const ExperimentConfig& config,
                                 std::optional<double> sigma = std::nullopt);

}  // namespace dplora
