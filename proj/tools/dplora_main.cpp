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

// Command-line entry point: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 1 other failure, 2 configuration or input error,
// 3 privacy budget hard stop, 4 numerical failure.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dplora/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::int64_t> seed;
  std::string out = "runs/default";
  std::string resume;
  bool quiet = false;
};

void AddCommon(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "experiment config file");
  cmd->add_option("--seed", flags.seed, "master seed (overrides run.seed)");
  cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
  cmd->add_option("--resume", flags.resume, "checkpoint to resume from");
  cmd->add_flag("--quiet", flags.quiet, "suppress progress lines");
}

dplora::RunContext MakeContext(const CommonFlags& flags, const std::string& stage) {
  dplora::RunContext ctx;
  ctx.config = flags.config.empty() ? dplora::ExperimentConfig::Parse("")
                                    : dplora::ExperimentConfig::Load(flags.config);
  ctx.config.run.stage = stage;
  if (flags.seed) ctx.config.run.seed = *flags.seed;
  ctx.out_dir = flags.out;
  if (!flags.resume.empty()) ctx.resume = flags.resume;
  if (!flags.quiet) ctx.log = &std::cerr;
  std::filesystem::create_directories(ctx.out_dir);
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentially private LoRA fine-tuning of latent diffusion models"};
  app.require_subcommand(1);
  CommonFlags flags;
  bool frozen = false;
  std::optional<double> sigma;

  struct Stage {
    const char* command;
    const char* stage;
    const char* help;
  };
  const Stage stages[] = {
      {"pretrain-ae", "pretrain_ae", "pretrain the autoencoder on public data"},
      {"pretrain-ldm", "pretrain_ldm", "pretrain the latent denoiser on public data"},
      {"finetune-dp", "finetune_dp", "DP fine-tune LoRA adapters on private data"},
      {"generate", "generate", "sample images for the private classes"},
      {"evaluate", "evaluate", "desk-FID and downstream accuracy of generated samples"},
      {"ablate", "ablate", "sweep rank, noise multiplicity and adapter placement"},
  };
  std::string selected;
  for (const auto& s : stages) {
    CLI::App* cmd = app.add_subcommand(s.command, s.help);
    AddCommon(cmd, flags);
    if (std::string(s.command) == "generate") {
      cmd->add_flag("--frozen", frozen, "sample the pretrained model without adapters");
    }
    cmd->callback([&selected, &s] { selected = s.stage; });
  }
  CLI::App* accountant = app.add_subcommand(
      "accountant", "noise multiplier and epsilon implied by the config's budget and mechanism");
  AddCommon(accountant, flags);
  accountant->add_option("--sigma", sigma, "evaluate epsilon at this noise multiplier instead");
  accountant->callback([&selected] { selected = "accountant"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dplora::kExitSuccess : dplora::kExitConfigError;
  }

  try {
    if (selected == "accountant") {
      dplora::RunContext ctx = MakeContext(flags, "finetune_dp");
      const auto summary = dplora::AccountantSummary(ctx.config, sigma);
      std::cout << summary.dump(2) << std::endl;
      return summary["within_budget"].get<bool>() ? dplora::kExitSuccess
                                                   : dplora::kExitPrivacyHardStop;
    }
    dplora::RunContext ctx = MakeContext(flags, selected);
    if (frozen) ctx.config.sampling.use_adapters = false;
    const auto summary = dplora::RunStage(ctx);
    std::cout << summary.dump(2) << std::endl;
    return dplora::kExitSuccess;
  } catch (const std::exception& e) {
    const int code = dplora::ExitCodeFor(e);
    std::cerr << "error: " << e.what() << std::endl;
    return code;
  }
}
