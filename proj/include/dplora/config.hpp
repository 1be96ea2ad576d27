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

// Experiment configuration in a sectioned, explicitly typed text format:
//
//   # comment
//   [section]
//   key: type = value
//
// Types are int, float, bool, string, ints and strings (the list types take
// comma-separated values). Every field has a default; unknown sections or
// keys and type mismatches are errors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dplora {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  struct Run {
    // pretrain_ae | pretrain_ldm | finetune_dp | generate | evaluate | ablate;
    // the CLI subcommand overrides it.
    std::string stage = "finetune_dp";
    std::int64_t seed = 0;
  } run;
  struct Data {
    std::string format = "idx";
    std::string images = "digits5k-images-idx3-ubyte";
    std::string labels = "digits5k-labels-idx1-ubyte";
    std::int64_t image_size = 32;
    std::int64_t synthetic_count = 1000;
    std::vector<std::int64_t> private_classes = {8, 9};
    double private_test_fraction = 0.2;
    double public_holdout_fraction = 0.1;
    std::int64_t split_seed = 0;
  } data;
  struct Budget {
    double epsilon = 10.0;
    double delta = 1e-5;
  } budget;
  struct Mechanism {
    double clip_norm = 1.0;
    std::int64_t expected_batch = 32;
    std::int64_t epochs = 40;
    std::int64_t k = 4;
    // Overrides the step count implied by epochs when positive.
    std::int64_t max_steps = 0;
    double learning_rate = 1e-3;
    // Linear decay of the step size to zero over the run.
    bool lr_decay = true;
  } mechanism;
  struct Lora {
    std::int64_t rank = 16;
    double alpha = 16.0;
    std::string placement = "both";
    double dropout = 0.0;
  } lora;
  struct Autoencoder {
    std::int64_t base_channels = 16;
    std::vector<std::int64_t> channel_mult = {1, 2, 4, 4};
    std::int64_t latent_channels = 3;
    std::int64_t epochs = 20;
    std::int64_t batch_size = 32;
    double learning_rate = 1e-3;
    // Held-out reconstruction MSE on the [-1, 1] pixel scale.
    double mse_threshold = 0.02;
  } autoencoder;
  struct Denoiser {
    std::int64_t channels = 64;
    std::int64_t num_heads = 2;
    std::int64_t num_res_blocks = 1;
    bool conditional = true;
    std::int64_t num_classes = 10;
    std::int64_t embed_dim = 5;
    std::int64_t timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::int64_t epochs = 40;
    std::int64_t batch_size = 64;
    double learning_rate = 1e-3;
    bool lr_decay = true;
  } denoiser;
  struct Sampling {
    std::int64_t steps = 50;
    std::int64_t chunk_size = 250;
    // Generated images per class; 0 matches the private training split.
    std::int64_t samples_per_class = 0;
    // false samples the frozen pretrained model (the baseline).
    bool use_adapters = true;
  } sampling;
  struct Eval {
    std::int64_t feature_epochs = 5;
    std::string classifier = "cnn";
    std::int64_t classifier_epochs = 20;
    std::int64_t classifier_seeds = 3;
  } eval;
  struct Ablate {
    std::vector<std::int64_t> ranks = {8, 16, 32, 64};
    std::vector<std::int64_t> ks = {1, 2, 4, 8};
    std::vector<std::string> placements = {"both", "qkv", "projection"};
    std::int64_t epochs = 10;
    std::int64_t samples_per_class = 200;
  } ablate;
  struct Paths {
    // Empty means <out>/<default file name>.
    std::string autoencoder;
    std::string denoiser;
    std::string adapters;
    std::string features;
  } paths;

  // Directory that relative data paths are resolved against.
  std::filesystem::path base_dir = ".";

  static ExperimentConfig Parse(const std::string& text,
                                const std::filesystem::path& base_dir = ".");
  static ExperimentConfig Load(const std::filesystem::path& path);

  // Full text form with every field resolved; parses back to an equal config.
  std::string Dump() const;
  // FNV-1a of Dump().
  std::uint64_t Hash() const;
  // Range checks across fields.
  void Validate() const;

  std::filesystem::path Resolve(const std::string& path) const;
};

}  // namespace dplora
