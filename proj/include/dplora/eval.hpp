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

// Evaluation: a small frozen feature network for desk-FID (a within-project
// Frechet distance; not comparable to Inception-based FID) and downstream
// accuracy of classifiers trained on synthetic images.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dplora/nn.hpp"
#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

// Mean and unbiased covariance (row-major dim x dim), held in double.
struct GaussianStats {
  int dim = 0;
  std::int64_t count = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
};

// features: [n, dim]. Requires n > dim so the covariance is well posed.
GaussianStats FitGaussian(const Tensor& features);

// Eigenvalues below this are treated as zero; more negative ones mean the
// input was not a covariance.
inline constexpr double kEigenClamp = 1e-8;

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at 0. The
// square root uses symmetric eigendecompositions: Tr((S_a S_b)^(1/2)) =
// Tr((R S_b R)^(1/2)) with R = S_a^(1/2).
double FrechetDistance(const GaussianStats& a, const GaussianStats& b);

struct TrainingOptions {
  int epochs = 5;
  int batch_size = 64;
  double learning_rate = 1e-3;
};

// Two strided conv blocks and a global mean pool to 64 features, trained
// once with a linear classifier head and then frozen. The version tag
// fingerprints architecture and weights, so equal tags give bit-identical
// features.
class FeatureExtractor {
 public:
  static constexpr int kFeatureDim = 64;

  static FeatureExtractor Create(ParamStore& params, int num_classes, SeededRng& rng);
  // Trains feature layers and head on labelled images [N, 1, 32, 32].
  void Train(ParamStore& params, const Tensor& images, std::span<const int> labels,
             const TrainingOptions& options, SeededRng& rng);

  Tensor Logits(const Tensor& images) const;
  // [N, 64], computed in batches without recording.
  Tensor Features(const Tensor& images, int batch_size = 256) const;
  std::string VersionTag(const ParamStore& params) const;

 private:
  Tensor Pooled(const Tensor& images) const;
  Conv2dLayer conv1_, conv2_;
  Linear head_;
};

GaussianStats FeatureStats(const FeatureExtractor& extractor, const Tensor& images);

// Versioned binary cache {tag, n, mu, sigma} for real-data statistics.
class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
void SaveStats(const std::filesystem::path& path, const std::string& tag,
               const GaussianStats& stats);
// Throws StaleCacheError if the stored tag differs from `expected_tag`.
GaussianStats LoadStats(const std::filesystem::path& path, const std::string& expected_tag);

enum class ClassifierArch { kCnn, kResnet9Lite };
ClassifierArch ParseClassifierArch(const std::string& text);  // "cnn" | "resnet9-lite"

struct ClassifierOptions {
  ClassifierArch arch = ClassifierArch::kCnn;
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct AccuracyReport {
  double accuracy = 0.0;
  std::vector<int> classes;                 // sorted label values
  std::vector<std::vector<int>> confusion;  // [true][predicted], class order
};

class LabelMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Trains a classifier non-privately on the synthetic set and tests it on the
// real set. The two label sets must coincide.
AccuracyReport DownstreamAccuracy(const Tensor& synthetic_images,
                                  std::span<const int> synthetic_labels, const Tensor& real_images,
                                  std::span<const int> real_labels,
                                  const ClassifierOptions& options);

}  // namespace dplora
