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

// Datasets: IDX ingestion, a procedural shapes generator, class-based
// public/private splits with an access firewall, and Poisson subsampling.

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dplora/rng.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when private data would reach a non-private consumer.
class FirewallError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class SourceFormat { kIdx, kRawTensor, kSyntheticShapes };
enum class Split { kTrain, kTest };
enum class Sensitivity { kPublic, kPrivate };

const char* SourceFormatName(SourceFormat format);
SourceFormat ParseSourceFormat(const std::string& text);  // idx | raw-tensor | synthetic-shapes

// Images [N, 1, S, S] in [-1, 1] with optional labels, tagged with where they
// came from and how they may be used.
struct Dataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;  // empty when unlabelled
  SourceFormat format = SourceFormat::kIdx;
  Split split = Split::kTrain;
  Sensitivity sensitivity = Sensitivity::kPublic;

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  bool labelled() const { return !labels.empty(); }
  // Rows in the given order; tags are kept.
  Dataset Subset(std::span<const std::int64_t> rows) const;
};

// Big-endian IDX files: magic 0x00000803 (images, u8 pixels) and 0x00000801
// (labels). Images are scaled to [-1, 1] and zero-padded (background -1)
// symmetrically to image_size x image_size.
Tensor ReadIdxImages(const std::filesystem::path& path, int image_size);
std::vector<int> ReadIdxLabels(const std::filesystem::path& path);
Dataset IngestIdx(const std::filesystem::path& images, const std::filesystem::path& labels,
                  int image_size, Split split, Sensitivity sensitivity);

// Writers for the same layout (used to build fixtures and export data).
void WriteIdxImages(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                    std::int32_t count, std::int32_t rows, std::int32_t cols);
void WriteIdxLabels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

// Raw tensor files: 8-byte magic "DPRT1\0\0\0", four little-endian u32
// dimensions [N, 1, S, S], then N*S*S little-endian f32 pixels in [-1, 1].
// Labels, if any, come from an IDX label file (empty path = unlabelled).
void WriteRawTensorImages(const std::filesystem::path& path, const Tensor& images);
Tensor ReadRawTensorImages(const std::filesystem::path& path, int image_size);
Dataset IngestRawTensor(const std::filesystem::path& images, const std::filesystem::path& labels,
                        int image_size, Split split, Sensitivity sensitivity);

// Deterministic procedural shapes (0 disc, 1 square, 2 triangle, 3 cross)
// with random position and size.
inline constexpr int kShapeClasses = 4;
Dataset SyntheticShapes(std::int64_t count, std::uint64_t seed, int image_size = 32);

// The part of `source` whose labels are in (or not in) `classes`.
Dataset SelectClasses(const Dataset& source, const std::set<int>& classes, bool keep);

// Deterministic shuffle-and-cut into (train, test) with `test_fraction` of
// the rows in the test part.
std::pair<Dataset, Dataset> TrainTestSplit(const Dataset& source, double test_fraction,
                                           std::uint64_t seed);

// Who is about to read a dataset.
enum class Consumer { kNonPrivateTraining, kDpTraining, kEvaluationReference };
// Private data may only feed DP training and, from its test split, the real
// side of evaluation.
void RequireConsumable(const Dataset& dataset, Consumer consumer);

// Each example joins a batch independently with probability q. Empty
// batches are returned as-is.
class PoissonSampler {
 public:
  PoissonSampler(std::int64_t population, double q, SeededRng rng);
  std::vector<std::int64_t> Next();
  const SeededRng& rng() const { return rng_; }
  double q() const { return q_; }

 private:
  std::int64_t population_;
  double q_;
  SeededRng rng_;
};

}  // namespace dplora
