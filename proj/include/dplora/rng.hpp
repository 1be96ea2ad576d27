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

#pragma once

#include <cstdint>

namespace dplora {

// Counter-based SplitMix64 generator: draw number c of seed s is
// mix(s + (c + 1) * 0x9e3779b97f4a7c15), so (seed, counter) fully determines
// the stream position and checkpoints only need those two integers.
// Normals use the cosine branch of Box-Muller over two consecutive uniforms.
class SeededRng {
 public:
  static constexpr const char* kAlgorithm = "splitmix64+box-muller";

  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t NextU64();
  // Uniform in the open interval (0, 1), 53-bit resolution.
  double Uniform();
  double Normal();
  // Uniform integer in [0, n).
  std::uint64_t UniformInt(std::uint64_t n);
  bool Bernoulli(double p) { return Uniform() < p; }

  // Independent child stream: seed = mix(seed ^ stream * golden), counter 0.
  SeededRng Derive(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t counter) { counter_ = counter; }

  friend bool operator==(const SeededRng&, const SeededRng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

// Stream ids for the three independent streams of an experiment.
enum class RngStream : std::uint64_t { kDataSampling = 1, kDpNoise = 2, kDiffusionNoise = 3 };

inline SeededRng StreamFor(std::uint64_t master_seed, RngStream stream) {
  return SeededRng(master_seed).Derive(static_cast<std::uint64_t>(stream));
}

}  // namespace dplora
