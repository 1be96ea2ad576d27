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

// The privatized gradient step: per-example clipping to a global l2 norm,
// Gaussian noise scaled by sigma * C / expected_batch, and an SGD or Adam
// update gated by the privacy ledger.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dplora/accountant.hpp"
#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"

namespace dplora {

// min(1, C / ||g||) * g with the norm taken over every parameter in the map.
GradientMap ClipPerSample(const GradientMap& grad, double max_norm);

struct PrivatizedGradient {
  GradientMap grad;
  std::int64_t realized_batch = 0;
  double clip_norm = 0.0;
  double sigma = 0.0;
  double expected_batch = 0.0;
  // Mean l2 norm of the per-example gradients before clipping.
  double mean_pre_clip_norm = 0.0;
  // sigma == 0: no privacy, reported as such.
  bool non_private = false;
};

// (1 / expected_batch) * sum_i clip_C(g_i) + (sigma * C / expected_batch) * xi
// with xi ~ N(0, I) drawn fresh per coordinate from `noise_rng`. `layout`
// fixes parameter names and sizes so an empty Poisson draw still yields a
// (pure-noise) gradient.
PrivatizedGradient Privatize(std::span<const GradientMap> per_example, const GradientMap& layout,
                             double clip_norm, double sigma, double expected_batch,
                             SeededRng& noise_rng);

// Zero gradient map covering the trainable parameters of `params`.
GradientMap TrainableLayout(const ParamStore& params);

enum class UpdateRule { kSgd, kAdam };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::kAdam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<Real>> first_moment;
  std::map<std::string, std::vector<Real>> second_moment;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  // Applies one update to every parameter named in `grad`. Each must exist,
  // be trainable, and match in size.
  void Apply(ParamStore& params, const GradientMap& grad);

  const OptimizerConfig& config() const { return config_; }
  // For step-size schedules; moments are unaffected.
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState state) { state_ = std::move(state); }

 private:
  OptimizerConfig config_;
  OptimizerState state_;
};

// One DP update: the ledger is charged first (PrivacyHardStop propagates and
// nothing changes), then the optimizer applies the privatized gradient.
// A null ledger is only valid for a non-private gradient.
void DpStep(Optimizer& optimizer, ParamStore& params, const PrivatizedGradient& g,
            PrivacyLedger* ledger);

}  // namespace dplora
