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

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism. All
// arithmetic is double precision and deterministic for fixed inputs.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace dplora {

class PrivacyDomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a training step would push spent epsilon past the budget, and
// for every step attempted afterwards.
class PrivacyHardStop : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PrivacyBudget {
  double epsilon = 0.0;
  double delta = 1e-5;

  // Validates delta < 1 / dataset_size in addition to the basic ranges.
  static PrivacyBudget ForDataset(double epsilon, double delta, std::int64_t dataset_size);
  void Validate() const;
};

// 1e-5 below 100,000 records, 1e-6 otherwise.
double DefaultDelta(std::int64_t dataset_size);

struct MechanismParams {
  double q = 1.0;      // Poisson sampling rate, expected_batch / N
  double sigma = 1.0;  // noise multiplier
  std::int64_t steps = 1;

  void Validate() const;
};

struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> eps_rdp;
};

// {1.25, 1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 28, 32, 48, 64, 128, 256}
std::span<const double> DefaultOrders();

// Per-step RDP of the subsampled Gaussian at each order. Exactly
// alpha / (2 sigma^2) when q == 1.
RdpCurve RdpSubsampledGaussian(double q, double sigma, std::span<const double> orders);
inline RdpCurve RdpSubsampledGaussian(double q, double sigma) {
  return RdpSubsampledGaussian(q, sigma, DefaultOrders());
}

// Linear composition over `steps` applications.
RdpCurve Compose(const RdpCurve& curve, std::int64_t steps);

struct DpConversion {
  double epsilon = 0.0;
  double order = 0.0;  // minimising order
};

// min over orders of eps_rdp(a) + log(1/delta) / (a - 1).
DpConversion RdpToDp(const RdpCurve& curve, double delta);

// Epsilon after mech.steps steps of the subsampled Gaussian.
DpConversion ComputeEpsilon(const MechanismParams& mech, double delta);

inline constexpr double kMinSigma = 0.3;
inline constexpr double kMaxSigma = 1e4;
// Relative slack below the target that calibration accepts.
inline constexpr double kCalibrationTolerance = 1e-3;

// Smallest-found sigma in [kMinSigma, kMaxSigma] whose epsilon lies in
// [target * (1 - kCalibrationTolerance), target]. Never over budget.
double CalibrateSigma(const PrivacyBudget& target, double q, std::int64_t steps);

// Live epsilon meter for one training run.
class PrivacyLedger {
 public:
  struct State {
    double q = 1.0;
    double sigma = 1.0;
    double delta = 1e-5;
    double budget_epsilon = 0.0;
    std::int64_t steps = 0;
    bool hard_stopped = false;

    friend bool operator==(const State&, const State&) = default;
  };

  PrivacyLedger(double q, double sigma, double delta, double budget_epsilon);
  explicit PrivacyLedger(const State& state);

  // Accounts for one more step. Throws PrivacyHardStop (leaving the step
  // count unchanged) if that step would exceed the budget or if the ledger
  // already stopped.
  PrivacyBudget Step();
  // Whether one more step fits in the budget.
  bool CanStep() const;
  PrivacyBudget Spent() const;
  DpConversion SpentDetail() const;

  const State& state() const { return state_; }
  std::int64_t steps() const { return state_.steps; }
  bool hard_stopped() const { return state_.hard_stopped; }

 private:
  DpConversion EpsilonAfter(std::int64_t steps) const;

  State state_;
  RdpCurve per_step_;
};

}  // namespace dplora
