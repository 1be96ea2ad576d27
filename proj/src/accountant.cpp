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

#include "dplora/accountant.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace dplora {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

constexpr std::array<double, 21> kDefaultOrders = {1.25, 1.5, 1.75, 2,  2.5, 3,  4,
                                                   5,    6,   8,    10, 12,  16, 20,
                                                   24,   28,  32,   48, 64,  128, 256};

double LogAdd(double x, double y) {
  const double lo = std::min(x, y), hi = std::max(x, y);
  if (lo == kNegInf) return hi;
  return std::log1p(std::exp(lo - hi)) + hi;
}

// log(exp(x) - exp(y)) for x >= y.
double LogSub(double x, double y) {
  if (x < y) throw std::domain_error("log-subtraction would be negative");
  if (y == kNegInf) return x;
  if (x == y) return kNegInf;
  const double d = x - y;
  if (d > 700.0) return x;
  return std::log(std::expm1(d)) + y;
}

// log(erfc(x)), accurate in the far right tail where erfc underflows.
double LogErfc(double x) {
  if (x < 20.0) return std::log(std::erfc(x));
  const double x2 = x * x;
  // Asymptotic expansion: erfc(x) ~ e^{-x^2} / (x sqrt(pi)) * (1 - 1/(2x^2) + 3/(4x^4) - 15/(8x^6))
  const double series =
      1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
  return -x2 - std::log(x) - 0.5 * std::log(std::numbers::pi) + std::log(series);
}

double LogBinomial(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log E_{z~mu0}[(mu(z)/mu0(z))^alpha] for integer alpha via the binomial
// expansion of ((1 - q) + q * mu1/mu0)^alpha.
double LogAInteger(double q, double sigma, int alpha) {
  double log_a = kNegInf;
  const double s2 = sigma * sigma;
  for (int i = 0; i <= alpha; ++i) {
    const double log_coef = LogBinomial(alpha, i) + i * std::log(q) + (alpha - i) * std::log1p(-q);
    const double term = log_coef + (static_cast<double>(i) * i - i) / (2.0 * s2);
    log_a = LogAdd(log_a, term);
  }
  return log_a;
}

// Fractional alpha: split the integral at z0 and sum two convergent series
// with generalised binomial coefficients until terms drop below e^-30.
double LogAFractional(double q, double sigma, double alpha) {
  double log_a0 = kNegInf, log_a1 = kNegInf;
  const double s2 = sigma * sigma;
  const double z0 = s2 * std::log(1.0 / q - 1.0) + 0.5;
  const double sqrt2_sigma = std::sqrt(2.0) * sigma;
  double log_abs_coef = 0.0;  // log|binom(alpha, i)|, updated incrementally
  double sign = 1.0;
  for (int i = 0;; ++i) {
    if (i > 0) {
      const double factor = (alpha - (i - 1)) / static_cast<double>(i);
      if (factor == 0.0) break;
      log_abs_coef += std::log(std::abs(factor));
      if (factor < 0.0) sign = -sign;
    }
    const double j = alpha - i;
    const double log_t0 = log_abs_coef + i * std::log(q) + j * std::log1p(-q);
    const double log_t1 = log_abs_coef + j * std::log(q) + i * std::log1p(-q);
    const double log_e0 = std::log(0.5) + LogErfc((i - z0) / sqrt2_sigma);
    const double log_e1 = std::log(0.5) + LogErfc((z0 - j) / sqrt2_sigma);
    const double log_s0 = log_t0 + (static_cast<double>(i) * i - i) / (2.0 * s2) + log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
    if (sign > 0.0) {
      log_a0 = LogAdd(log_a0, log_s0);
      log_a1 = LogAdd(log_a1, log_s1);
    } else {
      log_a0 = LogSub(log_a0, log_s0);
      log_a1 = LogSub(log_a1, log_s1);
    }
    if (std::max(log_s0, log_s1) < -30.0) break;
    if (i > 100000) throw std::runtime_error("fractional-order RDP series did not converge");
  }
  return LogAdd(log_a0, log_a1);
}

double RdpAtOrder(double q, double sigma, double alpha) {
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  const double log_a = (alpha == std::floor(alpha) && alpha < 1e6)
                           ? LogAInteger(q, sigma, static_cast<int>(alpha))
                           : LogAFractional(q, sigma, alpha);
  // Tiny negative values are rounding residue of log(1).
  return std::max(0.0, log_a / (alpha - 1.0));
}

}  // namespace

void PrivacyBudget::Validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw PrivacyDomainError("epsilon must be a finite nonnegative number");
  }
  if (!(delta > 0.0 && delta < 1.0)) throw PrivacyDomainError("delta must lie in (0, 1)");
}

PrivacyBudget PrivacyBudget::ForDataset(double epsilon, double delta, std::int64_t dataset_size) {
  PrivacyBudget b{epsilon, delta};
  b.Validate();
  if (dataset_size < 1) throw PrivacyDomainError("dataset size must be positive");
  if (!(delta < 1.0 / static_cast<double>(dataset_size))) {
    throw PrivacyDomainError("delta " + std::to_string(delta) +
                             " is not below 1/N for N = " + std::to_string(dataset_size));
  }
  return b;
}

double DefaultDelta(std::int64_t dataset_size) { return dataset_size < 100000 ? 1e-5 : 1e-6; }

void MechanismParams::Validate() const {
  if (!(q > 0.0 && q <= 1.0)) throw PrivacyDomainError("sampling rate q must lie in (0, 1]");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw PrivacyDomainError("noise multiplier must be positive");
  }
  if (steps < 1) throw PrivacyDomainError("steps must be >= 1");
}

std::span<const double> DefaultOrders() { return kDefaultOrders; }

RdpCurve RdpSubsampledGaussian(double q, double sigma, std::span<const double> orders) {
  MechanismParams{q, sigma, 1}.Validate();
  RdpCurve curve;
  for (double a : orders) {
    if (!(a > 1.0) || !std::isfinite(a)) throw PrivacyDomainError("Renyi orders must exceed 1");
    curve.orders.push_back(a);
    curve.eps_rdp.push_back(RdpAtOrder(q, sigma, a));
  }
  return curve;
}

RdpCurve Compose(const RdpCurve& curve, std::int64_t steps) {
  if (steps < 1) throw PrivacyDomainError("composition needs steps >= 1");
  RdpCurve out = curve;
  for (std::size_t i = 0; i < out.eps_rdp.size(); ++i) {
    out.eps_rdp[i] *= static_cast<double>(steps);
    if (!std::isfinite(out.eps_rdp[i])) {
      throw std::overflow_error("RDP composition overflowed at order " +
                                std::to_string(out.orders[i]));
    }
  }
  return out;
}

DpConversion RdpToDp(const RdpCurve& curve, double delta) {
  if (curve.orders.empty()) throw PrivacyDomainError("empty RDP curve");
  if (!(delta > 0.0 && delta < 1.0)) throw PrivacyDomainError("delta must lie in (0, 1)");
  const double log_inv_delta = std::log(1.0 / delta);
  DpConversion best{std::numeric_limits<double>::infinity(), 0.0};
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double eps = curve.eps_rdp[i] + log_inv_delta / (curve.orders[i] - 1.0);
    if (eps < best.epsilon) best = {eps, curve.orders[i]};
  }
  return best;
}

DpConversion ComputeEpsilon(const MechanismParams& mech, double delta) {
  mech.Validate();
  return RdpToDp(Compose(RdpSubsampledGaussian(mech.q, mech.sigma), mech.steps), delta);
}

double CalibrateSigma(const PrivacyBudget& target, double q, std::int64_t steps) {
  target.Validate();
  if (!(target.epsilon > 0.0)) throw PrivacyDomainError("target epsilon must be positive");
  auto eps_at = [&](double sigma) {
    return ComputeEpsilon({q, sigma, steps}, target.delta).epsilon;
  };
  double lo = kMinSigma, hi = kMaxSigma;
  if (eps_at(hi) > target.epsilon) {
    throw PrivacyDomainError("budget epsilon " + std::to_string(target.epsilon) +
                             " infeasible even at sigma = " + std::to_string(kMaxSigma));
  }
  if (eps_at(lo) <= target.epsilon) return lo;
  // Invariant: eps(lo) > target >= eps(hi).
  const double floor = target.epsilon * (1.0 - kCalibrationTolerance);
  for (int iter = 0; iter < 200; ++iter) {
    if (eps_at(hi) >= floor) return hi;
    const double mid = 0.5 * (lo + hi);
    if (eps_at(mid) > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

PrivacyLedger::PrivacyLedger(double q, double sigma, double delta, double budget_epsilon)
    : PrivacyLedger(State{q, sigma, delta, budget_epsilon, 0, false}) {}

PrivacyLedger::PrivacyLedger(const State& state) : state_(state) {
  MechanismParams{state_.q, state_.sigma, 1}.Validate();
  PrivacyBudget{state_.budget_epsilon, state_.delta}.Validate();
  if (state_.steps < 0) throw PrivacyDomainError("negative step count in ledger state");
  per_step_ = RdpSubsampledGaussian(state_.q, state_.sigma);
}

DpConversion PrivacyLedger::EpsilonAfter(std::int64_t steps) const {
  if (steps == 0) return {0.0, 0.0};
  return RdpToDp(Compose(per_step_, steps), state_.delta);
}

bool PrivacyLedger::CanStep() const {
  return !state_.hard_stopped && EpsilonAfter(state_.steps + 1).epsilon <= state_.budget_epsilon;
}

PrivacyBudget PrivacyLedger::Step() {
  if (state_.hard_stopped) {
    throw PrivacyHardStop("privacy budget exhausted: step after hard stop");
  }
  const double next = EpsilonAfter(state_.steps + 1).epsilon;
  if (next > state_.budget_epsilon) {
    state_.hard_stopped = true;
    throw PrivacyHardStop("privacy budget exhausted: step " + std::to_string(state_.steps + 1) +
                          " would spend epsilon " + std::to_string(next) + " > budget " +
                          std::to_string(state_.budget_epsilon));
  }
  ++state_.steps;
  return {next, state_.delta};
}

PrivacyBudget PrivacyLedger::Spent() const {
  return {EpsilonAfter(state_.steps).epsilon, state_.delta};
}

DpConversion PrivacyLedger::SpentDetail() const { return EpsilonAfter(state_.steps); }

}  // namespace dplora
