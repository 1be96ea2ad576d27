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

#include <array>
#include <cmath>

#include "doctest.h"
#include "dplora/accountant.hpp"
#include "rdp_oracle.hpp"

namespace dplora {
namespace {

// Per-step RDP at q = 0.01, sigma = 1 on the default order grid, frozen from
// the quadrature oracle in rdp_oracle.hpp.
constexpr std::array<double, 21> kOracleQ001Sigma1 = {
    0.00010539800509814547, 0.00012725374332741863, 0.00014938884720028765,
    0.00017181342207454311, 0.00021757533228187702, 0.00026463757458466161,
    0.00036315404891075199, 0.00046866724216915114, 0.00058349814893817473,
    0.00089364390760603,    0.038270418894948477,   0.97801171802536191,
    3.0878507836962448,     5.1524530196774991,     7.1946050339177443,
    9.2242679554645743,     11.246275937048068,     19.296847469629185,
    27.32173187455178,      59.358568631445074,     123.37677032308646};

double RelDiff(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

TEST_CASE("q = 1 reduces to the Gaussian mechanism closed form") {
  RdpCurve c = RdpSubsampledGaussian(1.0, 2.0, std::array<double, 1>{2.0});
  CHECK(c.eps_rdp[0] == 0.25);
  for (double sigma : {0.5, 1.0, 3.7}) {
    RdpCurve full = RdpSubsampledGaussian(1.0, sigma);
    for (std::size_t i = 0; i < full.orders.size(); ++i) {
      CHECK(std::abs(full.eps_rdp[i] - full.orders[i] / (2 * sigma * sigma)) <= 1e-12);
    }
  }
}

TEST_CASE("vanishing sampling rate costs nothing") {
  RdpCurve c = RdpSubsampledGaussian(1e-12, 1.0, std::array<double, 1>{2.0});
  CHECK(c.eps_rdp[0] < 1e-9);
  CHECK(c.eps_rdp[0] >= 0.0);
}

TEST_CASE("subsampled curve matches the frozen quadrature values") {
  RdpCurve c = RdpSubsampledGaussian(0.01, 1.0);
  REQUIRE(c.orders.size() == kOracleQ001Sigma1.size());
  for (std::size_t i = 0; i < c.orders.size(); ++i) {
    INFO("order " << c.orders[i]);
    CHECK(RelDiff(c.eps_rdp[i], kOracleQ001Sigma1[i]) < 1e-6);
  }
}

TEST_CASE("subsampled curve matches live quadrature on other mechanisms") {
  for (double q : {0.003, 0.05, 0.3}) {
    for (double sigma : {0.7, 1.5, 4.0}) {
      RdpCurve c = RdpSubsampledGaussian(q, sigma);
      for (std::size_t i = 0; i < c.orders.size(); ++i) {
        INFO("q " << q << " sigma " << sigma << " order " << c.orders[i]);
        CHECK(RelDiff(c.eps_rdp[i], testing::OracleRdp(q, sigma, c.orders[i])) < 1e-6);
      }
    }
  }
}

TEST_CASE("domain errors") {
  CHECK_THROWS_AS(RdpSubsampledGaussian(0.0, 1.0), PrivacyDomainError);
  CHECK_THROWS_AS(RdpSubsampledGaussian(1.5, 1.0), PrivacyDomainError);
  CHECK_THROWS_AS(RdpSubsampledGaussian(0.1, 0.0), PrivacyDomainError);
  CHECK_THROWS_AS(RdpSubsampledGaussian(0.1, 1.0, std::array<double, 1>{1.0}), PrivacyDomainError);
  CHECK_THROWS_AS(RdpToDp(RdpCurve{}, 1e-5), PrivacyDomainError);
  CHECK_THROWS_AS(Compose(RdpSubsampledGaussian(0.1, 1.0), 0), PrivacyDomainError);
}

TEST_CASE("composition") {
  RdpCurve c = RdpSubsampledGaussian(0.02, 1.1);
  RdpCurve one = Compose(c, 1);
  CHECK(one.eps_rdp == c.eps_rdp);
  RdpCurve tiny{{2.0}, {0.001}};
  CHECK(Compose(tiny, 1000).eps_rdp[0] == doctest::Approx(1.0).epsilon(1e-12));
  RdpCurve nested = Compose(Compose(c, 10), 5);
  RdpCurve direct = Compose(c, 50);
  for (std::size_t i = 0; i < c.orders.size(); ++i) {
    CHECK(nested.eps_rdp[i] == doctest::Approx(direct.eps_rdp[i]).epsilon(1e-14));
  }
  RdpCurve huge{{2.0}, {1e305}};
  CHECK_THROWS_AS(Compose(huge, 1000000), std::overflow_error);
}

TEST_CASE("rdp to (epsilon, delta)") {
  RdpCurve single{{2.0}, {0.25}};
  DpConversion d = RdpToDp(single, std::exp(-1.0));
  CHECK(d.epsilon == doctest::Approx(1.25).epsilon(1e-14));
  CHECK(d.order == 2.0);

  RdpCurve c = RdpSubsampledGaussian(0.05, 2.0);
  const double min_rdp = *std::min_element(c.eps_rdp.begin(), c.eps_rdp.end());
  DpConversion limit = RdpToDp(c, 1.0 - 1e-12);
  CHECK(limit.epsilon == doctest::Approx(min_rdp).epsilon(1e-6));
}

TEST_CASE("end-to-end epsilon against the oracle chain") {
  // q = 0.01, sigma = 1, T = 1000, delta = 1e-5 through the frozen oracle curve.
  RdpCurve oracle{{DefaultOrders().begin(), DefaultOrders().end()},
                  {kOracleQ001Sigma1.begin(), kOracleQ001Sigma1.end()}};
  const DpConversion expected = RdpToDp(Compose(oracle, 1000), 1e-5);
  DpConversion got = ComputeEpsilon({0.01, 1.0, 1000}, 1e-5);
  CHECK(RelDiff(got.epsilon, expected.epsilon) < 1e-6);
  CHECK(got.order == expected.order);
}

TEST_CASE("calibration round-trips below the target") {
  PrivacyBudget target{10.0, 1e-5};
  const double sigma = CalibrateSigma(target, 0.02, 2000);
  const double eps = ComputeEpsilon({0.02, sigma, 2000}, 1e-5).epsilon;
  CHECK(eps <= 10.0);
  CHECK(eps >= 9.99);
}

TEST_CASE("calibration monotonicity") {
  const double s_eps1 = CalibrateSigma({1.0, 1e-5}, 0.05, 200);
  const double s_eps2 = CalibrateSigma({2.0, 1e-5}, 0.05, 200);
  CHECK(s_eps2 < s_eps1);
  const double s_t400 = CalibrateSigma({1.0, 1e-5}, 0.05, 400);
  CHECK(s_t400 > s_eps1);
}

TEST_CASE("calibration rejects infeasible budgets") {
  CHECK_THROWS_AS(CalibrateSigma({1e-9, 1e-5}, 1.0, 1000000), PrivacyDomainError);
  CHECK_THROWS_AS(CalibrateSigma({0.0, 1e-5}, 0.1, 10), PrivacyDomainError);
}

TEST_CASE("epsilon is monotone in sigma, steps and q over a grid") {
  const std::array<double, 5> sigmas{0.6, 0.9, 1.3, 2.0, 4.0};
  const std::array<std::int64_t, 5> steps{1, 10, 100, 1000, 5000};
  const std::array<double, 5> qs{0.001, 0.01, 0.05, 0.2, 1.0};
  double eps[5][5][5];
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 5; ++k)
        eps[i][j][k] = ComputeEpsilon({qs[k], sigmas[i], steps[j]}, 1e-5).epsilon;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 0; k < 5; ++k) {
        if (i + 1 < 5) CHECK(eps[i + 1][j][k] <= eps[i][j][k]);
        if (j + 1 < 5) CHECK(eps[i][j + 1][k] >= eps[i][j][k]);
        if (k + 1 < 5) CHECK(eps[i][j][k + 1] >= eps[i][j][k]);
      }
}

TEST_CASE("rdp is nondecreasing in q") {
  double prev[21] = {};
  for (double q : {1e-4, 1e-3, 0.01, 0.1, 0.5, 0.9, 1.0}) {
    RdpCurve c = RdpSubsampledGaussian(q, 1.2);
    for (std::size_t i = 0; i < c.orders.size(); ++i) {
      CHECK(c.eps_rdp[i] >= 0.0);
      CHECK(c.eps_rdp[i] >= prev[i]);
      prev[i] = c.eps_rdp[i];
    }
  }
}

TEST_CASE("accountant output is bit-reproducible") {
  CHECK(ComputeEpsilon({0.013, 1.7, 777}, 1e-5).epsilon ==
        ComputeEpsilon({0.013, 1.7, 777}, 1e-5).epsilon);
}

TEST_CASE("ledger tracks composition and stops at the budget") {
  PrivacyLedger fresh(0.1, 1.0, 1e-5, 5.0);
  CHECK(fresh.Spent().epsilon == 0.0);

  PrivacyLedger ledger(0.05, 1.3, 1e-5, 100.0);
  for (int i = 0; i < 37; ++i) ledger.Step();
  CHECK(ledger.Spent().epsilon == ComputeEpsilon({0.05, 1.3, 37}, 1e-5).epsilon);

  const double sigma = CalibrateSigma({1.0, 1e-5}, 0.1, 100);
  PrivacyLedger capped(0.1, sigma, 1e-5, 1.0);
  for (int i = 0; i < 100; ++i) CHECK_NOTHROW(capped.Step());
  CHECK_FALSE(capped.CanStep());
  CHECK_THROWS_AS(capped.Step(), PrivacyHardStop);
  CHECK(capped.steps() == 100);
  CHECK(capped.hard_stopped());
  CHECK_THROWS_AS(capped.Step(), PrivacyHardStop);

  PrivacyLedger restored(capped.state());
  CHECK(restored.state() == capped.state());
  CHECK(restored.Spent().epsilon == capped.Spent().epsilon);
}

TEST_CASE("delta policy") {
  CHECK(DefaultDelta(60000) == 1e-5);
  CHECK(DefaultDelta(200000) == 1e-6);
  CHECK_NOTHROW(PrivacyBudget::ForDataset(10.0, 1e-5, 1000));
  CHECK_THROWS_AS(PrivacyBudget::ForDataset(10.0, 1e-3, 1000), PrivacyDomainError);
}

}  // namespace
}  // namespace dplora
