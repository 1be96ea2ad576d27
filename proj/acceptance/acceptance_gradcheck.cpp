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

// Runs the finite-difference suite against the float64 build and prints one
// line per check. Exit status 0 when every check is below the tolerance.

#include <chrono>
#include <cstdio>

#include "grad_check_suite.hpp"

int main() {
  using namespace dplora::testing;
  static_assert(sizeof(dplora::Real) == 8, "gradient checks need the float64 build");
  constexpr double kTolerance = 1e-3;
  const auto start = std::chrono::steady_clock::now();
  std::vector<NamedCheck> checks = PrimitiveChecks();
  checks.push_back(MlpCheck());
  checks.push_back(DenoiserCheck());
  const NamedCheck* worst = &checks.front();
  int coordinates = 0;
  for (const auto& c : checks) {
    std::printf("check %s %.3e %d\n", c.name.c_str(), c.result.max_rel_error, c.result.coordinates);
    coordinates += c.result.coordinates;
    if (c.result.max_rel_error > worst->result.max_rel_error) worst = &c;
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("summary checks %zu coordinates %d worst %s %.3e seconds %.2f\n", checks.size(),
              coordinates, worst->name.c_str(), worst->result.max_rel_error, seconds);
  return worst->result.max_rel_error < kTolerance ? 0 : 1;
}
