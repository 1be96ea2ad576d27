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

#include <functional>
#include <stdexcept>
#include <vector>

#include "dplora/param_store.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

// Example i's loss depended on example j != i. Raised in DP mode, where
// per-example sensitivity requires independent examples.
class CouplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reverse pass from a scalar loss. Every trainable parameter ends up with a
// grad buffer; parameters the loss does not reach get zeros.
void Backward(Tape& tape, const Tensor& loss, ParamStore& params);

// Trainable-parameter gradients from the tape's last reverse pass.
GradientMap CollectGradients(const Tape& tape, const ParamStore& params);

// Per-example gradients from a recorded loss vector of B entries, one reverse
// pass per entry. When `batch_input` (leading dim B, requires_grad) is given,
// a nonzero gradient from loss i into any other example's input row raises
// CouplingError. Consumes the tape.
std::vector<GradientMap> PerExampleGradients(Tape& tape, const Tensor& loss_vector,
                                             const ParamStore& params,
                                             const Tensor& batch_input = Tensor());

// Microbatch-of-one reference path: example_loss(i) builds example i's scalar
// loss on a fresh tape. With threads > 1 examples are split across workers,
// each owning its tapes; results stay in example order. example_loss must then
// be safe to call concurrently.
using ExampleLossFn = std::function<Tensor(int example)>;
std::vector<GradientMap> PerExampleGradientsLoop(int batch_size, const ExampleLossFn& example_loss,
                                                 const ParamStore& params, int threads = 1);

// Worker count from DPLORA_THREADS (default 1).
int ThreadsFromEnvironment();

}  // namespace dplora
