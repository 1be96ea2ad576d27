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

#include "dplora/autodiff.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>

namespace dplora {

GradientMap CollectGradients(const Tape& tape, const ParamStore& params) {
  GradientMap out;
  for (const auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    out.names.push_back(e.name);
    const auto* g = tape.GradOf(e.tensor);
    if (g != nullptr) {
      out.values.push_back(*g);
    } else {
      out.values.emplace_back(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
    }
  }
  return out;
}

void Backward(Tape& tape, const Tensor& loss, ParamStore& params) {
  tape.Backward(loss);
  GradientMap grads = CollectGradients(tape, params);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    params.Get(grads.names[i]).mutable_grad() = std::move(grads.values[i]);
  }
}

std::vector<GradientMap> PerExampleGradients(Tape& tape, const Tensor& loss_vector,
                                             const ParamStore& params, const Tensor& batch_input) {
  if (loss_vector.rank() != 1) {
    throw ShapeError("per-example gradients need a loss vector, got " +
                     ShapeToString(loss_vector.shape()));
  }
  const std::int64_t batch = loss_vector.dim(0);
  if (batch_input.defined() && (batch_input.rank() == 0 || batch_input.dim(0) != batch)) {
    throw ShapeError("batch input leading dim does not match the loss vector");
  }
  std::vector<GradientMap> out;
  out.reserve(static_cast<std::size_t>(batch));
  std::vector<Real> seed(static_cast<std::size_t>(batch), 0.0f);
  for (std::int64_t i = 0; i < batch; ++i) {
    std::fill(seed.begin(), seed.end(), 0.0f);
    seed[i] = 1.0f;
    tape.Backward(loss_vector, seed, /*retain=*/i + 1 < batch);
    if (batch_input.defined()) {
      if (const auto* gin = tape.GradOf(batch_input)) {
        const std::int64_t row = batch_input.numel() / batch;
        for (std::int64_t j = 0; j < batch; ++j) {
          if (j == i) continue;
          for (std::int64_t k = 0; k < row; ++k) {
            if ((*gin)[j * row + k] != 0.0f) {
              throw CouplingError("loss of example " + std::to_string(i) +
                                  " depends on input of example " + std::to_string(j));
            }
          }
        }
      }
    }
    out.push_back(CollectGradients(tape, params));
  }
  return out;
}

std::vector<GradientMap> PerExampleGradientsLoop(int batch_size, const ExampleLossFn& example_loss,
                                                 const ParamStore& params, int threads) {
  std::vector<GradientMap> out(static_cast<std::size_t>(std::max(batch_size, 0)));
  auto run = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = example_loss(i);
      }
      if (loss.numel() != 1) {
        throw ShapeError("example loss must be scalar, got " + ShapeToString(loss.shape()));
      }
      tape.Backward(loss);
      out[i] = CollectGradients(tape, params);
    }
  };
  threads = std::clamp(threads, 1, std::max(batch_size, 1));
  if (threads == 1) {
    run(0, batch_size);
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  {
    std::vector<std::jthread> workers;
    const int chunk = (batch_size + threads - 1) / threads;
    for (int w = 0; w < threads; ++w) {
      const int begin = w * chunk, end = std::min(batch_size, begin + chunk);
      workers.emplace_back([&, w, begin, end] {
        try {
          run(begin, end);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

int ThreadsFromEnvironment() {
  const char* v = std::getenv("DPLORA_THREADS");
  if (v == nullptr) return 1;
  const int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

}  // namespace dplora
