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

// Differentiable primitives. Each op validates shapes, rejects non-finite
// inputs, and records a backward rule on the active tape when any input
// requires a gradient. Without an active tape ops run in inference mode.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dplora/tensor.hpp"

namespace dplora::ops {

// Elementwise with numpy-style broadcasting (right-aligned, dims equal or 1).
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& x, Real factor);
Tensor Square(const Tensor& x);

// a: [..., M, K], b: [..., K, N] with equal leading dims, or b: [K, N].
Tensor MatMul(const Tensor& a, const Tensor& b);
// Swaps the last two dims.
Tensor Transpose(const Tensor& x);
Tensor Permute(const Tensor& x, std::span<const int> order);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};
// x: [N, C, H, W], weight: [O, C, KH, KW], bias: [O] or undefined.
Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});
// Nearest-neighbour upsampling of the two trailing dims.
Tensor UpsampleNearest(const Tensor& x, int factor);

// Normalizes over the last dim; gamma/beta: [D].
Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5f);
// x: [N, C, ...]; statistics per (example, group), never across examples.
Tensor GroupNorm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                 Real eps = 1e-5f);

Tensor Silu(const Tensor& x);
// Over the last dim.
Tensor Softmax(const Tensor& x);
Tensor LogSoftmax(const Tensor& x);

Tensor Sum(const Tensor& x);
Tensor Mean(const Tensor& x);
// Averages dims [from_axis, rank); result has shape[:from_axis].
Tensor MeanTrailing(const Tensor& x, int from_axis);

// One dim may be -1.
Tensor Reshape(const Tensor& x, Shape shape);
Tensor Concat(std::span<const Tensor> parts, int axis);
Tensor Slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);

// table: [V, D]; result: [indices.size(), D].
Tensor EmbeddingLookup(const Tensor& table, std::span<const int> indices);

// logits: [N, K]; returns per-example negative log-likelihood, shape [N].
Tensor CrossEntropy(const Tensor& logits, std::span<const int> labels);

}  // namespace dplora::ops
