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

#include "dplora/nn.hpp"

#include <cmath>

namespace dplora {
namespace {

Tensor UniformInit(Shape shape, Real bound, SeededRng& rng) {
  Tensor t = Tensor::Zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<Real>((2.0 * rng.Uniform() - 1.0) * bound);
  return t;
}

}  // namespace

Linear Linear::Create(ParamStore& params, const std::string& name, std::int64_t in,
                      std::int64_t out, bool bias, SeededRng& rng) {
  Linear l;
  l.name_ = name;
  l.in_ = in;
  l.out_ = out;
  const Real bound = 1.0f / std::sqrt(static_cast<Real>(in));
  l.weight_ = params.Add(name + ".weight", UniformInit({out, in}, bound, rng));
  if (bias) l.bias_ = params.Add(name + ".bias", UniformInit({out}, bound, rng));
  return l;
}

Tensor Linear::Forward(const Tensor& x, SeededRng* dropout_rng) const {
  Tensor y = ops::MatMul(x, ops::Transpose(weight_));
  if (bias_.defined()) y = ops::Add(y, bias_);
  if (adapter_) y = ops::Add(y, adapter_->Delta(x, dropout_rng));
  return y;
}

void Linear::Attach(LoraAdapter adapter) {
  if (adapter.in_features() != in_ || adapter.out_features() != out_) {
    throw ShapeError("adapter shape does not match linear map " + name_);
  }
  adapter_ = std::move(adapter);
}

void Linear::MergeAdapter() {
  if (!adapter_) return;
  Tensor merged = MergeWeights(*adapter_, weight_);
  auto dst = weight_.mutable_data();
  std::copy(merged.data().begin(), merged.data().end(), dst.begin());
  adapter_.reset();
}

Conv2dLayer Conv2dLayer::Create(ParamStore& params, const std::string& name,
                                std::int64_t in_channels, std::int64_t out_channels, int kernel,
                                int stride, int padding, SeededRng& rng) {
  Conv2dLayer c;
  const Real bound = 1.0f / std::sqrt(static_cast<Real>(in_channels * kernel * kernel));
  c.weight_ =
      params.Add(name + ".weight", UniformInit({out_channels, in_channels, kernel, kernel}, bound, rng));
  c.bias_ = params.Add(name + ".bias", UniformInit({out_channels}, bound, rng));
  c.opts_ = {stride, padding};
  return c;
}

Tensor Conv2dLayer::Forward(const Tensor& x) const {
  return ops::Conv2d(x, weight_, bias_, opts_);
}

GroupNormLayer GroupNormLayer::Create(ParamStore& params, const std::string& name,
                                      std::int64_t channels, int groups) {
  GroupNormLayer g;
  g.gamma_ = params.Add(name + ".gamma", Tensor::Full({channels}, 1.0f));
  g.beta_ = params.Add(name + ".beta", Tensor::Zeros({channels}));
  g.groups_ = groups;
  return g;
}

LayerNormLayer LayerNormLayer::Create(ParamStore& params, const std::string& name,
                                      std::int64_t dim) {
  LayerNormLayer l;
  l.gamma_ = params.Add(name + ".gamma", Tensor::Full({dim}, 1.0f));
  l.beta_ = params.Add(name + ".beta", Tensor::Zeros({dim}));
  return l;
}

int GroupsFor(std::int64_t channels, int preferred) {
  for (int g = preferred; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

}  // namespace dplora
