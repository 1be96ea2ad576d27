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

// Parameterised layers over ParamStore. Each layer keeps handles to its
// tensors; the store owns naming and trainability.

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dplora/lora.hpp"
#include "dplora/ops.hpp"
#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"

namespace dplora {

// y = x W^T + b (+ adapter delta). W: [out, in].
class Linear {
 public:
  Linear() = default;
  static Linear Create(ParamStore& params, const std::string& name, std::int64_t in,
                       std::int64_t out, bool bias, SeededRng& rng);

  Tensor Forward(const Tensor& x, SeededRng* dropout_rng = nullptr) const;

  void Attach(LoraAdapter adapter);
  bool adapted() const { return adapter_.has_value(); }
  const LoraAdapter& adapter() const { return *adapter_; }
  // Folds the adapter into the weight in place and drops it.
  void MergeAdapter();

  const std::string& name() const { return name_; }
  std::int64_t in_features() const { return in_; }
  std::int64_t out_features() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::string name_;
  std::int64_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
  std::optional<LoraAdapter> adapter_;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  static Conv2dLayer Create(ParamStore& params, const std::string& name, std::int64_t in_channels,
                            std::int64_t out_channels, int kernel, int stride, int padding,
                            SeededRng& rng);
  Tensor Forward(const Tensor& x) const;

 private:
  Tensor weight_, bias_;
  ops::Conv2dOptions opts_;
};

class GroupNormLayer {
 public:
  GroupNormLayer() = default;
  static GroupNormLayer Create(ParamStore& params, const std::string& name, std::int64_t channels,
                               int groups);
  Tensor Forward(const Tensor& x) const { return ops::GroupNorm(x, groups_, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
  int groups_ = 1;
};

class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  static LayerNormLayer Create(ParamStore& params, const std::string& name, std::int64_t dim);
  Tensor Forward(const Tensor& x) const { return ops::LayerNorm(x, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
};

// Largest group count <= preferred that divides channels.
int GroupsFor(std::int64_t channels, int preferred = 8);

}  // namespace dplora
