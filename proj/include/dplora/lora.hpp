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

// Low-rank adapters: a frozen map W gains a trainable correction so the
// effective weight is W + (alpha / rank) * B * A, with B zero at creation
// so the adapted function starts out identical to the pretrained one.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

class Linear;

enum class AdapterTarget { kAttentionQkv, kAttentionOutProjection };

struct AdapterPlacement {
  bool qkv = true;
  bool out_projection = true;

  bool Includes(AdapterTarget target) const {
    return target == AdapterTarget::kAttentionQkv ? qkv : out_projection;
  }
  // "both" | "qkv" | "projection"
  static AdapterPlacement Parse(const std::string& text);
  std::string ToString() const;
};

struct LoraAdapter {
  Tensor a;  // [rank, in], N(0, 1/rank) at creation
  Tensor b;  // [out, rank], zeros at creation
  int rank = 0;
  Real alpha = 0.0f;
  Real dropout = 0.0f;

  Real scale() const { return alpha / static_cast<Real>(rank); }
  std::int64_t in_features() const { return a.dim(1); }
  std::int64_t out_features() const { return b.dim(0); }
  std::int64_t parameter_count() const { return a.numel() + b.numel(); }

  // Registers `<prefix>.lora_a` / `<prefix>.lora_b` in the adapter group.
  static LoraAdapter Create(ParamStore& params, const std::string& prefix, std::int64_t in,
                            std::int64_t out, int rank, Real alpha, SeededRng& rng);

  // scale * (dropout(x) A^T) B^T for x: [..., in]. Dropout applies only when
  // dropout > 0 and an rng is supplied (training).
  Tensor Delta(const Tensor& x, SeededRng* dropout_rng = nullptr) const;
};

// W_FT = W_PT + scale * B A, as a new tensor.
Tensor MergeWeights(const LoraAdapter& adapter, const Tensor& w_pt);

// A linear map inside a model that may receive an adapter.
struct AdapterSite {
  std::string name;
  AdapterTarget target;
  Linear* linear;
};

struct LoraOptions {
  AdapterPlacement placement;
  int rank = 16;
  Real alpha = 16.0f;
  Real dropout = 0.0f;
};

// Adds adapters to every site whose target is selected by the placement and
// freezes everything outside the adapter group. Returns the number of adapted
// sites. Throws if a selected target kind has no site.
int AttachLora(std::span<const AdapterSite> sites, ParamStore& params, const LoraOptions& options,
               SeededRng& rng);

// Adapter parameter count implied by (sites, placement, rank) without
// attaching: sum of rank * (in + out) over selected sites.
std::int64_t DeltaParamCount(std::span<const AdapterSite> sites, const AdapterPlacement& placement,
                             int rank);

}  // namespace dplora
