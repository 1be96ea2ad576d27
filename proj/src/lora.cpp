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

#include "dplora/lora.hpp"

#include <cmath>

#include "dplora/nn.hpp"
#include "dplora/ops.hpp"

namespace dplora {

AdapterPlacement AdapterPlacement::Parse(const std::string& text) {
  if (text == "both") return {true, true};
  if (text == "qkv") return {true, false};
  if (text == "projection") return {false, true};
  throw std::invalid_argument("unknown adapter placement '" + text +
                              "' (expected both | qkv | projection)");
}

std::string AdapterPlacement::ToString() const {
  if (qkv && out_projection) return "both";
  if (qkv) return "qkv";
  if (out_projection) return "projection";
  return "none";
}

LoraAdapter LoraAdapter::Create(ParamStore& params, const std::string& prefix, std::int64_t in,
                                std::int64_t out, int rank, Real alpha, SeededRng& rng) {
  if (rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  if (!(alpha > 0.0f)) throw std::invalid_argument("LoRA alpha must be positive");
  Tensor a = Tensor::Zeros({rank, in});
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  for (auto& v : a.mutable_data()) v = static_cast<Real>(stddev * rng.Normal());
  LoraAdapter adapter;
  adapter.a = params.Add(prefix + ".lora_a", a, ParamGroup::kAdapter);
  adapter.b = params.Add(prefix + ".lora_b", Tensor::Zeros({out, rank}), ParamGroup::kAdapter);
  adapter.rank = rank;
  adapter.alpha = alpha;
  return adapter;
}

Tensor LoraAdapter::Delta(const Tensor& x, SeededRng* dropout_rng) const {
  Tensor in = x;
  if (dropout > 0.0f && dropout_rng != nullptr) {
    Tensor mask = Tensor::Zeros(x.shape());
    const Real keep = 1.0f / (1.0f - dropout);
    for (auto& m : mask.mutable_data()) m = dropout_rng->Bernoulli(dropout) ? 0.0f : keep;
    in = ops::Mul(x, mask);
  }
  Tensor low = ops::MatMul(in, ops::Transpose(a));
  return ops::Scale(ops::MatMul(low, ops::Transpose(b)), scale());
}

Tensor MergeWeights(const LoraAdapter& adapter, const Tensor& w_pt) {
  if (w_pt.rank() != 2 || w_pt.dim(0) != adapter.out_features() ||
      w_pt.dim(1) != adapter.in_features()) {
    throw ShapeError("merge: weight " + ShapeToString(w_pt.shape()) + " vs adapter [" +
                     std::to_string(adapter.out_features()) + ", " +
                     std::to_string(adapter.in_features()) + "]");
  }
  const std::int64_t out = adapter.out_features(), in = adapter.in_features();
  const Real s = adapter.scale();
  auto av = adapter.a.data();
  auto bv = adapter.b.data();
  std::vector<Real> merged(w_pt.data().begin(), w_pt.data().end());
  for (std::int64_t o = 0; o < out; ++o) {
    for (int r = 0; r < adapter.rank; ++r) {
      const Real coef = bv[o * adapter.rank + r];
      if (coef == 0.0f) continue;
      for (std::int64_t i = 0; i < in; ++i) merged[o * in + i] += s * coef * av[r * in + i];
    }
  }
  return Tensor::FromData(w_pt.shape(), std::move(merged));
}

int AttachLora(std::span<const AdapterSite> sites, ParamStore& params, const LoraOptions& options,
               SeededRng& rng) {
  if (!options.placement.qkv && !options.placement.out_projection) {
    throw std::invalid_argument("adapter placement selects no target");
  }
  for (AdapterTarget t : {AdapterTarget::kAttentionQkv, AdapterTarget::kAttentionOutProjection}) {
    if (!options.placement.Includes(t)) continue;
    bool found = false;
    for (const auto& s : sites) found = found || s.target == t;
    if (!found) {
      throw std::invalid_argument(std::string("placement target absent from model: ") +
                                  (t == AdapterTarget::kAttentionQkv ? "qkv" : "projection"));
    }
  }
  int attached = 0;
  for (const auto& s : sites) {
    if (!options.placement.Includes(s.target)) continue;
    LoraAdapter adapter = LoraAdapter::Create(params, s.name, s.linear->in_features(),
                                              s.linear->out_features(), options.rank,
                                              options.alpha, rng);
    adapter.dropout = options.dropout;
    s.linear->Attach(std::move(adapter));
    ++attached;
  }
  params.TrainAdaptersOnly();
  return attached;
}

std::int64_t DeltaParamCount(std::span<const AdapterSite> sites, const AdapterPlacement& placement,
                             int rank) {
  if (rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  std::int64_t n = 0;
  for (const auto& s : sites) {
    if (placement.Includes(s.target)) {
      n += static_cast<std::int64_t>(rank) * (s.linear->in_features() + s.linear->out_features());
    }
  }
  return n;
}

}  // namespace dplora
