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

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dplora/autodiff.hpp"
#include "dplora/lora.hpp"
#include "dplora/nn.hpp"
#include "dplora/ops.hpp"
#include "grad_check.hpp"

namespace dplora {
namespace {

// One attention-like block: fused qkv d -> 3d plus output projection d -> d.
struct Block {
  ParamStore params;
  Linear qkv, out, mlp;
  Block(std::int64_t dim, std::uint64_t seed) {
    SeededRng rng(seed);
    qkv = Linear::Create(params, "qkv", dim, 3 * dim, true, rng);
    out = Linear::Create(params, "out", dim, dim, true, rng);
    mlp = Linear::Create(params, "mlp", dim, dim, true, rng);
  }
  std::vector<AdapterSite> Sites() {
    return {{"qkv", AdapterTarget::kAttentionQkv, &qkv},
            {"out", AdapterTarget::kAttentionOutProjection, &out}};
  }
  Tensor Forward(const Tensor& x) const {
    Tensor h = qkv.Forward(x);
    Tensor v = ops::Slice(h, -1, 2 * out.in_features(), out.in_features());
    return mlp.Forward(ops::Silu(out.Forward(v)));
  }
};

// Tensor handles alias storage, so a copy of the adapter edits the original.
void RandomizeB(LoraAdapter adapter, SeededRng& rng) {
  for (auto& v : adapter.b.mutable_data()) v = static_cast<Real>(0.3 * rng.Normal());
}

double MaxAbsDiff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return worst;
}

TEST_CASE("attached adapters leave the function unchanged") {
  Block block(8, 1);
  SeededRng data(2);
  Tensor x = testing::RandomTensor({5, 8}, data);
  Tensor before = block.Forward(x);
  SeededRng rng(3);
  auto sites = block.Sites();
  CHECK(AttachLora(sites, block.params, {}, rng) == 2);
  Tensor after = block.Forward(x);
  CHECK(std::vector<Real>(before.data().begin(), before.data().end()) ==
        std::vector<Real>(after.data().begin(), after.data().end()));
}

TEST_CASE("attach freezes everything but the adapters") {
  Block block(8, 1);
  SeededRng rng(3);
  auto sites = block.Sites();
  AttachLora(sites, block.params, {.rank = 4}, rng);
  CHECK(block.params.TrainableNames() ==
        std::vector<std::string>{"qkv.lora_a", "qkv.lora_b", "out.lora_a", "out.lora_b"});
  CHECK(block.params.CountParameters(ParamGroup::kAdapter) == 4 * (8 + 24) + 4 * (8 + 8));
}

TEST_CASE("placement selects targets and rejects absent ones") {
  Block block(8, 1);
  SeededRng rng(3);
  auto sites = block.Sites();
  CHECK(AttachLora(sites, block.params, {.placement = AdapterPlacement::Parse("qkv")}, rng) == 1);
  CHECK(block.qkv.adapted());
  CHECK_FALSE(block.out.adapted());
  Block other(8, 1);
  std::vector<AdapterSite> other_qkv{{"qkv", AdapterTarget::kAttentionQkv, &other.qkv}};
  CHECK_THROWS_AS(AttachLora(other_qkv, other.params,
                             {.placement = AdapterPlacement::Parse("projection")}, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(AdapterPlacement::Parse("mlp"), std::invalid_argument);
  CHECK(AdapterPlacement::Parse("both").ToString() == "both");
}

TEST_CASE("adapter count for a 64-wide block at rank 16") {
  Block block(64, 1);
  auto sites = block.Sites();
  CHECK(DeltaParamCount(sites, AdapterPlacement::Parse("both"), 16) == 6144);
  SeededRng rng(4);
  AttachLora(sites, block.params, {.rank = 16}, rng);
  CHECK(block.params.CountParameters(ParamGroup::kAdapter) == 6144);
}

TEST_CASE("adapter count is linear in rank and rejects rank 0") {
  Block block(32, 1);
  auto sites = block.Sites();
  for (const char* p : {"both", "qkv", "projection"}) {
    auto placement = AdapterPlacement::Parse(p);
    CHECK(DeltaParamCount(sites, placement, 8) * 2 == DeltaParamCount(sites, placement, 16));
    CHECK(DeltaParamCount(sites, placement, 32) * 2 == DeltaParamCount(sites, placement, 64));
  }
  CHECK_THROWS_AS(DeltaParamCount(sites, {}, 0), std::invalid_argument);
}

TEST_CASE("doubling one input width doubles only that target's A factor") {
  ParamStore params;
  SeededRng rng(1);
  Linear narrow = Linear::Create(params, "n", 10, 6, false, rng);
  Linear wide = Linear::Create(params, "w", 20, 6, false, rng);
  Linear proj = Linear::Create(params, "p", 6, 6, false, rng);
  const int r = 4;
  std::vector<AdapterSite> a{{"q", AdapterTarget::kAttentionQkv, &narrow},
                             {"p", AdapterTarget::kAttentionOutProjection, &proj}};
  std::vector<AdapterSite> b{{"q", AdapterTarget::kAttentionQkv, &wide},
                             {"p", AdapterTarget::kAttentionOutProjection, &proj}};
  CHECK(DeltaParamCount(b, {}, r) - DeltaParamCount(a, {}, r) == r * 10);
}

TEST_CASE("merge arithmetic") {
  ParamStore params;
  SeededRng rng(5);
  LoraAdapter adapter = LoraAdapter::Create(params, "m", 2, 2, 2, 2.0f, rng);
  Tensor w = Tensor::FromData({2, 2}, {1, 0, 0, 1});
  Tensor same = MergeWeights(adapter, w);
  CHECK(std::vector<Real>(same.data().begin(), same.data().end()) ==
        std::vector<Real>{1, 0, 0, 1});

  // B A = diag(0.1, 0.1) with scale 1.
  auto a = adapter.a.mutable_data();
  a[0] = 1, a[1] = 0, a[2] = 0, a[3] = 1;
  auto b = adapter.b.mutable_data();
  b[0] = 0.1f, b[1] = 0, b[2] = 0, b[3] = 0.1f;
  Tensor merged = MergeWeights(adapter, w);
  CHECK(merged.at(0) == doctest::Approx(1.1));
  CHECK(merged.at(1) == 0.0f);
  CHECK(merged.at(2) == 0.0f);
  CHECK(merged.at(3) == doctest::Approx(1.1));
  CHECK_THROWS_AS(MergeWeights(adapter, Tensor::Zeros({3, 2})), ShapeError);
}

TEST_CASE("merged forward matches adapter forward on 100 random inputs") {
  ParamStore params;
  SeededRng rng(6);
  Linear layer = Linear::Create(params, "l", 16, 16, true, rng);
  layer.Attach(LoraAdapter::Create(params, "l", 16, 16, 2, 2.0f, rng));
  RandomizeB(layer.adapter(), rng);
  SeededRng data(7);
  Tensor x = testing::RandomTensor({100, 16}, data);
  Tensor adapted = layer.Forward(x);
  Tensor w_before = layer.weight().Clone();
  layer.MergeAdapter();
  CHECK_FALSE(layer.adapted());
  Tensor merged = layer.Forward(x);
  CHECK(MaxAbsDiff(adapted, merged) < 1e-5);
  CHECK(MaxAbsDiff(w_before, layer.weight()) > 1e-3);
}

TEST_CASE("the correction has rank at most r") {
  ParamStore params;
  SeededRng rng(8);
  for (int r : {1, 2, 3, 5}) {
    LoraAdapter adapter = LoraAdapter::Create(params, "r" + std::to_string(r), 12, 10, r, r, rng);
    RandomizeB(adapter, rng);
    Tensor merged = MergeWeights(adapter, Tensor::Zeros({10, 12}));
    Eigen::MatrixXd m(10, 12);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 12; ++j) m(i, j) = merged.at(i * 12 + j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    svd.setThreshold(1e-5);
    CHECK(svd.rank() == r);
  }
}

TEST_CASE("gradients reach adapters but not frozen base weights") {
  Block block(8, 1);
  SeededRng rng(9);
  auto sites = block.Sites();
  AttachLora(sites, block.params, {.rank = 2}, rng);
  RandomizeB(block.qkv.adapter(), rng);
  SeededRng data(10);
  Tensor x = testing::RandomTensor({4, 8}, data);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::Mean(ops::Square(block.Forward(x)));
  }
  tape.Backward(loss);
  GradientMap g = CollectGradients(tape, block.params);
  CHECK(g.names == block.params.TrainableNames());
  for (std::size_t i = 0; i < g.size(); ++i) {
    double norm = 0.0;
    for (Real v : g.values[i]) norm += std::abs(v);
    // out.lora_a sees a zero B, so only its B factor moves on the first step.
    if (g.names[i] == "out.lora_a") {
      CHECK(norm == 0.0);
    } else {
      CHECK(norm > 0.0);
    }
  }
  CHECK(tape.GradOf(block.qkv.weight()) == nullptr);
}

TEST_CASE("adapter dropout only acts with an rng") {
  ParamStore params;
  SeededRng rng(11);
  LoraAdapter adapter = LoraAdapter::Create(params, "d", 6, 4, 2, 2.0f, rng);
  RandomizeB(adapter, rng);
  adapter.dropout = 0.5f;
  SeededRng data(12);
  Tensor x = testing::RandomTensor({3, 6}, data);
  Tensor eval_a = adapter.Delta(x), eval_b = adapter.Delta(x);
  CHECK(MaxAbsDiff(eval_a, eval_b) == 0.0);
  SeededRng drop(13);
  CHECK(MaxAbsDiff(adapter.Delta(x, &drop), eval_a) > 0.0);
}

}  // namespace
}  // namespace dplora
