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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <vector>

#include "doctest.h"
#include "dplora/checkpoint.hpp"
#include "dplora/report.hpp"

namespace dplora {
namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<char> Bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Tensor RandomTensor(Shape shape, SeededRng& rng) {
  Tensor t = Tensor::Zeros(std::move(shape));
  for (Real& v : t.mutable_data()) v = static_cast<Real>(rng.Normal());
  return t;
}

TEST_CASE("checkpoint save and load round-trip bit-exactly") {
  TempDir dir("dplora_ckpt_test");
  SeededRng rng(1);
  Checkpoint a;
  a.SetTensor("w", RandomTensor({3, 4}, rng));
  a.SetTensor("scalar", Tensor::Scalar(0.1f));
  a.SetTensor("edge", Tensor::FromData({4}, {std::numeric_limits<Real>::denorm_min(), -0.0f,
                                             std::numeric_limits<Real>::max(), 1.0f / 3.0f}));
  const double awkward[] = {0.1, 1.0 / 3.0, 1e-300, -2.5e-310, 9.999999999999999e22};
  for (int i = 0; i < 5; ++i) a.SetDouble("d" + std::to_string(i), awkward[i]);
  a.SetInt("n", -42);
  a.Set("text", "hello world");
  a.Save(dir.path / "a.ckpt");

  Checkpoint b = Checkpoint::Load(dir.path / "a.ckpt");
  REQUIRE(b.tensors().size() == 3);
  for (const auto& [name, t] : a.tensors()) {
    const Tensor& u = b.tensor(name);
    REQUIRE(u.shape() == t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      CHECK(std::signbit(u.at(i)) == std::signbit(t.at(i)));
      CHECK(u.at(i) == t.at(i));
    }
  }
  for (int i = 0; i < 5; ++i) CHECK(b.GetDouble("d" + std::to_string(i)) == awkward[i]);
  CHECK(b.GetInt("n") == -42);
  CHECK(b.Get("text") == "hello world");
  b.Save(dir.path / "b.ckpt");
  CHECK(Bytes(dir.path / "a.ckpt") == Bytes(dir.path / "b.ckpt"));
  CHECK_FALSE(fs::exists(dir.path / "a.ckpt.tmp"));
}

TEST_CASE("checkpoint layout starts with the magic and version") {
  TempDir dir("dplora_ckpt_layout");
  Checkpoint c;
  c.SetTensor("x", Tensor::FromData({2}, {1.0f, -2.0f}));
  c.Save(dir.path / "c.ckpt");
  const auto bytes = Bytes(dir.path / "c.ckpt");
  REQUIRE(bytes.size() > 9);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "DPLR1");
  CHECK(bytes[5] == 1);
  CHECK(bytes[6] == 0);
  // 5 magic + 4 version + 4 count + (4 + 1 name) + 1 dtype + 4 rank + 8 dim
  // + 8 payload + 4 metadata count.
  CHECK(bytes.size() == 43);
}

TEST_CASE("corrupt checkpoints are rejected") {
  TempDir dir("dplora_ckpt_corrupt");
  Checkpoint c;
  c.SetTensor("x", Tensor::Zeros({16}));
  c.Set("k", "v");
  c.Save(dir.path / "c.ckpt");
  SUBCASE("bad magic") {
    std::fstream f(dir.path / "c.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
    f.close();
    CHECK_THROWS_WITH_AS(Checkpoint::Load(dir.path / "c.ckpt"), doctest::Contains("magic"),
                         CheckpointError);
  }
  SUBCASE("truncated") {
    fs::resize_file(dir.path / "c.ckpt", fs::file_size(dir.path / "c.ckpt") - 3);
    CHECK_THROWS_WITH_AS(Checkpoint::Load(dir.path / "c.ckpt"), doctest::Contains("truncated"),
                         CheckpointError);
  }
  SUBCASE("missing") {
    CHECK_THROWS_AS(Checkpoint::Load(dir.path / "nope.ckpt"), CheckpointError);
  }
  CHECK_THROWS_AS(c.Get("absent"), CheckpointError);
  CHECK_THROWS_AS(c.tensor("absent"), CheckpointError);
}

TEST_CASE("parameters, ledger, rng and optimizer state restore exactly") {
  TempDir dir("dplora_ckpt_state");
  SeededRng rng(5);
  ParamStore params;
  params.Add("base.w", RandomTensor({4, 4}, rng));
  params.Add("site.lora_a", RandomTensor({2, 4}, rng), ParamGroup::kAdapter);
  params.Add("site.lora_b", RandomTensor({4, 2}, rng), ParamGroup::kAdapter);

  PrivacyLedger ledger(0.04, 1.02, 1e-5, 10.0);
  for (int i = 0; i < 37; ++i) ledger.Step();
  SeededRng stream(99);
  for (int i = 0; i < 123; ++i) stream.Normal();
  OptimizerState opt;
  opt.step = 37;
  opt.first_moment["site.lora_a"] = {0.5f, -1e-7f};
  opt.second_moment["site.lora_a"] = {1e-30f, 2.0f};

  Checkpoint c;
  StoreParams(c, params, ParamGroup::kAdapter);
  StoreLedger(c, ledger.state());
  StoreRng(c, "noise", stream);
  StoreOptimizer(c, opt);
  c.Save(dir.path / "s.ckpt");
  const Checkpoint d = Checkpoint::Load(dir.path / "s.ckpt");

  CHECK(IsAdapterOnly(d));
  CHECK_FALSE(d.HasTensor("param/base.w"));
  ParamStore other;
  other.Add("base.w", Tensor::Zeros({4, 4}));
  other.Add("site.lora_a", Tensor::Zeros({2, 4}), ParamGroup::kAdapter);
  other.Add("site.lora_b", Tensor::Zeros({4, 2}), ParamGroup::kAdapter);
  CHECK(RestoreParams(d, other, false) == 2);
  CHECK_THROWS_AS(RestoreParams(d, other, true), CheckpointError);
  for (const char* name : {"site.lora_a", "site.lora_b"}) {
    for (std::int64_t i = 0; i < params.Get(name).numel(); ++i) {
      CHECK(other.Get(name).at(i) == params.Get(name).at(i));
    }
  }

  const PrivacyLedger restored(LoadLedger(d));
  CHECK(restored.state() == ledger.state());
  CHECK(restored.Spent().epsilon == ledger.Spent().epsilon);
  CHECK(LoadRng(d, "noise") == stream);
  SeededRng resumed = LoadRng(d, "noise");
  CHECK(resumed.Normal() == stream.Normal());
  const OptimizerState o = LoadOptimizer(d);
  CHECK(o.step == 37);
  CHECK(o.first_moment == opt.first_moment);
  CHECK(o.second_moment == opt.second_moment);

  ParamStore wrong;
  wrong.Add("site.lora_a", Tensor::Zeros({3, 4}), ParamGroup::kAdapter);
  wrong.Add("site.lora_b", Tensor::Zeros({4, 2}), ParamGroup::kAdapter);
  CHECK_THROWS_WITH_AS(RestoreParams(d, wrong, false), doctest::Contains("shape"), CheckpointError);
  ParamStore missing;
  CHECK_THROWS_AS(RestoreParams(d, missing, false), CheckpointError);
}

TEST_CASE("JSON-lines reports append and survive partial runs") {
  TempDir dir("dplora_report_test");
  const fs::path path = dir.path / "sub" / "r.jsonl";
  {
    ReportWriter w(path);
    w.Write({{"step", 1}, {"loss", 0.5}});
  }
  {
    ReportWriter w(path);
    w.Write({{"step", 2}, {"loss", nullptr}});
  }
  const auto records = ReadReport(path);
  REQUIRE(records.size() == 2);
  CHECK(records[0]["step"] == 1);
  CHECK(records[1]["loss"].is_null());
}

TEST_CASE("image grid header and pixel mapping") {
  TempDir dir("dplora_grid_test");
  Tensor images = Tensor::Full({3, 1, 4, 4}, -1.0f);
  images.mutable_data()[16] = 1.0f;  // image 1, pixel (0, 0)
  images.mutable_data()[32] = 0.0f;  // image 2, pixel (0, 0)
  WriteImageGrid(dir.path / "g.pgm", images, 2, 2);
  const auto bytes = Bytes(dir.path / "g.pgm");
  const std::string header = "P5\n# dplora grid 2x2 of 4x4\n8 8\n255\n";
  REQUIRE(bytes.size() == header.size() + 64);
  CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
  auto px = [&](int y, int x) { return static_cast<unsigned char>(bytes[header.size() + y * 8 + x]); };
  CHECK(px(0, 0) == 0);
  CHECK(px(0, 4) == 255);
  CHECK(px(4, 0) == 128);
  CHECK(px(4, 4) == 0);  // unused cell
  CHECK(FileHash(dir.path / "g.pgm").size() == 16);
  CHECK_THROWS_AS(WriteImageGrid(dir.path / "x.pgm", Tensor::Zeros({2, 3, 4, 4})), ShapeError);
}

}  // namespace
}  // namespace dplora
