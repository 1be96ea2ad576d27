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

// Binary checkpoints: named f32 tensors plus a string metadata map.
//
// Layout (all integers little-endian):
//   "DPLR1"                      5 bytes
//   version                      u32
//   tensor count                 u32
//   per tensor: name length u32, name bytes, dtype u8 (0 = f32), rank u32,
//               dims u64 x rank, payload f32 x numel
//   metadata count               u32
//   per entry: key length u32, key bytes, value length u32, value bytes
//
// Doubles in metadata are stored as hexadecimal floating-point text so they
// round-trip bit-exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dplora/accountant.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void SetTensor(const std::string& name, const Tensor& value);
  bool HasTensor(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  void Set(const std::string& key, std::string value) { metadata_[key] = std::move(value); }
  void SetInt(const std::string& key, std::int64_t value) { Set(key, std::to_string(value)); }
  void SetDouble(const std::string& key, double value);
  bool Has(const std::string& key) const { return metadata_.contains(key); }
  const std::string& Get(const std::string& key) const;
  std::int64_t GetInt(const std::string& key) const;
  double GetDouble(const std::string& key) const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  // Writes to a temporary sibling and renames, so a crash never leaves a
  // half-written checkpoint under `path`.
  void Save(const std::filesystem::path& path) const;
  static Checkpoint Load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::string> metadata_;
};

// Parameters are stored as "param/<name>". With a group, only that group is
// written and the checkpoint is flagged adapter-only when it is kAdapter.
void StoreParams(Checkpoint& ckpt, const ParamStore& params,
                 std::optional<ParamGroup> group = std::nullopt);
// Copies stored values into existing parameters of the same name and shape.
// Every stored parameter must exist in `params`; with `require_all`, every
// parameter of `params` must be stored. Returns the number restored.
int RestoreParams(const Checkpoint& ckpt, ParamStore& params, bool require_all);
bool IsAdapterOnly(const Checkpoint& ckpt);

void StoreLedger(Checkpoint& ckpt, const PrivacyLedger::State& state);
PrivacyLedger::State LoadLedger(const Checkpoint& ckpt);
bool HasLedger(const Checkpoint& ckpt);

// Stored under "rng/<key>/seed" and "rng/<key>/counter".
void StoreRng(Checkpoint& ckpt, const std::string& key, const SeededRng& rng);
SeededRng LoadRng(const Checkpoint& ckpt, const std::string& key);

// Moments are stored as tensors "opt/m/<name>" and "opt/v/<name>".
void StoreOptimizer(Checkpoint& ckpt, const OptimizerState& state);
OptimizerState LoadOptimizer(const Checkpoint& ckpt);

}  // namespace dplora
