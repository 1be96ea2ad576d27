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

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dplora/tensor.hpp"

namespace dplora {

enum class ParamGroup { kBase, kAdapter };

const char* ParamGroupName(ParamGroup group);

// Named model parameters. Trainability is carried by each tensor's
// requires_grad flag so that ops only record what can actually be updated.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    ParamGroup group;
  };

  // Registers a new parameter (trainable by default) and returns its handle.
  Tensor Add(const std::string& name, Tensor value, ParamGroup group = ParamGroup::kBase);
  bool Contains(const std::string& name) const;
  const Tensor& Get(const std::string& name) const;
  Tensor& Get(const std::string& name);
  const Entry& entry(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void SetTrainable(const std::string& name, bool trainable);
  // Only the adapter group trains; used for DP fine-tuning.
  void TrainAdaptersOnly();
  void TrainAll();
  bool trainable(const std::string& name) const { return Get(name).requires_grad(); }
  std::vector<std::string> TrainableNames() const;

  std::int64_t CountParameters() const;
  std::int64_t CountParameters(ParamGroup group) const;

  void ZeroGrad();

 private:
  std::size_t IndexOf(const std::string& name) const;
  std::vector<Entry> entries_;
};

// Gradients of the trainable parameters, in ParamStore order.
struct GradientMap {
  std::vector<std::string> names;
  std::vector<std::vector<Real>> values;

  std::size_t size() const { return names.size(); }
  // Global l2 norm across every parameter, accumulated in double.
  double L2Norm() const;
  // Empty map with the same names and zero buffers.
  GradientMap ZerosLike() const;
  void AddScaled(const GradientMap& other, Real factor);
};

}  // namespace dplora
