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

#include "dplora/param_store.hpp"

#include <algorithm>
#include <cmath>

namespace dplora {

const char* ParamGroupName(ParamGroup group) {
  return group == ParamGroup::kAdapter ? "adapter" : "base";
}

Tensor ParamStore::Add(const std::string& name, Tensor value, ParamGroup group) {
  if (Contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.CheckFinite("parameter " + name);
  value.set_requires_grad(true);
  entries_.push_back(Entry{name, value, group});
  return value;
}

bool ParamStore::Contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::IndexOf(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

const Tensor& ParamStore::Get(const std::string& name) const {
  return entries_[IndexOf(name)].tensor;
}
Tensor& ParamStore::Get(const std::string& name) { return entries_[IndexOf(name)].tensor; }
const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  return entries_[IndexOf(name)];
}

void ParamStore::SetTrainable(const std::string& name, bool trainable) {
  Get(name).set_requires_grad(trainable);
}

void ParamStore::TrainAdaptersOnly() {
  for (auto& e : entries_) e.tensor.set_requires_grad(e.group == ParamGroup::kAdapter);
}

void ParamStore::TrainAll() {
  for (auto& e : entries_) e.tensor.set_requires_grad(true);
}

std::vector<std::string> ParamStore::TrainableNames() const {
  std::vector<std::string> names;
  for (const auto& e : entries_) {
    if (e.tensor.requires_grad()) names.push_back(e.name);
  }
  return names;
}

std::int64_t ParamStore::CountParameters() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

std::int64_t ParamStore::CountParameters(ParamGroup group) const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.group == group) n += e.tensor.numel();
  }
  return n;
}

void ParamStore::ZeroGrad() {
  for (auto& e : entries_) e.tensor.mutable_grad().clear();
}

double GradientMap::L2Norm() const {
  double sq = 0.0;
  for (const auto& v : values) {
    for (Real g : v) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

GradientMap GradientMap::ZerosLike() const {
  GradientMap out;
  out.names = names;
  for (const auto& v : values) out.values.emplace_back(v.size(), 0.0f);
  return out;
}

void GradientMap::AddScaled(const GradientMap& other, Real factor) {
  if (other.names != names) throw std::invalid_argument("gradient maps cover different parameters");
  for (std::size_t p = 0; p < values.size(); ++p) {
    if (other.values[p].size() != values[p].size()) {
      throw ShapeError("gradient size mismatch for " + names[p]);
    }
    for (std::size_t i = 0; i < values[p].size(); ++i) values[p][i] += factor * other.values[p][i];
  }
}

}  // namespace dplora
