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

#include "dplora/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

namespace dplora {
namespace {

constexpr char kMagic[5] = {'D', 'P', 'L', 'R', '1'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr const char* kParamPrefix = "param/";

class Writer {
 public:
  void Bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }
  template <typename T>
  void Int(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buffer_.push_back(static_cast<char>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
  }
  void String(const std::string& s) {
    Int<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    Bytes(s.data(), s.size());
  }
  void Float(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    Int(bits);
  }
  const std::vector<char>& buffer() const { return buffer_; }

 private:
  std::vector<char> buffer_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}
  void Bytes(void* out, std::size_t n) {
    Need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T Int() {
    Need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string String() {
    const auto n = Int<std::uint32_t>();
    Need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  float Float() {
    const auto bits = Int<std::uint32_t>();
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void Need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("truncated checkpoint " + source_);
  }
  std::vector<char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string HexDouble(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

}  // namespace

void Checkpoint::SetTensor(const std::string& name, const Tensor& value) {
  Tensor copy = value.Clone();
  copy.set_requires_grad(false);
  for (auto& [n, t] : tensors_) {
    if (n == name) {
      t = copy;
      return;
    }
  }
  tensors_.emplace_back(name, copy);
}

bool Checkpoint::HasTensor(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::SetDouble(const std::string& key, double value) { Set(key, HexDouble(value)); }

const std::string& Checkpoint::Get(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end()) throw CheckpointError("checkpoint has no metadata '" + key + "'");
  return it->second;
}

std::int64_t Checkpoint::GetInt(const std::string& key) const {
  const std::string& text = Get(key);
  char* end = nullptr;
  const long long v = std::strtoll(text.c_str(), &end, 10);
  if (text.empty() || *end != '\0') throw CheckpointError("metadata '" + key + "' is not an integer");
  return v;
}

double Checkpoint::GetDouble(const std::string& key) const {
  const std::string& text = Get(key);
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || *end != '\0') throw CheckpointError("metadata '" + key + "' is not a number");
  return v;
}

void Checkpoint::Save(const std::filesystem::path& path) const {
  Writer w;
  w.Bytes(kMagic, sizeof(kMagic));
  w.Int(kVersion);
  w.Int(static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    w.String(name);
    w.Int(kDtypeF32);
    w.Int(static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t d : t.shape()) w.Int(static_cast<std::uint64_t>(d));
    for (Real v : t.data()) w.Float(static_cast<float>(v));
  }
  w.Int(static_cast<std::uint32_t>(metadata_.size()));
  for (const auto& [k, v] : metadata_) {
    w.String(k);
    w.String(v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::Load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}), path.string());
  char magic[sizeof(kMagic)];
  r.Bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.Int<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto count = r.Int<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.String();
    if (r.Int<std::uint8_t>() != kDtypeF32) throw CheckpointError("unknown dtype for " + name);
    const auto rank = r.Int<std::uint32_t>();
    if (rank > 8) throw CheckpointError("implausible rank for " + name);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::int64_t>(r.Int<std::uint64_t>()));
    }
    std::vector<Real> data(static_cast<std::size_t>(NumElements(shape)));
    for (Real& v : data) v = r.Float();
    ckpt.tensors_.emplace_back(std::move(name), Tensor::FromData(shape, std::move(data)));
  }
  const auto entries = r.Int<std::uint32_t>();
  for (std::uint32_t i = 0; i < entries; ++i) {
    std::string key = r.String();
    ckpt.metadata_[key] = r.String();
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
  return ckpt;
}

void StoreParams(Checkpoint& ckpt, const ParamStore& params, std::optional<ParamGroup> group) {
  for (const auto& e : params.entries()) {
    if (group && e.group != *group) continue;
    ckpt.SetTensor(kParamPrefix + e.name, e.tensor);
  }
  ckpt.SetInt("adapter_only", group == ParamGroup::kAdapter ? 1 : 0);
}

int RestoreParams(const Checkpoint& ckpt, ParamStore& params, bool require_all) {
  const std::string prefix = kParamPrefix;
  int restored = 0;
  for (const auto& [key, value] : ckpt.tensors()) {
    if (key.rfind(prefix, 0) != 0) continue;
    const std::string name = key.substr(prefix.size());
    if (!params.Contains(name)) {
      throw CheckpointError("checkpoint parameter '" + name + "' does not exist in the model");
    }
    Tensor& target = params.Get(name);
    if (target.shape() != value.shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " +
                            ShapeToString(value.shape()) + ", model expects " +
                            ShapeToString(target.shape()));
    }
    std::copy(value.data().begin(), value.data().end(), target.mutable_data().begin());
    ++restored;
  }
  if (require_all && restored != static_cast<int>(params.size())) {
    for (const auto& e : params.entries()) {
      if (!ckpt.HasTensor(prefix + e.name)) {
        throw CheckpointError("checkpoint is missing parameter '" + e.name + "'");
      }
    }
  }
  return restored;
}

bool IsAdapterOnly(const Checkpoint& ckpt) {
  return ckpt.Has("adapter_only") && ckpt.GetInt("adapter_only") == 1;
}

void StoreLedger(Checkpoint& ckpt, const PrivacyLedger::State& s) {
  ckpt.SetDouble("ledger/q", s.q);
  ckpt.SetDouble("ledger/sigma", s.sigma);
  ckpt.SetDouble("ledger/delta", s.delta);
  ckpt.SetDouble("ledger/budget_epsilon", s.budget_epsilon);
  ckpt.SetInt("ledger/steps", s.steps);
  ckpt.SetInt("ledger/hard_stopped", s.hard_stopped ? 1 : 0);
}

bool HasLedger(const Checkpoint& ckpt) { return ckpt.Has("ledger/steps"); }

PrivacyLedger::State LoadLedger(const Checkpoint& ckpt) {
  PrivacyLedger::State s;
  s.q = ckpt.GetDouble("ledger/q");
  s.sigma = ckpt.GetDouble("ledger/sigma");
  s.delta = ckpt.GetDouble("ledger/delta");
  s.budget_epsilon = ckpt.GetDouble("ledger/budget_epsilon");
  s.steps = ckpt.GetInt("ledger/steps");
  s.hard_stopped = ckpt.GetInt("ledger/hard_stopped") != 0;
  return s;
}

void StoreRng(Checkpoint& ckpt, const std::string& key, const SeededRng& rng) {
  // Unsigned 64-bit values do not fit the signed integer helpers.
  ckpt.Set("rng/" + key + "/seed", std::to_string(rng.seed()));
  ckpt.Set("rng/" + key + "/counter", std::to_string(rng.counter()));
}

SeededRng LoadRng(const Checkpoint& ckpt, const std::string& key) {
  auto parse = [&](const std::string& k) {
    const std::string& text = ckpt.Get(k);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (text.empty() || *end != '\0') throw CheckpointError("metadata '" + k + "' is not a counter");
    return static_cast<std::uint64_t>(v);
  };
  return SeededRng(parse("rng/" + key + "/seed"), parse("rng/" + key + "/counter"));
}

void StoreOptimizer(Checkpoint& ckpt, const OptimizerState& state) {
  ckpt.SetInt("opt/step", state.step);
  auto store = [&](const std::string& prefix, const std::map<std::string, std::vector<Real>>& m) {
    for (const auto& [name, values] : m) {
      ckpt.SetTensor(prefix + name, Tensor::FromData({static_cast<std::int64_t>(values.size())},
                                                     values));
    }
  };
  store("opt/m/", state.first_moment);
  store("opt/v/", state.second_moment);
}

OptimizerState LoadOptimizer(const Checkpoint& ckpt) {
  OptimizerState state;
  state.step = ckpt.GetInt("opt/step");
  for (const auto& [key, value] : ckpt.tensors()) {
    auto vec = std::vector<Real>(value.data().begin(), value.data().end());
    if (key.rfind("opt/m/", 0) == 0) state.first_moment[key.substr(6)] = std::move(vec);
    if (key.rfind("opt/v/", 0) == 0) state.second_moment[key.substr(6)] = std::move(vec);
  }
  return state;
}

}  // namespace dplora
