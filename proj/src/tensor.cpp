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

#include "dplora/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dplora {

std::int64_t NumElements(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + ShapeToString(shape));
    n *= d;
  }
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::Zeros(Shape shape) { return Full(std::move(shape), 0.0f); }

Tensor Tensor::Full(Shape shape, Real value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(NumElements(shape)), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::FromData(Shape shape, std::vector<Real> data) {
  if (NumElements(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     ShapeToString(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::Scalar(Real value) { return FromData({}, {value}); }

std::int64_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + ShapeToString(shape()));
  }
  return impl_->shape[a];
}

Real Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + ShapeToString(shape()));
  }
  return impl_->data[0];
}

Tensor Tensor::Clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  return Tensor(std::move(impl));
}

void Tensor::CheckFinite(const std::string& context) const {
  for (std::size_t i = 0; i < impl_->data.size(); ++i) {
    if (!std::isfinite(impl_->data[i])) {
      throw NumericalError(context + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tape* Tape::Active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::Record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  if (consumed_) throw TapeError("recording onto a consumed tape");
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::Backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + ShapeToString(loss.shape()));
  }
  const Real one = 1.0f;
  Backward(loss, std::span<const Real>(&one, 1), /*retain=*/false);
}

void Tape::Backward(const Tensor& root, std::span<const Real> seed, bool retain) {
  if (consumed_) throw TapeError("tape already consumed");
  if (static_cast<std::int64_t>(seed.size()) != root.numel()) {
    throw ShapeError("seed length does not match root " + ShapeToString(root.shape()));
  }
  grads_.clear();
  grads_[root.id()].assign(seed.begin(), seed.end());

  std::vector<GradBuffer*> grad_in;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto found = grads_.find(it->output.id());
    if (found == grads_.end()) continue;
    grad_in.assign(it->inputs.size(), nullptr);
    bool any = false;
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const Tensor& in = it->inputs[i];
      if (!in.requires_grad()) continue;
      auto& buf = grads_[in.id()];
      if (buf.empty()) buf.assign(static_cast<std::size_t>(in.numel()), 0.0f);
      grad_in[i] = &buf;
      any = true;
    }
    // `found` stays valid: unordered_map never invalidates element references.
    if (any) it->backward(found->second, grad_in);
  }
  if (!retain) consumed_ = true;
}

const Tape::GradBuffer* Tape::GradOf(const Tensor& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor SliceRows(const Tensor& x, std::int64_t start, std::int64_t count) {
  if (x.rank() == 0 || start < 0 || count < 0 || start + count > x.dim(0)) {
    throw ShapeError("row range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + ShapeToString(x.shape()));
  }
  Shape shape = x.shape();
  const std::int64_t row = shape[0] == 0 ? 0 : x.numel() / shape[0];
  shape[0] = count;
  auto src = x.data().subspan(start * row, count * row);
  return Tensor::FromData(std::move(shape), std::vector<Real>(src.begin(), src.end()));
}

Tensor GatherRows(const Tensor& x, std::span<const std::int64_t> rows) {
  if (x.rank() == 0) throw ShapeError("cannot gather rows of a scalar");
  Shape shape = x.shape();
  const std::int64_t row = shape[0] == 0 ? 0 : x.numel() / shape[0];
  std::vector<Real> out;
  out.reserve(rows.size() * row);
  for (std::int64_t r : rows) {
    if (r < 0 || r >= shape[0]) throw ShapeError("row index " + std::to_string(r) + " out of range");
    auto src = x.data().subspan(r * row, row);
    out.insert(out.end(), src.begin(), src.end());
  }
  shape[0] = static_cast<std::int64_t>(rows.size());
  return Tensor::FromData(std::move(shape), std::move(out));
}

std::uint64_t Fnv1a(const void* data, std::size_t size, std::uint64_t basis) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace dplora
