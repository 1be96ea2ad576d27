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
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dplora {

// Scalar type of every tensor. The library is normally built with float32;
// a float64 build exists for finite-difference gradient checks.
#ifdef DPLORA_FLOAT64
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised whenever a NaN or Inf is observed in tensor data.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  bool requires_grad = false;
  // Empty when no gradient has been populated.
  std::vector<Real> grad;
};

// Shared handle to a dense row-major array of Real. Copies alias the same
// storage; use Clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor Zeros(Shape shape);
  static Tensor Full(Shape shape, Real value);
  static Tensor FromData(Shape shape, std::vector<Real> data);
  static Tensor Scalar(Real value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative indices count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const Real> data() const { return impl_->data; }
  // Direct write access, intended for leaves (parameters, inputs) only.
  std::span<Real> mutable_data() { return impl_->data; }
  Real item() const;
  Real at(std::int64_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::vector<Real>& mutable_grad() { return impl_->grad; }

  Tensor Clone() const;
  // Throws NumericalError naming `context` if any entry is NaN or Inf.
  void CheckFinite(const std::string& context) const;

  const TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Copies of rows (leading-dim entries) as a new leaf tensor; data only.
Tensor SliceRows(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor GatherRows(const Tensor& x, std::span<const std::int64_t> rows);

// 64-bit FNV-1a, chainable through `basis`.
inline constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;
std::uint64_t Fnv1a(const void* data, std::size_t size, std::uint64_t basis = kFnvBasis);

// Ordered record of primitive applications. Nodes are appended as ops
// execute, so insertion order is a topological order and the reverse pass
// visits each node exactly once.
//
// Gradients live on the tape (keyed by tensor identity), not on the tensors,
// so several tapes may run concurrently over shared read-only parameters.
class Tape {
 public:
  using GradBuffer = std::vector<Real>;
  // grad_in[i] is null when input i does not need a gradient.
  using BackwardFn =
      std::function<void(const GradBuffer& grad_out, std::span<GradBuffer* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void Record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

  // Reverse pass from a scalar root seeded with 1. Consumes the tape.
  void Backward(const Tensor& loss);
  // Reverse pass with an explicit seed for the root's gradient. When `retain`
  // is true the tape stays usable and previous gradients are discarded first.
  void Backward(const Tensor& root, std::span<const Real> seed, bool retain);

  // Gradient accumulated for `t` by the last reverse pass, or null.
  const GradBuffer* GradOf(const Tensor& t) const;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Tape that ops currently record onto (thread-local), or null.
  static Tape* Active();

 private:
  friend class TapeScope;

  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const TensorImpl*, GradBuffer> grads_;
  bool consumed_ = false;
};

// Makes `tape` the active recording tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace dplora
