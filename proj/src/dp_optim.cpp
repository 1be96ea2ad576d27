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

#include "dplora/dp_optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dplora {

GradientMap ClipPerSample(const GradientMap& grad, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clipping norm must be positive");
  for (std::size_t p = 0; p < grad.size(); ++p) {
    for (Real v : grad.values[p]) {
      if (!std::isfinite(v)) throw NumericalError("non-finite gradient entry in " + grad.names[p]);
    }
  }
  const double norm = grad.L2Norm();
  if (norm <= max_norm) return grad;
  const double factor = max_norm / norm;
  GradientMap out = grad;
  for (auto& v : out.values) {
    for (auto& x : v) x = static_cast<Real>(x * factor);
  }
  return out;
}

GradientMap TrainableLayout(const ParamStore& params) {
  GradientMap layout;
  for (const auto& e : params.entries()) {
    if (!e.tensor.requires_grad()) continue;
    layout.names.push_back(e.name);
    layout.values.emplace_back(static_cast<std::size_t>(e.tensor.numel()), Real{0});
  }
  return layout;
}

PrivatizedGradient Privatize(std::span<const GradientMap> per_example, const GradientMap& layout,
                             double clip_norm, double sigma, double expected_batch,
                             SeededRng& noise_rng) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clipping norm must be positive");
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise multiplier must be nonnegative");
  if (!(expected_batch > 0.0)) throw std::invalid_argument("expected batch size must be positive");
  if (per_example.empty() && sigma == 0.0) {
    throw std::invalid_argument("empty batch without noise has no defined mean");
  }
  PrivatizedGradient out;
  out.realized_batch = static_cast<std::int64_t>(per_example.size());
  out.clip_norm = clip_norm;
  out.sigma = sigma;
  out.expected_batch = expected_batch;
  out.non_private = sigma == 0.0;

  std::vector<std::vector<double>> sum;
  for (const auto& v : layout.values) sum.emplace_back(v.size(), 0.0);
  double norm_total = 0.0;
  for (const GradientMap& g : per_example) {
    if (g.names != layout.names) {
      throw std::invalid_argument("per-example gradient does not cover the trainable parameters");
    }
    norm_total += g.L2Norm();
    GradientMap clipped = ClipPerSample(g, clip_norm);
    for (std::size_t p = 0; p < sum.size(); ++p) {
      if (clipped.values[p].size() != sum[p].size()) {
        throw ShapeError("gradient size mismatch for " + layout.names[p]);
      }
      for (std::size_t i = 0; i < sum[p].size(); ++i) sum[p][i] += clipped.values[p][i];
    }
  }
  out.mean_pre_clip_norm =
      per_example.empty() ? 0.0 : norm_total / static_cast<double>(per_example.size());

  const double noise_scale = sigma * clip_norm / expected_batch;
  out.grad.names = layout.names;
  for (std::size_t p = 0; p < sum.size(); ++p) {
    std::vector<Real> g(sum[p].size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = sum[p][i] / expected_batch;
      if (sigma > 0.0) v += noise_scale * noise_rng.Normal();
      g[i] = static_cast<Real>(v);
    }
    out.grad.values.push_back(std::move(g));
  }
  return out;
}

void Optimizer::Apply(ParamStore& params, const GradientMap& grad) {
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t p = 0; p < grad.size(); ++p) {
    const std::string& name = grad.names[p];
    Tensor& param = params.Get(name);
    if (!param.requires_grad()) {
      throw std::invalid_argument("optimizer asked to update frozen parameter " + name);
    }
    const auto& g = grad.values[p];
    if (static_cast<std::int64_t>(g.size()) != param.numel()) {
      throw ShapeError("gradient for " + name + " has " + std::to_string(g.size()) +
                       " entries, parameter has " + std::to_string(param.numel()));
    }
    auto w = param.mutable_data();
    if (config_.rule == UpdateRule::kSgd) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        w[i] = static_cast<Real>(w[i] - config_.learning_rate * g[i]);
      }
      continue;
    }
    auto& m = state_.first_moment[name];
    auto& v = state_.second_moment[name];
    if (m.empty()) {
      m.assign(g.size(), Real{0});
      v.assign(g.size(), Real{0});
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = static_cast<Real>(config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i]);
      v[i] = static_cast<Real>(config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] = static_cast<Real>(w[i] - config_.learning_rate * mhat /
                                          (std::sqrt(vhat) + config_.adam_eps));
    }
  }
}

void DpStep(Optimizer& optimizer, ParamStore& params, const PrivatizedGradient& g,
            PrivacyLedger* ledger) {
  if (ledger != nullptr) {
    ledger->Step();
  } else if (!g.non_private) {
    throw std::invalid_argument("private update without a privacy ledger");
  }
  optimizer.Apply(params, g.grad);
}

}  // namespace dplora
