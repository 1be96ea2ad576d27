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

#include "dplora/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "dplora/autodiff.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/ops.hpp"

namespace dplora {
namespace {

using Matrix = Eigen::MatrixXd;

Matrix ToMatrix(const GaussianStats& s) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      s.sigma.data(), s.dim, s.dim);
}

// Eigendecomposition of a symmetric covariance, rejecting clearly indefinite
// input and clamping round-off negatives to zero.
Eigen::SelfAdjointEigenSolver<Matrix> Decompose(const Matrix& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error(std::string("eigen-decomposition failed for ") + what);
  }
  const double scale = std::max(1.0, solver.eigenvalues().cwiseAbs().maxCoeff());
  if (solver.eigenvalues().minCoeff() < -kEigenClamp * scale) {
    throw std::invalid_argument(std::string(what) + " is not positive semidefinite");
  }
  return solver;
}

double ClampedSqrt(double v) { return v > kEigenClamp ? std::sqrt(v) : 0.0; }

// Mean pool over the trailing spatial dims: [N, C, H, W] -> [N, C].
Tensor GlobalMeanPool(const Tensor& x) { return ops::MeanTrailing(x, 2); }

using LogitsFn = std::function<Tensor(const Tensor& images)>;

// Minibatch Adam on mean cross-entropy with a reproducible shuffle.
void TrainClassifier(ParamStore& params, const LogitsFn& logits, const Tensor& images,
                     std::span<const int> labels, int epochs, int batch_size, double lr,
                     SeededRng& rng) {
  const std::int64_t n = images.dim(0);
  if (n != static_cast<std::int64_t>(labels.size())) {
    throw ShapeError("one label per image is required");
  }
  if (n == 0) throw std::invalid_argument("cannot train a classifier on an empty set");
  Optimizer optimizer({.rule = UpdateRule::kAdam, .learning_rate = lr});
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::int64_t i = n - 1; i > 0; --i) {
      std::swap(order[i], order[rng.UniformInt(static_cast<std::uint64_t>(i + 1))]);
    }
    for (std::int64_t start = 0; start < n; start += batch_size) {
      const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
      auto rows = std::span(order).subspan(start, count);
      batch_labels.clear();
      for (std::int64_t r : rows) batch_labels.push_back(labels[r]);
      Tensor x = GatherRows(images, rows);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = ops::Mean(ops::CrossEntropy(logits(x), batch_labels));
      }
      Backward(tape, loss, params);
      optimizer.Apply(params, CollectGradients(tape, params));
    }
  }
}

std::vector<int> Predict(const LogitsFn& logits, const Tensor& images, int batch_size = 256) {
  std::vector<int> out;
  for (std::int64_t start = 0; start < images.dim(0); start += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size, images.dim(0) - start);
    Tensor l = logits(SliceRows(images, start, count));
    const std::int64_t k = l.dim(1);
    for (std::int64_t i = 0; i < count; ++i) {
      auto row = l.data().subspan(i * k, k);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

// Small classifiers for the downstream harness.
struct Classifier {
  ClassifierArch arch;
  Conv2dLayer stem, down1, down2;
  GroupNormLayer stem_norm, down1_norm, down2_norm;
  // Residual pairs (resnet9-lite only), one per resolution.
  std::vector<GroupNormLayer> res_norm;
  std::vector<Conv2dLayer> res_conv;
  Linear head;

  static Classifier Create(ParamStore& params, ClassifierArch arch, int image_channels,
                           int classes, SeededRng& rng) {
    Classifier c;
    c.arch = arch;
    const int widths[] = {16, 32, 64};
    c.stem = Conv2dLayer::Create(params, "clf.stem", image_channels, widths[0], 3, 2, 1, rng);
    c.down1 = Conv2dLayer::Create(params, "clf.down1", widths[0], widths[1], 3, 2, 1, rng);
    c.down2 = Conv2dLayer::Create(params, "clf.down2", widths[1], widths[2], 3, 2, 1, rng);
    if (arch == ClassifierArch::kResnet9Lite) {
      c.stem_norm = GroupNormLayer::Create(params, "clf.stem_norm", widths[0], GroupsFor(widths[0]));
      c.down1_norm = GroupNormLayer::Create(params, "clf.down1_norm", widths[1], GroupsFor(widths[1]));
      c.down2_norm = GroupNormLayer::Create(params, "clf.down2_norm", widths[2], GroupsFor(widths[2]));
      for (int level = 0; level < 3; ++level) {
        for (int j = 0; j < 2; ++j) {
          const std::string name = "clf.res" + std::to_string(level) + "." + std::to_string(j);
          c.res_norm.push_back(
              GroupNormLayer::Create(params, name + ".norm", widths[level], GroupsFor(widths[level])));
          c.res_conv.push_back(
              Conv2dLayer::Create(params, name + ".conv", widths[level], widths[level], 3, 1, 1, rng));
        }
      }
    }
    c.head = Linear::Create(params, "clf.head", widths[2], classes, true, rng);
    return c;
  }

  Tensor Residual(const Tensor& x, int level) const {
    Tensor h = x;
    for (int j = 0; j < 2; ++j) {
      h = res_conv[2 * level + j].Forward(ops::Silu(res_norm[2 * level + j].Forward(h)));
    }
    return ops::Add(x, h);
  }

  Tensor Logits(const Tensor& x) const {
    if (arch == ClassifierArch::kCnn) {
      Tensor h = ops::Silu(stem.Forward(x));
      h = ops::Silu(down1.Forward(h));
      h = ops::Silu(down2.Forward(h));
      return head.Forward(GlobalMeanPool(h));
    }
    Tensor h = Residual(ops::Silu(stem_norm.Forward(stem.Forward(x))), 0);
    h = Residual(ops::Silu(down1_norm.Forward(down1.Forward(h))), 1);
    h = Residual(ops::Silu(down2_norm.Forward(down2.Forward(h))), 2);
    return head.Forward(GlobalMeanPool(h));
  }
};

}  // namespace

GaussianStats FitGaussian(const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("features must be [n, dim]");
  const std::int64_t n = features.dim(0);
  const int d = static_cast<int>(features.dim(1));
  if (n <= d) {
    throw std::invalid_argument("need more than " + std::to_string(d) +
                                " feature rows for a covariance, got " + std::to_string(n));
  }
  GaussianStats s;
  s.dim = d;
  s.count = n;
  s.mu.assign(d, 0.0);
  s.sigma.assign(static_cast<std::size_t>(d) * d, 0.0);
  auto x = features.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) s.mu[j] += x[i * d + j];
  }
  for (double& m : s.mu) m /= static_cast<double>(n);
  std::vector<double> centred(d);
  for (std::int64_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) centred[j] = x[i * d + j] - s.mu[j];
    for (int a = 0; a < d; ++a) {
      for (int b = a; b < d; ++b) s.sigma[a * d + b] += centred[a] * centred[b];
    }
  }
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      s.sigma[a * d + b] /= static_cast<double>(n - 1);
      s.sigma[b * d + a] = s.sigma[a * d + b];
    }
  }
  return s;
}

double FrechetDistance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim != b.dim) {
    throw ShapeError("feature dims differ: " + std::to_string(a.dim) + " vs " +
                     std::to_string(b.dim));
  }
  double mean_term = 0.0;
  for (int i = 0; i < a.dim; ++i) mean_term += (a.mu[i] - b.mu[i]) * (a.mu[i] - b.mu[i]);
  const Matrix sa = ToMatrix(a), sb = ToMatrix(b);
  auto ea = Decompose(sa, "first covariance");
  Decompose(sb, "second covariance");
  const Eigen::VectorXd root_values = ea.eigenvalues().unaryExpr(&ClampedSqrt);
  const Matrix root = ea.eigenvectors() * root_values.asDiagonal() * ea.eigenvectors().transpose();
  Matrix inner = root * sb * root;
  inner = 0.5 * (inner + inner.transpose());
  auto ei = Decompose(inner, "covariance product");
  const double cross = ei.eigenvalues().unaryExpr(&ClampedSqrt).sum();
  return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

// ---- feature extractor -----------------------------------------------------------

FeatureExtractor FeatureExtractor::Create(ParamStore& params, int num_classes, SeededRng& rng) {
  FeatureExtractor f;
  f.conv1_ = Conv2dLayer::Create(params, "features.conv1", 1, 32, 3, 2, 1, rng);
  f.conv2_ = Conv2dLayer::Create(params, "features.conv2", 32, kFeatureDim, 3, 2, 1, rng);
  f.head_ = Linear::Create(params, "features.head", kFeatureDim, num_classes, true, rng);
  return f;
}

Tensor FeatureExtractor::Pooled(const Tensor& images) const {
  Tensor h = ops::Silu(conv1_.Forward(images));
  return GlobalMeanPool(ops::Silu(conv2_.Forward(h)));
}

Tensor FeatureExtractor::Logits(const Tensor& images) const { return head_.Forward(Pooled(images)); }

void FeatureExtractor::Train(ParamStore& params, const Tensor& images, std::span<const int> labels,
                             const TrainingOptions& options, SeededRng& rng) {
  TrainClassifier(
      params, [this](const Tensor& x) { return Logits(x); }, images, labels, options.epochs,
      options.batch_size, options.learning_rate, rng);
}

Tensor FeatureExtractor::Features(const Tensor& images, int batch_size) const {
  std::vector<Real> out;
  const std::int64_t n = images.dim(0);
  out.reserve(n * kFeatureDim);
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
    Tensor f = Pooled(SliceRows(images, start, count));
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor::FromData({n, kFeatureDim}, std::move(out));
}

std::string FeatureExtractor::VersionTag(const ParamStore& params) const {
  std::uint64_t h = kFnvBasis;
  for (const auto& e : params.entries()) {
    if (!e.name.starts_with("features.")) continue;
    h = Fnv1a(e.name.data(), e.name.size(), h);
    h = Fnv1a(e.tensor.data().data(), e.tensor.data().size_bytes(), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string("feature-cnn-v1-") + buf;
}

GaussianStats FeatureStats(const FeatureExtractor& extractor, const Tensor& images) {
  return FitGaussian(extractor.Features(images));
}

// ---- stats cache -------------------------------------------------------------------

namespace {
constexpr char kStatsMagic[] = "DPST1";

template <typename T>
void WriteRaw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T ReadRaw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated stats cache");
  return v;
}
}  // namespace

void SaveStats(const std::filesystem::path& path, const std::string& tag,
               const GaussianStats& stats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write stats cache " + path.string());
  out.write(kStatsMagic, sizeof(kStatsMagic) - 1);
  WriteRaw(out, static_cast<std::uint32_t>(tag.size()));
  out.write(tag.data(), static_cast<std::streamsize>(tag.size()));
  WriteRaw(out, stats.count);
  WriteRaw(out, static_cast<std::int32_t>(stats.dim));
  out.write(reinterpret_cast<const char*>(stats.mu.data()),
            static_cast<std::streamsize>(stats.mu.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(stats.sigma.data()),
            static_cast<std::streamsize>(stats.sigma.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing stats cache " + path.string());
}

GaussianStats LoadStats(const std::filesystem::path& path, const std::string& expected_tag) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read stats cache " + path.string());
  char magic[sizeof(kStatsMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, sizeof(magic)) != kStatsMagic) {
    throw std::runtime_error("not a stats cache: " + path.string());
  }
  const auto tag_size = ReadRaw<std::uint32_t>(in);
  if (tag_size > 4096) throw std::runtime_error("corrupt stats cache tag");
  std::string tag(tag_size, '\0');
  in.read(tag.data(), tag_size);
  if (tag != expected_tag) {
    throw StaleCacheError("stats cache was built by extractor '" + tag + "', expected '" +
                          expected_tag + "'");
  }
  GaussianStats s;
  s.count = ReadRaw<std::int64_t>(in);
  s.dim = ReadRaw<std::int32_t>(in);
  if (s.dim < 1 || s.dim > 4096) throw std::runtime_error("corrupt stats cache dim");
  s.mu.resize(s.dim);
  s.sigma.resize(static_cast<std::size_t>(s.dim) * s.dim);
  in.read(reinterpret_cast<char*>(s.mu.data()), static_cast<std::streamsize>(s.mu.size() * sizeof(double)));
  in.read(reinterpret_cast<char*>(s.sigma.data()),
          static_cast<std::streamsize>(s.sigma.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated stats cache");
  return s;
}

// ---- downstream accuracy -------------------------------------------------------------

ClassifierArch ParseClassifierArch(const std::string& text) {
  if (text == "cnn") return ClassifierArch::kCnn;
  if (text == "resnet9-lite") return ClassifierArch::kResnet9Lite;
  throw std::invalid_argument("unknown classifier '" + text + "' (expected cnn or resnet9-lite)");
}

AccuracyReport DownstreamAccuracy(const Tensor& synthetic_images,
                                  std::span<const int> synthetic_labels, const Tensor& real_images,
                                  std::span<const int> real_labels,
                                  const ClassifierOptions& options) {
  const std::set<int> synth_set(synthetic_labels.begin(), synthetic_labels.end());
  const std::set<int> real_set(real_labels.begin(), real_labels.end());
  if (synth_set != real_set) {
    throw LabelMismatchError("synthetic and real label sets differ");
  }
  if (real_images.dim(0) != static_cast<std::int64_t>(real_labels.size())) {
    throw ShapeError("one label per real image is required");
  }
  AccuracyReport report;
  report.classes.assign(real_set.begin(), real_set.end());
  const int k = static_cast<int>(report.classes.size());
  auto index_of = [&](int label) {
    return static_cast<int>(std::lower_bound(report.classes.begin(), report.classes.end(), label) -
                            report.classes.begin());
  };
  // Canonical order (label, then image content) makes the result independent
  // of how the synthetic set happens to be arranged.
  const std::int64_t n = synthetic_images.dim(0);
  if (n != static_cast<std::int64_t>(synthetic_labels.size())) {
    throw ShapeError("one label per synthetic image is required");
  }
  const std::int64_t row = n == 0 ? 0 : synthetic_images.numel() / n;
  std::vector<std::pair<std::pair<int, std::uint64_t>, std::int64_t>> keyed;
  for (std::int64_t i = 0; i < n; ++i) {
    auto pixels = synthetic_images.data().subspan(i * row, row);
    keyed.push_back({{synthetic_labels[i], Fnv1a(pixels.data(), pixels.size_bytes())}, i});
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::int64_t> canonical;
  std::vector<int> train_targets;
  for (const auto& [key, i] : keyed) {
    canonical.push_back(i);
    train_targets.push_back(index_of(key.first));
  }
  const Tensor train_images = GatherRows(synthetic_images, canonical);

  SeededRng rng(options.seed);
  SeededRng init = rng.Derive(1), shuffle = rng.Derive(2);
  ParamStore params;
  Classifier clf =
      Classifier::Create(params, options.arch, static_cast<int>(real_images.dim(1)), k, init);
  LogitsFn logits = [&clf](const Tensor& x) { return clf.Logits(x); };
  TrainClassifier(params, logits, train_images, train_targets, options.epochs,
                  options.batch_size, options.learning_rate, shuffle);

  const std::vector<int> predicted = Predict(logits, real_images);
  report.confusion.assign(k, std::vector<int>(k, 0));
  int correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int truth = index_of(real_labels[i]);
    ++report.confusion[truth][predicted[i]];
    if (truth == predicted[i]) ++correct;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
  return report;
}

}  // namespace dplora
