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

#include "dplora/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace dplora {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr char kRawMagic[8] = {'D', 'P', 'R', 'T', '1', 0, 0, 0};

std::vector<unsigned char> ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t BigEndian32(const std::vector<unsigned char>& bytes, std::size_t offset,
                          const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) throw DataFormatError("truncated IDX header in " + path.string());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void PutBigEndian32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

std::string Hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace

const char* SourceFormatName(SourceFormat format) {
  switch (format) {
    case SourceFormat::kIdx:
      return "idx";
    case SourceFormat::kRawTensor:
      return "raw-tensor";
    case SourceFormat::kSyntheticShapes:
      return "synthetic-shapes";
  }
  return "?";
}

SourceFormat ParseSourceFormat(const std::string& text) {
  for (auto f : {SourceFormat::kIdx, SourceFormat::kRawTensor, SourceFormat::kSyntheticShapes}) {
    if (text == SourceFormatName(f)) return f;
  }
  throw std::invalid_argument("unknown dataset format '" + text +
                              "' (expected idx, raw-tensor or synthetic-shapes)");
}

Dataset Dataset::Subset(std::span<const std::int64_t> rows) const {
  Dataset d = *this;
  d.images = GatherRows(images, rows);
  if (labelled()) {
    d.labels.clear();
    for (std::int64_t r : rows) d.labels.push_back(labels.at(r));
  }
  return d;
}

Tensor ReadIdxImages(const std::filesystem::path& path, int image_size) {
  const auto bytes = ReadFile(path);
  const std::uint32_t magic = BigEndian32(bytes, 0, path);
  if (magic != kIdxImagesMagic) {
    throw DataFormatError("bad IDX image magic " + Hex(magic) + " in " + path.string());
  }
  const std::int64_t count = BigEndian32(bytes, 4, path);
  const std::int64_t rows = BigEndian32(bytes, 8, path);
  const std::int64_t cols = BigEndian32(bytes, 12, path);
  const std::size_t expected = 16 + static_cast<std::size_t>(count * rows * cols);
  if (bytes.size() < expected) {
    throw DataFormatError("truncated IDX image file " + path.string() + ": expected " +
                          std::to_string(expected) + " bytes, found " +
                          std::to_string(bytes.size()));
  }
  if (rows > image_size || cols > image_size) {
    throw DataFormatError("IDX images of " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " do not fit in " + std::to_string(image_size));
  }
  const std::int64_t top = (image_size - rows) / 2, left = (image_size - cols) / 2;
  Tensor out = Tensor::Full({count, 1, image_size, image_size}, -1.0f);
  auto px = out.mutable_data();
  const std::int64_t plane = static_cast<std::int64_t>(image_size) * image_size;
  for (std::int64_t n = 0; n < count; ++n) {
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) {
        const unsigned char v = bytes[16 + (n * rows + r) * cols + c];
        px[n * plane + (top + r) * image_size + left + c] =
            static_cast<Real>(v / 127.5 - 1.0);
      }
    }
  }
  return out;
}

std::vector<int> ReadIdxLabels(const std::filesystem::path& path) {
  const auto bytes = ReadFile(path);
  const std::uint32_t magic = BigEndian32(bytes, 0, path);
  if (magic != kIdxLabelsMagic) {
    throw DataFormatError("bad IDX label magic " + Hex(magic) + " in " + path.string());
  }
  const std::size_t count = BigEndian32(bytes, 4, path);
  if (bytes.size() < 8 + count) {
    throw DataFormatError("truncated IDX label file " + path.string() + ": header declares " +
                          std::to_string(count) + " labels, found " +
                          std::to_string(bytes.size() - 8));
  }
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count));
}

Dataset IngestIdx(const std::filesystem::path& images, const std::filesystem::path& labels,
                  int image_size, Split split, Sensitivity sensitivity) {
  Dataset d;
  d.name = images.filename().string();
  d.images = ReadIdxImages(images, image_size);
  d.labels = ReadIdxLabels(labels);
  if (static_cast<std::int64_t>(d.labels.size()) != d.images.dim(0)) {
    throw DataFormatError("label count " + std::to_string(d.labels.size()) +
                          " does not match image count " + std::to_string(d.images.dim(0)));
  }
  d.format = SourceFormat::kIdx;
  d.split = split;
  d.sensitivity = sensitivity;
  return d;
}

void WriteRawTensorImages(const std::filesystem::path& path, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw ShapeError("raw tensor images must be [N, 1, S, S], got " + ShapeToString(images.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataFormatError("cannot write " + path.string());
  out.write(kRawMagic, sizeof(kRawMagic));
  for (int i = 0; i < 4; ++i) {
    const auto d = static_cast<std::uint32_t>(images.dim(i));
    const char bytes[4] = {static_cast<char>(d), static_cast<char>(d >> 8),
                           static_cast<char>(d >> 16), static_cast<char>(d >> 24)};
    out.write(bytes, 4);
  }
  for (Real v : images.data()) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
}

Tensor ReadRawTensorImages(const std::filesystem::path& path, int image_size) {
  const auto bytes = ReadFile(path);
  if (bytes.size() < 24 || !std::equal(kRawMagic, kRawMagic + 8, bytes.begin())) {
    throw DataFormatError("bad raw tensor magic in " + path.string());
  }
  std::array<std::int64_t, 4> dims{};
  for (int i = 0; i < 4; ++i) {
    const std::size_t o = 8 + 4 * static_cast<std::size_t>(i);
    dims[i] = std::int64_t{bytes[o]} | (std::int64_t{bytes[o + 1]} << 8) |
              (std::int64_t{bytes[o + 2]} << 16) | (std::int64_t{bytes[o + 3]} << 24);
  }
  if (dims[1] != 1 || dims[2] != image_size || dims[3] != image_size) {
    throw DataFormatError("raw tensor " + path.string() + " is not [N, 1, " +
                          std::to_string(image_size) + ", " + std::to_string(image_size) + "]");
  }
  const std::size_t count = static_cast<std::size_t>(dims[0] * dims[2] * dims[3]);
  if (bytes.size() < 24 + 4 * count) {
    throw DataFormatError("truncated raw tensor file " + path.string());
  }
  Tensor out = Tensor::Zeros({dims[0], dims[1], dims[2], dims[3]});
  auto px = out.mutable_data();
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 24 + 4 * i, sizeof(f));
    px[i] = f;
  }
  return out;
}

Dataset IngestRawTensor(const std::filesystem::path& images, const std::filesystem::path& labels,
                        int image_size, Split split, Sensitivity sensitivity) {
  Dataset d;
  d.name = images.filename().string();
  d.images = ReadRawTensorImages(images, image_size);
  if (!labels.empty()) {
    d.labels = ReadIdxLabels(labels);
    if (static_cast<std::int64_t>(d.labels.size()) != d.images.dim(0)) {
      throw DataFormatError("label count " + std::to_string(d.labels.size()) +
                            " does not match image count " + std::to_string(d.images.dim(0)));
    }
  }
  d.format = SourceFormat::kRawTensor;
  d.split = split;
  d.sensitivity = sensitivity;
  return d;
}

void WriteIdxImages(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                    std::int32_t count, std::int32_t rows, std::int32_t cols) {
  if (static_cast<std::int64_t>(pixels.size()) != std::int64_t{count} * rows * cols) {
    throw std::invalid_argument("pixel count does not match the declared shape");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataFormatError("cannot write " + path.string());
  PutBigEndian32(out, kIdxImagesMagic);
  PutBigEndian32(out, count);
  PutBigEndian32(out, rows);
  PutBigEndian32(out, cols);
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void WriteIdxLabels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataFormatError("cannot write " + path.string());
  PutBigEndian32(out, kIdxLabelsMagic);
  PutBigEndian32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

Dataset SyntheticShapes(std::int64_t count, std::uint64_t seed, int image_size) {
  SeededRng rng(seed);
  Dataset d;
  d.name = "synthetic-shapes-" + std::to_string(seed);
  d.format = SourceFormat::kSyntheticShapes;
  d.images = Tensor::Full({count, 1, image_size, image_size}, -1.0f);
  auto px = d.images.mutable_data();
  const double s = image_size;
  for (std::int64_t n = 0; n < count; ++n) {
    const int shape = static_cast<int>(rng.UniformInt(kShapeClasses));
    d.labels.push_back(shape);
    const double radius = s * (0.15 + 0.15 * rng.Uniform());
    const double cx = radius + (s - 2 * radius) * rng.Uniform();
    const double cy = radius + (s - 2 * radius) * rng.Uniform();
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        bool inside = false;
        switch (shape) {
          case 0:
            inside = dx * dx + dy * dy <= radius * radius;
            break;
          case 1:
            inside = std::abs(dx) <= 0.8 * radius && std::abs(dy) <= 0.8 * radius;
            break;
          case 2:  // apex up, base at dy = radius
            inside = dy <= radius && dy >= -radius && std::abs(dx) <= (dy + radius) / 2.0;
            break;
          default:
            inside = (std::abs(dx) <= radius && std::abs(dy) <= 0.25 * radius) ||
                     (std::abs(dy) <= radius && std::abs(dx) <= 0.25 * radius);
        }
        if (inside) px[(n * image_size + y) * image_size + x] = 1.0f;
      }
    }
  }
  return d;
}

Dataset SelectClasses(const Dataset& source, const std::set<int>& classes, bool keep) {
  if (!source.labelled()) throw std::invalid_argument("class selection needs labels");
  std::vector<std::int64_t> rows;
  for (std::int64_t i = 0; i < source.size(); ++i) {
    if (classes.contains(source.labels[i]) == keep) rows.push_back(i);
  }
  return source.Subset(rows);
}

std::pair<Dataset, Dataset> TrainTestSplit(const Dataset& source, double test_fraction,
                                           std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test fraction must lie in [0, 1)");
  }
  std::vector<std::int64_t> order(source.size());
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(seed);
  for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i) {
    std::swap(order[i], order[rng.UniformInt(static_cast<std::uint64_t>(i + 1))]);
  }
  const auto test_count = static_cast<std::int64_t>(std::llround(test_fraction * source.size()));
  std::span<const std::int64_t> all(order);
  Dataset test = source.Subset(all.first(test_count));
  Dataset train = source.Subset(all.subspan(test_count));
  train.split = Split::kTrain;
  test.split = Split::kTest;
  return {std::move(train), std::move(test)};
}

void RequireConsumable(const Dataset& dataset, Consumer consumer) {
  if (dataset.sensitivity != Sensitivity::kPrivate) return;
  if (consumer == Consumer::kNonPrivateTraining) {
    throw FirewallError("private dataset '" + dataset.name +
                        "' cannot be used for non-private training");
  }
  if (consumer == Consumer::kEvaluationReference && dataset.split != Split::kTest) {
    throw FirewallError("private dataset '" + dataset.name +
                        "' may only serve as an evaluation reference from its test split");
  }
}

PoissonSampler::PoissonSampler(std::int64_t population, double q, SeededRng rng)
    : population_(population), q_(q), rng_(rng) {
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("sampling rate must lie in (0, 1]");
  if (population < 0) throw std::invalid_argument("population must be non-negative");
}

std::vector<std::int64_t> PoissonSampler::Next() {
  std::vector<std::int64_t> batch;
  for (std::int64_t i = 0; i < population_; ++i) {
    if (q_ == 1.0 || rng_.Bernoulli(q_)) batch.push_back(i);
  }
  return batch;
}

}  // namespace dplora
