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

#include "dplora/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <stdexcept>
#include <vector>

namespace dplora {

ReportWriter::ReportWriter(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open report " + path.string());
}

void ReportWriter::Write(const nlohmann::json& record) {
  if (!out_.is_open()) return;
  out_ << record.dump() << '\n';
  out_.flush();
}

std::vector<nlohmann::json> ReadReport(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report " + path.string());
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) records.push_back(nlohmann::json::parse(line));
  }
  return records;
}

void WriteImageGrid(const std::filesystem::path& path, const Tensor& images, int rows, int cols) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != images.dim(3)) {
    throw ShapeError("image grid needs [N, 1, S, S], got " + ShapeToString(images.shape()));
  }
  const std::int64_t s = images.dim(2);
  const std::int64_t width = cols * s, height = rows * s;
  std::vector<unsigned char> pixels(static_cast<std::size_t>(width * height), 0);
  const std::int64_t count = std::min<std::int64_t>(images.dim(0), std::int64_t{rows} * cols);
  auto px = images.data();
  for (std::int64_t n = 0; n < count; ++n) {
    const std::int64_t top = (n / cols) * s, left = (n % cols) * s;
    for (std::int64_t y = 0; y < s; ++y) {
      for (std::int64_t x = 0; x < s; ++x) {
        const double v = std::round((px[(n * s + y) * s + x] + 1.0) * 127.5);
        pixels[(top + y) * width + left + x] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n# dplora grid " << rows << "x" << cols << " of " << s << "x" << s << "\n"
      << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::string FileHash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const std::vector<char> bytes(std::istreambuf_iterator<char>(in), {});
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(Fnv1a(bytes.data(), bytes.size())));
  return buf;
}

}  // namespace dplora
