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

// Run outputs: append-only JSON-lines reports and 8x8 image grids.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

// One JSON object per line, flushed as soon as it is written, so the report
// of a run that crashes part-way is still valid JSON lines.
class ReportWriter {
 public:
  ReportWriter() = default;
  // Appends to `path`, creating parent directories.
  explicit ReportWriter(const std::filesystem::path& path);
  bool is_open() const { return out_.is_open(); }
  void Write(const nlohmann::json& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// Reads every record of a JSON-lines file.
std::vector<nlohmann::json> ReadReport(const std::filesystem::path& path);

// Binary PGM ("P5") grid of up to rows x cols images [N, 1, S, S] in [-1, 1],
// laid out row-major with no gutter; unused cells are black. The header is
//   P5\n# dplora grid <rows>x<cols> of <S>x<S>\n<cols*S> <rows*S>\n255\n
// followed by one byte per pixel, round((v + 1) * 127.5) clamped to 0..255.
void WriteImageGrid(const std::filesystem::path& path, const Tensor& images, int rows = 8,
                    int cols = 8);

// FNV-1a of a file's bytes, as 16 hex digits.
std::string FileHash(const std::filesystem::path& path);

}  // namespace dplora
