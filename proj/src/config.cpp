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

#include "dplora/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "dplora/data.hpp"
#include "dplora/lora.hpp"
#include "dplora/tensor.hpp"

namespace dplora {
namespace {

using FieldRef = std::variant<std::int64_t*, double*, bool*, std::string*,
                              std::vector<std::int64_t>*, std::vector<std::string>*>;

struct Field {
  const char* section;
  const char* key;
  FieldRef ref;
};

// The schema: every configurable field, in dump order.
std::vector<Field> Fields(ExperimentConfig& c) {
  return {
      {"run", "stage", &c.run.stage},
      {"run", "seed", &c.run.seed},
      {"data", "format", &c.data.format},
      {"data", "images", &c.data.images},
      {"data", "labels", &c.data.labels},
      {"data", "image_size", &c.data.image_size},
      {"data", "synthetic_count", &c.data.synthetic_count},
      {"data", "private_classes", &c.data.private_classes},
      {"data", "private_test_fraction", &c.data.private_test_fraction},
      {"data", "public_holdout_fraction", &c.data.public_holdout_fraction},
      {"data", "split_seed", &c.data.split_seed},
      {"budget", "epsilon", &c.budget.epsilon},
      {"budget", "delta", &c.budget.delta},
      {"mechanism", "clip_norm", &c.mechanism.clip_norm},
      {"mechanism", "expected_batch", &c.mechanism.expected_batch},
      {"mechanism", "epochs", &c.mechanism.epochs},
      {"mechanism", "k", &c.mechanism.k},
      {"mechanism", "max_steps", &c.mechanism.max_steps},
      {"mechanism", "learning_rate", &c.mechanism.learning_rate},
      {"mechanism", "lr_decay", &c.mechanism.lr_decay},
      {"lora", "rank", &c.lora.rank},
      {"lora", "alpha", &c.lora.alpha},
      {"lora", "placement", &c.lora.placement},
      {"lora", "dropout", &c.lora.dropout},
      {"autoencoder", "base_channels", &c.autoencoder.base_channels},
      {"autoencoder", "channel_mult", &c.autoencoder.channel_mult},
      {"autoencoder", "latent_channels", &c.autoencoder.latent_channels},
      {"autoencoder", "epochs", &c.autoencoder.epochs},
      {"autoencoder", "batch_size", &c.autoencoder.batch_size},
      {"autoencoder", "learning_rate", &c.autoencoder.learning_rate},
      {"autoencoder", "mse_threshold", &c.autoencoder.mse_threshold},
      {"denoiser", "channels", &c.denoiser.channels},
      {"denoiser", "num_heads", &c.denoiser.num_heads},
      {"denoiser", "num_res_blocks", &c.denoiser.num_res_blocks},
      {"denoiser", "conditional", &c.denoiser.conditional},
      {"denoiser", "num_classes", &c.denoiser.num_classes},
      {"denoiser", "embed_dim", &c.denoiser.embed_dim},
      {"denoiser", "timesteps", &c.denoiser.timesteps},
      {"denoiser", "beta_start", &c.denoiser.beta_start},
      {"denoiser", "beta_end", &c.denoiser.beta_end},
      {"denoiser", "epochs", &c.denoiser.epochs},
      {"denoiser", "batch_size", &c.denoiser.batch_size},
      {"denoiser", "learning_rate", &c.denoiser.learning_rate},
      {"denoiser", "lr_decay", &c.denoiser.lr_decay},
      {"sampling", "steps", &c.sampling.steps},
      {"sampling", "chunk_size", &c.sampling.chunk_size},
      {"sampling", "samples_per_class", &c.sampling.samples_per_class},
      {"sampling", "use_adapters", &c.sampling.use_adapters},
      {"eval", "feature_epochs", &c.eval.feature_epochs},
      {"eval", "classifier", &c.eval.classifier},
      {"eval", "classifier_epochs", &c.eval.classifier_epochs},
      {"eval", "classifier_seeds", &c.eval.classifier_seeds},
      {"ablate", "ranks", &c.ablate.ranks},
      {"ablate", "ks", &c.ablate.ks},
      {"ablate", "placements", &c.ablate.placements},
      {"ablate", "epochs", &c.ablate.epochs},
      {"ablate", "samples_per_class", &c.ablate.samples_per_class},
      {"paths", "autoencoder", &c.paths.autoencoder},
      {"paths", "denoiser", &c.paths.denoiser},
      {"paths", "adapters", &c.paths.adapters},
      {"paths", "features", &c.paths.features},
  };
}

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> SplitList(const std::string& text) {
  std::vector<std::string> out;
  if (Trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(Trim(item));
  return out;
}

std::int64_t ParseInt(const std::string& text) {
  std::int64_t v = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("'" + text + "' is not an integer");
  return v;
}

double ParseFloat(const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty() || !std::isfinite(v)) {
    throw ConfigError("'" + text + "' is not a finite number");
  }
  return v;
}

bool ParseBool(const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("'" + text + "' is not a bool (true or false)");
}

// Shortest decimal text that reads back to the same double.
std::string FormatFloat(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

const char* TypeName(const FieldRef& ref) {
  static constexpr const char* kNames[] = {"int", "float", "bool", "string", "ints", "strings"};
  return kNames[ref.index()];
}

void Assign(const FieldRef& ref, const std::string& value) {
  std::visit(
      [&](auto* field) {
        using T = std::remove_pointer_t<decltype(field)>;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          *field = ParseInt(value);
        } else if constexpr (std::is_same_v<T, double>) {
          *field = ParseFloat(value);
        } else if constexpr (std::is_same_v<T, bool>) {
          *field = ParseBool(value);
        } else if constexpr (std::is_same_v<T, std::string>) {
          *field = value;
        } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
          field->clear();
          for (const auto& item : SplitList(value)) field->push_back(ParseInt(item));
        } else {
          *field = SplitList(value);
        }
      },
      ref);
}

std::string Render(const FieldRef& ref) {
  return std::visit(
      [](auto* field) -> std::string {
        using T = std::remove_pointer_t<decltype(field)>;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(*field);
        } else if constexpr (std::is_same_v<T, double>) {
          return FormatFloat(*field);
        } else if constexpr (std::is_same_v<T, bool>) {
          return *field ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::string>) {
          return *field;
        } else {
          std::string out;
          for (std::size_t i = 0; i < field->size(); ++i) {
            if (i) out += ", ";
            if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
              out += std::to_string((*field)[i]);
            } else {
              out += (*field)[i];
            }
          }
          return out;
        }
      },
      ref);
}

void Require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

ExperimentConfig ExperimentConfig::Parse(const std::string& text,
                                         const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  std::map<std::string, FieldRef> by_name;
  std::set<std::string> sections;
  for (const auto& f : Fields(c)) {
    by_name.emplace(std::string(f.section) + "." + f.key, f.ref);
    sections.insert(f.section);
  }
  std::set<std::string> seen;
  std::string section;
  std::stringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    std::string line = Trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      Require(line.back() == ']', where + "unterminated section header");
      section = Trim(line.substr(1, line.size() - 2));
      Require(sections.contains(section), where + "unknown section [" + section + "]");
      continue;
    }
    Require(!section.empty(), where + "entry outside any section");
    const auto colon = line.find(':'), equals = line.find('=');
    Require(colon != std::string::npos && equals != std::string::npos && colon < equals,
            where + "expected 'key: type = value'");
    const std::string key = Trim(line.substr(0, colon));
    const std::string type = Trim(line.substr(colon + 1, equals - colon - 1));
    const std::string value = Trim(line.substr(equals + 1));
    const std::string name = section + "." + key;
    auto it = by_name.find(name);
    Require(it != by_name.end(), where + "unknown key '" + name + "'");
    Require(type == TypeName(it->second),
            where + "'" + name + "' has type " + TypeName(it->second) + ", not " + type);
    Require(seen.insert(name).second, where + "duplicate key '" + name + "'");
    try {
      Assign(it->second, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + name + ": " + e.what());
    }
  }
  c.Validate();
  return c;
}

ExperimentConfig ExperimentConfig::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return Parse(buffer.str(), path.parent_path().empty() ? "." : path.parent_path());
}

std::string ExperimentConfig::Dump() const {
  std::string out;
  std::string section;
  auto& self = const_cast<ExperimentConfig&>(*this);  // Fields() only reads here
  for (const auto& f : Fields(self)) {
    if (section != f.section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(f.key) + ": " + TypeName(f.ref) + " = " + Render(f.ref) + "\n";
  }
  return out;
}

std::uint64_t ExperimentConfig::Hash() const {
  const std::string text = Dump();
  return Fnv1a(text.data(), text.size());
}

void ExperimentConfig::Validate() const {
  static const std::set<std::string> kStages = {"pretrain_ae", "pretrain_ldm", "finetune_dp",
                                                "generate",    "evaluate",     "ablate"};
  Require(kStages.contains(run.stage), "run.stage '" + run.stage + "' is not a known stage");
  try {
    ParseSourceFormat(data.format);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  Require(data.image_size > 0, "data.image_size must be positive");
  Require(data.private_test_fraction >= 0.0 && data.private_test_fraction < 1.0,
          "data.private_test_fraction must lie in [0, 1)");
  Require(data.public_holdout_fraction >= 0.0 && data.public_holdout_fraction < 1.0,
          "data.public_holdout_fraction must lie in [0, 1)");
  Require(budget.epsilon > 0.0, "budget.epsilon must be positive");
  Require(budget.delta > 0.0 && budget.delta < 1.0, "budget.delta must lie in (0, 1)");
  Require(mechanism.clip_norm > 0.0, "mechanism.clip_norm must be positive");
  Require(mechanism.expected_batch > 0, "mechanism.expected_batch must be positive");
  Require(mechanism.epochs > 0, "mechanism.epochs must be positive");
  Require(mechanism.k >= 1, "mechanism.k must be at least 1");
  Require(mechanism.max_steps >= 0, "mechanism.max_steps must be non-negative");
  Require(mechanism.learning_rate > 0.0, "mechanism.learning_rate must be positive");
  Require(lora.rank >= 1, "lora.rank must be at least 1");
  Require(lora.alpha > 0.0, "lora.alpha must be positive");
  Require(lora.dropout >= 0.0 && lora.dropout < 1.0, "lora.dropout must lie in [0, 1)");
  try {
    AdapterPlacement::Parse(lora.placement);
    for (const auto& p : ablate.placements) AdapterPlacement::Parse(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  Require(!autoencoder.channel_mult.empty(), "autoencoder.channel_mult must not be empty");
  Require(autoencoder.epochs > 0 && autoencoder.batch_size > 0,
          "autoencoder epochs and batch_size must be positive");
  Require(denoiser.timesteps >= 1, "denoiser.timesteps must be positive");
  Require(denoiser.epochs > 0 && denoiser.batch_size > 0,
          "denoiser epochs and batch_size must be positive");
  Require(sampling.steps >= 1 && sampling.steps <= denoiser.timesteps,
          "sampling.steps must lie in [1, denoiser.timesteps]");
  Require(sampling.chunk_size >= 1, "sampling.chunk_size must be positive");
  Require(eval.classifier == "cnn" || eval.classifier == "resnet9-lite",
          "eval.classifier must be cnn or resnet9-lite");
  Require(eval.classifier_seeds >= 1, "eval.classifier_seeds must be positive");
  for (auto r : ablate.ranks) Require(r >= 1, "ablate.ranks entries must be positive");
  for (auto k : ablate.ks) Require(k >= 1, "ablate.ks entries must be positive");
  for (auto y : data.private_classes) {
    Require(y >= 0 && y < denoiser.num_classes, "data.private_classes outside the class range");
  }
}

std::filesystem::path ExperimentConfig::Resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

}  // namespace dplora
