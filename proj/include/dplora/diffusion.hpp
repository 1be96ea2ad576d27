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

// Latent diffusion at desk scale: a convolutional autoencoder, the DDPM
// forward process and epsilon-prediction loss, an attention-equipped denoiser
// with class conditioning, noise-multiplicity training and ancestral sampling.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dplora/lora.hpp"
#include "dplora/param_store.hpp"
#include "dplora/rng.hpp"
#include "dplora/tensor.hpp"

namespace dplora {

// Variance schedule indexed by t in [1, steps]; alpha_bar(0) = 1. All values
// are held in double. A strided schedule keeps a subset of an original
// schedule's timesteps and recomputes betas so alpha_bar matches at kept steps.
class NoiseSchedule {
 public:
  static NoiseSchedule Linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  // Evenly strided subset of `count` timesteps ending at the final one.
  NoiseSchedule Strided(int count) const;

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(Index(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(Index(t)); }
  // Zero-based timestep of the original schedule, as seen by the denoiser.
  int model_timestep(int t) const { return model_t_.at(Index(t)); }
  bool strided() const { return strided_; }

 private:
  std::size_t Index(int t) const;
  std::vector<double> beta_, alpha_bar_;
  std::vector<int> model_t_;
  bool strided_ = false;
};

// ---- autoencoder ----------------------------------------------------------

struct AutoencoderConfig {
  int image_size = 32;
  int image_channels = 1;
  int base_channels = 16;
  // One entry per resolution level; the downsample factor is
  // 2^(levels - 1).
  std::vector<int> channel_mult = {1, 2, 4, 4};
  int latent_channels = 3;

  int downsample() const { return 1 << (channel_mult.size() - 1); }
  int latent_size() const { return image_size / downsample(); }
  void Validate() const;
};

class Autoencoder {
 public:
  Autoencoder();
  ~Autoencoder();
  Autoencoder(Autoencoder&&) noexcept;
  Autoencoder& operator=(Autoencoder&&) noexcept;

  // Registers parameters under "encoder." and "decoder.".
  static Autoencoder Create(ParamStore& params, const AutoencoderConfig& config, SeededRng& rng);

  // images: [N, C, S, S] -> raw latents [N, latent_channels, S/f, S/f].
  Tensor Encode(const Tensor& images) const;
  Tensor Decode(const Tensor& latents) const;

  const AutoencoderConfig& config() const;
  Shape LatentShape() const;
  // Multiplier that brings encoded latents to unit variance for diffusion.
  Real latent_scale() const { return latent_scale_; }
  void set_latent_scale(Real scale) { latent_scale_ = scale; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Real latent_scale_ = 1.0f;
};

struct AutoencoderTraining {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  // Called after every epoch with the mean training loss.
  std::function<void(int epoch, double loss)> on_epoch;
};

// Non-private Adam on mean squared reconstruction error. Throws
// NumericalError naming the step if the loss stops being finite. Sets the
// autoencoder's latent scale from the training latents when done.
double PretrainAutoencoder(Autoencoder& ae, ParamStore& params, const Tensor& images,
                           const AutoencoderTraining& options, SeededRng& rng);

double ReconstructionMse(const Autoencoder& ae, const Tensor& images, int batch_size = 256);

// Scaled latents of `images`, computed in batches without recording.
Tensor EncodeLatents(const Autoencoder& ae, const Tensor& images, int batch_size = 256);

// ---- denoiser -------------------------------------------------------------

struct DenoiserConfig {
  int latent_channels = 3;
  int latent_size = 4;
  int channels = 64;
  int num_heads = 2;
  int num_res_blocks = 1;  // on each side of the attention block
  bool conditional = true;
  int num_classes = 10;
  int embed_dim = 5;
  int time_embed_mult = 4;
  int ff_mult = 2;

  void Validate() const;
};

// Class-label table feeding cross-attention as a one-token context.
class ConditioningEmbedder {
 public:
  ConditioningEmbedder() = default;
  static ConditioningEmbedder Create(ParamStore& params, const std::string& name, int num_classes,
                                     int embed_dim, SeededRng& rng);
  // [B, 1, embed_dim]. Throws std::out_of_range for unknown labels.
  Tensor Forward(std::span<const int> labels) const;
  int num_classes() const { return num_classes_; }

 private:
  Tensor table_;
  int num_classes_ = 0;
};

class Denoiser {
 public:
  Denoiser();
  ~Denoiser();
  Denoiser(Denoiser&&) noexcept;
  Denoiser& operator=(Denoiser&&) noexcept;

  // Registers parameters under "denoiser." and the embedding as "cond.embedding".
  static Denoiser Create(ParamStore& params, const DenoiserConfig& config, SeededRng& rng);

  // z: [B, c, h, w]; model_timesteps: zero-based, one per example; labels are
  // ignored when unconditional. Returns predicted noise shaped like z.
  Tensor Forward(const Tensor& z, std::span<const int> model_timesteps,
                 std::span<const int> labels, SeededRng* dropout_rng = nullptr) const;

  // Attention maps that may carry adapters: self-attention QKV and output
  // projection, cross-attention query, fused key/value and output projection.
  std::vector<AdapterSite> AdapterSites();
  const DenoiserConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Sinusoidal embedding [B, dim] of zero-based timesteps.
Tensor TimestepEmbedding(std::span<const int> model_timesteps, int dim);

// ---- forward process and losses --------------------------------------------

// Any noise predictor with the denoiser's calling convention.
using EpsPredictor = std::function<Tensor(const Tensor& z, std::span<const int> model_timesteps,
                                          std::span<const int> labels)>;

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, per example. t is in
// [0, steps] with t = 0 the no-noise limit. z0 and eps are data.
Tensor QSample(const Tensor& z0, std::span<const int> t, const Tensor& eps,
               const NoiseSchedule& schedule);

// Per-example mean squared error between eps and the prediction, shape [B].
Tensor DdpmLoss(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                std::span<const int> labels, std::span<const int> t, const Tensor& eps,
                SeededRng* dropout_rng = nullptr);
Tensor DdpmLoss(const EpsPredictor& predictor, const NoiseSchedule& schedule, const Tensor& z0,
                std::span<const int> labels, std::span<const int> t, const Tensor& eps);

// k independent (t, eps) draws for each of B examples, stored example-major.
struct MultiplicityDraws {
  int batch = 0;
  int k = 0;
  std::vector<int> t;  // B * k, each in [1, steps]
  Tensor eps;          // [B * k, c, h, w]

  static MultiplicityDraws Draw(int batch, int k, const Shape& latent_shape,
                                const NoiseSchedule& schedule, SeededRng& rng);
  // Draws belonging to one example, as a batch of k.
  MultiplicityDraws Example(int i) const;
};

// Per-example loss averaged over k draws, shape [B]. Clipping downstream acts
// on the gradient of this average.
Tensor NoiseMultiplicityLoss(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const Tensor& z0, std::span<const int> labels,
                             const MultiplicityDraws& draws, SeededRng* dropout_rng = nullptr);
Tensor NoiseMultiplicityLoss(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const Tensor& z0, std::span<const int> labels, int k,
                             SeededRng& rng);

// ---- sampling ---------------------------------------------------------------

EpsPredictor PredictorFor(const Denoiser& denoiser);

// One ancestral step from t to t - 1: posterior mean plus sqrt(beta_t) noise
// (no noise at t = 1).
Tensor ReverseStep(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& schedule,
                   SeededRng& rng);

// Runs the full reverse chain from z_T ~ N(0, I). Throws NumericalError naming
// the step if latents become non-finite.
Tensor SampleLatents(const EpsPredictor& predictor, const NoiseSchedule& schedule,
                     const Shape& latent_shape, std::span<const int> labels, SeededRng& rng);

// Conditional generations decoded to images, produced in chunks.
Tensor Sample(const Denoiser& denoiser, const Autoencoder& ae, const NoiseSchedule& schedule,
              std::span<const int> labels, SeededRng& rng, int chunk_size = 250);

}  // namespace dplora
