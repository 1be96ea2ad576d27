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

#include "dplora/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "dplora/autodiff.hpp"
#include "dplora/dp_optim.hpp"
#include "dplora/nn.hpp"
#include "dplora/ops.hpp"

namespace dplora {
namespace {

Tensor NormalTensor(Shape shape, SeededRng& rng) {
  Tensor t = Tensor::Zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<Real>(rng.Normal());
  return t;
}

}  // namespace

// ---- schedule ---------------------------------------------------------------

NoiseSchedule NoiseSchedule::Linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw std::invalid_argument("betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  double bar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    bar *= 1.0 - beta;
    s.beta_.push_back(beta);
    s.alpha_bar_.push_back(bar);
    s.model_t_.push_back(i);
  }
  return s;
}

NoiseSchedule NoiseSchedule::Strided(int count) const {
  if (count < 1 || count > steps()) {
    throw std::invalid_argument("strided step count must lie in [1, " + std::to_string(steps()) +
                                "]");
  }
  NoiseSchedule s;
  s.strided_ = count != steps();
  double previous_bar = 1.0;
  for (int i = 1; i <= count; ++i) {
    // Kept original timesteps: round(i * steps / count), so the last is T.
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * steps() / count));
    const double bar = alpha_bar(t);
    s.beta_.push_back(1.0 - bar / previous_bar);
    s.alpha_bar_.push_back(bar);
    s.model_t_.push_back(model_timestep(t));
    previous_bar = bar;
  }
  return s;
}

std::size_t NoiseSchedule::Index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

// ---- autoencoder -------------------------------------------------------------

void AutoencoderConfig::Validate() const {
  if (channel_mult.empty()) throw std::invalid_argument("autoencoder needs at least one level");
  if (base_channels < 1 || latent_channels < 1 || image_channels < 1) {
    throw std::invalid_argument("autoencoder channel counts must be positive");
  }
  if (image_size < 1 || image_size % downsample() != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) +
                                " is not divisible by downsample factor " +
                                std::to_string(downsample()));
  }
}

struct Autoencoder::Impl {
  AutoencoderConfig config;
  Conv2dLayer enc_in, enc_out, dec_in, dec_out;
  std::vector<Conv2dLayer> enc_down, enc_mid, dec_up, dec_mid;
};

Autoencoder::Autoencoder() = default;
Autoencoder::~Autoencoder() = default;
Autoencoder::Autoencoder(Autoencoder&&) noexcept = default;
Autoencoder& Autoencoder::operator=(Autoencoder&&) noexcept = default;

Autoencoder Autoencoder::Create(ParamStore& params, const AutoencoderConfig& config,
                                SeededRng& rng) {
  config.Validate();
  Autoencoder ae;
  ae.impl_ = std::make_unique<Impl>();
  Impl& m = *ae.impl_;
  m.config = config;
  const int levels = static_cast<int>(config.channel_mult.size());
  auto width = [&](int level) { return config.base_channels * config.channel_mult[level]; };

  m.enc_in = Conv2dLayer::Create(params, "encoder.conv_in", config.image_channels, width(0), 3, 1,
                                 1, rng);
  for (int l = 1; l < levels; ++l) {
    const std::string p = "encoder.level" + std::to_string(l);
    m.enc_down.push_back(Conv2dLayer::Create(params, p + ".down", width(l - 1), width(l), 3, 2, 1, rng));
    m.enc_mid.push_back(Conv2dLayer::Create(params, p + ".conv", width(l), width(l), 3, 1, 1, rng));
  }
  m.enc_out = Conv2dLayer::Create(params, "encoder.conv_out", width(levels - 1),
                                  config.latent_channels, 3, 1, 1, rng);

  m.dec_in = Conv2dLayer::Create(params, "decoder.conv_in", config.latent_channels,
                                 width(levels - 1), 3, 1, 1, rng);
  for (int l = levels - 1; l >= 1; --l) {
    const std::string p = "decoder.level" + std::to_string(l);
    m.dec_up.push_back(Conv2dLayer::Create(params, p + ".up", width(l), width(l - 1), 3, 1, 1, rng));
    m.dec_mid.push_back(
        Conv2dLayer::Create(params, p + ".conv", width(l - 1), width(l - 1), 3, 1, 1, rng));
  }
  m.dec_out = Conv2dLayer::Create(params, "decoder.conv_out", width(0), config.image_channels, 3,
                                  1, 1, rng);
  return ae;
}

Tensor Autoencoder::Encode(const Tensor& images) const {
  const Impl& m = *impl_;
  if (images.rank() != 4 || images.dim(1) != m.config.image_channels ||
      images.dim(2) != m.config.image_size || images.dim(3) != m.config.image_size) {
    throw ShapeError("autoencoder expects images [N, " + std::to_string(m.config.image_channels) +
                     ", " + std::to_string(m.config.image_size) + ", " +
                     std::to_string(m.config.image_size) + "], got " +
                     ShapeToString(images.shape()));
  }
  Tensor h = ops::Silu(m.enc_in.Forward(images));
  for (std::size_t l = 0; l < m.enc_down.size(); ++l) {
    h = ops::Silu(m.enc_down[l].Forward(h));
    h = ops::Silu(m.enc_mid[l].Forward(h));
  }
  return m.enc_out.Forward(h);
}

Tensor Autoencoder::Decode(const Tensor& latents) const {
  const Impl& m = *impl_;
  Tensor h = ops::Silu(m.dec_in.Forward(latents));
  for (std::size_t l = 0; l < m.dec_up.size(); ++l) {
    h = ops::Silu(m.dec_up[l].Forward(ops::UpsampleNearest(h, 2)));
    h = ops::Silu(m.dec_mid[l].Forward(h));
  }
  return m.dec_out.Forward(h);
}

const AutoencoderConfig& Autoencoder::config() const { return impl_->config; }

Shape Autoencoder::LatentShape() const {
  const auto& c = impl_->config;
  return {c.latent_channels, c.latent_size(), c.latent_size()};
}

double PretrainAutoencoder(Autoencoder& ae, ParamStore& params, const Tensor& images,
                           const AutoencoderTraining& options, SeededRng& rng) {
  const std::int64_t n = images.dim(0);
  if (n < 1) throw std::invalid_argument("autoencoder pretraining needs at least one image");
  if (options.epochs < 1 || options.batch_size < 1) {
    throw std::invalid_argument("epochs and batch size must be positive");
  }
  Optimizer optimizer({.rule = UpdateRule::kAdam, .learning_rate = options.learning_rate});
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0.0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    // Fisher-Yates with the project rng keeps the order reproducible.
    for (std::int64_t i = n - 1; i > 0; --i) {
      std::swap(order[i], order[rng.UniformInt(static_cast<std::uint64_t>(i + 1))]);
    }
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += options.batch_size) {
      const std::int64_t count = std::min<std::int64_t>(options.batch_size, n - start);
      Tensor x = GatherRows(images, std::span(order).subspan(start, count));
      Tape tape;
      Tensor loss;
      try {
        TapeScope scope(tape);
        loss = ops::Mean(ops::Square(ops::Sub(ae.Decode(ae.Encode(x)), x)));
      } catch (const NumericalError& e) {
        throw NumericalError("autoencoder diverged at step " + std::to_string(step) + ": " +
                             e.what());
      }
      if (!std::isfinite(loss.item())) {
        throw NumericalError("autoencoder loss is not finite at step " + std::to_string(step));
      }
      Backward(tape, loss, params);
      optimizer.Apply(params, CollectGradients(tape, params));
      total += loss.item();
      ++batches;
      ++step;
    }
    epoch_loss = total / static_cast<double>(batches);
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }
  // Unit-variance latents for the diffusion stage.
  ae.set_latent_scale(1.0f);
  Tensor z = EncodeLatents(ae, images);
  double sum = 0.0, sq = 0.0;
  for (Real v : z.data()) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double mean = sum / z.numel();
  const double var = sq / z.numel() - mean * mean;
  ae.set_latent_scale(static_cast<Real>(var > 0.0 ? 1.0 / std::sqrt(var) : 1.0));
  return epoch_loss;
}

double ReconstructionMse(const Autoencoder& ae, const Tensor& images, int batch_size) {
  const std::int64_t n = images.dim(0);
  double total = 0.0;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
    Tensor x = SliceRows(images, start, count);
    Tensor r = ae.Decode(ae.Encode(x));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double d = static_cast<double>(r.at(i)) - x.at(i);
      total += d * d;
    }
  }
  return total / static_cast<double>(images.numel());
}

Tensor EncodeLatents(const Autoencoder& ae, const Tensor& images, int batch_size) {
  const std::int64_t n = images.dim(0);
  Shape shape = ae.LatentShape();
  shape.insert(shape.begin(), n);
  std::vector<Real> out;
  out.reserve(NumElements(shape));
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t count = std::min<std::int64_t>(batch_size, n - start);
    Tensor z = ae.Encode(SliceRows(images, start, count));
    for (Real v : z.data()) out.push_back(v * ae.latent_scale());
  }
  return Tensor::FromData(std::move(shape), std::move(out));
}

// ---- denoiser -----------------------------------------------------------------

void DenoiserConfig::Validate() const {
  if (channels < 1 || latent_channels < 1 || latent_size < 1 || num_res_blocks < 0) {
    throw std::invalid_argument("denoiser sizes must be positive");
  }
  if (num_heads < 1 || channels % num_heads != 0) {
    throw std::invalid_argument("channels must be divisible by the head count");
  }
  if (channels % 2 != 0) throw std::invalid_argument("channels must be even");
  if (conditional && (num_classes < 1 || embed_dim < 1)) {
    throw std::invalid_argument("conditional denoiser needs classes and an embedding width");
  }
}

ConditioningEmbedder ConditioningEmbedder::Create(ParamStore& params, const std::string& name,
                                                  int num_classes, int embed_dim,
                                                  SeededRng& rng) {
  ConditioningEmbedder e;
  e.num_classes_ = num_classes;
  e.table_ = params.Add(name, NormalTensor({num_classes, embed_dim}, rng));
  return e;
}

Tensor ConditioningEmbedder::Forward(std::span<const int> labels) const {
  for (int y : labels) {
    if (y < 0 || y >= num_classes_) {
      throw std::out_of_range("class label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes_) + ")");
    }
  }
  Tensor e = ops::EmbeddingLookup(table_, labels);
  return ops::Reshape(e, {static_cast<std::int64_t>(labels.size()), 1, e.dim(1)});
}

namespace {

struct ResBlock {
  GroupNormLayer norm1, norm2;
  Conv2dLayer conv1, conv2;
  Linear temb_proj;

  static ResBlock Create(ParamStore& params, const std::string& name, int channels, int temb_dim,
                         SeededRng& rng) {
    ResBlock r;
    const int groups = GroupsFor(channels);
    r.norm1 = GroupNormLayer::Create(params, name + ".norm1", channels, groups);
    r.conv1 = Conv2dLayer::Create(params, name + ".conv1", channels, channels, 3, 1, 1, rng);
    r.temb_proj = Linear::Create(params, name + ".temb_proj", temb_dim, channels, true, rng);
    r.norm2 = GroupNormLayer::Create(params, name + ".norm2", channels, groups);
    r.conv2 = Conv2dLayer::Create(params, name + ".conv2", channels, channels, 3, 1, 1, rng);
    return r;
  }

  // temb_act: SiLU-activated time embedding [B, temb_dim].
  Tensor Forward(const Tensor& x, const Tensor& temb_act) const {
    Tensor h = conv1.Forward(ops::Silu(norm1.Forward(x)));
    Tensor t = temb_proj.Forward(temb_act);
    h = ops::Add(h, ops::Reshape(t, {t.dim(0), t.dim(1), 1, 1}));
    h = conv2.Forward(ops::Silu(norm2.Forward(h)));
    return ops::Add(x, h);
  }
};

// Multi-head attention over tokens [B, N, C]. Self-attention uses one fused
// QKV map; cross-attention a query map plus a fused key/value map over the
// context tokens.
struct Attention {
  bool cross = false;
  int heads = 1;
  std::int64_t dim = 0;
  Linear qkv, q, kv, out;

  static Attention CreateSelf(ParamStore& params, const std::string& name, int dim, int heads,
                              SeededRng& rng) {
    Attention a;
    a.heads = heads;
    a.dim = dim;
    a.qkv = Linear::Create(params, name + ".qkv", dim, 3 * dim, false, rng);
    a.out = Linear::Create(params, name + ".out", dim, dim, true, rng);
    return a;
  }

  static Attention CreateCross(ParamStore& params, const std::string& name, int dim,
                               int context_dim, int heads, SeededRng& rng) {
    Attention a;
    a.cross = true;
    a.heads = heads;
    a.dim = dim;
    a.q = Linear::Create(params, name + ".q", dim, dim, false, rng);
    a.kv = Linear::Create(params, name + ".kv", context_dim, 2 * dim, false, rng);
    a.out = Linear::Create(params, name + ".out", dim, dim, true, rng);
    return a;
  }

  // [B, N, C] -> [B * heads, N, C / heads]
  Tensor SplitHeads(const Tensor& x) const {
    const std::int64_t b = x.dim(0), n = x.dim(1), d = dim / heads;
    static constexpr int kOrder[] = {0, 2, 1, 3};
    return ops::Reshape(ops::Permute(ops::Reshape(x, {b, n, heads, d}), kOrder), {b * heads, n, d});
  }

  Tensor MergeHeads(const Tensor& x, std::int64_t batch) const {
    const std::int64_t n = x.dim(1), d = x.dim(2);
    static constexpr int kOrder[] = {0, 2, 1, 3};
    return ops::Reshape(ops::Permute(ops::Reshape(x, {batch, heads, n, d}), kOrder),
                        {batch, n, heads * d});
  }

  Tensor Forward(const Tensor& x, const Tensor& context, SeededRng* dropout_rng) const {
    Tensor query, key, value;
    if (cross) {
      query = q.Forward(x, dropout_rng);
      Tensor k_v = kv.Forward(context, dropout_rng);
      key = ops::Slice(k_v, -1, 0, dim);
      value = ops::Slice(k_v, -1, dim, dim);
    } else {
      Tensor fused = qkv.Forward(x, dropout_rng);
      query = ops::Slice(fused, -1, 0, dim);
      key = ops::Slice(fused, -1, dim, dim);
      value = ops::Slice(fused, -1, 2 * dim, dim);
    }
    const Real scale = 1.0f / std::sqrt(static_cast<Real>(dim / heads));
    Tensor scores = ops::Scale(ops::MatMul(SplitHeads(query), ops::Transpose(SplitHeads(key))), scale);
    Tensor mixed = ops::MatMul(ops::Softmax(scores), SplitHeads(value));
    return out.Forward(MergeHeads(mixed, x.dim(0)), dropout_rng);
  }
};

struct SpatialTransformer {
  GroupNormLayer norm;
  Linear proj_in, proj_out, ff1, ff2;
  LayerNormLayer ln_self, ln_cross, ln_ff;
  Attention self_attn, cross_attn;
  bool conditional = false;

  static SpatialTransformer Create(ParamStore& params, const std::string& name,
                                   const DenoiserConfig& c, SeededRng& rng) {
    SpatialTransformer s;
    s.conditional = c.conditional;
    s.norm = GroupNormLayer::Create(params, name + ".norm", c.channels, GroupsFor(c.channels));
    s.proj_in = Linear::Create(params, name + ".proj_in", c.channels, c.channels, true, rng);
    s.ln_self = LayerNormLayer::Create(params, name + ".ln_self", c.channels);
    s.self_attn = Attention::CreateSelf(params, name + ".self_attn", c.channels, c.num_heads, rng);
    if (c.conditional) {
      s.ln_cross = LayerNormLayer::Create(params, name + ".ln_cross", c.channels);
      s.cross_attn = Attention::CreateCross(params, name + ".cross_attn", c.channels, c.embed_dim,
                                            c.num_heads, rng);
    }
    s.ln_ff = LayerNormLayer::Create(params, name + ".ln_ff", c.channels);
    s.ff1 = Linear::Create(params, name + ".ff1", c.channels, c.ff_mult * c.channels, true, rng);
    s.ff2 = Linear::Create(params, name + ".ff2", c.ff_mult * c.channels, c.channels, true, rng);
    s.proj_out = Linear::Create(params, name + ".proj_out", c.channels, c.channels, true, rng);
    return s;
  }

  Tensor Forward(const Tensor& x, const Tensor& context, SeededRng* dropout_rng) const {
    const std::int64_t b = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor h = ops::Transpose(ops::Reshape(norm.Forward(x), {b, ch, hw}));  // [B, HW, C]
    h = proj_in.Forward(h);
    h = ops::Add(h, self_attn.Forward(ln_self.Forward(h), Tensor(), dropout_rng));
    if (conditional) {
      h = ops::Add(h, cross_attn.Forward(ln_cross.Forward(h), context, dropout_rng));
    }
    h = ops::Add(h, ff2.Forward(ops::Silu(ff1.Forward(ln_ff.Forward(h)))));
    h = proj_out.Forward(h);
    return ops::Add(x, ops::Reshape(ops::Transpose(h), x.shape()));
  }
};

}  // namespace

struct Denoiser::Impl {
  DenoiserConfig config;
  Linear time1, time2;
  Conv2dLayer conv_in, conv_out;
  std::vector<ResBlock> down, up;
  SpatialTransformer transformer;
  GroupNormLayer norm_out;
  ConditioningEmbedder embedder;
};

Denoiser::Denoiser() = default;
Denoiser::~Denoiser() = default;
Denoiser::Denoiser(Denoiser&&) noexcept = default;
Denoiser& Denoiser::operator=(Denoiser&&) noexcept = default;

Denoiser Denoiser::Create(ParamStore& params, const DenoiserConfig& config, SeededRng& rng) {
  config.Validate();
  Denoiser d;
  d.impl_ = std::make_unique<Impl>();
  Impl& m = *d.impl_;
  m.config = config;
  const int c = config.channels, temb = config.time_embed_mult * c;
  m.time1 = Linear::Create(params, "denoiser.time.fc1", c, temb, true, rng);
  m.time2 = Linear::Create(params, "denoiser.time.fc2", temb, temb, true, rng);
  m.conv_in = Conv2dLayer::Create(params, "denoiser.conv_in", config.latent_channels, c, 3, 1, 1, rng);
  for (int i = 0; i < config.num_res_blocks; ++i) {
    m.down.push_back(
        ResBlock::Create(params, "denoiser.res_in" + std::to_string(i), c, temb, rng));
  }
  m.transformer = SpatialTransformer::Create(params, "denoiser.transformer", config, rng);
  for (int i = 0; i < config.num_res_blocks; ++i) {
    m.up.push_back(ResBlock::Create(params, "denoiser.res_out" + std::to_string(i), c, temb, rng));
  }
  m.norm_out = GroupNormLayer::Create(params, "denoiser.norm_out", c, GroupsFor(c));
  m.conv_out = Conv2dLayer::Create(params, "denoiser.conv_out", c, config.latent_channels, 3, 1, 1, rng);
  if (config.conditional) {
    m.embedder = ConditioningEmbedder::Create(params, "cond.embedding", config.num_classes,
                                              config.embed_dim, rng);
  }
  return d;
}

Tensor TimestepEmbedding(std::span<const int> model_timesteps, int dim) {
  const int half = dim / 2;
  const std::int64_t b = static_cast<std::int64_t>(model_timesteps.size());
  Tensor e = Tensor::Zeros({b, dim});
  auto out = e.mutable_data();
  for (std::int64_t i = 0; i < b; ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double arg = model_timesteps[i] * freq;
      out[i * dim + j] = static_cast<Real>(std::cos(arg));
      out[i * dim + half + j] = static_cast<Real>(std::sin(arg));
    }
  }
  return e;
}

Tensor Denoiser::Forward(const Tensor& z, std::span<const int> model_timesteps,
                         std::span<const int> labels, SeededRng* dropout_rng) const {
  const Impl& m = *impl_;
  const auto& c = m.config;
  if (z.rank() != 4 || z.dim(1) != c.latent_channels || z.dim(2) != c.latent_size ||
      z.dim(3) != c.latent_size) {
    throw ShapeError("denoiser expects latents [B, " + std::to_string(c.latent_channels) + ", " +
                     std::to_string(c.latent_size) + ", " + std::to_string(c.latent_size) +
                     "], got " + ShapeToString(z.shape()));
  }
  const std::size_t b = static_cast<std::size_t>(z.dim(0));
  if (model_timesteps.size() != b) throw ShapeError("one timestep per example is required");
  Tensor context;
  if (c.conditional) {
    if (labels.size() != b) throw ShapeError("one label per example is required");
    context = m.embedder.Forward(labels);
  }
  Tensor temb = m.time2.Forward(ops::Silu(m.time1.Forward(TimestepEmbedding(model_timesteps, c.channels))));
  Tensor temb_act = ops::Silu(temb);
  Tensor h = m.conv_in.Forward(z);
  for (const auto& block : m.down) h = block.Forward(h, temb_act);
  h = m.transformer.Forward(h, context, dropout_rng);
  for (const auto& block : m.up) h = block.Forward(h, temb_act);
  return m.conv_out.Forward(ops::Silu(m.norm_out.Forward(h)));
}

std::vector<AdapterSite> Denoiser::AdapterSites() {
  SpatialTransformer& t = impl_->transformer;
  std::vector<AdapterSite> sites{
      {"denoiser.transformer.self_attn.qkv", AdapterTarget::kAttentionQkv, &t.self_attn.qkv},
      {"denoiser.transformer.self_attn.out", AdapterTarget::kAttentionOutProjection,
       &t.self_attn.out}};
  if (impl_->config.conditional) {
    sites.push_back(
        {"denoiser.transformer.cross_attn.q", AdapterTarget::kAttentionQkv, &t.cross_attn.q});
    sites.push_back(
        {"denoiser.transformer.cross_attn.kv", AdapterTarget::kAttentionQkv, &t.cross_attn.kv});
    sites.push_back({"denoiser.transformer.cross_attn.out", AdapterTarget::kAttentionOutProjection,
                     &t.cross_attn.out});
  }
  return sites;
}

const DenoiserConfig& Denoiser::config() const { return impl_->config; }

// ---- forward process and losses ------------------------------------------------

Tensor QSample(const Tensor& z0, std::span<const int> t, const Tensor& eps,
               const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape()) throw ShapeError("z0 and eps shapes differ");
  if (static_cast<std::int64_t>(t.size()) != z0.dim(0)) {
    throw ShapeError("one timestep per example is required");
  }
  const std::int64_t row = z0.numel() / z0.dim(0);
  Tensor out = Tensor::Zeros(z0.shape());
  auto dst = out.mutable_data();
  auto a = z0.data(), e = eps.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || t[i] > schedule.steps()) {
      throw std::out_of_range("timestep " + std::to_string(t[i]) + " outside [0, " +
                              std::to_string(schedule.steps()) + "]");
    }
    const double bar = schedule.alpha_bar(t[i]);
    const double signal = std::sqrt(bar), noise = std::sqrt(1.0 - bar);
    for (std::int64_t j = i * row; j < static_cast<std::int64_t>(i + 1) * row; ++j) {
      dst[j] = static_cast<Real>(signal * a[j] + noise * e[j]);
    }
  }
  return out;
}

Tensor DdpmLoss(const Denoiser& denoiser, const NoiseSchedule& schedule, const Tensor& z0,
                std::span<const int> labels, std::span<const int> t, const Tensor& eps,
                SeededRng* dropout_rng) {
  return DdpmLoss(
      [&](const Tensor& z, std::span<const int> model_t, std::span<const int> y) {
        return denoiser.Forward(z, model_t, y, dropout_rng);
      },
      schedule, z0, labels, t, eps);
}

Tensor DdpmLoss(const EpsPredictor& predictor, const NoiseSchedule& schedule, const Tensor& z0,
                std::span<const int> labels, std::span<const int> t, const Tensor& eps) {
  std::vector<int> model_t(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 1 || t[i] > schedule.steps()) {
      throw std::out_of_range("training timestep " + std::to_string(t[i]) + " outside [1, " +
                              std::to_string(schedule.steps()) + "]");
    }
    model_t[i] = schedule.model_timestep(t[i]);
  }
  Tensor z_t = QSample(z0, t, eps, schedule);
  Tensor eps_hat = predictor(z_t, model_t, labels);
  return ops::MeanTrailing(ops::Square(ops::Sub(eps_hat, eps)), 1);
}

MultiplicityDraws MultiplicityDraws::Draw(int batch, int k, const Shape& latent_shape,
                                          const NoiseSchedule& schedule, SeededRng& rng) {
  if (k < 1) throw std::invalid_argument("noise multiplicity k must be at least 1");
  MultiplicityDraws d;
  d.batch = batch;
  d.k = k;
  Shape shape = latent_shape;
  shape.insert(shape.begin(), static_cast<std::int64_t>(batch) * k);
  d.eps = Tensor::Zeros(shape);
  const std::int64_t row = NumElements(latent_shape);
  auto eps = d.eps.mutable_data();
  for (int i = 0; i < batch * k; ++i) {
    d.t.push_back(1 + static_cast<int>(rng.UniformInt(schedule.steps())));
    for (std::int64_t j = 0; j < row; ++j) eps[i * row + j] = static_cast<Real>(rng.Normal());
  }
  return d;
}

MultiplicityDraws MultiplicityDraws::Example(int i) const {
  if (i < 0 || i >= batch) throw std::out_of_range("draw example index out of range");
  MultiplicityDraws d;
  d.batch = 1;
  d.k = k;
  d.t.assign(t.begin() + static_cast<std::ptrdiff_t>(i) * k,
             t.begin() + static_cast<std::ptrdiff_t>(i + 1) * k);
  d.eps = SliceRows(eps, static_cast<std::int64_t>(i) * k, k);
  return d;
}

Tensor NoiseMultiplicityLoss(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const Tensor& z0, std::span<const int> labels,
                             const MultiplicityDraws& draws, SeededRng* dropout_rng) {
  const std::int64_t b = z0.dim(0);
  if (draws.batch != b) throw ShapeError("draws do not match the batch");
  const int k = draws.k;
  const std::int64_t row = z0.numel() / b;
  // Each example repeated k times, example-major like the draws.
  Shape shape = z0.shape();
  shape[0] = b * k;
  std::vector<Real> repeated;
  repeated.reserve(b * k * row);
  std::vector<int> repeated_labels;
  for (std::int64_t i = 0; i < b; ++i) {
    auto src = z0.data().subspan(i * row, row);
    for (int j = 0; j < k; ++j) {
      repeated.insert(repeated.end(), src.begin(), src.end());
      if (!labels.empty()) repeated_labels.push_back(labels[i]);
    }
  }
  Tensor per_draw = DdpmLoss(denoiser, schedule, Tensor::FromData(shape, std::move(repeated)),
                             repeated_labels, draws.t, draws.eps, dropout_rng);
  return ops::MeanTrailing(ops::Reshape(per_draw, {b, k}), 1);
}

Tensor NoiseMultiplicityLoss(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const Tensor& z0, std::span<const int> labels, int k,
                             SeededRng& rng) {
  Shape latent(z0.shape().begin() + 1, z0.shape().end());
  auto draws = MultiplicityDraws::Draw(static_cast<int>(z0.dim(0)), k, latent, schedule, rng);
  return NoiseMultiplicityLoss(denoiser, schedule, z0, labels, draws);
}

// ---- sampling --------------------------------------------------------------------

EpsPredictor PredictorFor(const Denoiser& denoiser) {
  return [&denoiser](const Tensor& z, std::span<const int> t, std::span<const int> labels) {
    return denoiser.Forward(z, t, labels);
  };
}

Tensor ReverseStep(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& schedule,
                   SeededRng& rng) {
  if (z_t.shape() != eps_hat.shape()) throw ShapeError("prediction shape differs from latents");
  const double beta = schedule.beta(t), alpha = schedule.alpha(t);
  const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
  Tensor out = Tensor::Zeros(z_t.shape());
  auto dst = out.mutable_data();
  auto z = z_t.data(), e = eps_hat.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    double v = inv_sqrt_alpha * (z[i] - coef * e[i]);
    if (t > 1) v += sigma * rng.Normal();
    dst[i] = static_cast<Real>(v);
  }
  return out;
}

Tensor SampleLatents(const EpsPredictor& predictor, const NoiseSchedule& schedule,
                     const Shape& latent_shape, std::span<const int> labels, SeededRng& rng) {
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  if (n < 1) throw std::invalid_argument("sampling needs at least one label");
  Shape shape = latent_shape;
  shape.insert(shape.begin(), n);
  Tensor z = NormalTensor(shape, rng);
  std::vector<int> model_t(n);
  for (int t = schedule.steps(); t >= 1; --t) {
    std::fill(model_t.begin(), model_t.end(), schedule.model_timestep(t));
    Tensor eps_hat = predictor(z, model_t, labels);
    z = ReverseStep(z, t, eps_hat, schedule, rng);
    for (Real v : z.data()) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite latent at reverse step t=" + std::to_string(t));
      }
    }
  }
  return z;
}

Tensor Sample(const Denoiser& denoiser, const Autoencoder& ae, const NoiseSchedule& schedule,
              std::span<const int> labels, SeededRng& rng, int chunk_size) {
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  if (n < 1) throw std::invalid_argument("sampling needs at least one label");
  const auto& ac = ae.config();
  Shape shape{n, ac.image_channels, ac.image_size, ac.image_size};
  std::vector<Real> images;
  images.reserve(NumElements(shape));
  const EpsPredictor predictor = PredictorFor(denoiser);
  for (std::int64_t start = 0; start < n; start += chunk_size) {
    const std::int64_t count = std::min<std::int64_t>(chunk_size, n - start);
    Tensor z = SampleLatents(predictor, schedule, ae.LatentShape(), labels.subspan(start, count), rng);
    Tensor decoded = ae.Decode(ops::Scale(z, 1.0f / ae.latent_scale()));
    images.insert(images.end(), decoded.data().begin(), decoded.data().end());
  }
  return Tensor::FromData(std::move(shape), std::move(images));
}

}  // namespace dplora
