#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "longidiff/conditioning.hpp"
#include "longidiff/schedule.hpp"

namespace longidiff {

enum class ConditioningMode { kSpatial, kTemporal };

inline const char* to_string(ConditioningMode m) {
  return m == ConditioningMode::kSpatial ? "spatial" : "spatiotemporal";
}

struct UNetConfig {
  int64_t in_channels = 1;
  int64_t base_channels = 8;
  std::vector<int64_t> channel_multipliers = {1, 2, 4};
  std::vector<int64_t> attention_resolutions = {8};
  int64_t input_size = 32;
  ConditioningMode conditioning_mode = ConditioningMode::kSpatial;
  int64_t z_dim = 64;
  int64_t cond_embed_dim = 64;
  int64_t groups = 8;
  int64_t blocks_per_level = 1;
  int64_t head_channels = 64;  // attention head width; head count = max(1, c / head_channels)
  double gn_eps = 1e-5;

  int64_t levels() const { return static_cast<int64_t>(channel_multipliers.size()); }

  void validate() const {
    if (channel_multipliers.empty())
      throw std::invalid_argument("UNetConfig: channel_multipliers must be non-empty");
    if (base_channels < 1 || blocks_per_level < 1 || groups < 1 || in_channels < 1)
      throw std::invalid_argument("UNetConfig: counts must be positive");
    if (cond_embed_dim <= 0 || cond_embed_dim % 2 != 0)
      throw std::invalid_argument("UNetConfig: cond_embed_dim must be even and positive");
    const int64_t l = levels();
    if (input_size % (int64_t{1} << (l - 1)) != 0)
      throw std::invalid_argument("UNetConfig: input_size must be divisible by 2^(levels-1)");
    for (const int64_t a : attention_resolutions) {
      bool reachable = false;
      for (int64_t k = 0; k < l; ++k) reachable |= (input_size >> k) == a;
      if (!reachable)
        throw std::invalid_argument("UNetConfig: attention resolution not reachable from input_size");
    }
  }
};

enum class Resample { kNone, kDown, kUp };

// BigGAN-style residual block. Resampling happens inside the block on both the
// main and the skip path. The 1x1 skip convolution is always present and is
// followed by a plain GroupNorm; the in-path normalizations are adaptive.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in_ch, int64_t out_ch, const UNetConfig& cfg,
                    Resample resample = Resample::kNone)
      : resample_(resample) {
    const bool temporal = cfg.conditioning_mode == ConditioningMode::kTemporal;
    norm1_ = register_module("norm1", AdaGroupNorm(in_ch, cfg.z_dim, cfg.cond_embed_dim,
                                                   cfg.groups, temporal, cfg.gn_eps));
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    norm2_ = register_module("norm2", AdaGroupNorm(out_ch, cfg.z_dim, cfg.cond_embed_dim,
                                                   cfg.groups, temporal, cfg.gn_eps));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    skip_conv_ = register_module("skip_conv",
                                 torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
    skip_norm_ = register_module(
        "skip_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg.groups, out_ch).eps(cfg.gn_eps)));
    torch::NoGradGuard ng;
    conv2_->weight.zero_();
    conv2_->bias.zero_();
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z, const torch::Tensor& t,
                        const std::optional<torch::Tensor>& n) {
    auto h = torch::silu(norm1_(x, z, t, n));
    auto xs = x;
    if (resample_ == Resample::kDown) {
      h = torch::avg_pool2d(h, 2);
      xs = torch::avg_pool2d(xs, 2);
    } else if (resample_ == Resample::kUp) {
      h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
      xs = torch::upsample_nearest2d(xs, {xs.size(2) * 2, xs.size(3) * 2});
    }
    h = conv1_(h);
    h = conv2_(torch::silu(norm2_(h, z, t, n)));
    return h + skip_norm_(skip_conv_(xs));
  }

 private:
  Resample resample_;
  AdaGroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_conv_{nullptr};
  torch::nn::GroupNorm skip_norm_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Self-attention over flattened spatial positions with a zero-initialized
// output projection; pre-norm is adaptive like every other in-path norm.
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int64_t channels, const UNetConfig& cfg) : channels_(channels) {
    heads_ = std::max<int64_t>(1, channels / cfg.head_channels);
    if (channels % heads_ != 0)
      throw std::invalid_argument("AttentionBlock: channels must be divisible by head count");
    const bool temporal = cfg.conditioning_mode == ConditioningMode::kTemporal;
    norm_ = register_module("norm", AdaGroupNorm(channels, cfg.z_dim, cfg.cond_embed_dim,
                                                 cfg.groups, temporal, cfg.gn_eps));
    qkv_ = register_module("qkv",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)));
    proj_ = register_module("proj",
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    torch::NoGradGuard ng;
    proj_->weight.zero_();
    proj_->bias.zero_();
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z, const torch::Tensor& t,
                        const std::optional<torch::Tensor>& n) {
    const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const int64_t hd = c / heads_;
    auto qkv = qkv_(norm_(x, z, t, n)).reshape({b * heads_, 3 * hd, h * w});
    auto q = qkv.narrow(1, 0, hd);
    auto k = qkv.narrow(1, hd, hd);
    auto v = qkv.narrow(1, 2 * hd, hd);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    auto attn = torch::softmax(torch::bmm(q.transpose(1, 2), k) * scale, /*dim=*/-1);
    auto out = torch::bmm(v, attn.transpose(1, 2)).reshape({b, c, h, w});
    return x + proj_(out);
  }

 private:
  int64_t channels_, heads_;
  AdaGroupNorm norm_{nullptr};
  torch::nn::Conv2d qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(AttentionBlock);

// Conditional U-Net noise predictor. One residual block per level by default,
// resampling blocks between levels, attention at the configured resolutions
// and in the middle, skip connections by concatenation.
class DenoiserNetImpl : public torch::nn::Module {
 public:
  explicit DenoiserNetImpl(const UNetConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t levels = cfg_.levels();
    int64_t ch = cfg_.base_channels * cfg_.channel_multipliers[0];
    stem_ = register_module(
        "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.in_channels, ch, 3).padding(1)));
    int64_t res = cfg_.input_size;
    std::vector<int64_t> skip_channels{ch};

    for (int64_t l = 0; l < levels; ++l) {
      const int64_t out_ch = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(l)];
      for (int64_t i = 0; i < cfg_.blocks_per_level; ++i) {
        DownEntry e;
        e.block = register_module("down" + std::to_string(l) + "_block" + std::to_string(i),
                                  ResidualBlock(ch, out_ch, cfg_));
        ch = out_ch;
        if (use_attention(res))
          e.attn = register_module("down" + std::to_string(l) + "_attn" + std::to_string(i),
                                   AttentionBlock(ch, cfg_));
        down_.push_back(std::move(e));
        skip_channels.push_back(ch);
      }
      if (l + 1 < levels) {
        DownEntry e;
        e.block = register_module("down" + std::to_string(l) + "_downsample",
                                  ResidualBlock(ch, ch, cfg_, Resample::kDown));
        down_.push_back(std::move(e));
        res /= 2;
        skip_channels.push_back(ch);
      }
    }

    mid1_ = register_module("mid_block1", ResidualBlock(ch, ch, cfg_));
    mid_attn_ = register_module("mid_attn", AttentionBlock(ch, cfg_));
    mid2_ = register_module("mid_block2", ResidualBlock(ch, ch, cfg_));

    for (int64_t l = levels - 1; l >= 0; --l) {
      const int64_t out_ch = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(l)];
      for (int64_t i = 0; i <= cfg_.blocks_per_level; ++i) {
        UpEntry e;
        const int64_t skip_ch = skip_channels.back();
        skip_channels.pop_back();
        e.block = register_module("up" + std::to_string(l) + "_block" + std::to_string(i),
                                  ResidualBlock(ch + skip_ch, out_ch, cfg_));
        ch = out_ch;
        if (use_attention(res))
          e.attn = register_module("up" + std::to_string(l) + "_attn" + std::to_string(i),
                                   AttentionBlock(ch, cfg_));
        if (l > 0 && i == cfg_.blocks_per_level) {
          e.upsample = register_module("up" + std::to_string(l) + "_upsample",
                                       ResidualBlock(ch, ch, cfg_, Resample::kUp));
          res *= 2;
        }
        up_.push_back(std::move(e));
      }
    }

    const bool temporal = cfg_.conditioning_mode == ConditioningMode::kTemporal;
    out_norm_ = register_module("out_norm", AdaGroupNorm(ch, cfg_.z_dim, cfg_.cond_embed_dim,
                                                         cfg_.groups, temporal, cfg_.gn_eps));
    out_conv_ = register_module(
        "out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, cfg_.in_channels, 3).padding(1)));
    torch::NoGradGuard ng;
    out_conv_->weight.zero_();
    out_conv_->bias.zero_();
  }

  // x: [B, C, H, W]; t: [B]; z: [B, d]; n: [B] minutes iff temporal mode.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& z,
                        const std::optional<torch::Tensor>& n = std::nullopt) {
    const bool temporal = cfg_.conditioning_mode == ConditioningMode::kTemporal;
    if (temporal && !n.has_value())
      throw std::invalid_argument("DenoiserNet: temporal mode requires n");
    if (!temporal && n.has_value())
      throw std::invalid_argument("DenoiserNet: spatial mode takes no n");
    if (x.size(2) != cfg_.input_size || x.size(3) != cfg_.input_size)
      throw std::invalid_argument("DenoiserNet: input spatial size mismatch");
    auto tt = t.to(torch::kFloat64);

    std::vector<torch::Tensor> skips;
    auto h = stem_(x);
    skips.push_back(h);
    for (auto& e : down_) {
      h = e.block(h, z, tt, n);
      if (e.attn) h = e.attn(h, z, tt, n);
      skips.push_back(h);
    }
    h = mid1_(h, z, tt, n);
    h = mid_attn_(h, z, tt, n);
    h = mid2_(h, z, tt, n);
    for (auto& e : up_) {
      h = e.block(torch::cat({h, skips.back()}, /*dim=*/1), z, tt, n);
      skips.pop_back();
      if (e.attn) h = e.attn(h, z, tt, n);
      if (e.upsample) h = e.upsample(h, z, tt, n);
    }
    return out_conv_(torch::silu(out_norm_(h, z, tt, n)));
  }

  const UNetConfig& config() const { return cfg_; }

 private:
  bool use_attention(int64_t res) const {
    return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), res) !=
           cfg_.attention_resolutions.end();
  }

  struct DownEntry {
    ResidualBlock block{nullptr};
    AttentionBlock attn{nullptr};
  };
  struct UpEntry {
    ResidualBlock block{nullptr};
    AttentionBlock attn{nullptr};
    ResidualBlock upsample{nullptr};
  };

  UNetConfig cfg_;
  torch::nn::Conv2d stem_{nullptr}, out_conv_{nullptr};
  std::vector<DownEntry> down_;
  ResidualBlock mid1_{nullptr}, mid2_{nullptr};
  AttentionBlock mid_attn_{nullptr};
  std::vector<UpEntry> up_;
  AdaGroupNorm out_norm_{nullptr};
};
TORCH_MODULE(DenoiserNet);

// Deterministic construction: the seed fixes every initial parameter.
inline DenoiserNet build_unet(const UNetConfig& cfg, uint64_t seed) {
  torch::manual_seed(seed);
  DenoiserNet net(cfg);
  net->to(torch::kFloat64);
  return net;
}

inline int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

// Single-image entry point. x_t: [H, W]; z: [d]; n in minutes iff temporal.
inline torch::Tensor predict_noise(DenoiserNet& net, const NoisyImage& x_t, const torch::Tensor& z,
                                   std::optional<double> n = std::nullopt) {
  auto xb = x_t.pixels.unsqueeze(0).unsqueeze(0).to(net->parameters()[0].dtype());
  auto tb = torch::tensor({x_t.t}, torch::kLong);
  auto zb = z.unsqueeze(0);
  std::optional<torch::Tensor> nb;
  if (n.has_value()) nb = torch::tensor({*n}, torch::kFloat64);
  return net->forward(xb, tb, zb, nb).squeeze(0).squeeze(0);
}

// Full reverse loop bound to a denoiser. start: [H, W] pure noise.
inline torch::Tensor reconstruct(const torch::Tensor& start, const torch::Tensor& z,
                                 std::optional<double> n, DenoiserNet& net, const NoiseSchedule& s,
                                 int64_t steps, std::optional<at::Generator> gen = std::nullopt,
                                 bool deterministic = false, double clip_x0 = 4.0) {
  torch::NoGradGuard ng;
  auto predict = [&](const torch::Tensor& x, int64_t t) {
    return predict_noise(net, {x, t}, z, n);
  };
  return reconstruct_with(start, predict, s, steps, gen, deterministic, clip_x0);
}

}  // namespace longidiff
