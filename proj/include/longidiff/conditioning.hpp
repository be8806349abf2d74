#pragma once

#include <torch/torch.h>

#include <cmath>
#include <optional>
#include <stdexcept>

namespace longidiff {

// Interleaved sin/cos encoding over geometrically spaced frequencies.
// values: [B] -> [B, dim]; out[:, 2i] = sin(f_i v), out[:, 2i+1] = cos(f_i v),
// f_i = max_period^(-i / (dim/2)).
inline torch::Tensor sinusoidal_encode(const torch::Tensor& values, int64_t dim,
                                       double max_period = 1e4) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_encode: dim must be even and positive");
  if (!(max_period > 0.0)) throw std::invalid_argument("sinusoidal_encode: max_period must be positive");
  const int64_t half = dim / 2;
  auto freqs = torch::empty({half}, torch::kFloat64);
  auto* fp = freqs.data_ptr<double>();
  for (int64_t i = 0; i < half; ++i)
    fp[i] = std::pow(max_period, -static_cast<double>(i) / static_cast<double>(half));
  auto args = values.to(torch::kFloat64).reshape({-1, 1}) * freqs.reshape({1, half});
  auto enc = torch::stack({torch::sin(args), torch::cos(args)}, /*dim=*/2);  // [B, half, 2]
  return enc.reshape({-1, dim});
}

inline torch::Tensor sinusoidal_encode(double value, int64_t dim, double max_period = 1e4) {
  return sinusoidal_encode(torch::tensor({value}, torch::kFloat64), dim, max_period).squeeze(0);
}

// log(1 + n) with n in minutes.
inline double time_to_feature(double minutes) {
  if (minutes < 0.0) throw std::invalid_argument("time_to_feature: time must be non-negative");
  return std::log1p(minutes);
}

inline torch::Tensor time_to_feature(const torch::Tensor& minutes) {
  if (minutes.lt(0).any().item<bool>())
    throw std::invalid_argument("time_to_feature: time must be non-negative");
  return torch::log1p(minutes.to(torch::kFloat64));
}

// Per-group standardization, no affine. k: [C, H, W] or [B, C, H, W].
inline torch::Tensor group_normalize(const torch::Tensor& k, int64_t groups, double eps = 1e-5) {
  const bool batched = k.dim() == 4;
  if (!batched && k.dim() != 3)
    throw std::invalid_argument("group_normalize: expected [C,H,W] or [B,C,H,W]");
  auto x = batched ? k : k.unsqueeze(0);
  const int64_t b = x.size(0), c = x.size(1);
  if (groups < 1 || c % groups != 0)
    throw std::invalid_argument("group_normalize: channel count must be divisible by groups");
  auto g = x.reshape({b, groups, (c / groups) * x.size(2) * x.size(3)});
  auto mean = g.mean(-1, /*keepdim=*/true);
  auto centered = g - mean;
  auto var = centered.pow(2).mean(-1, /*keepdim=*/true);
  auto out = (centered / torch::sqrt(var + eps)).reshape(x.sizes());
  return batched ? out : out.squeeze(0);
}

// Two-layer conditioner emitting per-channel (s, b). The concatenated input
// MLP(z (+ psi(log1p n)) + psi(t)) is realized as one linear map per input
// slice sharing a single hidden layer; the final layer is zero-initialized and
// the caller applies s = 1 + s_raw, so a fresh layer acts as plain GroupNorm.
class ConditionerMLPImpl : public torch::nn::Module {
 public:
  ConditionerMLPImpl(int64_t channels, int64_t z_dim, int64_t embed_dim, bool temporal)
      : channels_(channels), embed_dim_(embed_dim), temporal_(temporal) {
    const int64_t hidden = 2 * z_dim;
    lin_z_ = register_module("lin_z", torch::nn::Linear(z_dim, hidden));
    lin_t_ = register_module(
        "lin_t", torch::nn::Linear(torch::nn::LinearOptions(embed_dim, hidden).bias(false)));
    if (temporal_)
      lin_n_ = register_module(
          "lin_n", torch::nn::Linear(torch::nn::LinearOptions(embed_dim, hidden).bias(false)));
    out_ = register_module("out", torch::nn::Linear(hidden, 2 * channels));
    torch::NoGradGuard ng;
    out_->weight.zero_();
    out_->bias.zero_();
  }

  // z: [B, d]; t: [B]; n: [B] minutes (temporal only). Returns [B, 2C] raw.
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t,
                        const std::optional<torch::Tensor>& n) {
    const auto opts = lin_z_->weight.options();
    auto h = lin_z_(z.to(opts.dtype()));
    h = h + lin_t_(sinusoidal_encode(t, embed_dim_).to(opts.dtype()));
    if (temporal_) {
      if (!n.has_value()) throw std::invalid_argument("conditioner: temporal mode requires n");
      h = h + lin_n_(sinusoidal_encode(time_to_feature(*n), embed_dim_).to(opts.dtype()));
    } else if (n.has_value()) {
      throw std::invalid_argument("conditioner: spatial mode takes no n");
    }
    return out_(torch::silu(h));
  }

  int64_t channels() const { return channels_; }
  bool temporal() const { return temporal_; }

  torch::nn::Linear lin_z_{nullptr}, lin_t_{nullptr}, lin_n_{nullptr}, out_{nullptr};

 private:
  int64_t channels_, embed_dim_;
  bool temporal_;
};
TORCH_MODULE(ConditionerMLP);

// Adaptive group normalization: s * GroupNorm(k) + b with (s, b) from the
// conditioner. Spatial flavor conditions on (z, t); temporal adds log-time.
class AdaGroupNormImpl : public torch::nn::Module {
 public:
  AdaGroupNormImpl(int64_t channels, int64_t z_dim, int64_t embed_dim, int64_t groups,
                   bool temporal, double gn_eps = 1e-5)
      : groups_(groups), gn_eps_(gn_eps) {
    if (channels % groups != 0)
      throw std::invalid_argument("AdaGroupNorm: channels must be divisible by groups");
    mlp_ = register_module("mlp", ConditionerMLP(channels, z_dim, embed_dim, temporal));
  }

  // k: [B, C, H, W]; z: [B, d]; t: [B]; n: [B] (temporal only).
  torch::Tensor forward(const torch::Tensor& k, const torch::Tensor& z, const torch::Tensor& t,
                        const std::optional<torch::Tensor>& n = std::nullopt) {
    const int64_t bsz = k.size(0), c = k.size(1);
    if (c != mlp_->channels()) throw std::invalid_argument("AdaGroupNorm: channel mismatch");
    auto sb = mlp_(z, t, n);
    auto s = 1.0 + sb.narrow(1, 0, c);
    auto b = sb.narrow(1, c, c);
    auto gn = group_normalize(k, groups_, gn_eps_);
    return s.reshape({bsz, c, 1, 1}) * gn + b.reshape({bsz, c, 1, 1});
  }

  ConditionerMLP mlp_{nullptr};

 private:
  int64_t groups_;
  double gn_eps_;
};
TORCH_MODULE(AdaGroupNorm);

// Single-sample entry points.
inline torch::Tensor ada_spa_gn(const torch::Tensor& k, const torch::Tensor& z, int64_t t,
                                AdaGroupNorm& layer) {
  auto tt = torch::tensor({static_cast<double>(t)}, torch::kFloat64);
  return layer(k.unsqueeze(0), z.unsqueeze(0), tt).squeeze(0);
}

inline torch::Tensor ada_temp_gn(const torch::Tensor& k, const torch::Tensor& z, double n,
                                 int64_t t, AdaGroupNorm& layer) {
  auto tt = torch::tensor({static_cast<double>(t)}, torch::kFloat64);
  auto nn = torch::tensor({n}, torch::kFloat64);
  return layer(k.unsqueeze(0), z.unsqueeze(0), tt, nn).squeeze(0);
}

}  // namespace longidiff
