#pragma once

#include <torch/torch.h>

#include <stdexcept>
#include <string>
#include <vector>

namespace longidiff {

struct EncoderConfig {
  int64_t in_channels = 1;
  int64_t base_channels = 8;
  std::vector<int64_t> stage_multipliers = {1, 2, 4, 8};
  int64_t input_size = 32;
  int64_t z_dim = 64;
  int64_t groups = 8;
  double gn_eps = 1e-5;

  void validate() const {
    if (stage_multipliers.empty()) throw std::invalid_argument("EncoderConfig: stages required");
    if (base_channels < 1 || z_dim < 1) throw std::invalid_argument("EncoderConfig: counts must be positive");
  }
};

class EncoderBlockImpl : public torch::nn::Module {
 public:
  EncoderBlockImpl(int64_t in_ch, int64_t out_ch, int64_t groups, double eps) {
    norm1_ = register_module("norm1",
                             torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in_ch).eps(eps)));
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
    norm2_ = register_module("norm2",
                             torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out_ch).eps(eps)));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    if (in_ch != out_ch)
      skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = conv1_(torch::silu(norm1_(x)));
    h = conv2_(torch::silu(norm2_(h)));
    return h + (skip_ ? skip_(x) : x);
  }

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(EncoderBlock);

// Small residual CNN: stem, one residual block per stage with 2x pooling
// between stages, global average pooling, linear projection to the latent.
class SemanticEncoderImpl : public torch::nn::Module {
 public:
  explicit SemanticEncoderImpl(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    int64_t ch = cfg_.base_channels * cfg_.stage_multipliers[0];
    stem_ = register_module(
        "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.in_channels, ch, 3).padding(1)));
    for (size_t i = 0; i < cfg_.stage_multipliers.size(); ++i) {
      const int64_t out_ch = cfg_.base_channels * cfg_.stage_multipliers[i];
      blocks_.push_back(register_module("stage" + std::to_string(i),
                                        EncoderBlock(ch, out_ch, cfg_.groups, cfg_.gn_eps)));
      ch = out_ch;
    }
    fc_ = register_module("fc", torch::nn::Linear(ch, cfg_.z_dim));
  }

  // x: [B, C, H, W] -> z: [B, d]
  torch::Tensor forward(const torch::Tensor& x) {
    if (x.size(2) != cfg_.input_size || x.size(3) != cfg_.input_size)
      throw std::invalid_argument("SemanticEncoder: input spatial size mismatch");
    auto h = stem_(x);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      h = blocks_[i](h);
      if (i + 1 < blocks_.size()) h = torch::avg_pool2d(h, 2);
    }
    return fc_(h.mean({2, 3}));
  }

  const EncoderConfig& config() const { return cfg_; }
  torch::nn::Linear final_projection() { return fc_; }

 private:
  EncoderConfig cfg_;
  torch::nn::Conv2d stem_{nullptr};
  std::vector<EncoderBlock> blocks_;
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(SemanticEncoder);

inline SemanticEncoder build_encoder(const EncoderConfig& cfg, uint64_t seed) {
  torch::manual_seed(seed);
  SemanticEncoder enc(cfg);
  enc->to(torch::kFloat64);
  return enc;
}

// x: [H, W] -> z: [d]
inline torch::Tensor encode(SemanticEncoder& enc, const torch::Tensor& x) {
  auto xb = x.unsqueeze(0).unsqueeze(0).to(enc->parameters()[0].dtype());
  return enc->forward(xb).squeeze(0);
}

enum class OutcomeTask { kNihss24, kMrsDischarge, kSynthetic };

inline const char* to_string(OutcomeTask t) {
  switch (t) {
    case OutcomeTask::kNihss24: return "nihss24";
    case OutcomeTask::kMrsDischarge: return "mrs_discharge";
    default: return "synthetic";
  }
}

// Linear map on the latent; sigmoid applied at prediction time.
class OutcomeHeadImpl : public torch::nn::Module {
 public:
  OutcomeHeadImpl(int64_t z_dim, OutcomeTask task) : task_(task) {
    fc_ = register_module("fc", torch::nn::Linear(z_dim, 1));
  }

  torch::Tensor forward(const torch::Tensor& z) { return fc_(z).squeeze(-1); }  // logits [B]

  OutcomeTask task() const { return task_; }

 private:
  OutcomeTask task_;
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(OutcomeHead);

inline OutcomeHead build_head(int64_t z_dim, OutcomeTask task, uint64_t seed) {
  torch::manual_seed(seed);
  OutcomeHead head(z_dim, task);
  head->to(torch::kFloat64);
  return head;
}

inline double predict_outcome(SemanticEncoder& enc, OutcomeHead& head, const torch::Tensor& x) {
  torch::NoGradGuard ng;
  auto z = encode(enc, x);
  return torch::sigmoid(head(z.unsqueeze(0))).item<double>();
}

}  // namespace longidiff
