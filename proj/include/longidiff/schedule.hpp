#pragma once

#include <torch/torch.h>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "longidiff/common.hpp"

namespace longidiff {

// Variance schedule over timesteps t in [1, T]. alpha_bars holds the running
// product of (1 - beta); the noising formula uses the cumulative product.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  int64_t timesteps() const { return static_cast<int64_t>(betas.size()); }

  double beta(int64_t t) const {
    check_t(t);
    return betas[static_cast<size_t>(t - 1)];
  }

  double alpha_bar(int64_t t) const {
    check_t(t);
    return alpha_bars[static_cast<size_t>(t - 1)];
  }

  // alpha_bar extended with the convention abar(0) = 1.
  double alpha_bar_prev(int64_t t) const { return t > 1 ? alpha_bar(t - 1) : 1.0; }

 private:
  void check_t(int64_t t) const {
    if (t < 1 || t > timesteps()) throw std::out_of_range("timestep out of range [1, T]");
  }
};

// Linear beta schedule, endpoints inclusive.
inline NoiseSchedule build_schedule(int64_t T, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw std::domain_error("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::domain_error("build_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.betas.resize(static_cast<size_t>(T));
  s.alpha_bars.resize(static_cast<size_t>(T));
  double running = 1.0;
  for (int64_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    running *= 1.0 - b;
    if (running < std::numeric_limits<double>::min())
      throw std::domain_error("build_schedule: alpha_bar underflows; schedule too aggressive for T");
    s.betas[static_cast<size_t>(i)] = b;
    s.alpha_bars[static_cast<size_t>(i)] = running;
  }
  return s;
}

struct NoisyImage {
  torch::Tensor pixels;
  int64_t t = 0;
};

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
inline NoisyImage forward_diffuse(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                                  const NoiseSchedule& s) {
  if (!x0.sizes().equals(eps.sizes()))
    throw std::invalid_argument("forward_diffuse: eps shape must equal x0 shape");
  const double ab = s.alpha_bar(t);
  return {std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps, t};
}

// Batched variant with per-sample timesteps. x0, eps: [B, ...]; t: [B] int64.
inline torch::Tensor forward_diffuse_batch(const torch::Tensor& x0, const torch::Tensor& t,
                                           const torch::Tensor& eps, const NoiseSchedule& s) {
  if (!x0.sizes().equals(eps.sizes()))
    throw std::invalid_argument("forward_diffuse_batch: eps shape must equal x0 shape");
  const int64_t b = x0.size(0);
  if (t.dim() != 1 || t.size(0) != b)
    throw std::invalid_argument("forward_diffuse_batch: t must be [B]");
  auto ab = torch::empty({b}, torch::kFloat64);
  auto* abp = ab.data_ptr<double>();
  auto ta = t.accessor<int64_t, 1>();
  for (int64_t i = 0; i < b; ++i) abp[i] = s.alpha_bar(ta[i]);
  std::vector<int64_t> bshape(x0.dim(), 1);
  bshape[0] = b;
  ab = ab.reshape(bshape).to(x0.dtype());
  return torch::sqrt(ab) * x0 + torch::sqrt(1.0 - ab) * eps;
}

// Ancestral step: posterior mean given the noise estimate, plus sigma_t * noise
// with the posterior variance. No noise is ever added at t = 1.
inline torch::Tensor reverse_step(const NoisyImage& x_t, const torch::Tensor& eps_hat,
                                  const NoiseSchedule& s,
                                  const std::optional<torch::Tensor>& noise = std::nullopt) {
  if (!x_t.pixels.sizes().equals(eps_hat.sizes()))
    throw std::invalid_argument("reverse_step: eps_hat shape must equal x_t shape");
  const int64_t t = x_t.t;
  const double b = s.beta(t);
  const double ab = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar_prev(t);
  auto mean = (x_t.pixels - (b / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(1.0 - b);
  if (t == 1 || !noise.has_value()) return mean;
  if (!noise->sizes().equals(eps_hat.sizes()))
    throw std::invalid_argument("reverse_step: noise shape must equal x_t shape");
  const double var = b * (1.0 - ab_prev) / (1.0 - ab);
  return mean + std::sqrt(var) * (*noise);
}

// Uniformly strided subset of [1, T]; ascending, last element is T.
inline std::vector<int64_t> strided_timesteps(int64_t T, int64_t steps) {
  if (steps < 0 || steps > T) throw std::invalid_argument("strided_timesteps: need 0 <= steps <= T");
  std::vector<int64_t> ts(static_cast<size_t>(steps));
  for (int64_t k = 1; k <= steps; ++k) ts[static_cast<size_t>(k - 1)] = (k * T) / steps;
  return ts;
}

// Effective schedule over a strided subset: abar'[k] = abar(ts[k]),
// beta'[k] = 1 - abar(ts[k]) / abar(ts[k-1]).
inline NoiseSchedule restrided_schedule(const NoiseSchedule& s, const std::vector<int64_t>& ts) {
  NoiseSchedule sub;
  sub.betas.reserve(ts.size());
  sub.alpha_bars.reserve(ts.size());
  double prev = 1.0;
  for (const int64_t t : ts) {
    const double ab = s.alpha_bar(t);
    sub.betas.push_back(1.0 - ab / prev);
    sub.alpha_bars.push_back(ab);
    prev = ab;
  }
  return sub;
}

// Full reverse loop from pure noise. `predict` maps (x, t) -> eps_hat with t in
// the original schedule's index space. Ancestral by default; the deterministic
// mode takes the zero-noise rescaled step instead. clip_x0 clamps the implied
// clean image each step (z-scored data lives within a few sigma); pass a
// non-positive value to disable.
template <typename PredictFn>
torch::Tensor reconstruct_with(const torch::Tensor& start, PredictFn&& predict,
                               const NoiseSchedule& s, int64_t steps,
                               std::optional<at::Generator> gen = std::nullopt,
                               bool deterministic = false, double clip_x0 = 4.0) {
  if (steps < 0 || steps > s.timesteps())
    throw std::invalid_argument("reconstruct: need 0 <= steps <= T");
  if (steps == 0) return start.clone();
  const auto ts = strided_timesteps(s.timesteps(), steps);
  const auto sub = restrided_schedule(s, ts);
  torch::Tensor x = start;
  for (int64_t k = steps; k >= 1; --k) {
    auto eps_hat = predict(x, ts[static_cast<size_t>(k - 1)]);
    const double ab = sub.alpha_bar(k);
    if (clip_x0 > 0.0) {
      auto x0_hat = (x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
      x0_hat = x0_hat.clamp(-clip_x0, clip_x0);
      eps_hat = (x - std::sqrt(ab) * x0_hat) / std::sqrt(1.0 - ab);
    }
    if (deterministic) {
      const double ab_prev = sub.alpha_bar_prev(k);
      const auto x0_hat = (x - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
      x = std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps_hat;
    } else {
      std::optional<torch::Tensor> noise;
      if (k > 1 && gen.has_value())
        noise = torch::randn(x.sizes(), *gen, torch::TensorOptions().dtype(x.dtype()));
      x = reverse_step({x, k}, eps_hat, sub, noise);
    }
  }
  return x;
}

}  // namespace longidiff
