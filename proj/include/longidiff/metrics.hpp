#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "longidiff/common.hpp"

namespace longidiff {

// Dichotomized functional outcome: independent is mRS < 3.
inline bool mrs_good(int mrs) {
  if (mrs < 0 || mrs > 6) throw std::out_of_range("mrs_good: mRS must be in 0..6");
  return mrs < 3;
}

// Dichotomized severity change: improvement of >= 4 NIHSS points by day one.
inline bool nihss_improved(int admission, int day1) {
  if (admission < 0 || admission > 42 || day1 < 0 || day1 > 42)
    throw std::out_of_range("nihss_improved: NIHSS must be in 0..42");
  return admission - day1 >= 4;
}

// Mann-Whitney AUC with half credit for ties, computed exactly via midranks.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("auc: scores and labels must be aligned and non-empty");
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (const int l : labels) n_pos += l != 0 ? 1 : 0;
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc: both classes must be present");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) pos_rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Accuracy and F1 at a fixed threshold; predicted positive means score > threshold.
// F1 is 0 when there are neither positive predictions nor positives.
inline std::pair<double, double> acc_f1(const std::vector<double>& scores,
                                        const std::vector<int>& labels, double threshold = 0.5) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("acc_f1: scores and labels must be aligned and non-empty");
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    const bool pos = labels[i] != 0;
    tp += pred && pos;
    fp += pred && !pos;
    tn += !pred && !pos;
    fn += !pred && pos;
  }
  const double acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  const double denom = static_cast<double>(2 * tp + fp + fn);
  const double f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  return {acc, f1};
}

// Paired two-sided permutation test on delta-AUC: per permutation each
// subject's scores are swapped between the two models with probability 1/2.
// Add-one estimator, so p is in (0, 1].
inline double permutation_test_auc(const std::vector<double>& scores_a,
                                   const std::vector<double>& scores_b,
                                   const std::vector<int>& labels, int64_t n_perm, uint64_t seed) {
  if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size())
    throw std::invalid_argument("permutation_test_auc: inputs must be aligned");
  if (n_perm < 100) throw std::invalid_argument("permutation_test_auc: n_perm must be >= 100");
  const double observed = std::abs(auc(scores_a, labels) - auc(scores_b, labels));
  std::mt19937_64 rng(seed);
  std::vector<double> pa(scores_a), pb(scores_b);
  int64_t count = 0;
  for (int64_t p = 0; p < n_perm; ++p) {
    for (size_t i = 0; i < pa.size(); ++i) {
      const bool swap = (rng() & 1u) != 0;
      pa[i] = swap ? scores_b[i] : scores_a[i];
      pb[i] = swap ? scores_a[i] : scores_b[i];
    }
    if (std::abs(auc(pa, labels) - auc(pb, labels)) >= observed) ++count;
  }
  return static_cast<double>(1 + count) / static_cast<double>(1 + n_perm);
}

namespace detail {

inline torch::Tensor sym_sqrtm(const torch::Tensor& m) {
  auto [w, v] = torch::linalg_eigh(m, "L");
  w = torch::clamp_min(w, 0.0);
  return torch::matmul(v * w.sqrt().unsqueeze(0), v.transpose(0, 1));
}

}  // namespace detail

// Frechet distance between Gaussian fits of two feature sets ([n, d] each):
// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)). Covariances are unbiased
// and regularized by +1e-6 I.
inline double fid(const torch::Tensor& features_a, const torch::Tensor& features_b) {
  if (features_a.dim() != 2 || features_b.dim() != 2 || features_a.size(1) != features_b.size(1))
    throw std::invalid_argument("fid: expected [n, d] feature sets with matching d");
  if (features_a.size(0) < 2 || features_b.size(0) < 2)
    throw std::invalid_argument("fid: need at least 2 samples per set");
  auto fa = features_a.to(torch::kFloat64);
  auto fb = features_b.to(torch::kFloat64);
  const int64_t d = fa.size(1);
  auto mu_a = fa.mean(0);
  auto mu_b = fb.mean(0);
  auto ca = fa - mu_a.unsqueeze(0);
  auto cb = fb - mu_b.unsqueeze(0);
  auto reg = 1e-6 * torch::eye(d, torch::kFloat64);
  auto cov_a = torch::matmul(ca.transpose(0, 1), ca) / static_cast<double>(fa.size(0) - 1) + reg;
  auto cov_b = torch::matmul(cb.transpose(0, 1), cb) / static_cast<double>(fb.size(0) - 1) + reg;
  for (const auto& cov : {cov_a, cov_b}) {
    if (!cov.isfinite().all().item<bool>())
      throw std::runtime_error("fid: non-finite covariance");
    auto evals = std::get<0>(torch::linalg_eigh(cov, "L"));
    if (!(evals.min().item<double>() > 0.0))
      throw std::runtime_error("fid: degenerate covariance after regularization");
  }
  auto a_half = detail::sym_sqrtm(cov_a);
  auto inner = torch::matmul(torch::matmul(a_half, cov_b), a_half);
  inner = 0.5 * (inner + inner.transpose(0, 1));
  const double tr_sqrt = detail::sym_sqrtm(inner).diagonal().sum().item<double>();
  const double mean_term = (mu_a - mu_b).pow(2).sum().item<double>();
  const double val = mean_term + (cov_a + cov_b).diagonal().sum().item<double>() - 2.0 * tr_sqrt;
  if (val < -1e-6) throw std::runtime_error("fid: negative distance, degenerate input");
  return std::max(0.0, val);
}

// Mean squared per-pixel difference over aligned image sets ([n, ...]).
inline double mse(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw std::invalid_argument("mse: shape mismatch");
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
}

// Frozen, seeded convolutional embedder for the in-repo FID-like score.
// Scores are comparable only against features from the same embedder.
class FidEmbedderImpl : public torch::nn::Module {
 public:
  explicit FidEmbedderImpl(int64_t feature_dim = 32, uint64_t seed = 0xF1D) {
    torch::manual_seed(seed);
    c1_ = register_module("c1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 8, 3).stride(2).padding(1)));
    c2_ = register_module("c2", torch::nn::Conv2d(torch::nn::Conv2dOptions(8, 16, 3).stride(2).padding(1)));
    c3_ = register_module("c3", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, feature_dim, 3).stride(2).padding(1)));
    to(torch::kFloat64);
    for (auto& p : parameters()) p.set_requires_grad(false);
  }

  // images: [n, 1, h, w] -> features [n, feature_dim]
  torch::Tensor forward(const torch::Tensor& images) {
    torch::NoGradGuard ng;
    auto h = torch::silu(c1_(images.to(torch::kFloat64)));
    h = torch::silu(c2_(h));
    h = c3_(h);
    return h.mean({2, 3});
  }

 private:
  torch::nn::Conv2d c1_{nullptr}, c2_{nullptr}, c3_{nullptr};
};
TORCH_MODULE(FidEmbedder);

// Serializable evaluation summary with a stable key order.
struct MetricReport {
  double auc = 0.0;
  double acc = 0.0;
  double f1 = 0.0;
  double fid = 0.0;
  double mse = 0.0;
  std::map<std::string, double> p_values;
  int64_t n = 0;
  uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["auc"] = auc;
    j["acc"] = acc;
    j["f1"] = f1;
    j["fid"] = fid;
    j["mse"] = mse;
    j["p_values"] = p_values;
    j["n"] = n;
    j["seed"] = seed;
    return j;
  }

  static MetricReport from_json(const nlohmann::ordered_json& j) {
    MetricReport r;
    r.auc = j.at("auc");
    r.acc = j.at("acc");
    r.f1 = j.at("f1");
    r.fid = j.at("fid");
    r.mse = j.at("mse");
    r.p_values = j.at("p_values").get<std::map<std::string, double>>();
    r.n = j.at("n");
    r.seed = j.at("seed");
    return r;
  }
};

inline void save_report(const MetricReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write report: " + path);
  os << r.to_json().dump(2) << "\n";
}

inline MetricReport load_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read report: " + path);
  nlohmann::ordered_json j;
  is >> j;
  return MetricReport::from_json(j);
}

}  // namespace longidiff
