#include "longidiff/conditioning.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace longidiff;

TEST(SinusoidalEncode, ZeroValueAndRange) {
  const auto enc = sinusoidal_encode(0.0, 8);
  for (int64_t i = 0; i < 8; i += 2) {
    EXPECT_DOUBLE_EQ(enc[i].item<double>(), 0.0);      // sin slots
    EXPECT_DOUBLE_EQ(enc[i + 1].item<double>(), 1.0);  // cos slots
  }
  for (const double v : {-1234.5, 0.37, 9999.0}) {
    const auto e = sinusoidal_encode(v, 32);
    EXPECT_LE(e.abs().max().item<double>(), 1.0);
  }
}

TEST(SinusoidalEncode, DistinctIntegersNotParallel) {
  const auto a = sinusoidal_encode(3.0, 8);
  const auto b = sinusoidal_encode(5.0, 8);
  const double cos_sim =
      (a * b).sum().item<double>() / (a.norm().item<double>() * b.norm().item<double>());
  EXPECT_LT(cos_sim, 1.0 - 1e-6);
}

TEST(SinusoidalEncode, OddDimRejected) {
  EXPECT_THROW(sinusoidal_encode(1.0, 7), std::invalid_argument);
  EXPECT_THROW(sinusoidal_encode(1.0, 8, -1.0), std::invalid_argument);
}

TEST(SinusoidalEncode, InjectiveOnTimestepsAtDeskScale) {
  const int64_t dim = 16;
  auto values = torch::arange(0, 1001, torch::kFloat64);
  auto encs = sinusoidal_encode(values, dim);
  auto accessor = encs.accessor<double, 2>();
  double min_dist = 1e300;
  for (int64_t i = 0; i <= 1000; ++i) {
    for (int64_t j = i + 1; j <= 1000; ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < dim; ++k) {
        const double d = accessor[i][k] - accessor[j][k];
        d2 += d * d;
      }
      min_dist = std::min(min_dist, d2);
    }
  }
  EXPECT_GT(min_dist, 1e-12);
}

TEST(TimeToFeature, Log1pContract) {
  EXPECT_DOUBLE_EQ(time_to_feature(0.0), 0.0);
  EXPECT_NEAR(time_to_feature(std::exp(1.0) - 1.0), 1.0, 1e-12);
  EXPECT_THROW(time_to_feature(-1.0), std::invalid_argument);
  double prev = -1.0;
  for (double n = 0.0; n < 5000.0; n += 37.0) {
    const double v = time_to_feature(n);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(GroupNormalize, ConstantInputGivesZeros) {
  auto k = torch::full({8, 4, 4}, 3.7, torch::kFloat64);
  const auto out = group_normalize(k, 4);
  EXPECT_LT(out.abs().max().item<double>(), 1e-12);
}

TEST(GroupNormalize, MomentsAndScaleInvariance) {
  torch::manual_seed(3);
  auto k = torch::randn({1, 8, 6, 6}, torch::kFloat64);
  const int64_t groups = 4;
  const auto out = group_normalize(k, groups);
  auto g = out.reshape({groups, -1});
  EXPECT_LT(g.mean(1).abs().max().item<double>(), 1e-6);
  EXPECT_LT((g.var(1, /*unbiased=*/false) - 1.0).abs().max().item<double>(), 1e-4);

  const auto scaled = group_normalize(k * 10.0, groups);
  const double rel =
      (scaled - out).abs().max().item<double>() / out.abs().max().item<double>();
  EXPECT_LT(rel, 1e-5);
}

TEST(GroupNormalize, DivisibilityEnforced) {
  auto k = torch::randn({6, 4, 4}, torch::kFloat64);
  EXPECT_THROW(group_normalize(k, 4), std::invalid_argument);
}

TEST(AdaSpaGN, FreshLayerIsPlainGroupNorm) {
  torch::manual_seed(11);
  AdaGroupNorm layer(8, 16, 16, 4, /*temporal=*/false);
  layer->to(torch::kFloat64);
  auto k = torch::randn({8, 4, 4}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  const auto out = ada_spa_gn(k, z, 17, layer);
  EXPECT_TRUE(torch::equal(out, group_normalize(k, 4)));  // zero-init: s = 1, b = 0
}

TEST(AdaSpaGN, AnnihilatedInputBroadcastsShift) {
  torch::manual_seed(12);
  AdaGroupNorm layer(8, 16, 16, 4, false);
  layer->to(torch::kFloat64);
  auto shift = torch::randn({8}, torch::kFloat64);
  {
    torch::NoGradGuard ng;
    layer->mlp_->out_->weight.zero_();
    layer->mlp_->out_->bias.narrow(0, 0, 8).fill_(-1.0);  // s = 1 + (-1) = 0
    layer->mlp_->out_->bias.narrow(0, 8, 8).copy_(shift);
  }
  auto k = torch::randn({8, 4, 4}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  const auto out = ada_spa_gn(k, z, 5, layer);
  for (int64_t c = 0; c < 8; ++c) {
    auto plane = out[c];
    EXPECT_TRUE(torch::equal(plane, torch::full_like(plane, shift[c].item<double>())));
  }
}

TEST(AdaSpaGN, ShapeContract) {
  torch::manual_seed(13);
  for (const auto& [c, hw, groups] : std::vector<std::tuple<int64_t, int64_t, int64_t>>{
           {8, 4, 4}, {16, 6, 8}, {32, 3, 8}}) {
    AdaGroupNorm layer(c, 24, 16, groups, false);
    layer->to(torch::kFloat64);
    testutil::randomize_parameters(*layer, 100 + c);
    auto k = torch::randn({c, hw, hw}, torch::kFloat64);
    auto z = torch::randn({24}, torch::kFloat64);
    EXPECT_EQ(ada_spa_gn(k, z, 9, layer).sizes(), k.sizes());
  }
}

// Zeroing the log-time slice of the temporal conditioner and sharing every
// remaining weight must reproduce the spatial layer bit for bit.
TEST(AdaTempGN, ZeroedTimeSliceEqualsSpatialExactly) {
  AdaGroupNorm temp(8, 16, 16, 4, /*temporal=*/true);
  AdaGroupNorm spa(8, 16, 16, 4, /*temporal=*/false);
  temp->to(torch::kFloat64);
  spa->to(torch::kFloat64);
  testutil::randomize_parameters(*temp, 77);
  {
    torch::NoGradGuard ng;
    temp->mlp_->lin_n_->weight.zero_();
    spa->mlp_->lin_z_->weight.copy_(temp->mlp_->lin_z_->weight);
    spa->mlp_->lin_z_->bias.copy_(temp->mlp_->lin_z_->bias);
    spa->mlp_->lin_t_->weight.copy_(temp->mlp_->lin_t_->weight);
    spa->mlp_->out_->weight.copy_(temp->mlp_->out_->weight);
    spa->mlp_->out_->bias.copy_(temp->mlp_->out_->bias);
  }
  auto k = torch::randn({8, 4, 4}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  const auto out_t = ada_temp_gn(k, z, 421.0, 13, temp);
  const auto out_s = ada_spa_gn(k, z, 13, spa);
  EXPECT_TRUE(torch::equal(out_t, out_s));
}

TEST(AdaTempGN, DistinctTimesChangeOutput) {
  AdaGroupNorm layer(8, 16, 16, 4, true);
  layer->to(torch::kFloat64);
  testutil::randomize_parameters(*layer, 55);
  auto k = torch::randn({8, 4, 4}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  const auto a = ada_temp_gn(k, z, 60.0, 9, layer);
  const auto b = ada_temp_gn(k, z, 2880.0, 9, layer);
  EXPECT_GT((a - b).abs().max().item<double>(), 1e-8);
}

TEST(AdaTempGN, NegativeTimeRejected) {
  AdaGroupNorm layer(8, 16, 16, 4, true);
  layer->to(torch::kFloat64);
  auto k = torch::randn({8, 4, 4}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  EXPECT_THROW(ada_temp_gn(k, z, -5.0, 9, layer), std::invalid_argument);
}

TEST(AdaTempGN, ShapePreserved) {
  AdaGroupNorm layer(16, 16, 16, 8, true);
  layer->to(torch::kFloat64);
  testutil::randomize_parameters(*layer, 56);
  auto k = torch::randn({2, 16, 5, 5}, torch::kFloat64);
  auto z = torch::randn({2, 16}, torch::kFloat64);
  auto t = torch::tensor({3.0, 800.0}, torch::kFloat64);
  auto n = torch::tensor({15.0, 1440.0}, torch::kFloat64);
  EXPECT_EQ(layer(k, z, t, n).sizes(), k.sizes());
}

// Analytic gradients match central differences for k, z and the conditioner
// weights, double precision, 4x4x8 feature maps.
TEST(AdaLayers, GradientsMatchFiniteDifferences) {
  for (const bool temporal : {false, true}) {
    AdaGroupNorm layer(8, 16, 16, 4, temporal);
    layer->to(torch::kFloat64);
    testutil::randomize_parameters(*layer, temporal ? 301 : 300);
    torch::manual_seed(999);
    auto k = torch::randn({1, 8, 4, 4}, torch::kFloat64);
    auto z = torch::randn({1, 16}, torch::kFloat64);
    auto t = torch::tensor({42.0}, torch::kFloat64);
    std::optional<torch::Tensor> n;
    if (temporal) n = torch::tensor({377.0}, torch::kFloat64);
    auto r = torch::randn({1, 8, 4, 4}, torch::kFloat64);

    std::vector<torch::Tensor> leaves = {k, z};
    for (auto& p : layer->parameters()) leaves.push_back(p);
    auto loss_fn = [&]() { return (layer(k, z, t, n) * r).sum(); };
    const auto res = testutil::gradient_check(leaves, loss_fn, 0.5, 2024);
    EXPECT_GT(res.max_abs_grad, 0.0);
    EXPECT_GT(res.checked, 100);
    EXPECT_LT(res.max_rel_err, 1e-4) << (temporal ? "temporal" : "spatial");
  }
}
