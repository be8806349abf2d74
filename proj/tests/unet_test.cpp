#include "longidiff/unet.hpp"

#include <gtest/gtest.h>

#include "longidiff/checkpoint.hpp"
#include "test_util.hpp"

using namespace longidiff;

namespace {

UNetConfig desk_config(ConditioningMode mode = ConditioningMode::kSpatial) {
  UNetConfig cfg;  // base 8, multipliers [1,2,4], attention [8], input 32
  cfg.conditioning_mode = mode;
  return cfg;
}

UNetConfig tiny_config(ConditioningMode mode = ConditioningMode::kSpatial) {
  UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_multipliers = {1, 2};
  cfg.attention_resolutions = {8};
  cfg.input_size = 16;
  cfg.z_dim = 16;
  cfg.cond_embed_dim = 16;
  cfg.conditioning_mode = mode;
  return cfg;
}

}  // namespace

TEST(UNetConfig, PaperScaleValidates) {
  UNetConfig cfg;
  cfg.base_channels = 16;
  cfg.channel_multipliers = {1, 2, 4, 8, 16, 32, 64};
  cfg.attention_resolutions = {16};
  cfg.input_size = 512;
  cfg.z_dim = 512;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(UNetConfig, UnreachableAttentionRejected) {
  auto cfg = desk_config();
  cfg.attention_resolutions = {12};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = desk_config();
  cfg.attention_resolutions = {4};  // below the deepest level
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = desk_config();
  cfg.input_size = 30;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(BuildUnet, DeskConfigRunsAndIsSeedDeterministic) {
  auto a = build_unet(desk_config(), 7);
  auto b = build_unet(desk_config(), 7);
  auto pa = a->parameters();
  auto pb = b->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    ASSERT_TRUE(torch::equal(pa[i], pb[i]));
    ASSERT_TRUE(pa[i].isfinite().all().item<bool>());
  }
  auto c = build_unet(desk_config(), 8);
  bool any_diff = false;
  auto pc = c->parameters();
  for (size_t i = 0; i < pa.size(); ++i) any_diff |= !torch::equal(pa[i], pc[i]);
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(parameter_count(*a), parameter_count(*b));
}

TEST(PredictNoise, ShapeContractAndPurity) {
  auto net = build_unet(desk_config(), 3);
  auto x = torch::randn({32, 32}, torch::kFloat64);
  auto z = torch::randn({64}, torch::kFloat64);
  const auto out = predict_noise(net, {x, 500}, z);
  EXPECT_EQ(out.sizes(), x.sizes());
  const auto again = predict_noise(net, {x, 500}, z);
  EXPECT_TRUE(torch::equal(out, again));
}

TEST(PredictNoise, ModeErrors) {
  auto spatial = build_unet(desk_config(ConditioningMode::kSpatial), 3);
  auto temporal = build_unet(desk_config(ConditioningMode::kTemporal), 3);
  auto x = torch::randn({32, 32}, torch::kFloat64);
  auto z = torch::randn({64}, torch::kFloat64);
  EXPECT_THROW(predict_noise(spatial, {x, 10}, z, 120.0), std::invalid_argument);
  EXPECT_THROW(predict_noise(temporal, {x, 10}, z), std::invalid_argument);
  EXPECT_NO_THROW(predict_noise(temporal, {x, 10}, z, 120.0));
  auto bad = torch::randn({16, 16}, torch::kFloat64);
  EXPECT_THROW(predict_noise(spatial, {bad, 10}, z), std::invalid_argument);
}

TEST(PredictNoise, ConditioningSensitivity) {
  auto net = build_unet(tiny_config(), 5);
  testutil::randomize_parameters(*net, 51);
  auto x = torch::randn({16, 16}, torch::kFloat64);
  auto za = torch::randn({16}, torch::kFloat64);
  auto zb = torch::randn({16}, torch::kFloat64);
  const auto a = predict_noise(net, {x, 40}, za);
  const auto b = predict_noise(net, {x, 40}, zb);
  EXPECT_GT((a - b).abs().max().item<double>(), 1e-10);
}

// With every conditioner output forced to (s=1, b=0) the network must ignore
// z and n entirely: conditioning flows only through the adaptive norms.
TEST(PredictNoise, SurgicalIdentityConditioningIgnoresZAndN) {
  auto net = build_unet(tiny_config(ConditioningMode::kTemporal), 6);
  testutil::randomize_parameters(*net, 61);
  {
    torch::NoGradGuard ng;
    for (auto p : net->named_parameters())
      if (p.key().find(".mlp.out.") != std::string::npos) p.value().zero_();
  }
  auto x = torch::randn({16, 16}, torch::kFloat64);
  auto za = torch::randn({16}, torch::kFloat64);
  auto zb = torch::randn({16}, torch::kFloat64);
  const auto a = predict_noise(net, {x, 40}, za, 60.0);
  const auto b = predict_noise(net, {x, 40}, zb, 2000.0);
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(PredictNoise, ReceptiveFieldCoversPerturbations) {
  auto net = build_unet(desk_config(), 9);
  testutil::randomize_parameters(*net, 91);
  auto x = torch::randn({32, 32}, torch::kFloat64);
  auto z = torch::randn({64}, torch::kFloat64);
  const auto base = predict_noise(net, {x, 100}, z);
  auto x2 = x.clone();
  x2[5][7] += 1.0;
  const auto perturbed = predict_noise(net, {x2, 100}, z);
  EXPECT_GT((base - perturbed).abs().max().item<double>(), 1e-10);
}

TEST(PredictNoise, GradientsMatchFiniteDifferencesTiny) {
  auto net = build_unet(tiny_config(ConditioningMode::kTemporal), 12);
  testutil::randomize_parameters(*net, 121);
  torch::manual_seed(314);
  auto x = torch::randn({1, 1, 16, 16}, torch::kFloat64);
  auto t = torch::tensor({25}, torch::kLong);
  auto z = torch::randn({1, 16}, torch::kFloat64);
  auto n = torch::tensor({240.0}, torch::kFloat64);
  auto loss_fn = [&]() { return net->forward(x, t, z, n).pow(2).mean(); };
  const auto res = testutil::gradient_check(net->parameters(), loss_fn, 0.002, 777);
  EXPECT_GT(res.max_abs_grad, 0.0);
  EXPECT_GT(res.checked, 50);
  EXPECT_LT(res.max_rel_err, 1e-3);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testutil::TempDir tmp;
  auto net = build_unet(tiny_config(), 21);
  testutil::randomize_parameters(*net, 212);
  Checkpoint ckpt;
  ckpt.config["note"] = "unet-test";
  add_module_section(ckpt, "denoiser", *net);
  const auto path = (tmp / "net.ckpt").string();
  save_checkpoint(path, ckpt);

  auto loaded = load_checkpoint(path);
  auto net2 = build_unet(tiny_config(), 22);  // different init, then overwritten
  load_module_section(loaded, "denoiser", *net2);
  auto pa = net->parameters();
  auto pb = net2->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) ASSERT_TRUE(torch::equal(pa[i], pb[i]));

  // forward pass equality, bitwise
  auto x = torch::randn({16, 16}, torch::kFloat64);
  auto z = torch::randn({16}, torch::kFloat64);
  EXPECT_TRUE(torch::equal(predict_noise(net, {x, 7}, z), predict_noise(net2, {x, 7}, z)));

  // a second save produces identical bytes
  const auto path2 = (tmp / "net2.ckpt").string();
  Checkpoint ckpt2;
  ckpt2.config["note"] = "unet-test";
  add_module_section(ckpt2, "denoiser", *net2);
  save_checkpoint(path2, ckpt2);
  EXPECT_EQ(testutil::read_file(path), testutil::read_file(path2));
}

TEST(Checkpoint, MissingTensorRejected) {
  testutil::TempDir tmp;
  auto net = build_unet(tiny_config(), 31);
  Checkpoint ckpt;
  add_module_section(ckpt, "denoiser", *net);
  ckpt.tensors.pop_back();
  const auto path = (tmp / "broken.ckpt").string();
  save_checkpoint(path, ckpt);
  auto loaded = load_checkpoint(path);
  auto net2 = build_unet(tiny_config(), 32);
  EXPECT_THROW(load_module_section(loaded, "denoiser", *net2), DataError);
}
