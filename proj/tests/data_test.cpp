#include "longidiff/data.hpp"

#include <gtest/gtest.h>

#include <array>
#include <random>

#include "test_util.hpp"

using namespace longidiff;

TEST(ImageIO, Float64RoundTripIsExact) {
  testutil::TempDir tmp;
  auto img = torch::randn({17, 23}, torch::kFloat64);
  const auto path = (tmp / "img.f64").string();
  write_image_f64(path, img);
  EXPECT_TRUE(torch::equal(read_image_f64(path), img));
  EXPECT_TRUE(torch::equal(read_image(path), img));
}

TEST(ImageIO, PgmRoundTripWithinQuantization) {
  testutil::TempDir tmp;
  auto img = torch::rand({9, 12}, torch::kFloat64);
  const auto path = (tmp / "img.pgm").string();
  write_pgm(path, img);
  const auto back = read_pgm(path);
  EXPECT_EQ(back.sizes(), img.sizes());
  EXPECT_LT((back - img).abs().max().item<double>(), 1.0 / 65535.0);
}

TEST(Preprocess, NormalizedInputKeepsMoments) {
  torch::manual_seed(2);
  auto raw = torch::randn({32, 32}, torch::kFloat64);
  raw = (raw - raw.mean()) / raw.std(false);
  const auto out = preprocess(raw, 1.0, 32, 1.0);
  EXPECT_LT(std::abs(out.mean().item<double>()), 1e-6);
  EXPECT_LT(std::abs(out.std(false).item<double>() - 1.0), 1e-4);
}

TEST(Preprocess, OutlierClippedToPercentile) {
  torch::manual_seed(3);
  auto raw = torch::rand({100, 100}, torch::kFloat64);  // 10^4 pixels
  raw[0][0] = 1e6;
  const double hi = percentile(raw, 0.995);
  const auto clipped = raw.clamp(percentile(raw, 0.005), hi);
  // the preprocess output equals the z-scored clipped image
  const auto out = preprocess(raw, 1.0, 100, 1.0);
  const auto expect = (clipped - clipped.mean()) / clipped.std(false);
  EXPECT_LT((out - expect).abs().max().item<double>(), 1e-12);
  EXPECT_DOUBLE_EQ(clipped[0][0].item<double>(), hi);
}

TEST(Preprocess, DegenerateScanRejected) {
  auto flat = torch::full({16, 16}, 5.0, torch::kFloat64);
  EXPECT_THROW(preprocess(flat, 1.0, 16, 1.0), DataError);
}

TEST(Preprocess, IdempotentUpToTolerance) {
  torch::manual_seed(4);
  auto raw = torch::randn({32, 32}, torch::kFloat64) * 40.0 + 1000.0;  // CT-ish values
  const auto once = preprocess(raw, 1.0, 32, 1.0);
  const auto twice = preprocess(once, 1.0, 32, 1.0);
  EXPECT_LT((twice - once).abs().max().item<double>(), 1e-6);
}

TEST(Preprocess, ResamplesToTargetGrid) {
  torch::manual_seed(5);
  // paper-style geometry at reduced cost: resample a coarse grid to a finer one
  auto raw = torch::randn({64, 64}, torch::kFloat64);
  const auto out = preprocess(raw, 0.9, 128, 0.45);
  EXPECT_EQ(out.sizes(), torch::IntArrayRef({128, 128}));
  EXPECT_LT(std::abs(out.mean().item<double>()), 1e-9);
}

TEST(Augment, IdentityParamsLeaveImageUntouched) {
  torch::manual_seed(6);
  auto img = torch::randn({24, 24}, torch::kFloat64);
  const auto out = augment(img, AugmentParams{}, 1.0);
  EXPECT_LT((out - img).abs().max().item<double>(), 1e-6);
}

TEST(Augment, FlipIsInvolution) {
  torch::manual_seed(7);
  auto img = torch::randn({24, 24}, torch::kFloat64);
  AugmentParams flip;
  flip.flip = true;
  const auto once = augment(img, flip, 1.0);
  EXPECT_GT((once - img).abs().max().item<double>(), 1e-3);
  const auto twice = augment(once, flip, 1.0);
  EXPECT_LT((twice - img).abs().max().item<double>(), 1e-6);
}

TEST(Augment, MillimetreTranslationConvertsThroughSpacing) {
  // 20 mm at 0.45 mm/px = 44.44 px; a coordinate ramp shifts by exactly that
  const int64_t s = 128;
  auto ramp = torch::arange(0, s, torch::kFloat64).unsqueeze(0).expand({s, s}).contiguous();
  AugmentParams p;
  p.dx_mm = 20.0;
  const auto out = augment(ramp, p, 0.45);
  const double expected = 100.0 - 20.0 / 0.45;  // source column for output x=100
  EXPECT_NEAR(out[64][100].item<double>(), expected, 1e-9);
}

TEST(Augment, OutOfRangeParamsRejected) {
  auto img = torch::zeros({8, 8}, torch::kFloat64);
  AugmentParams p;
  p.scale = 1.2;
  EXPECT_THROW(augment(img, p, 1.0), std::invalid_argument);
  p = {};
  p.dx_mm = 25.0;
  EXPECT_THROW(augment(img, p, 1.0), std::invalid_argument);
  p = {};
  p.rot_rad = 0.7;
  EXPECT_THROW(augment(img, p, 1.0), std::invalid_argument);
}

TEST(Augment, DimensionsPreservedUnderRandomParams) {
  std::mt19937_64 rng(8);
  auto img = torch::randn({20, 20}, torch::kFloat64);
  for (int i = 0; i < 50; ++i) {
    const auto p = draw_augment_params(rng, AugmentRanges{.max_translate_mm = 4.0});
    EXPECT_EQ(augment(img, p, 1.0).sizes(), img.sizes());
  }
}

namespace {

ScanRecord make_record(int n_scans) {
  ScanRecord r;
  r.patient_id = "p";
  for (int i = 0; i < n_scans; ++i) {
    Scan s;
    s.time_minutes = 100.0 * (i + 1);
    s.image = torch::full({8, 8}, static_cast<double>(i), torch::kFloat64);
    r.scans.push_back(std::move(s));
  }
  return r;
}

}  // namespace

TEST(SamplePair, SingleScanRecordAlwaysPairsWithItself) {
  const auto rec = make_record(1);
  std::mt19937_64 rng(9);
  for (const auto strategy : {PairStrategy::kSameTime, PairStrategy::kEarliestToLater,
                              PairStrategy::kAnyForward, PairStrategy::kAnyPair}) {
    const auto p = sample_pair(rec, strategy, rng, /*augment_on=*/false);
    EXPECT_TRUE(torch::equal(p.x_a, rec.scans[0].image));
    EXPECT_TRUE(torch::equal(p.x_b, rec.scans[0].image));
    EXPECT_DOUBLE_EQ(p.n_b, 100.0);
  }
}

TEST(SamplePair, EarliestToLaterPinsEncoderView) {
  const auto rec = make_record(3);
  std::mt19937_64 rng(10);
  bool later_seen = false;
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_pair(rec, PairStrategy::kEarliestToLater, rng, false);
    ASSERT_TRUE(torch::equal(p.x_a, rec.scans[0].image));
    later_seen |= p.n_b > 100.0;
  }
  EXPECT_TRUE(later_seen);
}

TEST(SamplePair, AnyForwardUniformOverOrderedPairs) {
  std::mt19937_64 rng(1);
  std::array<std::array<int, 3>, 3> counts{};
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    const auto [i, j] = draw_pair_indices(3, PairStrategy::kAnyForward, rng);
    ASSERT_LE(i, j);
    counts[i][j] += 1;
  }
  // chi-squared against uniform over the 6 valid cells; df = 5, alpha = 0.01
  const double expected = draws / 6.0;
  double chi2 = 0.0;
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = i; j < 3; ++j)
      chi2 += (counts[i][j] - expected) * (counts[i][j] - expected) / expected;
  EXPECT_LT(chi2, 15.086);
}

TEST(SamplePair, OrderingInvariantPerStrategy) {
  const auto rec = make_record(4);
  std::mt19937_64 rng(12);
  bool any_pair_backward = false;
  for (int d = 0; d < 10000; ++d) {
    for (const auto strategy : {PairStrategy::kSameTime, PairStrategy::kEarliestToLater,
                                PairStrategy::kAnyForward}) {
      const auto [i, j] = draw_pair_indices(4, strategy, rng);
      ASSERT_LE(rec.scans[i].time_minutes, rec.scans[j].time_minutes);
    }
    const auto [i, j] = draw_pair_indices(4, PairStrategy::kAnyPair, rng);
    any_pair_backward |= i > j;
  }
  EXPECT_TRUE(any_pair_backward);
}

TEST(SamplePair, EmptyRecordRejected) {
  ScanRecord empty;
  std::mt19937_64 rng(13);
  EXPECT_THROW(sample_pair(empty, PairStrategy::kSameTime, rng, false), std::invalid_argument);
}

TEST(SamplePair, AugmentedViewsDifferButShareGeometrySource) {
  auto rec = make_record(1);
  torch::manual_seed(14);
  rec.scans[0].image = torch::randn({16, 16}, torch::kFloat64);
  std::mt19937_64 rng(14);
  const auto p = sample_pair(rec, PairStrategy::kSameTime, rng, true,
                             AugmentRanges{.max_translate_mm = 4.0}, 1.0);
  EXPECT_EQ(p.x_a.sizes(), rec.scans[0].image.sizes());
  EXPECT_GT((p.x_a - p.x_b).abs().max().item<double>(), 1e-8);  // independent draws
}

TEST(Manifest, RoundTripPreservesRecords) {
  testutil::TempDir tmp;
  CohortManifest m;
  m.root_dir = tmp.str();
  ScanRecord a;
  a.patient_id = "p00001";
  a.nihss_admission = 7;
  a.nihss_24h = 3;
  a.scans.push_back({120.5, "images/a0.f64", {}});
  a.scans.push_back({1500.25, "images/a1.f64", {}});
  ScanRecord b;
  b.patient_id = "p00002";
  b.mrs_discharge = 4;
  b.synthetic_label = 0;
  b.scans.push_back({95.0, "images/b0.f64", {}});
  m.records = {a, b};
  const auto path = (tmp / "manifest.csv").string();
  write_manifest(m, path);
  const auto back = read_manifest(path);
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[0].patient_id, "p00001");
  EXPECT_EQ(back.records[0].scans.size(), 2u);
  EXPECT_DOUBLE_EQ(back.records[0].scans[1].time_minutes, 1500.25);
  EXPECT_EQ(*back.records[0].nihss_admission, 7);
  EXPECT_EQ(*back.records[0].nihss_24h, 3);
  EXPECT_FALSE(back.records[0].mrs_discharge.has_value());
  EXPECT_EQ(*back.records[1].mrs_discharge, 4);
  EXPECT_EQ(*back.records[1].synthetic_label, 0);
  EXPECT_FALSE(back.records[1].nihss_admission.has_value());
}

TEST(Manifest, MalformedInputsRejected) {
  testutil::TempDir tmp;
  const auto path = (tmp / "bad.csv").string();
  {
    std::ofstream os(path);
    os << "wrong,header\n";
  }
  EXPECT_THROW(read_manifest(path), DataError);
  {
    std::ofstream os(path);
    os << kManifestHeader << "\n";
    os << "p1,0,500.0,img.f64,,,,\n";
    os << "p1,1,100.0,img.f64,,,,\n";  // out of order
  }
  EXPECT_THROW(read_manifest(path), DataError);
  {
    std::ofstream os(path);
    os << kManifestHeader << "\n";
    for (int i = 0; i < 6; ++i) os << "p1," << i << "," << 100 * (i + 1) << ".0,img.f64,,,,\n";
  }
  EXPECT_THROW(read_manifest(path), DataError);  // more than 5 scans
}

TEST(Splits, StableFractionsAndPartition) {
  std::vector<std::string> ids;
  for (int i = 0; i < 5000; ++i) ids.push_back("patient" + std::to_string(i));
  int test_count = 0;
  std::array<int, 5> fold_counts{};
  for (const auto& id : ids) {
    EXPECT_EQ(is_test_patient(id, 3), is_test_patient(id, 3));
    if (is_test_patient(id, 3)) {
      ++test_count;
    } else {
      const int f = cv_fold(id, 3);
      ASSERT_GE(f, 0);
      ASSERT_LT(f, 5);
      fold_counts[static_cast<size_t>(f)] += 1;
    }
  }
  EXPECT_NEAR(test_count / 5000.0, 0.2, 0.02);
  for (const int c : fold_counts) EXPECT_NEAR(c / (5000.0 - test_count), 0.2, 0.03);
  // different seeds move patients
  int moved = 0;
  for (const auto& id : ids) moved += is_test_patient(id, 3) != is_test_patient(id, 4);
  EXPECT_GT(moved, 1000);
}
