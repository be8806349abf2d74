#pragma once

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <string>

#include "longidiff/common.hpp"
#include "longidiff/data.hpp"

namespace longidiff {

// Generator priors for the synthetic longitudinal lesion cohort. First-scan
// times follow a shifted log-normal solved for median 180 and IQR [95, 522]
// minutes; scan counts follow a pmf over 1..5 with mean 1.63.
struct PhantomSpec {
  int64_t image_size = 32;
  double pixel_spacing_mm = 1.0;

  // head phantom
  double skull_rx = 13.0, skull_ry = 11.0;  // ellipse semi-axes, px
  double skull_thickness = 1.6;
  double skull_value = 1.0;
  double tissue_value = 0.55;
  double background_value = 0.02;
  double noise_sigma = 0.04;
  double lesion_center_margin = 0.50;  // centers within margin * semi-axes

  // lesion evolution
  double seed_area_px = 10.0;
  double cap_area_lo_px = 24.0;
  double cap_area_hi_px = 110.0;
  double growth_tau_minutes = 3000.0;
  double growth_rate_floor = 0.3;     // rate(s) = floor + (1 - floor) * s
  double contrast_cap = 0.42;
  double contrast_sharpness = 3.0;    // tanh(sharpness * s)
  double contrast_floor = 0.55;       // fraction of cap present at n = 0

  // cohort timing
  std::array<double, 5> scan_count_pmf = {0.62, 0.23, 0.08, 0.04, 0.03};
  double first_time_shift = 17190.0 / 257.0;        // 66.887 min
  double first_time_log_mu = 4.728487298324328;     // log(180 - shift)
  double first_time_log_sigma = 2.064138601642428;  // matches IQR [95, 522]
  double first_time_max = 10080.0;                  // one week
  double followup_gap_lo = 720.0;                   // 12 h
  double followup_gap_hi = 2880.0;                  // 48 h
};

struct LesionFootprint {
  double area_px = 0.0;
  double contrast = 0.0;
};

// Area and contrast are non-decreasing in both severity and time, saturating
// at the spec caps; zero severity renders no visible lesion at any time.
inline LesionFootprint lesion_footprint(double severity, double minutes, const PhantomSpec& spec) {
  if (severity < 0.0 || severity > 1.0) throw std::invalid_argument("lesion_footprint: severity in [0, 1]");
  if (minutes < 0.0) throw std::invalid_argument("lesion_footprint: time must be non-negative");
  const double rate = spec.growth_rate_floor + (1.0 - spec.growth_rate_floor) * severity;
  const double g = 1.0 - std::exp(-minutes * rate / spec.growth_tau_minutes);
  const double cap = spec.cap_area_lo_px + (spec.cap_area_hi_px - spec.cap_area_lo_px) * severity;
  LesionFootprint f;
  f.area_px = spec.seed_area_px + std::max(0.0, cap - spec.seed_area_px) * g;
  f.contrast = spec.contrast_cap * std::tanh(spec.contrast_sharpness * severity) *
               (spec.contrast_floor + (1.0 - spec.contrast_floor) * g);
  return f;
}

// One axial slice: skull ellipse ring, noisy interior tissue, and a hypodense
// blob whose footprint comes from (severity, time).
inline torch::Tensor render_scan(double severity, double center_y, double center_x, double minutes,
                                 const PhantomSpec& spec, std::mt19937_64& rng) {
  const int64_t s = spec.image_size;
  const double cy = (s - 1) / 2.0, cx = (s - 1) / 2.0;
  const auto fp = lesion_footprint(severity, minutes, spec);
  const double radius = std::sqrt(fp.area_px / M_PI);
  auto img = torch::empty({s, s}, torch::kFloat64);
  auto acc = img.accessor<double, 2>();
  for (int64_t i = 0; i < s; ++i) {
    for (int64_t j = 0; j < s; ++j) {
      const double ey = (i - cy) / spec.skull_ry;
      const double ex = (j - cx) / spec.skull_rx;
      const double r2 = ey * ey + ex * ex;
      // ring between the inner and outer ellipse
      const double inner_ry = spec.skull_ry - spec.skull_thickness;
      const double inner_rx = spec.skull_rx - spec.skull_thickness;
      const double iy = (i - cy) / inner_ry;
      const double ix = (j - cx) / inner_rx;
      const double ri2 = iy * iy + ix * ix;
      double v = spec.background_value;
      if (r2 <= 1.0) v = ri2 <= 1.0 ? spec.tissue_value : spec.skull_value;
      if (ri2 <= 1.0 && fp.contrast > 0.0) {
        const double dy = i - center_y, dx = j - center_x;
        const double d2 = (dy * dy + dx * dx) / (radius * radius);
        v -= fp.contrast * std::exp(-d2 * d2);  // flat-core profile, fast falloff
      }
      acc[i][j] = v + spec.noise_sigma * normal_draw(rng);
    }
  }
  return img;
}

// Per-patient ground truth; the generator and any oracle draw it through the
// same code path so they cannot diverge.
struct PhantomTruth {
  double severity = 0.0;
  double center_y = 0.0, center_x = 0.0;
  std::vector<double> times;
  int label() const { return severity > 0.5 ? 1 : 0; }
};

inline PhantomTruth draw_patient_truth(std::mt19937_64& rng, const PhantomSpec& spec) {
  PhantomTruth truth;
  truth.severity = uniform_real(rng, 0.0, 1.0);

  // lesion center inside the shrunken skull interior
  double cyl, cxl;
  const double cy = (spec.image_size - 1) / 2.0, cx = (spec.image_size - 1) / 2.0;
  do {
    cyl = uniform_real(rng, -1.0, 1.0);
    cxl = uniform_real(rng, -1.0, 1.0);
  } while (cyl * cyl + cxl * cxl > 1.0);
  truth.center_y = cy + cyl * spec.lesion_center_margin * spec.skull_ry;
  truth.center_x = cx + cxl * spec.lesion_center_margin * spec.skull_rx;

  const double u = uniform_real(rng, 0.0, 1.0);
  size_t n_scans = 1;
  double acc = 0.0;
  for (size_t k = 0; k < spec.scan_count_pmf.size(); ++k) {
    acc += spec.scan_count_pmf[k];
    if (u < acc) {
      n_scans = k + 1;
      break;
    }
  }
  double t = spec.first_time_shift +
             std::exp(spec.first_time_log_mu + spec.first_time_log_sigma * normal_draw(rng));
  t = std::min(t, spec.first_time_max);
  for (size_t k = 0; k < n_scans; ++k) {
    if (k > 0) t += uniform_real(rng, spec.followup_gap_lo, spec.followup_gap_hi);
    truth.times.push_back(std::round(t * 1000.0) / 1000.0);  // manifest stores 3 decimals
  }
  return truth;
}

// Ground truth only, no rendering or IO.
inline std::vector<PhantomTruth> sample_cohort_truth(int64_t n_patients, uint64_t seed,
                                                     const PhantomSpec& spec) {
  std::vector<PhantomTruth> out;
  out.reserve(static_cast<size_t>(n_patients));
  for (int64_t p = 0; p < n_patients; ++p) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(p)));
    out.push_back(draw_patient_truth(rng, spec));
  }
  return out;
}

// Deterministic cohort generation: per-patient streams derive from the seed,
// so output bytes depend only on (n_patients, seed, spec).
inline CohortManifest generate_cohort(int64_t n_patients, uint64_t seed, const PhantomSpec& spec,
                                      const std::string& out_dir) {
  if (n_patients < 1) throw std::invalid_argument("generate_cohort: n_patients must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw DataError("cannot create output directory: " + out_dir);

  CohortManifest m;
  m.root_dir = out_dir;
  char idbuf[32];
  for (int64_t p = 0; p < n_patients; ++p) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(p)));
    const auto truth = draw_patient_truth(rng, spec);
    ScanRecord rec;
    std::snprintf(idbuf, sizeof(idbuf), "p%05lld", static_cast<long long>(p));
    rec.patient_id = idbuf;
    rec.synthetic_label = truth.label();
    for (size_t k = 0; k < truth.times.size(); ++k) {
      Scan scan;
      scan.time_minutes = truth.times[k];
      char namebuf[64];
      std::snprintf(namebuf, sizeof(namebuf), "images/%s_s%zu.f64", rec.patient_id.c_str(), k);
      scan.image_path = namebuf;
      scan.image =
          render_scan(truth.severity, truth.center_y, truth.center_x, truth.times[k], spec, rng);
      write_image_f64((fs::path(out_dir) / scan.image_path).string(), scan.image);
      rec.scans.push_back(std::move(scan));
    }
    m.records.push_back(std::move(rec));
  }
  write_manifest(m, (fs::path(out_dir) / "manifest.csv").string());
  return m;
}

}  // namespace longidiff
