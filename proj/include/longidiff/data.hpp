#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "longidiff/common.hpp"

namespace longidiff {

// ---------------------------------------------------------------------------
// Image files: raw float64 arrays with a sidecar shape header, and 16-bit PGM.
// ---------------------------------------------------------------------------

inline void write_image_f64(const std::string& path, const torch::Tensor& img) {
  auto flat = img.detach().to(torch::kFloat64).contiguous();
  if (flat.dim() != 2) throw std::invalid_argument("write_image_f64: expected [H, W]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image: " + path);
  os.write(reinterpret_cast<const char*>(flat.data_ptr<double>()),
           static_cast<std::streamsize>(flat.numel() * 8));
  std::ofstream shape(path + ".shape");
  if (!shape) throw DataError("cannot write shape sidecar: " + path + ".shape");
  shape << flat.size(0) << " " << flat.size(1) << "\n";
}

inline torch::Tensor read_image_f64(const std::string& path) {
  std::ifstream shape(path + ".shape");
  if (!shape) throw DataError("missing shape sidecar: " + path + ".shape");
  int64_t h = 0, w = 0;
  shape >> h >> w;
  if (h <= 0 || w <= 0) throw DataError("bad shape sidecar: " + path + ".shape");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read image: " + path);
  auto img = torch::empty({h, w}, torch::kFloat64);
  is.read(reinterpret_cast<char*>(img.data_ptr<double>()), static_cast<std::streamsize>(h * w * 8));
  if (!is) throw DataError("truncated image: " + path);
  return img;
}

// Values mapped to [0, 1] by maxval on read; callers rescale for display on write.
inline void write_pgm(const std::string& path, const torch::Tensor& img01) {
  auto x = img01.detach().to(torch::kFloat64).contiguous();
  if (x.dim() != 2) throw std::invalid_argument("write_pgm: expected [H, W]");
  const int64_t h = x.size(0), w = x.size(1);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image: " + path);
  os << "P5\n" << w << " " << h << "\n65535\n";
  const auto* p = x.data_ptr<double>();
  for (int64_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(p[i], 0.0, 1.0);
    const auto q = static_cast<uint16_t>(std::lround(v * 65535.0));
    const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    os.write(bytes, 2);
  }
}

inline torch::Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read image: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw DataError("not a P5 PGM: " + path);
  auto next_token = [&is, &path]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw DataError("truncated PGM header: " + path);
  };
  const int64_t w = std::stoll(next_token());
  const int64_t h = std::stoll(next_token());
  const int64_t maxval = std::stoll(next_token());
  is.get();  // single whitespace after maxval
  auto img = torch::empty({h, w}, torch::kFloat64);
  auto* p = img.data_ptr<double>();
  if (maxval < 256) {
    std::vector<unsigned char> buf(static_cast<size_t>(h * w));
    is.read(reinterpret_cast<char*>(buf.data()), h * w);
    for (int64_t i = 0; i < h * w; ++i) p[i] = buf[static_cast<size_t>(i)] / static_cast<double>(maxval);
  } else {
    std::vector<unsigned char> buf(static_cast<size_t>(2 * h * w));
    is.read(reinterpret_cast<char*>(buf.data()), 2 * h * w);
    for (int64_t i = 0; i < h * w; ++i) {
      const int v = (buf[static_cast<size_t>(2 * i)] << 8) | buf[static_cast<size_t>(2 * i + 1)];
      p[i] = v / static_cast<double>(maxval);
    }
  }
  if (!is) throw DataError("truncated PGM: " + path);
  return img;
}

inline torch::Tensor read_image(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".pgm") == 0) return read_pgm(path);
  return read_image_f64(path);
}

// ---------------------------------------------------------------------------
// Cohort manifest
// ---------------------------------------------------------------------------

struct Scan {
  double time_minutes = 0.0;
  std::string image_path;
  torch::Tensor image;  // set once loaded / preprocessed
};

struct ScanRecord {
  std::string patient_id;
  std::vector<Scan> scans;  // sorted by time ascending
  std::optional<int> nihss_admission;
  std::optional<int> nihss_24h;
  std::optional<int> mrs_discharge;
  std::optional<int> synthetic_label;
};

struct CohortManifest {
  std::string root_dir;
  std::vector<ScanRecord> records;
};

inline constexpr const char* kManifestHeader =
    "patient_id,scan_index,time_minutes,image_path,nihss_admission,nihss_24h,mrs_discharge,"
    "synthetic_label";

inline void write_manifest(const CohortManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write manifest: " + path);
  os << kManifestHeader << "\n";
  char buf[64];
  for (const auto& r : m.records) {
    for (size_t i = 0; i < r.scans.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.3f", r.scans[i].time_minutes);
      os << r.patient_id << "," << i << "," << buf << "," << r.scans[i].image_path << ",";
      if (r.nihss_admission) os << *r.nihss_admission;
      os << ",";
      if (r.nihss_24h) os << *r.nihss_24h;
      os << ",";
      if (r.mrs_discharge) os << *r.mrs_discharge;
      os << ",";
      if (r.synthetic_label) os << *r.synthetic_label;
      os << "\n";
    }
  }
}

inline CohortManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read manifest: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader)
    throw DataError("manifest header mismatch: " + path);
  CohortManifest m;
  m.root_dir = std::filesystem::path(path).parent_path().string();
  std::vector<std::string> fields;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    fields.clear();
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    while (fields.size() < 8) fields.emplace_back();
    if (fields.size() != 8)
      throw DataError("manifest row " + std::to_string(lineno) + ": expected 8 columns");
    auto opt_int = [&](const std::string& s) -> std::optional<int> {
      if (s.empty()) return std::nullopt;
      return std::stoi(s);
    };
    if (m.records.empty() || m.records.back().patient_id != fields[0]) {
      ScanRecord r;
      r.patient_id = fields[0];
      r.nihss_admission = opt_int(fields[4]);
      r.nihss_24h = opt_int(fields[5]);
      r.mrs_discharge = opt_int(fields[6]);
      r.synthetic_label = opt_int(fields[7]);
      m.records.push_back(std::move(r));
    }
    Scan s;
    s.time_minutes = std::stod(fields[2]);
    s.image_path = fields[3];
    m.records.back().scans.push_back(std::move(s));
  }
  for (const auto& r : m.records) {
    if (r.scans.empty() || r.scans.size() > 5)
      throw DataError("patient " + r.patient_id + ": scan count must be in 1..5");
    for (size_t i = 0; i < r.scans.size(); ++i) {
      if (r.scans[i].time_minutes < 0)
        throw DataError("patient " + r.patient_id + ": negative scan time");
      if (i > 0 && r.scans[i].time_minutes < r.scans[i - 1].time_minutes)
        throw DataError("patient " + r.patient_id + ": scans not sorted by time");
    }
  }
  return m;
}

inline void load_images(CohortManifest& m) {
  const std::filesystem::path root(m.root_dir);
  for (auto& r : m.records)
    for (auto& s : r.scans)
      if (!s.image.defined()) s.image = read_image((root / s.image_path).string());
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Lower-interpolation percentile (value at floor(q * (n-1))), q in [0, 1].
// Clipping at these bounds is a fixed point: re-running it on already-clipped
// data returns the same bounds, which makes preprocess idempotent.
inline double percentile(const torch::Tensor& x, double q) {
  auto flat = std::get<0>(x.flatten().to(torch::kFloat64).sort());
  const int64_t n = flat.numel();
  if (n == 0) throw std::invalid_argument("percentile: empty input");
  const auto rank = static_cast<int64_t>(std::floor(q * static_cast<double>(n - 1)));
  return flat.data_ptr<double>()[std::clamp<int64_t>(rank, 0, n - 1)];
}

// Center-aligned bilinear lookup with zero padding outside the grid.
inline double bilinear_at(const torch::Tensor& img, double y, double x) {
  const int64_t h = img.size(0), w = img.size(1);
  const auto y0 = static_cast<int64_t>(std::floor(y));
  const auto x0 = static_cast<int64_t>(std::floor(x));
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  auto at = [&](int64_t yy, int64_t xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return img[yy][xx].item<double>();
  };
  const double v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  return v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) + v11 * fy * fx;
}

// Resample to target_size^2 at target spacing, clip to the [0.5, 99.5]
// percentiles of the resampled image, then z-score to mean 0 / std 1.
inline torch::Tensor preprocess(const torch::Tensor& raw, double pixel_spacing_mm,
                                int64_t target_size, double target_spacing_mm) {
  if (raw.dim() != 2 || raw.numel() == 0) throw std::invalid_argument("preprocess: expected non-empty [H, W]");
  if (!(pixel_spacing_mm > 0) || !(target_spacing_mm > 0) || target_size < 1)
    throw std::invalid_argument("preprocess: spacings and size must be positive");
  auto in = raw.to(torch::kFloat64);
  const int64_t h = in.size(0), w = in.size(1);

  torch::Tensor res;
  if (h == target_size && w == target_size && pixel_spacing_mm == target_spacing_mm) {
    res = in.clone();
  } else {
    res = torch::empty({target_size, target_size}, torch::kFloat64);
    const double ratio = target_spacing_mm / pixel_spacing_mm;
    const double cy_in = (h - 1) / 2.0, cx_in = (w - 1) / 2.0;
    const double cy_out = (target_size - 1) / 2.0;
    auto acc_in = in.accessor<double, 2>();
    auto acc = res.accessor<double, 2>();
    auto sample = [&](double y, double x) -> double {
      const auto y0 = static_cast<int64_t>(std::floor(y));
      const auto x0 = static_cast<int64_t>(std::floor(x));
      const double fy = y - y0, fx = x - x0;
      auto at = [&](int64_t yy, int64_t xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return acc_in[yy][xx];
      };
      return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
             at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
    };
    for (int64_t i = 0; i < target_size; ++i)
      for (int64_t j = 0; j < target_size; ++j)
        acc[i][j] = sample((i - cy_out) * ratio + cy_in, (j - cy_out) * ratio + cx_in);
  }

  const double lo = percentile(res, 0.005);
  const double hi = percentile(res, 0.995);
  res = res.clamp(lo, hi);
  const double mean = res.mean().item<double>();
  const double sd = res.std(/*unbiased=*/false).item<double>();
  if (sd == 0.0) throw DataError("preprocess: degenerate scan (zero variance after clipping)");
  return (res - mean) / sd;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  bool flip = false;
  double scale = 1.0;        // isotropic, in [0.95, 1.05]
  double dx_mm = 0.0;        // translation, |dx| <= 20 mm
  double dy_mm = 0.0;
  double rot_rad = 0.0;      // axial rotation, |rot| <= 0.5 rad

  void validate() const {
    if (scale < 0.95 || scale > 1.05) throw std::invalid_argument("augment: scale out of [0.95, 1.05]");
    if (std::abs(dx_mm) > 20.0 || std::abs(dy_mm) > 20.0)
      throw std::invalid_argument("augment: translation out of +-20 mm");
    if (std::abs(rot_rad) > 0.5) throw std::invalid_argument("augment: rotation out of +-0.5 rad");
  }
};

struct AugmentRanges {
  double scale_lo = 0.95, scale_hi = 1.05;
  double max_translate_mm = 20.0;
  double max_rot_rad = 0.5;
};

inline AugmentParams draw_augment_params(std::mt19937_64& rng, const AugmentRanges& r) {
  AugmentParams p;
  p.flip = (rng() & 1u) != 0;
  p.scale = uniform_real(rng, r.scale_lo, r.scale_hi);
  p.dx_mm = uniform_real(rng, -r.max_translate_mm, r.max_translate_mm);
  p.dy_mm = uniform_real(rng, -r.max_translate_mm, r.max_translate_mm);
  p.rot_rad = uniform_real(rng, -r.max_rot_rad, r.max_rot_rad);
  return p;
}

// Flip, scale, rotate, translate about the image center; bilinear resampling
// with zero padding. Millimetre translations convert to pixels via spacing.
inline torch::Tensor augment(const torch::Tensor& x, const AugmentParams& p,
                             double pixel_spacing_mm) {
  p.validate();
  if (x.dim() != 2) throw std::invalid_argument("augment: expected [H, W]");
  if (!(pixel_spacing_mm > 0)) throw std::invalid_argument("augment: spacing must be positive");
  auto in = x.to(torch::kFloat64);
  const int64_t h = in.size(0), w = in.size(1);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double tx = p.dx_mm / pixel_spacing_mm;
  const double ty = p.dy_mm / pixel_spacing_mm;
  const double cosr = std::cos(p.rot_rad), sinr = std::sin(p.rot_rad);

  auto out = torch::empty({h, w}, torch::kFloat64);
  auto acc_in = in.accessor<double, 2>();
  auto acc = out.accessor<double, 2>();
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      // invert: undo translation, rotation, scale, then flip
      double yr = static_cast<double>(i) - cy - ty;
      double xr = static_cast<double>(j) - cx - tx;
      double ys = (cosr * yr - sinr * xr) / p.scale;
      double xs = (sinr * yr + cosr * xr) / p.scale;
      double ysrc = ys + cy;
      double xsrc = p.flip ? (w - 1) - (xs + cx) : xs + cx;
      const auto y0 = static_cast<int64_t>(std::floor(ysrc));
      const auto x0 = static_cast<int64_t>(std::floor(xsrc));
      const double fy = ysrc - y0, fx = xsrc - x0;
      auto at = [&](int64_t yy, int64_t xx) -> double {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return acc_in[yy][xx];
      };
      acc[i][j] = at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                  at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Longitudinal pair sampling
// ---------------------------------------------------------------------------

enum class PairStrategy { kSameTime, kEarliestToLater, kAnyForward, kAnyPair };

inline const char* to_string(PairStrategy s) {
  switch (s) {
    case PairStrategy::kSameTime: return "same_time";
    case PairStrategy::kEarliestToLater: return "earliest_to_later";
    case PairStrategy::kAnyForward: return "any_forward";
    default: return "any_pair";
  }
}

struct PairSample {
  torch::Tensor x_a;  // encoder view
  torch::Tensor x_b;  // diffusion target
  double n_b = 0.0;   // acquisition time of x_b, minutes from onset
  PairStrategy strategy = PairStrategy::kSameTime;
};

// Scan index pair per strategy; ANY_FORWARD is uniform over {(i, j) : i <= j}.
inline std::pair<size_t, size_t> draw_pair_indices(size_t n_scans, PairStrategy strategy,
                                                   std::mt19937_64& rng) {
  switch (strategy) {
    case PairStrategy::kSameTime: {
      const size_t i = uniform_index(rng, n_scans);
      return {i, i};
    }
    case PairStrategy::kEarliestToLater:
      return {0, uniform_index(rng, n_scans)};
    case PairStrategy::kAnyForward: {
      const size_t k = uniform_index(rng, n_scans * (n_scans + 1) / 2);
      size_t i = 0, remaining = k;
      while (remaining >= n_scans - i) {
        remaining -= n_scans - i;
        ++i;
      }
      return {i, i + remaining};
    }
    default:
      return {uniform_index(rng, n_scans), uniform_index(rng, n_scans)};
  }
}

inline PairSample sample_pair(const ScanRecord& rec, PairStrategy strategy, std::mt19937_64& rng,
                              bool augment_on, const AugmentRanges& ranges = {},
                              double pixel_spacing_mm = 1.0) {
  if (rec.scans.empty()) throw std::invalid_argument("sample_pair: record has no scans");
  const auto [i, j] = draw_pair_indices(rec.scans.size(), strategy, rng);
  PairSample out;
  out.strategy = strategy;
  out.n_b = rec.scans[j].time_minutes;
  if (augment_on) {
    const auto pa = draw_augment_params(rng, ranges);
    const auto pb = draw_augment_params(rng, ranges);
    out.x_a = augment(rec.scans[i].image, pa, pixel_spacing_mm);
    out.x_b = augment(rec.scans[j].image, pb, pixel_spacing_mm);
  } else {
    out.x_a = rec.scans[i].image;
    out.x_b = rec.scans[j].image;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patient-level splits: fixed 20% test by hash, 5-fold CV on the remainder.
// ---------------------------------------------------------------------------

inline bool is_test_patient(const std::string& patient_id, uint64_t seed) {
  return fnv1a64(patient_id + "#test#" + std::to_string(seed)) % 5 == 0;
}

inline int cv_fold(const std::string& patient_id, uint64_t seed) {
  return static_cast<int>(fnv1a64(patient_id + "#fold#" + std::to_string(seed)) % 5);
}

// Order-independent digest of the test-patient ids, printed for provenance.
inline uint64_t split_hash(const CohortManifest& m, uint64_t seed) {
  uint64_t acc = 0;
  for (const auto& r : m.records)
    if (is_test_patient(r.patient_id, seed)) acc ^= fnv1a64(r.patient_id);
  return acc;
}

}  // namespace longidiff
