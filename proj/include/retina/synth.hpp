#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "retina/common.hpp"
#include "retina/dataset.hpp"
#include "retina/image.hpp"
#include "retina/png_io.hpp"

namespace retina {

// Desk-scale stand-in for a labeled fundus dataset: smooth random vessel
// curves over a textured, unevenly lit background. Veins run darker and wider;
// arteries are lighter and carry a bright central reflex line. Opposite-class
// crossings are flagged uncertain in the labels.
struct SynthSpec {
  int images = 40;
  int train_count = 30;
  int size = 128;
  int trees = 3;  // vessel trees per image, classes alternate artery/vein
  double width_min = 1.3;
  double width_max = 4.0;
  double noise = 0.012;
  double illumination = 0.28;  // radial gradient amplitude
  double texture = 0.035;      // low-frequency background texture amplitude
  std::uint64_t seed = 42;

  void validate() const {
    require(images >= 1 && trees >= 1, "synth: counts must be positive");
    require(train_count >= 0 && train_count <= images, "synth: bad train/test division");
    require(size >= 64, "synth: images must be at least 64 px");
    require(width_min >= 1.0 && width_max >= width_min, "synth: widths must be >= 1");
  }
};

namespace synth_detail {

struct CurveSpec {
  bool artery = false;
  double width = 2.0;
};

inline void stamp_disc(Raster<double>& cov, double py, double px, double radius) {
  int h = static_cast<int>(cov.rows()), w = static_cast<int>(cov.cols());
  int r = static_cast<int>(std::ceil(radius + 1.0));
  int y0 = std::max(0, static_cast<int>(std::floor(py)) - r);
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(py)) + r);
  int x0 = std::max(0, static_cast<int>(std::floor(px)) - r);
  int x1 = std::min(w - 1, static_cast<int>(std::ceil(px)) + r);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double d = std::hypot(y - py, x - px);
      double c = std::min(1.0, std::max(0.0, radius + 0.5 - d));
      if (c > cov(y, x)) cov(y, x) = c;
    }
}

// Traces one random-walk curve, stamping body coverage and (for arteries)
// the central reflex.
inline void trace_curve(Rng& rng, int size, const CurveSpec& spec, Raster<double>& body,
                        Raster<double>& reflex) {
  double margin = 6.0;
  int border = static_cast<int>(rng.below(4));
  double along = rng.uniform(0.15, 0.85) * size;
  double py, px, heading;
  switch (border) {
    case 0: py = margin; px = along; heading = M_PI / 2; break;           // top, heading down
    case 1: py = size - margin; px = along; heading = -M_PI / 2; break;   // bottom, heading up
    case 2: py = along; px = margin; heading = 0; break;                  // left, heading right
    default: py = along; px = size - margin; heading = M_PI; break;       // right, heading left
  }
  heading += rng.uniform(-0.5, 0.5);

  int length = static_cast<int>(rng.uniform(0.9, 1.4) * size);
  struct BranchPoint {
    double py, px, heading, width;
    int remaining;
  };
  std::vector<BranchPoint> branches;
  int branch_at = rng.uniform() < 0.7 ? static_cast<int>(rng.uniform(0.3, 0.6) * length) : -1;

  for (int t = 0; t < length; ++t) {
    double w = spec.width * (1.0 - 0.3 * t / length);
    stamp_disc(body, py, px, w / 2.0);
    if (spec.artery && w >= 1.6) stamp_disc(reflex, py, px, std::max(0.35, w / 6.0));
    if (t == branch_at)
      branches.push_back({py, px, heading + (rng.uniform() < 0.5 ? 1 : -1) * rng.uniform(0.45, 0.9),
                          w * 0.8, (length - t) / 2});
    heading += rng.uniform(-0.18, 0.18);
    // steer away from the frame border
    double cy = size / 2.0 - py, cx = size / 2.0 - px;
    if (py < margin || py > size - margin || px < margin || px > size - margin) {
      double to_center = std::atan2(cy, cx);
      double diff = std::remainder(to_center - heading, 2 * M_PI);
      heading += 0.35 * diff;
    }
    py += std::sin(heading);
    px += std::cos(heading);
    if (py < 1 || py >= size - 1 || px < 1 || px >= size - 1) break;
  }

  for (auto& b : branches) {
    double py2 = b.py, px2 = b.px, heading2 = b.heading;
    for (int t = 0; t < b.remaining; ++t) {
      double w = b.width * (1.0 - 0.3 * t / std::max(1, b.remaining));
      stamp_disc(body, py2, px2, w / 2.0);
      if (spec.artery && w >= 1.6) stamp_disc(reflex, py2, px2, std::max(0.35, w / 6.0));
      heading2 += rng.uniform(-0.18, 0.18);
      py2 += std::sin(heading2);
      px2 += std::cos(heading2);
      if (py2 < 1 || py2 >= size - 1 || px2 < 1 || px2 >= size - 1) break;
    }
  }
}

}  // namespace synth_detail

struct SynthImage {
  Rgb8Image image;
  Rgb8Image label;
  Mask artery, vein, uncertain;
};

inline SynthImage synth_image(const SynthSpec& spec, Rng& rng) {
  int n = spec.size;
  Raster<double> alpha_a = Raster<double>::Zero(n, n);
  Raster<double> alpha_v = Raster<double>::Zero(n, n);
  Raster<double> alpha_r = Raster<double>::Zero(n, n);

  // background illumination and texture
  double cy = rng.uniform(0.3, 0.7) * n, cx = rng.uniform(0.3, 0.7) * n;
  double rmax = std::hypot(n / 2.0, n / 2.0);
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    double freq = rng.uniform(0.5, 2.0) / n;
    double dir = rng.uniform(0, 2 * M_PI);
    waves.push_back({freq * std::sin(dir), freq * std::cos(dir), rng.uniform(0, 2 * M_PI),
                     spec.texture * rng.uniform(0.5, 1.0)});
  }
  std::array<double, 3> base = {0.82 + rng.uniform(-0.04, 0.04), 0.50 + rng.uniform(-0.04, 0.04),
                                0.32 + rng.uniform(-0.04, 0.04)};

  // vessels: classes alternate so both are always present for trees >= 2
  double wspan = spec.width_max - spec.width_min;
  for (int t = 0; t < spec.trees; ++t) {
    synth_detail::CurveSpec cs;
    cs.artery = t % 2 == 0;
    cs.width = cs.artery ? rng.uniform(spec.width_min + 0.1, spec.width_min + 0.6 * wspan)
                         : rng.uniform(spec.width_min + 0.45 * wspan, spec.width_max);
    synth_detail::trace_curve(rng, n, cs, cs.artery ? alpha_a : alpha_v, alpha_r);
  }

  const std::array<double, 3> col_a = {0.63, 0.27, 0.20};
  const std::array<double, 3> col_v = {0.40, 0.12, 0.11};
  const std::array<double, 3> col_r = {0.88, 0.56, 0.44};

  SynthImage out;
  out.image.height = out.image.width = n;
  out.image.pixels.resize(static_cast<size_t>(n) * n * 3);
  out.label.height = out.label.width = n;
  out.label.pixels.assign(static_cast<size_t>(n) * n * 3, 0);
  out.artery = Mask::Constant(n, n, false);
  out.vein = out.artery;
  out.uncertain = out.artery;

  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double r2 = std::hypot(y - cy, x - cx) / rmax;
      double light = 1.0 - spec.illumination * r2 * r2;
      double tex = 0;
      for (const auto& wv : waves) tex += wv.amp * std::cos(2 * M_PI * (wv.fy * y + wv.fx * x) + wv.phase);
      double av = alpha_a(y, x), vv = alpha_v(y, x), rv = alpha_r(y, x);
      std::uint8_t* px = out.image.pixels.data() + (static_cast<size_t>(y) * n + x) * 3;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] * (light + tex);
        v = v * (1 - vv) + col_v[c] * light * vv;
        v = v * (1 - av) + col_a[c] * light * av;
        v = v * (1 - rv) + col_r[c] * light * rv;
        v += spec.noise * rng.normal();
        px[c] = quantize_unit(std::min(1.0, std::max(0.0, v)));
      }
      bool is_a = av >= 0.5, is_v = vv >= 0.5;
      std::uint8_t* lp = out.label.pixels.data() + (static_cast<size_t>(y) * n + x) * 3;
      if (is_a && is_v) {
        out.uncertain(y, x) = true;
        lp[1] = 255;  // crossing
      } else if (is_a) {
        out.artery(y, x) = true;
        lp[0] = 255;
      } else if (is_v) {
        out.vein(y, x) = true;
        lp[2] = 255;
      }
    }
  return out;
}

// Writes the full dataset tree (images/, labels/, manifest.txt), deterministic
// per seed, and returns its index.
inline DatasetIndex synth_dataset(const SynthSpec& spec, const std::string& out_root) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_root) / "images", ec);
  fs::create_directories(fs::path(out_root) / "labels", ec);
  if (!fs::exists(fs::path(out_root) / "images")) fail("synth: cannot create ", out_root);

  Rng rng(spec.seed);
  std::vector<std::pair<std::string, std::string>> manifest;
  for (int i = 0; i < spec.images; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%03d", i);
    SynthImage si = synth_image(spec, rng);
    write_png_rgb8((fs::path(out_root) / "images" / (std::string(name) + ".png")).string(),
                   si.image.height, si.image.width, si.image.pixels.data());
    write_png_rgb8((fs::path(out_root) / "labels" / (std::string(name) + ".png")).string(),
                   si.label.height, si.label.width, si.label.pixels.data());
    manifest.emplace_back(name, i < spec.train_count ? "train" : "test");
  }
  write_manifest(out_root, manifest);
  return load_dataset(out_root);
}

}  // namespace retina
