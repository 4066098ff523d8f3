#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "retina/common.hpp"
#include "retina/png_io.hpp"

namespace retina {

template <class S>
struct FundusImage {
  std::array<Raster<S>, 3> rgb;  // channels in [0,1]
  std::optional<Mask> fov;       // absent means the whole frame is in view

  int height() const { return static_cast<int>(rgb[0].rows()); }
  int width() const { return static_cast<int>(rgb[0].cols()); }
  bool in_fov(int y, int x) const { return !fov || (*fov)(y, x); }
};

struct LabelTriMap {
  Mask vessel;
  Mask artery;
  Mask vein;
  Mask uncertain;  // crossings and unknown-class vessel pixels

  int height() const { return static_cast<int>(vessel.rows()); }
  int width() const { return static_cast<int>(vessel.cols()); }
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

// Pure-color label convention; configurable per dataset.
struct AvColorTable {
  Rgb artery{255, 0, 0};
  Rgb vein{0, 0, 255};
  Rgb crossing{0, 255, 0};          // decoded as uncertain vessel
  Rgb uncertain{255, 255, 255};     // unknown-class vessel
  Rgb background{0, 0, 0};
};

template <class S>
FundusImage<S> image_from_rgb8(const Rgb8Image& raw) {
  FundusImage<S> img;
  for (int c = 0; c < 3; ++c) img.rgb[c].resize(raw.height, raw.width);
  const std::uint8_t* p = raw.pixels.data();
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x, p += 3)
      for (int c = 0; c < 3; ++c)
        img.rgb[c](y, x) = static_cast<S>(p[c]) / static_cast<S>(255);
  return img;
}

template <class S>
FundusImage<S> load_image(const std::string& path) {
  return image_from_rgb8<S>(read_png_rgb8(path));
}

inline Mask load_mask(const std::string& path) {
  Rgb8Image raw = read_png_rgb8(path);
  Mask m(raw.height, raw.width);
  const std::uint8_t* p = raw.pixels.data();
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x, p += 3) m(y, x) = p[0] > 127;
  return m;
}

// Decodes a color-coded A/V label raster. In strict mode an unlisted color is
// an error (with pixel coordinates); in lenient mode it maps to background.
inline LabelTriMap decode_av_label(const Rgb8Image& raw, const AvColorTable& table = {},
                                   bool strict = true) {
  LabelTriMap lab;
  lab.vessel = Mask::Constant(raw.height, raw.width, false);
  lab.artery = lab.vessel;
  lab.vein = lab.vessel;
  lab.uncertain = lab.vessel;
  const std::uint8_t* p = raw.pixels.data();
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x, p += 3) {
      Rgb c{p[0], p[1], p[2]};
      if (c == table.background) continue;
      if (c == table.artery) {
        lab.artery(y, x) = lab.vessel(y, x) = true;
      } else if (c == table.vein) {
        lab.vein(y, x) = lab.vessel(y, x) = true;
      } else if (c == table.crossing || c == table.uncertain) {
        lab.uncertain(y, x) = lab.vessel(y, x) = true;
      } else if (strict) {
        fail("decode_av_label: unknown color (", int(c.r), ",", int(c.g), ",", int(c.b),
             ") at pixel (", y, ",", x, ")");
      }
    }
  }
  return lab;
}

inline LabelTriMap load_av_label(const std::string& path, const AvColorTable& table = {},
                                 bool strict = true) {
  return decode_av_label(read_png_rgb8(path), table, strict);
}

// Byte quantization used for all raster exports: round half up.
inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

template <class S>
void write_gray_map(const Raster<S>& map, const std::string& path) {
  int h = static_cast<int>(map.rows()), w = static_cast<int>(map.cols());
  std::vector<std::uint8_t> bytes(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = static_cast<double>(map(y, x));
      if (!(v >= 0.0 && v <= 1.0))
        fail("write_gray_map: value ", v, " at (", y, ",", x, ") outside [0,1]");
      bytes[static_cast<size_t>(y) * w + x] = quantize_unit(v);
    }
  write_png_gray8(path, h, w, bytes.data());
}

// Renders per-pixel (vessel, artery, vein) decisions: artery red, vein blue,
// vessel-only white, background black.
inline void write_av_overlay(const Mask& vessel, const Mask& artery, const Mask& vein,
                             const std::string& path) {
  int h = static_cast<int>(vessel.rows()), w = static_cast<int>(vessel.cols());
  std::vector<std::uint8_t> bytes(static_cast<size_t>(h) * w * 3, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (artery(y, x) && vein(y, x)) fail("write_av_overlay: pixel (", y, ",", x, ") is both artery and vein");
      std::uint8_t* px = bytes.data() + (static_cast<size_t>(y) * w + x) * 3;
      if (artery(y, x)) {
        px[0] = 255;
      } else if (vein(y, x)) {
        px[2] = 255;
      } else if (vessel(y, x)) {
        px[0] = px[1] = px[2] = 255;
      }
    }
  write_png_rgb8(path, h, w, bytes.data());
}

inline void write_av_overlay(const LabelTriMap& lab, const std::string& path) {
  write_av_overlay(lab.vessel, lab.artery, lab.vein, path);
}

}  // namespace retina
