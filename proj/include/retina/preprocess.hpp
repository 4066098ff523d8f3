#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "retina/common.hpp"
#include "retina/image.hpp"

namespace retina {

struct GaborBankParams {
  std::vector<double> scales{2.0, 3.0, 4.0};      // wavelet scales, pixels
  std::vector<double> orientations_deg;            // default 0..170 step 10
  double elongation = 4.0;
  std::array<double, 2> frequency{0.0, 3.0};       // offset (k_x, k_y)

  GaborBankParams() {
    for (int d = 0; d < 180; d += 10) orientations_deg.push_back(d);
  }

  void validate() const {
    require(!scales.empty(), "gabor: scale list empty");
    for (double a : scales) require(a > 0, "gabor: scales must be positive");
    require(!orientations_deg.empty(), "gabor: orientation list empty");
    require(elongation > 0, "gabor: elongation must be positive");
  }
};

struct LineDetectorParams {
  int window = 15;                     // odd
  std::vector<int> lengths;            // odd, <= window; default 1,3,...,window
  std::vector<double> orientations_deg;  // default 0..165 step 15

  LineDetectorParams() {
    for (int l = 1; l <= window; l += 2) lengths.push_back(l);
    for (int d = 0; d < 180; d += 15) orientations_deg.push_back(d);
  }

  void validate() const {
    require(window > 0 && window % 2 == 1, "line: window must be odd and positive");
    require(!lengths.empty(), "line: length list empty");
    for (int l : lengths)
      require(l > 0 && l % 2 == 1 && l <= window, "line: lengths must be odd and <= window");
    require(!orientations_deg.empty(), "line: orientation list empty");
  }
};

// Channel order of the standardized network input.
enum StackChannel : int {
  kStackR = 0, kStackG, kStackB,
  kStackRIc, kStackGIc, kStackBIc,
  kStackGabor, kStackLine,
  kStackChannels
};

template <class S>
struct InputStack {
  std::array<Raster<S>, kStackChannels> channels;
  std::array<double, kStackChannels> mean{};  // pre-standardization stats
  std::array<double, kStackChannels> stdev{};

  int height() const { return static_cast<int>(channels[0].rows()); }
  int width() const { return static_cast<int>(channels[0].cols()); }
};

inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

template <class S>
Raster<double> reflect_pad(const Raster<S>& src, int margin) {
  int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  Raster<double> out(h + 2 * margin, w + 2 * margin);
  for (int y = -margin; y < h + margin; ++y) {
    int sy = reflect101(y, h);
    for (int x = -margin; x < w + margin; ++x)
      out(y + margin, x + margin) = static_cast<double>(src(sy, reflect101(x, w)));
  }
  return out;
}

// Separable Gaussian with reflect padding, accumulated in double.
template <class S>
Raster<S> gaussian_blur(const Raster<S>& src, double sigma) {
  require(sigma > 0, "gaussian_blur: sigma must be positive");
  int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;

  Raster<double> tmp(h, w);
  parallel_range(h, [&](Eigen::Index lo, Eigen::Index hi) {
    for (Eigen::Index y = lo; y < hi; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * static_cast<double>(src(y, reflect101(x + i, w)));
        tmp(y, x) = acc;
      }
  });
  Raster<S> out(h, w);
  parallel_range(h, [&](Eigen::Index lo, Eigen::Index hi) {
    for (Eigen::Index y = lo; y < hi; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(reflect101(static_cast<int>(y) + i, h), x);
        out(y, x) = static_cast<S>(acc);
      }
  });
  return out;
}

// Large-sigma background subtraction with mean restoration, per channel:
// out = clip(in - blur(in, sigma) + mean(in), 0, 1).
template <class S>
FundusImage<S> illumination_correct(const FundusImage<S>& img, double background_sigma) {
  require(background_sigma > 0, "illumination_correct: sigma must be positive");
  FundusImage<S> out;
  out.fov = img.fov;
  for (int c = 0; c < 3; ++c) {
    Raster<S> blur = gaussian_blur(img.rgb[c], background_sigma);
    double mean = img.rgb[c].template cast<double>().mean();
    out.rgb[c] = (img.rgb[c].template cast<double>() - blur.template cast<double>() + mean)
                     .cwiseMax(0.0)
                     .cwiseMin(1.0)
                     .template cast<S>();
  }
  return out;
}

inline double default_background_sigma(int h, int w) { return std::max(h, w) / 30.0; }

namespace detail {

struct ComplexKernel {
  struct Tap {
    int dy, dx;
    double re, im;
  };
  std::vector<Tap> taps;
  int radius = 0;
};

// 2-D Gabor wavelet at one (scale, orientation), conjugated for correlation,
// L1 scale normalization, DC component removed so constant inputs respond 0.
inline ComplexKernel gabor_kernel(double scale, double theta_deg, double elongation,
                                  const std::array<double, 2>& k0) {
  ComplexKernel ker;
  double rad = theta_deg * M_PI / 180.0;
  double c = std::cos(rad), s = std::sin(rad);
  double spread = std::max(std::sqrt(elongation), 1.0);
  ker.radius = static_cast<int>(std::ceil(3.5 * spread * scale));
  double sum_re = 0, sum_im = 0;
  for (int dy = -ker.radius; dy <= ker.radius; ++dy)
    for (int dx = -ker.radius; dx <= ker.radius; ++dx) {
      double xr = (c * dx + s * dy) / scale;
      double yr = (-s * dx + c * dy) / scale;
      double env = std::exp(-0.5 * (xr * xr / elongation + yr * yr));
      if (env < 1e-10) continue;
      double phase = k0[0] * xr + k0[1] * yr;
      double re = env * std::cos(phase) / scale;
      double im = -env * std::sin(phase) / scale;
      ker.taps.push_back({dy, dx, re, im});
      sum_re += re;
      sum_im += im;
    }
  double n = static_cast<double>(ker.taps.size());
  for (auto& t : ker.taps) {
    t.re -= sum_re / n;
    t.im -= sum_im / n;
  }
  return ker;
}

}  // namespace detail

// Per-pixel maximum modulus of the Gabor wavelet response over all scales and
// orientations. Input is the inverted green channel in [0,1].
template <class S>
Raster<S> gabor_enhance(const Raster<S>& channel, const GaborBankParams& params) {
  params.validate();
  int h = static_cast<int>(channel.rows()), w = static_cast<int>(channel.cols());

  std::vector<detail::ComplexKernel> kernels;
  for (double a : params.scales)
    for (double th : params.orientations_deg)
      kernels.push_back(detail::gabor_kernel(a, th, params.elongation, params.frequency));

  int max_r = 0;
  for (const auto& k : kernels) max_r = std::max(max_r, k.radius);
  Raster<double> padded = reflect_pad(channel, max_r);

  std::vector<Raster<double>> responses(kernels.size());
  parallel_tasks(static_cast<int>(kernels.size()), [&](int ki) {
    const auto& ker = kernels[ki];
    Raster<double>& resp = responses[ki];
    resp.resize(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double re = 0, im = 0;
        for (const auto& t : ker.taps) {
          double v = padded(y + max_r + t.dy, x + max_r + t.dx);
          re += t.re * v;
          im += t.im * v;
        }
        resp(y, x) = std::sqrt(re * re + im * im);
      }
  });

  Raster<double> best = responses[0];
  for (size_t ki = 1; ki < responses.size(); ++ki) best = best.max(responses[ki]);
  return best.cast<S>();
}

// Multi-scale line detector: for each odd length L, the maximum over
// orientations of (mean along the length-L line) - (window mean), each map
// standardized; combined with the standardized input and averaged.
template <class S>
Raster<S> line_detect(const Raster<S>& channel, const LineDetectorParams& params) {
  params.validate();
  int h = static_cast<int>(channel.rows()), w = static_cast<int>(channel.cols());
  int half = params.window / 2;
  Raster<double> padded = reflect_pad(channel, half);

  // Integral image over the padded raster for window means.
  int ph = h + 2 * half, pw = w + 2 * half;
  Raster<double> integral(ph + 1, pw + 1);
  integral.setZero();
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x)
      integral(y + 1, x + 1) = padded(y, x) + integral(y, x + 1) + integral(y + 1, x) - integral(y, x);

  double win_area = static_cast<double>(params.window) * params.window;
  Raster<double> win_mean(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      win_mean(y, x) = (integral(y + params.window, x + params.window) - integral(y, x + params.window) -
                        integral(y + params.window, x) + integral(y, x)) /
                       win_area;

  auto standardized = [](const Raster<double>& m) {
    double mean = m.mean();
    double var = (m - mean).square().mean();
    if (var < 1e-24) return Raster<double>(Raster<double>::Zero(m.rows(), m.cols()));
    return Raster<double>(((m - mean) / std::sqrt(var)).eval());
  };

  std::vector<Raster<double>> rl(params.lengths.size());
  parallel_tasks(static_cast<int>(params.lengths.size()), [&](int li) {
    int len = params.lengths[li];
    int kmax = (len - 1) / 2;
    std::vector<std::vector<std::pair<int, int>>> offsets;
    for (double th : params.orientations_deg) {
      double rad = th * M_PI / 180.0;
      std::vector<std::pair<int, int>> offs;
      for (int k = -kmax; k <= kmax; ++k)
        offs.emplace_back(static_cast<int>(std::lround(k * std::sin(rad))),
                          static_cast<int>(std::lround(k * std::cos(rad))));
      offsets.push_back(std::move(offs));
      if (len == 1) break;  // all orientations identical
    }
    Raster<double> resp(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& offs : offsets) {
          double acc = 0;
          for (auto [dy, dx] : offs) acc += padded(y + half + dy, x + half + dx);
          best = std::max(best, acc / len);
        }
        resp(y, x) = best - win_mean(y, x);
      }
    rl[li] = standardized(resp);
  });

  Raster<double> acc = standardized(channel.template cast<double>());
  for (const auto& r : rl) acc += r;
  return (acc / static_cast<double>(params.lengths.size() + 1)).cast<S>();
}

// Assembles the 8-channel standardized input stack in the order
// [R,G,B, R_ic,G_ic,B_ic, gabor, line].
template <class S>
InputStack<S> build_stack(const FundusImage<S>& orig, const FundusImage<S>& ic,
                          const Raster<S>& gabor, const Raster<S>& line) {
  int h = orig.height(), w = orig.width();
  auto check = [&](int rh, int rw) {
    require(rh == h && rw == w, "build_stack: channel dimension mismatch");
  };
  check(ic.height(), ic.width());
  check(static_cast<int>(gabor.rows()), static_cast<int>(gabor.cols()));
  check(static_cast<int>(line.rows()), static_cast<int>(line.cols()));

  InputStack<S> stack;
  std::array<const Raster<S>*, kStackChannels> src = {
      &orig.rgb[0], &orig.rgb[1], &orig.rgb[2],
      &ic.rgb[0],   &ic.rgb[1],   &ic.rgb[2],
      &gabor,       &line};
  for (int c = 0; c < kStackChannels; ++c) {
    Raster<double> d = src[c]->template cast<double>();
    double mean = d.mean();
    double var = (d - mean).square().mean();
    stack.mean[c] = mean;
    stack.stdev[c] = std::sqrt(var);
    if (var < 1e-24)
      stack.channels[c] = Raster<S>::Zero(h, w);
    else
      stack.channels[c] = ((d - mean) / std::sqrt(var)).template cast<S>();
  }
  return stack;
}

// Standardized raw RGB only, for the RGB-input network variant. Channels 0-2
// match the full stack exactly; the enhanced channels stay empty.
template <class S>
InputStack<S> build_rgb_stack(const FundusImage<S>& orig) {
  InputStack<S> stack;
  for (int c = 0; c < 3; ++c) {
    Raster<double> d = orig.rgb[c].template cast<double>();
    double mean = d.mean();
    double var = (d - mean).square().mean();
    stack.mean[c] = mean;
    stack.stdev[c] = std::sqrt(var);
    if (var < 1e-24)
      stack.channels[c] = Raster<S>::Zero(orig.height(), orig.width());
    else
      stack.channels[c] = ((d - mean) / std::sqrt(var)).template cast<S>();
  }
  return stack;
}

struct PreprocessParams {
  double ic_sigma_divisor = 30.0;  // background sigma = max(H,W)/divisor
  GaborBankParams gabor;
  LineDetectorParams line;
};

// Full per-image pipeline: illumination correction, vessel enhancement on the
// inverted green channel, stack assembly.
template <class S>
InputStack<S> preprocess_image(const FundusImage<S>& img, const PreprocessParams& params) {
  double sigma = std::max(img.height(), img.width()) / params.ic_sigma_divisor;
  FundusImage<S> ic = illumination_correct(img, sigma);
  Raster<S> inv_green = (1.0 - ic.rgb[1].template cast<double>()).template cast<S>();
  Raster<S> gabor = gabor_enhance(inv_green, params.gabor);
  Raster<S> line = line_detect(inv_green, params.line);
  return build_stack(img, ic, gabor, line);
}

}  // namespace retina
