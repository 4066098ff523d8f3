#include <doctest.h>

#include "retina/preprocess.hpp"

using namespace retina;

namespace {

// Independent dense 2-D Gaussian blur with reflect padding, for checking the
// separable implementation.
Raster<double> dense_gaussian_oracle(const Raster<double>& src, double sigma) {
  int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  int r = static_cast<int>(std::ceil(3.0 * sigma));
  Raster<double> kernel(2 * r + 1, 2 * r + 1);
  double sum = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      sum += kernel(dy + r, dx + r) = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
  kernel /= sum;
  Raster<double> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          acc += kernel(dy + r, dx + r) * src(reflect101(y + dy, h), reflect101(x + dx, w));
      out(y, x) = acc;
    }
  return out;
}

FundusImage<double> uniform_image(int h, int w, double v) {
  FundusImage<double> img;
  for (int c = 0; c < 3; ++c) img.rgb[c] = Raster<double>::Constant(h, w, v);
  return img;
}

Raster<double> random_raster(int h, int w, std::uint64_t seed, double lo = 0, double hi = 1) {
  Rng rng(seed);
  Raster<double> r(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) r(y, x) = rng.uniform(lo, hi);
  return r;
}

double interior_std(const Raster<double>& m, int margin) {
  auto block = m.block(margin, margin, m.rows() - 2 * margin, m.cols() - 2 * margin);
  double mean = block.mean();
  return std::sqrt((block - mean).square().mean());
}

Raster<double> rot90(const Raster<double>& m) {
  int n = static_cast<int>(m.rows());
  Raster<double> out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) out(y, x) = m(x, n - 1 - y);
  return out;
}

}  // namespace

TEST_CASE("gaussian blur matches the dense oracle on random input") {
  auto src = random_raster(32, 32, 11);
  auto fast = gaussian_blur(src, 2.3);
  auto oracle = dense_gaussian_oracle(src, 2.3);
  CHECK((fast - oracle).abs().maxCoeff() < 1e-6);
}

TEST_CASE("illumination correction leaves uniform images unchanged") {
  auto img = uniform_image(24, 30, 0.42);
  auto out = illumination_correct(img, default_background_sigma(24, 30));
  for (int c = 0; c < 3; ++c) CHECK((out.rgb[c] - 0.42).abs().maxCoeff() <= 1e-6);
}

TEST_CASE("illumination correction flattens a luminance ramp") {
  int h = 48, w = 48;
  FundusImage<double> img;
  for (int c = 0; c < 3; ++c) {
    img.rgb[c].resize(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.rgb[c](y, x) = 0.25 + 0.5 * x / (w - 1);
  }
  double sigma = default_background_sigma(h, w);
  auto out = illumination_correct(img, sigma);
  int margin = static_cast<int>(std::ceil(3 * sigma)) + 1;

  // oracle route: dense blur, same correction formula
  Raster<double> oracle =
      (img.rgb[0] - dense_gaussian_oracle(img.rgb[0], sigma) + img.rgb[0].mean())
          .cwiseMax(0.0)
          .cwiseMin(1.0);
  CHECK(interior_std(oracle, margin) < interior_std(img.rgb[0], margin));
  for (int c = 0; c < 3; ++c) {
    CHECK(interior_std(out.rgb[c], margin) < interior_std(img.rgb[c], margin));
    CHECK((out.rgb[c] - oracle).abs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("illumination correction output stays in [0,1] and rejects bad sigma") {
  FundusImage<double> img;
  for (int c = 0; c < 3; ++c) img.rgb[c] = random_raster(20, 20, 5 + c);
  auto out = illumination_correct(img, 2.0);
  for (int c = 0; c < 3; ++c) {
    CHECK(out.rgb[c].minCoeff() >= 0.0);
    CHECK(out.rgb[c].maxCoeff() <= 1.0);
  }
  CHECK_THROWS_AS(illumination_correct(img, 0.0), std::runtime_error);
}

TEST_CASE("gabor bank responds zero to constant input") {
  GaborBankParams params;
  auto resp = gabor_enhance(Raster<double>(Raster<double>::Constant(40, 40, 0.37)), params);
  CHECK(resp.abs().maxCoeff() < 1e-9);
}

TEST_CASE("gabor bank highlights a thin bright line") {
  int n = 64;
  Raster<double> img = Raster<double>::Constant(n, n, 0.1);
  img.col(31) = 0.9;
  img.col(32) = 0.9;
  GaborBankParams params;
  auto resp = gabor_enhance(img, params);
  double on_line = resp(32, 31);
  double off_line = resp(32, 21);  // 10 px away
  CHECK(on_line > 0);
  CHECK(on_line >= 5.0 * off_line);
}

TEST_CASE("gabor max-response map commutes with 90-degree rotation") {
  int n = 64;
  auto img = random_raster(n, n, 21);
  GaborBankParams params;
  auto resp = gabor_enhance(img, params);
  auto resp_rot = gabor_enhance(Raster<double>(rot90(img)), params);
  auto expected = rot90(resp);
  int margin = 29;  // max kernel radius + 1
  double worst = 0;
  for (int y = margin; y < n - margin; ++y)
    for (int x = margin; x < n - margin; ++x)
      worst = std::max(worst, std::abs(resp_rot(y, x) - expected(y, x)));
  CHECK(worst < 1e-6);
}

TEST_CASE("line detector: constant input maps to zero, dimensions preserved") {
  LineDetectorParams params;
  auto out = line_detect(Raster<double>(Raster<double>::Constant(25, 31, 0.6)), params);
  CHECK(out.rows() == 25);
  CHECK(out.cols() == 31);
  CHECK(out.abs().maxCoeff() < 1e-12);
}

TEST_CASE("line detector matches a brute-force window-mean oracle") {
  // reduced bank: one length, one orientation, so the oracle is direct
  LineDetectorParams params;
  params.window = 15;
  params.lengths = {15};
  params.orientations_deg = {0.0};
  auto img = random_raster(21, 23, 33);
  auto out = line_detect(img, params);

  int half = 7;
  Raster<double> resp(21, 23);
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 23; ++x) {
      double line = 0;
      for (int k = -7; k <= 7; ++k) line += img(y, reflect101(x + k, 23));
      double win = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx)
          win += img(reflect101(y + dy, 21), reflect101(x + dx, 23));
      resp(y, x) = line / 15.0 - win / 225.0;
    }
  auto standardize = [](const Raster<double>& m) {
    double mean = m.mean();
    double sd = std::sqrt((m - mean).square().mean());
    return Raster<double>(((m - mean) / sd).eval());
  };
  Raster<double> expected = (standardize(resp) + standardize(img)) / 2.0;
  CHECK((out - expected).abs().maxCoeff() < 1e-9);
}

TEST_CASE("line detector lights up a bright horizontal line") {
  int n = 33;
  Raster<double> img = Raster<double>::Constant(n, n, 0.0);
  img.row(16) = 1.0;
  LineDetectorParams params;
  auto out = line_detect(img, params);
  double off_max = -1e9;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      if (std::abs(y - 16) > 2) off_max = std::max(off_max, out(y, x));
  for (int x = 8; x < n - 8; ++x) {
    CHECK(out(16, x) > 0);
    CHECK(out(16, x) > off_max);
  }
}

TEST_CASE("build_stack standardizes 8 channels and zeroes constant ones") {
  int h = 20, w = 24;
  FundusImage<double> orig, ic;
  for (int c = 0; c < 3; ++c) {
    orig.rgb[c] = random_raster(h, w, 100 + c);
    ic.rgb[c] = random_raster(h, w, 200 + c);
  }
  Raster<double> gabor = Raster<double>::Constant(h, w, 0.0);  // all-background image
  Raster<double> line = random_raster(h, w, 300, -2, 3);
  auto stack = build_stack(orig, ic, gabor, line);

  for (int c = 0; c < kStackChannels; ++c) {
    double mean = stack.channels[c].mean();
    double sd = std::sqrt((stack.channels[c] - mean).square().mean());
    if (c == kStackGabor) {
      CHECK(stack.channels[c].abs().maxCoeff() == 0.0);
    } else {
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(sd - 1.0) <= 1e-6);
    }
  }

  Raster<double> wrong = random_raster(h + 1, w, 9);
  CHECK_THROWS_AS(build_stack(orig, ic, wrong, line), std::runtime_error);
}

TEST_CASE("filters are translation-equivariant on interior pixels") {
  // A compact random blob on a constant background, shifted by (dy,dx). The
  // blob stays far enough from the borders that padding and the global
  // standardization statistics are unchanged by the shift.
  int n = 48, dy = 3, dx = 5;
  auto blob = random_raster(14, 14, 55);
  auto place = [&](int y0, int x0) {
    Raster<double> img = Raster<double>::Constant(n, n, 0.4);
    img.block(y0, x0, 14, 14) = blob;
    return img;
  };
  auto img_a = place(12, 12);
  auto img_b = place(12 + dy, 12 + dx);

  auto check_shifted = [&](const Raster<double>& a, const Raster<double>& b, int margin) {
    double worst = 0;
    for (int y = margin; y + dy < n - margin; ++y)
      for (int x = margin; x + dx < n - margin; ++x)
        worst = std::max(worst, std::abs(b(y + dy, x + dx) - a(y, x)));
    CHECK(worst < 1e-6);
  };

  GaborBankParams gp;
  gp.scales = {1.5};
  int r = static_cast<int>(std::ceil(3.5 * std::sqrt(gp.elongation) * 1.5));
  check_shifted(gabor_enhance(img_a, gp), gabor_enhance(img_b, gp), r);

  LineDetectorParams lp;
  check_shifted(line_detect(img_a, lp), line_detect(img_b, lp), lp.window / 2);

  FundusImage<double> fa, fb;
  for (int c = 0; c < 3; ++c) {
    fa.rgb[c] = img_a;
    fb.rgb[c] = img_b;
  }
  double sigma = default_background_sigma(n, n);
  auto ia = illumination_correct(fa, sigma);
  auto ib = illumination_correct(fb, sigma);
  check_shifted(ia.rgb[1], ib.rgb[1], static_cast<int>(std::ceil(3 * sigma)) + 1);
}

TEST_CASE("gabor bank validates parameters") {
  GaborBankParams p;
  p.scales.clear();
  CHECK_THROWS_AS(gabor_enhance(Raster<double>(Raster<double>::Zero(8, 8)), p), std::runtime_error);
  LineDetectorParams lp;
  lp.window = 14;
  CHECK_THROWS_AS(line_detect(Raster<double>(Raster<double>::Zero(8, 8)), lp), std::runtime_error);
}
