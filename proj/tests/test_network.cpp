#include <doctest.h>

#include <cstring>

#include "retina/gradcheck_suite.hpp"
#include "retina/network.hpp"

using namespace retina;

namespace {

// Independent per-layer shape enumeration of the parameter count.
long long expected_param_count(int I, int W, bool multitask) {
  auto conv = [](long long cin, long long cout, long long k) { return cout * cin * k * k + cout; };
  auto bare_conv = [](long long cin, long long cout, long long k) { return cout * cin * k * k; };
  auto norm = [](long long ch) { return 2 * ch; };
  // residual and decoder convs feed a normalization layer and carry no bias
  auto block = [&](long long cin, long long cout, bool proj) {
    long long n = bare_conv(cin, cout, 3) + norm(cout) + bare_conv(cout, cout, 3) + norm(cout);
    if (proj) n += bare_conv(cin, cout, 1) + norm(cout);
    return n;
  };
  long long total = conv(I, 4 * W, 3) + conv(4 * W, 3, 1) + conv(3, W, 3);
  total += block(W, W, false) + block(W, W, false);               // stage 1
  total += block(W, 2 * W, true) + block(2 * W, 2 * W, false);    // stage 2
  total += block(2 * W, 4 * W, true) + block(4 * W, 4 * W, false);
  total += block(4 * W, 8 * W, true) + block(8 * W, 8 * W, false);
  if (multitask) total += conv(W, 3, 1) + conv(2 * W, 3, 1) + conv(4 * W, 3, 1);
  auto dec = [&](long long cin, long long cout) {
    return bare_conv(cin, cout, 3) + norm(cout) + bare_conv(cout, cout, 3) + norm(cout);
  };
  total += dec(12 * W, 4 * W) + dec(6 * W, 2 * W) + dec(3 * W, W);
  if (multitask)
    total += conv(W, W, 3) + conv(W, 1, 1) + conv(W, W, 3) + conv(2 * W, 2, 1);
  else
    total += conv(W, W, 3) + conv(W, 2, 1);
  return total;
}

ad::Tensor<float> random_input(int n, int c, int hw, std::uint64_t seed) {
  Rng rng(seed);
  VecX<float> v(Eigen::Index(n) * c * hw * hw);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.normal());
  return ad::Tensor<float>::from({n, c, hw, hw}, std::move(v));
}

}  // namespace

TEST_CASE("spatial activation: exact endpoints, peak, symmetry, unimodality") {
  CHECK(std::abs(spatial_activation_value(0.0, 1.0) - 1.0) < 1e-12);
  CHECK(std::abs(spatial_activation_value(1.0, 1.0) - 1.0) < 1e-12);

  double peak = 1.0 + spatial_activation_peak(1.0);
  CHECK(peak == doctest::Approx(1.221199).epsilon(1e-6));

  double max_seen = 0;
  double argmax = -1;
  for (int i = 0; i <= 1000; ++i) {
    double x = i / 1000.0;
    double m = spatial_activation_value(x, 1.0);
    if (m > max_seen) {
      max_seen = m;
      argmax = x;
    }
  }
  CHECK(argmax == 0.5);
  CHECK(std::abs(max_seen - peak) < 1e-9);

  for (int i = 0; i <= 500; ++i) {
    double d = i / 1000.0;
    CHECK(std::abs(spatial_activation_value(0.5 + d, 1.0) - spatial_activation_value(0.5 - d, 1.0)) <=
          1e-12);
  }
  for (int i = 1; i <= 500; ++i) {
    CHECK(spatial_activation_value(i / 1000.0, 1.0) > spatial_activation_value((i - 1) / 1000.0, 1.0));
    CHECK(spatial_activation_value(0.5 + i / 1000.0, 1.0) <
          spatial_activation_value(0.5 + (i - 1) / 1000.0, 1.0));
  }
}

TEST_CASE("network builds deterministically from the seed") {
  NetworkConfig cfg;
  cfg.width = 4;
  cfg.patch = 16;
  Network<float> a(cfg, 77), b(cfg, 77), c(cfg, 78);
  REQUIRE(a.params().entries.size() == b.params().entries.size());
  bool all_equal = true, any_diff_seed = false;
  for (size_t i = 0; i < a.params().entries.size(); ++i) {
    const auto& ta = a.params().entries[i].tensor.values();
    const auto& tb = b.params().entries[i].tensor.values();
    all_equal = all_equal &&
                std::memcmp(ta.data(), tb.data(), sizeof(float) * ta.size()) == 0;
    const auto& tc = c.params().entries[i].tensor.values();
    any_diff_seed = any_diff_seed ||
                    std::memcmp(ta.data(), tc.data(), sizeof(float) * ta.size()) != 0;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
}

TEST_CASE("parameter count matches the shape enumeration") {
  for (bool mt : {true, false})
    for (int in_ch : {8, 3}) {
      NetworkConfig cfg;
      cfg.width = 16;
      cfg.input_channels = in_ch;
      cfg.multitask = mt;
      Network<float> net(cfg, 1);
      CHECK(net.params().count() == expected_param_count(in_ch, 16, mt));
    }
}

TEST_CASE("conv weights follow He-normal statistics") {
  NetworkConfig cfg;  // desk width 16
  Network<float> net(cfg, 42);
  int checked = 0;
  for (const auto& e : net.params().entries) {
    if (e.name.size() < 2 || e.name.substr(e.name.size() - 2) != ".w") continue;
    if (e.tensor.size() < 512 || e.tensor.shape().size() != 4) continue;
    if (e.tensor.values().abs().maxCoeff() == 0.0f) continue;  // zero-initialized heads
    const auto& s = e.tensor.shape();
    double fan_in = double(s[1]) * s[2] * s[3];
    double expected = std::sqrt(2.0 / fan_in);
    double mean = e.tensor.values().template cast<double>().mean();
    double sd = std::sqrt((e.tensor.values().template cast<double>() - mean).square().mean());
    INFO(e.name);
    CHECK(std::abs(sd / expected - 1.0) <= 0.10);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("forward produces the documented output shapes and ranges") {
  NetworkConfig cfg;  // width 16, patch 64, multitask
  Network<float> net(cfg, 5);
  auto x = random_input(2, 8, 64, 9);
  ad::NoGradGuard ng;
  auto out = net.forward(x, true);  // train mode: batch statistics keep logits moderate
  CHECK(out.vessel.shape() == std::vector<int>{2, 1, 64, 64});
  CHECK(out.av.shape() == std::vector<int>{2, 2, 64, 64});
  REQUIRE(out.sides.size() == 3);
  for (const auto& s : out.sides) CHECK(s.shape() == std::vector<int>{2, 3, 64, 64});

  CHECK(out.vessel.values().minCoeff() > 0.0f);
  CHECK(out.vessel.values().maxCoeff() < 1.0f);
  CHECK(out.av.values().minCoeff() > 0.0f);
  CHECK(out.av.values().maxCoeff() < 1.0f);
  CHECK(out.activation.values().minCoeff() >= 1.0f);
  CHECK(out.activation.values().maxCoeff() <= 1.221200f);
}

TEST_CASE("sigma 0 makes the activation map exactly one") {
  NetworkConfig cfg;
  cfg.width = 4;
  cfg.patch = 16;
  cfg.sigma = 0.0;
  Network<float> net(cfg, 5);
  ad::NoGradGuard ng;
  auto out = net.forward(random_input(1, 8, 16, 2), false);
  for (Eigen::Index i = 0; i < out.activation.size(); ++i) CHECK(out.activation.values()[i] == 1.0f);
}

TEST_CASE("eval-mode forward is independent of batch composition") {
  NetworkConfig cfg;
  cfg.width = 4;
  cfg.patch = 16;
  Network<float> net(cfg, 31);
  auto batch = random_input(3, 8, 16, 7);
  ad::NoGradGuard ng;
  auto out_batch = net.forward(batch, false);
  Eigen::Index pp = 16 * 16;
  for (int n = 0; n < 3; ++n) {
    VecX<float> single = batch.values().segment(Eigen::Index(n) * 8 * pp, 8 * pp);
    auto out_one = net.forward(ad::Tensor<float>::from({1, 8, 16, 16}, single), false);
    CHECK(std::memcmp(out_one.av.values().data(), out_batch.av.values().data() + Eigen::Index(n) * 2 * pp,
                      sizeof(float) * 2 * pp) == 0);
    CHECK(std::memcmp(out_one.vessel.values().data(),
                      out_batch.vessel.values().data() + Eigen::Index(n) * pp,
                      sizeof(float) * pp) == 0);
  }
}

TEST_CASE("plain-head variant omits vessel branch, sides, and activation") {
  NetworkConfig cfg;
  cfg.width = 4;
  cfg.patch = 16;
  cfg.multitask = false;
  cfg.input_channels = 3;
  Network<float> net(cfg, 3);
  ad::NoGradGuard ng;
  auto out = net.forward(random_input(1, 3, 16, 4), false);
  CHECK_FALSE(static_cast<bool>(out.vessel));
  CHECK_FALSE(static_cast<bool>(out.activation));
  CHECK(out.sides.empty());
  CHECK(out.av.shape() == std::vector<int>{1, 2, 16, 16});
}

TEST_CASE("config validation rejects bad settings") {
  NetworkConfig cfg;
  cfg.patch = 20;
  CHECK_THROWS_AS(Network<float>(cfg, 1), std::runtime_error);
  cfg = {};
  cfg.sigma = -1;
  CHECK_THROWS_AS(Network<float>(cfg, 1), std::runtime_error);
  Network<float> ok({}, 1);
  CHECK_THROWS_AS(ok.forward(random_input(1, 8, 32, 3), false), std::runtime_error);
}

TEST_CASE("small network end-to-end gradient check") {
  auto r = network_gradcheck(/*seeds=*/1, /*coords_per_tensor=*/1);
  CHECK(r.max_rel_err < 1e-4);
}
