#pragma once

#include <string>
#include <vector>

#include "retina/autodiff.hpp"
#include "retina/network.hpp"
#include "retina/training.hpp"

namespace retina {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 1e-6;
  bool pass() const { return max_rel_err < tolerance; }
};

namespace gradcheck_detail {

using T = ad::Tensor<double>;

inline VecX<double> random_vec(Rng& rng, Eigen::Index n, double lo, double hi) {
  VecX<double> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

// Away from zero, for kinked ops.
inline VecX<double> random_signed(Rng& rng, Eigen::Index n) {
  VecX<double> v(n);
  for (Eigen::Index i = 0; i < n; ++i)
    v[i] = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);
  return v;
}

}  // namespace gradcheck_detail

// Finite-difference checks for every differentiable operation, across the
// given seeds. 64-bit only; tolerances are meaningless in f32.
inline std::vector<GradCheckResult> op_gradcheck_suite(int seeds = 20) {
  using namespace gradcheck_detail;
  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& name, double err, double tol = 1e-6) {
    for (auto& r : results)
      if (r.name == name) {
        r.max_rel_err = std::max(r.max_rel_err, err);
        return;
      }
    results.push_back({name, err, tol});
  };

  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(1000 + seed);

    {  // conv2d stride 1 and 2, gradients w.r.t. input, weight, bias
      auto x = T::from({1, 2, 5, 5}, random_signed(rng, 50), true);
      auto w = T::from({3, 2, 3, 3}, random_signed(rng, 54), true);
      auto b = T::from({3}, random_signed(rng, 3), true);
      auto f_x = [&](T& t) { return ad::sum(ad::conv2d(t, w, b, 1, 1)); };
      record("conv2d.input", ad::grad_check(f_x, x));
      auto f_w = [&](T& t) { return ad::sum(ad::conv2d(x, t, b, 1, 1)); };
      record("conv2d.weight", ad::grad_check(f_w, w));
      auto f_b = [&](T& t) { return ad::sum(ad::conv2d(x, w, t, 1, 1)); };
      record("conv2d.bias", ad::grad_check(f_b, b));
      auto x2 = T::from({2, 2, 6, 6}, random_signed(rng, 144), true);
      auto f_s2 = [&](T& t) { return ad::sum(ad::sigmoid(ad::conv2d(t, w, b, 2, 1))); };
      record("conv2d.stride2+sigmoid", ad::grad_check(f_s2, x2));
    }
    {  // elementwise
      auto x = T::from({2, 3, 4, 4}, random_signed(rng, 96), true);
      auto f_relu = [&](T& t) { return ad::sum(ad::relu(t)); };
      record("relu", ad::grad_check(f_relu, x));
      auto f_sig = [&](T& t) { return ad::sum(ad::sigmoid(t)); };
      record("sigmoid", ad::grad_check(f_sig, x));
      auto f_aff = [&](T& t) { return ad::sum(ad::scalar_affine(t, 2.5, -0.75)); };
      record("scalar_affine", ad::grad_check(f_aff, x));
      auto g = T::from({2, 1, 4, 4}, random_vec(rng, 32, 0.05, 0.95), true);
      auto f_gauss = [&](T& t) { return ad::sum(ad::gauss_act(t, 1.0)); };
      record("gauss_act", ad::grad_check(f_gauss, g));
      auto y = T::from({2, 3, 4, 4}, random_signed(rng, 96), true);
      auto bcast = T::from({2, 1, 4, 4}, random_signed(rng, 32), true);
      auto f_add = [&](T& t) { return ad::sum(ad::mul(ad::add(t, bcast), y)); };
      record("add.broadcast", ad::grad_check(f_add, x));
      auto f_mulb = [&](T& t) { return ad::sum(ad::mul(x, t)); };
      record("mul.broadcast", ad::grad_check(f_mulb, bcast));
      auto f_sum = [&](T& t) { return ad::sum(t); };
      record("sum", ad::grad_check(f_sum, x));
    }
    {  // structure
      auto x = T::from({1, 2, 3, 3}, random_signed(rng, 18), true);
      auto f_up = [&](T& t) { return ad::sum(ad::sigmoid(ad::upsample_nearest2x(t))); };
      record("upsample_nearest2x", ad::grad_check(f_up, x));
      auto y = T::from({1, 3, 3, 3}, random_signed(rng, 27), true);
      auto f_cat_a = [&](T& t) { return ad::sum(ad::sigmoid(ad::concat_channels(t, y))); };
      record("concat_channels.a", ad::grad_check(f_cat_a, x));
      auto f_cat_b = [&](T& t) { return ad::sum(ad::sigmoid(ad::concat_channels(x, t))); };
      record("concat_channels.b", ad::grad_check(f_cat_b, y));
    }
    {  // batchnorm; a fixed weighting keeps gradients away from the
       // mean-removal null space
      auto x = T::from({2, 3, 4, 4}, random_signed(rng, 96), true);
      auto gamma = T::from({3}, random_vec(rng, 3, 0.5, 1.5), true);
      auto beta = T::from({3}, random_signed(rng, 3), true);
      auto wts = T::from({2, 3, 4, 4}, random_signed(rng, 96));
      ad::BNState<double> st = ad::BNState<double>::init(3);
      auto f_x = [&](T& t) {
        return ad::sum(ad::mul(ad::sigmoid(ad::batchnorm2d(t, gamma, beta, st, true)), wts));
      };
      record("batchnorm2d.train.input", ad::grad_check(f_x, x), 1e-5);
      auto f_g = [&](T& t) {
        return ad::sum(ad::mul(ad::sigmoid(ad::batchnorm2d(x, t, beta, st, true)), wts));
      };
      record("batchnorm2d.train.gamma", ad::grad_check(f_g, gamma), 1e-5);
      auto f_b = [&](T& t) {
        return ad::sum(ad::mul(ad::sigmoid(ad::batchnorm2d(x, gamma, t, st, true)), wts));
      };
      record("batchnorm2d.train.beta", ad::grad_check(f_b, beta), 1e-5);
      ad::BNState<double> st2 = ad::BNState<double>::init(3);
      st2.running_mean = random_signed(rng, 3);
      st2.running_var = random_vec(rng, 3, 0.5, 2.0);
      auto f_e = [&](T& t) { return ad::sum(ad::sigmoid(ad::batchnorm2d(t, gamma, beta, st2, false))); };
      record("batchnorm2d.eval.input", ad::grad_check(f_e, x));
    }
    {  // weighted BCE
      LossWeights w;
      auto flags = std::make_shared<VecX<double>>(48);
      auto valid = std::make_shared<VecX<double>>(48);
      for (Eigen::Index i = 0; i < 48; ++i) {
        (*flags)[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        (*valid)[i] = rng.uniform() < 0.85 ? 1.0 : 0.0;
      }
      BceTarget<double> tgt{flags, valid, 3};
      auto p = T::from({1, 3, 4, 4}, random_vec(rng, 48, 0.1, 0.9), true);
      auto f = [&](T& t) { return weighted_bce(t, tgt, w); };
      record("weighted_bce", ad::grad_check(f, p));
      auto f_lit = [&](T& t) { return weighted_bce(t, tgt, w, /*literal=*/true); };
      record("weighted_bce.literal", ad::grad_check(f_lit, p));
    }
    {  // spatial activation through the A/V fusion path
      auto x = T::from({1, 1, 4, 4}, random_vec(rng, 16, 0.05, 0.95), true);
      auto feats = T::from({1, 4, 4, 4}, random_signed(rng, 64), true);
      auto f = [&](T& t) { return ad::sum(ad::mul(feats, spatial_activation(t, 1.0))); };
      record("spatial_activation.fusion", ad::grad_check(f, x));
    }
  }
  return results;
}

// End-to-end check on the small 16x16-patch, width-4 variant: every parameter
// tensor against finite differences on sampled coordinates.
inline GradCheckResult network_gradcheck(int seeds = 20, int coords_per_tensor = 2) {
  GradCheckResult result{"network.w4p16", 0, 1e-4};
  for (int seed = 0; seed < seeds; ++seed) {
    NetworkConfig cfg;
    cfg.width = 4;
    cfg.patch = 16;
    cfg.input_channels = 8;
    cfg.sigma = 1.0;
    Network<double> net(cfg, 9000 + seed);

    Rng rng(500 + seed);
    for (auto& entry : net.params().entries)
      for (Eigen::Index i = 0; i < entry.tensor.size(); ++i)
        entry.tensor.values()[i] += rng.uniform(-0.2, 0.2);
    Eigen::Index n_in = 2LL * 8 * 16 * 16;
    auto x = ad::Tensor<double>::from({2, 8, 16, 16}, gradcheck_detail::random_signed(rng, n_in));
    Eigen::Index hw = 16 * 16;
    auto flags = std::make_shared<VecX<double>>(2 * 3 * hw);
    auto valid = std::make_shared<VecX<double>>(2 * 3 * hw);
    for (Eigen::Index i = 0; i < flags->size(); ++i) {
      (*flags)[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
      (*valid)[i] = rng.uniform() < 0.9 ? 1.0 : 0.0;
    }
    BceTarget<double> tgt{flags, valid, 3};
    LossWeights weights;

    for (auto& entry : net.params().entries) {
      auto f = [&](ad::Tensor<double>&) {
        auto out = net.forward(x, /*train=*/true);
        return total_loss(out, tgt, weights, net.params(), DecayMode::loss_term);
      };
      double err = ad::grad_check(f, entry.tensor, 1e-5, coords_per_tensor,
                                  fnv1a64(entry.name, 77 + seed));
      result.max_rel_err = std::max(result.max_rel_err, err);
    }
  }
  return result;
}

inline std::vector<GradCheckResult> full_gradcheck_suite(int op_seeds = 20, int net_seeds = 20) {
  auto results = op_gradcheck_suite(op_seeds);
  results.push_back(network_gradcheck(net_seeds));
  return results;
}

}  // namespace retina
