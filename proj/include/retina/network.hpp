#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "retina/autodiff.hpp"
#include "retina/common.hpp"

namespace retina {

struct NetworkConfig {
  int input_channels = 8;  // 8 with the enhanced input stack, 3 for RGB only
  int width = 16;          // base encoder width W; stages run W,2W,4W,8W
  double sigma = 1.0;      // activation factor; 0 disables spatial activation
  bool multitask = true;   // vessel branch + side outputs; false = plain A/V head
  int side_outputs = 3;
  int patch = 64;
  bool detach_activation = false;  // stop gradients at the activation map

  void validate() const {
    require(input_channels >= 1, "net: input_channels must be positive");
    require(width >= 1, "net: width must be positive");
    require(sigma >= 0, "net: sigma must be non-negative");
    require(side_outputs == 3, "net: exactly 3 side outputs are supported");
    require(patch >= 16 && patch % 8 == 0, "net: patch size must be a multiple of 8, >= 16");
  }

  std::string fingerprint() const {
    std::ostringstream os;
    os << "arch v1 in=" << input_channels << " w=" << width << " mt=" << (multitask ? 1 : 0)
       << " sigma=" << sigma << " sides=" << side_outputs << " patch=" << patch
       << " detach=" << (detach_activation ? 1 : 0);
    return os.str();
  }
};

template <class S>
struct ParameterSet {
  struct Entry {
    std::string name;
    ad::Tensor<S> tensor;
    bool decay;  // participates in weight decay (conv weights only)
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, int> by_name;

  ad::Tensor<S>& add(const std::string& name, ad::Tensor<S> t, bool decay) {
    if (by_name.count(name)) fail("ParameterSet: duplicate name ", name);
    by_name[name] = static_cast<int>(entries.size());
    entries.push_back({name, std::move(t), decay});
    return entries.back().tensor;
  }

  ad::Tensor<S>* find(const std::string& name) {
    auto it = by_name.find(name);
    return it == by_name.end() ? nullptr : &entries[it->second].tensor;
  }

  void zero_grads() {
    for (auto& e : entries) e.tensor.zero_grad();
  }

  Eigen::Index count() const {
    Eigen::Index n = 0;
    for (const auto& e : entries) n += e.tensor.size();
    return n;
  }
};

template <class S>
struct NetworkOutputs {
  ad::Tensor<S> vessel;      // [N,1,h,w], absent for the plain-head variant
  ad::Tensor<S> av;          // [N,2,h,w] (artery, vein)
  std::vector<ad::Tensor<S>> sides;  // 3 x [N,3,h,w] when deep supervision is on
  ad::Tensor<S> activation;  // [N,1,h,w], absent without the vessel branch
};

// Eq-style activation value for plain scalars (map rescaling, tests).
inline double spatial_activation_value(double x, double sigma) {
  return sigma * (std::exp(-(x - 0.5) * (x - 0.5)) - std::exp(-0.25)) + 1.0;
}

inline double spatial_activation_peak(double sigma) {
  return sigma * (1.0 - std::exp(-0.25));
}

template <class S>
ad::Tensor<S> spatial_activation(const ad::Tensor<S>& vessel_prob, double sigma) {
  return ad::gauss_act(vessel_prob, static_cast<S>(sigma));
}

namespace net_detail {

template <class S>
struct Conv {
  ad::Tensor<S> w, b;
  int stride = 1, pad = 1;
  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

template <class S>
struct Norm {
  ad::Tensor<S> gamma, beta;
  ad::BNState<S> state;
  ad::Tensor<S> operator()(const ad::Tensor<S>& x, bool train) {
    return ad::batchnorm2d(x, gamma, beta, state, train);
  }
};

template <class S>
struct ResBlock {
  Conv<S> c1, c2;
  Norm<S> n1, n2;
  bool has_proj = false;
  Conv<S> proj;
  Norm<S> nproj;

  ad::Tensor<S> forward(const ad::Tensor<S>& x, bool train) {
    auto h = ad::relu(n1(c1(x), train));
    h = n2(c2(h), train);
    auto skip = has_proj ? nproj(proj(x), train) : x;
    return ad::relu(ad::add(h, skip));
  }
};

template <class S>
struct DecoderStep {
  Conv<S> c1, c2;
  Norm<S> n1, n2;

  ad::Tensor<S> forward(const ad::Tensor<S>& below, const ad::Tensor<S>& skip, bool train) {
    auto up = ad::upsample_nearest2x(below);
    auto h = ad::relu(n1(c1(ad::concat_channels(up, skip)), train));
    return ad::relu(n2(c2(h), train));
  }
};

}  // namespace net_detail

// Encoder-decoder with an expanding-compressing input layer, residual encoder,
// optional deep-supervision taps, and the two-branch multi-task output block.
template <class S>
class Network {
 public:
  Network(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    int w = cfg_.width;

    expand_ = make_conv("expand", cfg_.input_channels, 4 * w, 3, 1, rng);
    compress_ = make_conv("compress", 4 * w, 3, 1, 1, rng);
    stem_ = make_conv("stem", 3, w, 3, 1, rng);

    int widths[4] = {w, 2 * w, 4 * w, 8 * w};
    int in_ch = w;
    for (int s = 0; s < 4; ++s) {
      int out_ch = widths[s];
      int stride = s == 0 ? 1 : 2;
      std::string base = "enc" + std::to_string(s + 1);
      stages_[s][0] = make_block(base + ".b0", in_ch, out_ch, stride, rng);
      stages_[s][1] = make_block(base + ".b1", out_ch, out_ch, 1, rng);
      in_ch = out_ch;
    }

    if (cfg_.multitask) {
      for (int i = 0; i < 3; ++i)
        sides_[i] = make_conv("side" + std::to_string(i + 1), widths[i], 3, 1, 1, rng, Init::zero);
    }

    dec_[0] = make_decoder("dec1", 8 * w + 4 * w, 4 * w, rng);
    dec_[1] = make_decoder("dec2", 4 * w + 2 * w, 2 * w, rng);
    dec_[2] = make_decoder("dec3", 2 * w + w, w, rng);

    if (cfg_.multitask) {
      headv_conv_ = make_conv("headv.conv", w, w, 3, 1, rng);
      headv_proj_ = make_conv("headv.proj", w, 1, 1, 1, rng, Init::zero);
      heada_conv_ = make_conv("heada.conv", w, w, 3, 1, rng);
      av_proj_ = make_conv("av.proj", 2 * w, 2, 1, 1, rng, Init::zero);
    } else {
      heada_conv_ = make_conv("head.conv", w, w, 3, 1, rng);
      av_proj_ = make_conv("av.proj", w, 2, 1, 1, rng, Init::zero);
    }
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  NetworkOutputs<S> forward(const ad::Tensor<S>& x, bool train) {
    if (x.shape().size() != 4 || x.dim(1) != cfg_.input_channels || x.dim(2) != cfg_.patch ||
        x.dim(3) != cfg_.patch)
      fail("network: input must be [N,", cfg_.input_channels, ",", cfg_.patch, ",", cfg_.patch, "]");

    auto h = ad::relu(expand_(x));
    h = compress_(h);
    h = stem_(h);

    std::array<ad::Tensor<S>, 4> enc;
    for (int s = 0; s < 4; ++s) {
      h = stages_[s][0].forward(h, train);
      h = stages_[s][1].forward(h, train);
      enc[s] = h;
    }

    NetworkOutputs<S> out;
    if (cfg_.multitask) {
      for (int i = 0; i < 3; ++i) {
        auto side = sides_[i](enc[i]);
        for (int u = 0; u < i; ++u) side = ad::upsample_nearest2x(side);
        out.sides.push_back(ad::sigmoid(side));
      }
    }

    auto d = dec_[0].forward(enc[3], enc[2], train);
    d = dec_[1].forward(d, enc[1], train);
    d = dec_[2].forward(d, enc[0], train);

    if (cfg_.multitask) {
      auto fv = ad::relu(headv_conv_(d));
      out.vessel = ad::sigmoid(headv_proj_(fv));
      auto fa = ad::relu(heada_conv_(d));
      ad::Tensor<S> act_src = out.vessel;
      if (cfg_.detach_activation)
        act_src = ad::Tensor<S>::from(out.vessel.shape(), out.vessel.values());
      out.activation = spatial_activation(act_src, cfg_.sigma);
      auto fa_act = ad::mul(fa, out.activation);
      out.av = ad::sigmoid(av_proj_(ad::concat_channels(fv, fa_act)));
    } else {
      auto f = ad::relu(heada_conv_(d));
      out.av = ad::sigmoid(av_proj_(f));
    }
    return out;
  }

  const NetworkConfig& config() const { return cfg_; }
  ParameterSet<S>& params() { return params_; }
  const ParameterSet<S>& params() const { return params_; }

 private:
  // Convs feeding a normalization layer carry no bias (it would be absorbed
  // by the mean subtraction); output projections start at zero so an
  // untrained network emits exact 0.5 probabilities.
  enum class Init { he, zero };

  net_detail::Conv<S> make_conv(const std::string& name, int cin, int cout, int k, int stride,
                                Rng& rng, Init init = Init::he, bool bias = true) {
    net_detail::Conv<S> conv;
    VecX<S> w = VecX<S>::Zero(static_cast<Eigen::Index>(cout) * cin * k * k);
    if (init == Init::he) {
      double stdev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<S>(rng.normal() * stdev);
    }
    conv.w = params_.add(name + ".w",
                         ad::Tensor<S>::from({cout, cin, k, k}, std::move(w), true), true);
    conv.b = bias ? params_.add(name + ".b", ad::Tensor<S>::zeros({cout}, true), false)
                  : ad::Tensor<S>::zeros({cout});
    conv.stride = stride;
    conv.pad = k / 2;
    return conv;
  }

  net_detail::Norm<S> make_norm(const std::string& name, int ch) {
    net_detail::Norm<S> n;
    n.gamma = params_.add(name + ".gamma",
                          ad::Tensor<S>::from({ch}, VecX<S>::Ones(ch), true), false);
    n.beta = params_.add(name + ".beta", ad::Tensor<S>::zeros({ch}, true), false);
    n.state = ad::BNState<S>::init(ch);
    norm_names_.push_back(name);
    return n;
  }

  net_detail::ResBlock<S> make_block(const std::string& name, int cin, int cout, int stride,
                                     Rng& rng) {
    net_detail::ResBlock<S> b;
    b.c1 = make_conv(name + ".c1", cin, cout, 3, stride, rng, Init::he, /*bias=*/false);
    b.n1 = make_norm(name + ".n1", cout);
    b.c2 = make_conv(name + ".c2", cout, cout, 3, 1, rng, Init::he, /*bias=*/false);
    b.n2 = make_norm(name + ".n2", cout);
    if (stride != 1 || cin != cout) {
      b.has_proj = true;
      b.proj = make_conv(name + ".proj", cin, cout, 1, stride, rng, Init::he, /*bias=*/false);
      b.nproj = make_norm(name + ".nproj", cout);
    }
    return b;
  }

  net_detail::DecoderStep<S> make_decoder(const std::string& name, int cin, int cout, Rng& rng) {
    net_detail::DecoderStep<S> d;
    d.c1 = make_conv(name + ".c1", cin, cout, 3, 1, rng, Init::he, /*bias=*/false);
    d.n1 = make_norm(name + ".n1", cout);
    d.c2 = make_conv(name + ".c2", cout, cout, 3, 1, rng, Init::he, /*bias=*/false);
    d.n2 = make_norm(name + ".n2", cout);
    return d;
  }

 public:
  // Called once after construction completes; exposed for checkpointing.
  std::vector<std::pair<std::string, ad::BNState<S>*>> buffer_refs() {
    std::vector<std::pair<std::string, ad::BNState<S>*>> refs;
    size_t idx = 0;
    auto grab = [&](net_detail::Norm<S>& n) { refs.emplace_back(norm_names_[idx++], &n.state); };
    for (int s = 0; s < 4; ++s)
      for (int b = 0; b < 2; ++b) {
        grab(stages_[s][b].n1);
        grab(stages_[s][b].n2);
        if (stages_[s][b].has_proj) grab(stages_[s][b].nproj);
      }
    for (int d = 0; d < 3; ++d) {
      grab(dec_[d].n1);
      grab(dec_[d].n2);
    }
    return refs;
  }

 private:
  NetworkConfig cfg_;
  ParameterSet<S> params_;
  std::vector<std::string> norm_names_;

  net_detail::Conv<S> expand_, compress_, stem_;
  std::array<std::array<net_detail::ResBlock<S>, 2>, 4> stages_;
  std::array<net_detail::Conv<S>, 3> sides_;
  std::array<net_detail::DecoderStep<S>, 3> dec_;
  net_detail::Conv<S> headv_conv_, headv_proj_, heada_conv_, av_proj_;
};

}  // namespace retina
