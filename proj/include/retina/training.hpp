#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "retina/autodiff.hpp"
#include "retina/common.hpp"
#include "retina/network.hpp"

namespace retina {

struct LossWeights {
  double mu_vessel = 3.0 / 7.0;
  double mu_artery = 2.0 / 7.0;
  double mu_vein = 2.0 / 7.0;
  double lambda = 5e-4;  // weight decay coefficient

  void validate() const {
    require(mu_vessel > 0 && mu_artery > 0 && mu_vein > 0, "loss: class weights must be positive");
    require(std::abs(mu_vessel + mu_artery + mu_vein - 1.0) < 1e-9, "loss: class weights must sum to 1");
    require(lambda >= 0, "loss: lambda must be non-negative");
  }
};

enum class DecayMode { loss_term, optimizer };

struct TrainConfig {
  int patch = 64;
  int batch = 16;
  int max_iters = 2000;       // full-scale schedule: 60000
  double lr0 = 0.05;
  int lr_halve_every = 500;   // full-scale schedule: 7500
  double momentum = 0.9;
  std::uint64_t seed = 42;
  int log_every = 50;
  int checkpoint_every = 1000;
  DecayMode decay_mode = DecayMode::loss_term;
  bool literal_bce = false;  // one-sided -t*log(p) variant, for comparison only

  void validate() const {
    require(patch > 0 && batch >= 1 && max_iters >= 0, "train: sizes must be positive");
    require(lr0 > 0 && lr_halve_every > 0, "train: learning-rate schedule must be positive");
    require(momentum >= 0 && momentum < 1, "train: momentum must be in [0,1)");
    require(log_every > 0 && checkpoint_every > 0, "train: logging periods must be positive");
  }
};

inline double lr_at(long long iter, const TrainConfig& cfg) {
  require(iter >= 0, "lr_at: iteration must be non-negative");
  return std::ldexp(cfg.lr0, -static_cast<int>(iter / cfg.lr_halve_every));
}

// ---------------------------------------------------------------------------
// Weighted binary cross-entropy

// Per-batch supervision: flags and validity masks flattened as [N,C,H,W],
// shared across the main and side losses.
template <class S>
struct BceTarget {
  std::shared_ptr<const VecX<S>> flags;
  std::shared_ptr<const VecX<S>> valid;
  int channels = 3;
};

// Mean over valid pixel-channel pairs of the mu_c-weighted two-sided BCE,
// normalized by the summed weight of valid pairs. Probabilities are clipped
// to [1e-7, 1-1e-7]. All-invalid input yields 0 and sets *all_invalid.
template <class S>
ad::Tensor<S> weighted_bce(const ad::Tensor<S>& pred, const BceTarget<S>& tgt,
                           const LossWeights& w, bool literal = false,
                           bool* all_invalid = nullptr) {
  if (pred.shape().size() != 4) fail("weighted_bce: expected 4-D predictions");
  int C = pred.dim(1);
  if (C != tgt.channels) fail("weighted_bce: prediction has ", C, " channels, target ", tgt.channels);
  if (pred.size() != tgt.flags->size() || pred.size() != tgt.valid->size())
    fail("weighted_bce: target size mismatch");

  std::vector<double> mu;
  if (C == 3)
    mu = {w.mu_vessel, w.mu_artery, w.mu_vein};
  else if (C == 2)
    mu = {w.mu_artery, w.mu_vein};
  else
    fail("weighted_bce: unsupported channel count ", C);

  const double eps = 1e-7;
  Eigen::Index chw = pred.size() / pred.dim(0);
  Eigen::Index hw = chw / C;
  const S* p = pred.values().data();
  const S* t = tgt.flags->data();
  const S* v = tgt.valid->data();

  double weight_sum = 0, loss_sum = 0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (v[i] == S(0)) continue;
    int c = static_cast<int>((i % chw) / hw);
    double pc = std::min(std::max(static_cast<double>(p[i]), eps), 1.0 - eps);
    double ti = t[i];
    double ell = literal ? -ti * std::log(pc) : -(ti * std::log(pc) + (1.0 - ti) * std::log1p(-pc));
    loss_sum += mu[c] * ell;
    weight_sum += mu[c];
  }
  if (all_invalid) *all_invalid = weight_sum == 0;
  VecX<S> out(1);
  out[0] = weight_sum == 0 ? S(0) : static_cast<S>(loss_sum / weight_sum);

  auto pp = pred.node();
  auto flags = tgt.flags;
  auto valid = tgt.valid;
  auto bp = [pp, flags, valid, mu, weight_sum, chw, hw, eps, literal](ad::Node<S>& self) {
    if (!pp->requires_grad || weight_sum == 0) return;
    double g0 = self.grad[0];
    auto& g = pp->ensure_grad();
    const S* p2 = pp->value.data();
    const S* t2 = flags->data();
    const S* v2 = valid->data();
    for (Eigen::Index i = 0; i < pp->value.size(); ++i) {
      if (v2[i] == S(0)) continue;
      double pv = p2[i];
      if (pv < eps || pv > 1.0 - eps) continue;  // clipped: zero slope
      int c = static_cast<int>((i % chw) / hw);
      double ti = t2[i];
      double d = literal ? -ti / pv : (pv - ti) / (pv * (1.0 - pv));
      g[i] += static_cast<S>(g0 * mu[c] * d / weight_sum);
    }
  };
  return ad::make_op<S>("weighted_bce", {1}, std::move(out), {pred}, std::move(bp));
}

// Total objective: main BCE + mean of the side BCEs + (lambda/2)*||conv weights||^2.
// The decay term enters here in loss_term mode, or in the optimizer otherwise.
template <class S>
ad::Tensor<S> total_loss(const NetworkOutputs<S>& out, const BceTarget<S>& target,
                         const LossWeights& w, ParameterSet<S>& params,
                         DecayMode decay_mode = DecayMode::loss_term, bool literal = false) {
  ad::Tensor<S> main_pred = out.vessel ? ad::concat_channels(out.vessel, out.av) : out.av;
  ad::Tensor<S> loss = weighted_bce(main_pred, target, w, literal);

  if (!out.sides.empty()) {
    ad::Tensor<S> side_sum;
    for (const auto& side : out.sides) {
      auto term = weighted_bce(side, target, w, literal);
      side_sum = side_sum ? ad::add(side_sum, term) : term;
    }
    loss = ad::add(loss, ad::scalar_affine(side_sum, S(1) / S(out.sides.size()), S(0)));
  }

  if (decay_mode == DecayMode::loss_term && w.lambda > 0) {
    ad::Tensor<S> sq_sum;
    for (auto& e : params.entries) {
      if (!e.decay) continue;
      auto term = ad::sum(ad::mul(e.tensor, e.tensor));
      sq_sum = sq_sum ? ad::add(sq_sum, term) : term;
    }
    if (sq_sum) loss = ad::add(loss, ad::scalar_affine(sq_sum, static_cast<S>(w.lambda / 2), S(0)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// SGD with momentum

template <class S>
struct OptimState {
  std::vector<VecX<S>> velocity;
  long long iteration = 0;

  static OptimState init(const ParameterSet<S>& params) {
    OptimState st;
    for (const auto& e : params.entries) st.velocity.push_back(VecX<S>::Zero(e.tensor.size()));
    return st;
  }
};

// v <- momentum*v + g (+ lambda*theta on decayed parameters in optimizer
// mode); theta <- theta - lr*v; gradients are zeroed afterwards.
template <class S>
void sgd_step(ParameterSet<S>& params, OptimState<S>& state, double lr, double momentum,
              double lambda = 0) {
  if (state.velocity.size() != params.entries.size()) fail("sgd_step: optimizer/parameter mismatch");
  for (size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    auto& v = state.velocity[i];
    auto& theta = e.tensor.values();
    if (e.tensor.has_grad()) {
      if (lambda > 0 && e.decay)
        v = static_cast<S>(momentum) * v + e.tensor.grad() + static_cast<S>(lambda) * theta;
      else
        v = static_cast<S>(momentum) * v + e.tensor.grad();
    } else {
      v = static_cast<S>(momentum) * v;  // unreachable parameter: g = 0
      if (lambda > 0 && e.decay) v += static_cast<S>(lambda) * theta;
    }
    theta -= static_cast<S>(lr) * v;
    e.tensor.zero_grad();
  }
  ++state.iteration;
}

// ---------------------------------------------------------------------------
// Patch sampling

// One preprocessed training image with flattened stack and supervision maps.
template <class S>
struct TrainItem {
  int height = 0, width = 0, channels = 0;
  VecX<S> stack;   // [C,H,W]
  VecX<S> flags;   // [3,H,W] vessel, artery, vein
  VecX<S> valid;   // [3,H,W]
};

template <class S>
struct PatchBatch {
  ad::Tensor<S> input;  // [B,C,p,p]
  BceTarget<S> target;  // 3-channel flags/valid
  std::vector<std::array<int, 3>> positions;  // (image, y0, x0) per sample
};

template <class S>
class PatchSampler {
 public:
  PatchSampler(std::vector<TrainItem<S>> items, int patch) : items_(std::move(items)), patch_(patch) {
    require(!items_.empty(), "sampler: no training images");
    for (const auto& it : items_)
      require(it.height >= patch_ && it.width >= patch_, "sampler: image smaller than patch size");
  }

  // Image index and top-left corner both uniform; label crops are aligned.
  PatchBatch<S> sample(Rng& rng, int batch) const {
    int p = patch_;
    int C = items_[0].channels;
    Eigen::Index pp = Eigen::Index(p) * p;
    VecX<S> x(Eigen::Index(batch) * C * pp);
    auto flags = std::make_shared<VecX<S>>(Eigen::Index(batch) * 3 * pp);
    auto valid = std::make_shared<VecX<S>>(Eigen::Index(batch) * 3 * pp);
    PatchBatch<S> out;
    for (int b = 0; b < batch; ++b) {
      const auto& it = items_[rng.below(items_.size())];
      int y0 = static_cast<int>(rng.below(it.height - p + 1));
      int x0 = static_cast<int>(rng.below(it.width - p + 1));
      out.positions.push_back({static_cast<int>(&it - items_.data()), y0, x0});
      auto crop = [&](const VecX<S>& src, int nch, VecX<S>& dst, Eigen::Index dst_base) {
        for (int c = 0; c < nch; ++c)
          for (int y = 0; y < p; ++y)
            dst.segment(dst_base + (Eigen::Index(c) * p + y) * p, p) =
                src.segment((Eigen::Index(c) * it.height + y0 + y) * it.width + x0, p);
      };
      crop(it.stack, C, x, Eigen::Index(b) * C * pp);
      crop(it.flags, 3, *flags, Eigen::Index(b) * 3 * pp);
      crop(it.valid, 3, *valid, Eigen::Index(b) * 3 * pp);
    }
    out.input = ad::Tensor<S>::from({batch, C, p, p}, std::move(x));
    out.target = {flags, valid, 3};
    return out;
  }

  const std::vector<TrainItem<S>>& items() const { return items_; }
  int patch() const { return patch_; }

 private:
  std::vector<TrainItem<S>> items_;
  int patch_;
};

// Drops the vessel channel for the plain two-channel head.
template <class S>
BceTarget<S> av_only_target(const BceTarget<S>& t, int batch, int patch) {
  Eigen::Index pp = Eigen::Index(patch) * patch;
  auto flags = std::make_shared<VecX<S>>(Eigen::Index(batch) * 2 * pp);
  auto valid = std::make_shared<VecX<S>>(Eigen::Index(batch) * 2 * pp);
  for (int b = 0; b < batch; ++b) {
    flags->segment(Eigen::Index(b) * 2 * pp, 2 * pp) =
        t.flags->segment((Eigen::Index(b) * 3 + 1) * pp, 2 * pp);
    valid->segment(Eigen::Index(b) * 2 * pp, 2 * pp) =
        t.valid->segment((Eigen::Index(b) * 3 + 1) * pp, 2 * pp);
  }
  return {flags, valid, 2};
}

// ---------------------------------------------------------------------------
// Training loop

// Runs sample -> forward -> loss -> backward -> step from the optimizer's
// current iteration up to cfg.max_iters. log_fn fires every log_every
// iterations (with the pre-step loss); checkpoint_fn after every
// checkpoint_every steps and once at the end.
template <class S>
void train_loop(Network<S>& net, OptimState<S>& optim, Rng& rng, const PatchSampler<S>& sampler,
                const TrainConfig& cfg, const LossWeights& weights,
                const std::function<void(long long, double, double)>& log_fn = {},
                const std::function<void(long long)>& checkpoint_fn = {}) {
  cfg.validate();
  weights.validate();
  bool multitask = net.config().multitask;
  for (long long iter = optim.iteration; iter < cfg.max_iters; ++iter) {
    double lr = lr_at(iter, cfg);
    PatchBatch<S> batch = sampler.sample(rng, cfg.batch);
    auto out = net.forward(batch.input, /*train=*/true);
    BceTarget<S> target = multitask ? batch.target : av_only_target(batch.target, cfg.batch, cfg.patch);
    auto loss = total_loss(out, target, weights, net.params(), cfg.decay_mode, cfg.literal_bce);
    double loss_v = loss.values()[0];
    if (!std::isfinite(loss_v)) {
      std::ostringstream os;
      os << "train: non-finite loss at iteration " << iter << "; batch (image,y0,x0):";
      for (const auto& p : batch.positions) os << " (" << p[0] << "," << p[1] << "," << p[2] << ")";
      throw std::runtime_error(os.str());
    }
    if (log_fn && iter % cfg.log_every == 0) log_fn(iter, loss_v, lr);
    ad::backward(loss);
    double lambda_opt = cfg.decay_mode == DecayMode::optimizer ? weights.lambda : 0.0;
    sgd_step(net.params(), optim, lr, cfg.momentum, lambda_opt);
    if (checkpoint_fn && optim.iteration % cfg.checkpoint_every == 0 &&
        optim.iteration < cfg.max_iters)
      checkpoint_fn(optim.iteration);
  }
  if (checkpoint_fn) checkpoint_fn(optim.iteration);
}

// ---------------------------------------------------------------------------
// Checkpoints: text header (tensor directory with byte offsets) + raw
// little-endian payload.

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; add byte swapping for this platform");

struct CheckpointMeta {
  std::string config_hash;
  std::string channel_layout;
};

namespace ckpt_detail {

template <class S>
struct NamedTensorRef {
  std::string name;
  std::vector<int> shape;
  VecX<S>* data;
};

template <class S>
std::vector<NamedTensorRef<S>> tensor_table(Network<S>& net, OptimState<S>* optim) {
  std::vector<NamedTensorRef<S>> refs;
  for (auto& e : net.params().entries)
    refs.push_back({e.name, e.tensor.shape(), &e.tensor.values()});
  for (auto& [name, st] : net.buffer_refs()) {
    refs.push_back({name + ".rmean", {static_cast<int>(st->running_mean.size())}, &st->running_mean});
    refs.push_back({name + ".rvar", {static_cast<int>(st->running_var.size())}, &st->running_var});
  }
  if (optim) {
    auto& entries = net.params().entries;
    for (size_t i = 0; i < entries.size(); ++i)
      refs.push_back({"opt." + entries[i].name, {static_cast<int>(optim->velocity[i].size())},
                      &optim->velocity[i]});
  }
  return refs;
}

inline const char* precision_tag(float) { return "f32"; }
inline const char* precision_tag(double) { return "f64"; }

}  // namespace ckpt_detail

template <class S>
void save_checkpoint(const std::string& path, Network<S>& net, OptimState<S>& optim,
                     const Rng& rng, const CheckpointMeta& meta) {
  auto refs = ckpt_detail::tensor_table(net, &optim);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("checkpoint: cannot write ", path);
  out << "RETINA-CKPT v1\n";
  out << "config " << meta.config_hash << "\n";
  out << "precision " << ckpt_detail::precision_tag(S{}) << "\n";
  out << "iteration " << optim.iteration << "\n";
  out << "channels " << meta.channel_layout << "\n";
  out << "rng " << rng.state() << "\n";
  out << "tensors " << refs.size() << "\n";
  std::uint64_t offset = 0;
  for (const auto& r : refs) {
    out << r.name << " " << r.shape.size();
    for (int d : r.shape) out << " " << d;
    out << " " << offset << " " << r.data->size() * sizeof(S) << "\n";
    offset += r.data->size() * sizeof(S);
  }
  out << "DATA\n";
  for (const auto& r : refs)
    out.write(reinterpret_cast<const char*>(r.data->data()),
              static_cast<std::streamsize>(r.data->size() * sizeof(S)));
  if (!out) fail("checkpoint: write failed for ", path);
}

// Loads parameters, running stats and (when optim/rng given) optimizer state
// into an already-built network. Returns the stored iteration.
template <class S>
long long load_checkpoint(const std::string& path, Network<S>& net, OptimState<S>* optim,
                          Rng* rng, const std::string& expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open ", path);
  std::string line;
  auto next_line = [&]() {
    if (!std::getline(in, line)) fail("checkpoint: truncated header in ", path);
    return line;
  };
  if (next_line() != "RETINA-CKPT v1") fail("checkpoint: bad magic in ", path);

  std::string config_hash, precision, rng_state;
  long long iteration = 0;
  size_t ntensors = 0;
  struct Dir {
    std::string name;
    std::uint64_t offset, bytes;
  };
  std::vector<Dir> dir;
  for (;;) {
    next_line();
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "config") {
      is >> config_hash;
    } else if (key == "precision") {
      is >> precision;
    } else if (key == "iteration") {
      is >> iteration;
    } else if (key == "channels") {
      // informational
    } else if (key == "rng") {
      rng_state = line.substr(4);
    } else if (key == "tensors") {
      is >> ntensors;
      for (size_t i = 0; i < ntensors; ++i) {
        next_line();
        std::istringstream ts(line);
        Dir d;
        int rank;
        ts >> d.name >> rank;
        for (int r = 0; r < rank; ++r) {
          int dim;
          ts >> dim;
        }
        ts >> d.offset >> d.bytes;
        if (!ts) fail("checkpoint: malformed tensor entry '", line, "'");
        dir.push_back(d);
      }
    } else if (key == "DATA") {
      break;
    } else {
      fail("checkpoint: unknown header key '", key, "' in ", path);
    }
  }
  if (precision != ckpt_detail::precision_tag(S{}))
    fail("checkpoint: precision ", precision, " does not match runtime ",
         ckpt_detail::precision_tag(S{}));
  if (!expected_hash.empty() && config_hash != expected_hash)
    fail("checkpoint: config hash ", config_hash, " does not match runtime config ",
         expected_hash);

  std::streampos data_start = in.tellg();
  auto refs = ckpt_detail::tensor_table(net, optim);
  std::unordered_map<std::string, const Dir*> by_name;
  for (const auto& d : dir) by_name[d.name] = &d;
  for (auto& r : refs) {
    if (!optim && r.name.rfind("opt.", 0) == 0) continue;
    auto it = by_name.find(r.name);
    if (it == by_name.end()) fail("checkpoint: tensor '", r.name, "' missing from ", path);
    const Dir& d = *it->second;
    if (d.bytes != r.data->size() * sizeof(S))
      fail("checkpoint: tensor '", r.name, "' has ", d.bytes, " bytes, expected ",
           r.data->size() * sizeof(S));
    in.seekg(data_start + static_cast<std::streamoff>(d.offset));
    in.read(reinterpret_cast<char*>(r.data->data()), static_cast<std::streamsize>(d.bytes));
    if (!in) fail("checkpoint: truncated payload reading '", r.name, "'");
  }
  if (optim) optim->iteration = iteration;
  if (rng) {
    if (rng_state.empty()) fail("checkpoint: missing rng state in ", path);
    rng->set_state(rng_state);
  }
  return iteration;
}

// Reads only the config hash line, for pre-flight validation.
inline std::string checkpoint_config_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open ", path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("config ", 0) == 0) return line.substr(7);
    if (line == "DATA") break;
  }
  fail("checkpoint: no config hash in ", path);
}

}  // namespace retina
