#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "retina/common.hpp"
#include "retina/network.hpp"
#include "retina/preprocess.hpp"
#include "retina/synth.hpp"
#include "retina/training.hpp"

namespace retina {

// Effective settings for every subcommand. File format: line-oriented
// "key = value" with '#' comments and dotted section keys; unknown keys are
// rejected.
struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 1;
  std::string precision = "f32";  // f32 | f64
  std::string data_root = "data";
  std::string out_root = "out";

  SynthSpec synth;
  PreprocessParams pre;
  bool cache = false;

  bool multi_input = true;  // 8-channel stack; false = standardized RGB only
  NetworkConfig net;
  TrainConfig train;
  LossWeights loss;

  int infer_stride = 10;
  double threshold = 0.5;
  int tile_batch = 8;
  int ablate_iters = 500;

  int gabor_orientation_step = 10;
  int line_orientation_step = 15;

  // Derives dependent fields and validates everything.
  void finalize() {
    require(precision == "f32" || precision == "f64", "config: precision must be f32 or f64");
    require(threads >= 0, "config: threads must be >= 0");
    require(infer_stride >= 1, "config: infer.stride must be positive");
    require(threshold > 0 && threshold < 1, "config: infer.threshold must be in (0,1)");
    require(tile_batch >= 1, "config: infer.tile_batch must be positive");
    require(ablate_iters >= 1, "config: ablate.iters must be positive");
    require(gabor_orientation_step >= 1 && gabor_orientation_step <= 90,
            "config: pre.gabor.orientation_step out of range");
    require(line_orientation_step >= 1 && line_orientation_step <= 90,
            "config: pre.line.orientation_step out of range");

    net.input_channels = multi_input ? kStackChannels : 3;
    pre.gabor.orientations_deg.clear();
    for (int d = 0; d < 180; d += gabor_orientation_step) pre.gabor.orientations_deg.push_back(d);
    pre.line.orientations_deg.clear();
    for (int d = 0; d < 180; d += line_orientation_step) pre.line.orientations_deg.push_back(d);
    pre.line.lengths.clear();
    for (int l = 1; l <= pre.line.window; l += 2) pre.line.lengths.push_back(l);
    require(pre.ic_sigma_divisor > 0, "config: pre.ic_sigma_divisor must be positive");
    pre.gabor.validate();
    pre.line.validate();
    net.validate();
    train.validate();
    loss.validate();
    synth.validate();
    require(net.patch == train.patch, "config: net.patch and train.patch must agree");
  }

  // Everything a checkpoint must agree on with the runtime.
  std::string fingerprint_text() const {
    std::ostringstream os;
    os << net.fingerprint() << " | pre ic=" << pre.ic_sigma_divisor << " scales=";
    for (double s : pre.gabor.scales) os << s << ",";
    os << " gstep=" << gabor_orientation_step << " elong=" << pre.gabor.elongation
       << " freq=" << pre.gabor.frequency[0] << "," << pre.gabor.frequency[1]
       << " lwin=" << pre.line.window << " lstep=" << line_orientation_step
       << " | multi_input=" << multi_input;
    return os.str();
  }

  std::string config_hash() const { return hex16(fnv1a64(fingerprint_text())); }

  std::string channel_layout() const {
    return multi_input ? "R,G,B,Ric,Gic,Bic,gabor,line" : "R,G,B";
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    fail("config: key '", key, "': expected integer, got '", v, "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    fail("config: key '", key, "': expected number, got '", v, "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("config: key '", key, "': expected true/false, got '", v, "'");
}

inline std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) fail("config: key '", key, "': empty list");
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<Field>& fields() {
  using C = RunConfig;
  static const std::vector<Field> table = {
      {"seed", [](C& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_int("seed", v)); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"threads", [](C& c, const std::string& v) { c.threads = static_cast<int>(to_int("threads", v)); },
       [](const C& c) { return std::to_string(c.threads); }},
      {"precision", [](C& c, const std::string& v) { c.precision = v; },
       [](const C& c) { return c.precision; }},
      {"data.root", [](C& c, const std::string& v) { c.data_root = v; },
       [](const C& c) { return c.data_root; }},
      {"out.root", [](C& c, const std::string& v) { c.out_root = v; },
       [](const C& c) { return c.out_root; }},

      {"synth.images", [](C& c, const std::string& v) { c.synth.images = static_cast<int>(to_int("synth.images", v)); },
       [](const C& c) { return std::to_string(c.synth.images); }},
      {"synth.train", [](C& c, const std::string& v) { c.synth.train_count = static_cast<int>(to_int("synth.train", v)); },
       [](const C& c) { return std::to_string(c.synth.train_count); }},
      {"synth.size", [](C& c, const std::string& v) { c.synth.size = static_cast<int>(to_int("synth.size", v)); },
       [](const C& c) { return std::to_string(c.synth.size); }},
      {"synth.trees", [](C& c, const std::string& v) { c.synth.trees = static_cast<int>(to_int("synth.trees", v)); },
       [](const C& c) { return std::to_string(c.synth.trees); }},
      {"synth.width_min", [](C& c, const std::string& v) { c.synth.width_min = to_double("synth.width_min", v); },
       [](const C& c) { return num(c.synth.width_min); }},
      {"synth.width_max", [](C& c, const std::string& v) { c.synth.width_max = to_double("synth.width_max", v); },
       [](const C& c) { return num(c.synth.width_max); }},
      {"synth.noise", [](C& c, const std::string& v) { c.synth.noise = to_double("synth.noise", v); },
       [](const C& c) { return num(c.synth.noise); }},
      {"synth.illumination", [](C& c, const std::string& v) { c.synth.illumination = to_double("synth.illumination", v); },
       [](const C& c) { return num(c.synth.illumination); }},
      {"synth.texture", [](C& c, const std::string& v) { c.synth.texture = to_double("synth.texture", v); },
       [](const C& c) { return num(c.synth.texture); }},
      {"synth.seed", [](C& c, const std::string& v) { c.synth.seed = static_cast<std::uint64_t>(to_int("synth.seed", v)); },
       [](const C& c) { return std::to_string(c.synth.seed); }},

      {"pre.ic_sigma_divisor", [](C& c, const std::string& v) { c.pre.ic_sigma_divisor = to_double("pre.ic_sigma_divisor", v); },
       [](const C& c) { return num(c.pre.ic_sigma_divisor); }},
      {"pre.gabor.scales", [](C& c, const std::string& v) { c.pre.gabor.scales = to_list("pre.gabor.scales", v); },
       [](const C& c) {
         std::string s;
         for (double x : c.pre.gabor.scales) s += (s.empty() ? "" : ",") + num(x);
         return s;
       }},
      {"pre.gabor.orientation_step", [](C& c, const std::string& v) { c.gabor_orientation_step = static_cast<int>(to_int("pre.gabor.orientation_step", v)); },
       [](const C& c) { return std::to_string(c.gabor_orientation_step); }},
      {"pre.gabor.elongation", [](C& c, const std::string& v) { c.pre.gabor.elongation = to_double("pre.gabor.elongation", v); },
       [](const C& c) { return num(c.pre.gabor.elongation); }},
      {"pre.gabor.frequency", [](C& c, const std::string& v) {
         auto l = to_list("pre.gabor.frequency", v);
         require(l.size() == 2, "config: pre.gabor.frequency needs two values");
         c.pre.gabor.frequency = {l[0], l[1]};
       },
       [](const C& c) { return num(c.pre.gabor.frequency[0]) + "," + num(c.pre.gabor.frequency[1]); }},
      {"pre.line.window", [](C& c, const std::string& v) { c.pre.line.window = static_cast<int>(to_int("pre.line.window", v)); },
       [](const C& c) { return std::to_string(c.pre.line.window); }},
      {"pre.line.orientation_step", [](C& c, const std::string& v) { c.line_orientation_step = static_cast<int>(to_int("pre.line.orientation_step", v)); },
       [](const C& c) { return std::to_string(c.line_orientation_step); }},
      {"pre.cache", [](C& c, const std::string& v) { c.cache = to_bool("pre.cache", v); },
       [](const C& c) { return c.cache ? "true" : "false"; }},

      {"net.width", [](C& c, const std::string& v) { c.net.width = static_cast<int>(to_int("net.width", v)); },
       [](const C& c) { return std::to_string(c.net.width); }},
      {"net.sigma", [](C& c, const std::string& v) { c.net.sigma = to_double("net.sigma", v); },
       [](const C& c) { return num(c.net.sigma); }},
      {"net.multitask", [](C& c, const std::string& v) { c.net.multitask = to_bool("net.multitask", v); },
       [](const C& c) { return c.net.multitask ? "true" : "false"; }},
      {"net.multi_input", [](C& c, const std::string& v) { c.multi_input = to_bool("net.multi_input", v); },
       [](const C& c) { return c.multi_input ? "true" : "false"; }},
      {"net.patch", [](C& c, const std::string& v) {
         c.net.patch = static_cast<int>(to_int("net.patch", v));
         c.train.patch = c.net.patch;
       },
       [](const C& c) { return std::to_string(c.net.patch); }},
      {"net.detach_activation", [](C& c, const std::string& v) { c.net.detach_activation = to_bool("net.detach_activation", v); },
       [](const C& c) { return c.net.detach_activation ? "true" : "false"; }},

      {"train.iters", [](C& c, const std::string& v) { c.train.max_iters = static_cast<int>(to_int("train.iters", v)); },
       [](const C& c) { return std::to_string(c.train.max_iters); }},
      {"train.batch", [](C& c, const std::string& v) { c.train.batch = static_cast<int>(to_int("train.batch", v)); },
       [](const C& c) { return std::to_string(c.train.batch); }},
      {"train.lr", [](C& c, const std::string& v) { c.train.lr0 = to_double("train.lr", v); },
       [](const C& c) { return num(c.train.lr0); }},
      {"train.halve_every", [](C& c, const std::string& v) { c.train.lr_halve_every = static_cast<int>(to_int("train.halve_every", v)); },
       [](const C& c) { return std::to_string(c.train.lr_halve_every); }},
      {"train.momentum", [](C& c, const std::string& v) { c.train.momentum = to_double("train.momentum", v); },
       [](const C& c) { return num(c.train.momentum); }},
      {"train.log_every", [](C& c, const std::string& v) { c.train.log_every = static_cast<int>(to_int("train.log_every", v)); },
       [](const C& c) { return std::to_string(c.train.log_every); }},
      {"train.checkpoint_every", [](C& c, const std::string& v) { c.train.checkpoint_every = static_cast<int>(to_int("train.checkpoint_every", v)); },
       [](const C& c) { return std::to_string(c.train.checkpoint_every); }},
      {"train.decay_mode", [](C& c, const std::string& v) {
         if (v == "loss") c.train.decay_mode = DecayMode::loss_term;
         else if (v == "optimizer") c.train.decay_mode = DecayMode::optimizer;
         else fail("config: train.decay_mode must be 'loss' or 'optimizer'");
       },
       [](const C& c) { return c.train.decay_mode == DecayMode::loss_term ? "loss" : "optimizer"; }},
      {"train.literal_bce", [](C& c, const std::string& v) { c.train.literal_bce = to_bool("train.literal_bce", v); },
       [](const C& c) { return c.train.literal_bce ? "true" : "false"; }},

      {"loss.mu_vessel", [](C& c, const std::string& v) { c.loss.mu_vessel = to_double("loss.mu_vessel", v); },
       [](const C& c) { return num(c.loss.mu_vessel); }},
      {"loss.mu_artery", [](C& c, const std::string& v) { c.loss.mu_artery = to_double("loss.mu_artery", v); },
       [](const C& c) { return num(c.loss.mu_artery); }},
      {"loss.mu_vein", [](C& c, const std::string& v) { c.loss.mu_vein = to_double("loss.mu_vein", v); },
       [](const C& c) { return num(c.loss.mu_vein); }},
      {"loss.lambda", [](C& c, const std::string& v) { c.loss.lambda = to_double("loss.lambda", v); },
       [](const C& c) { return num(c.loss.lambda); }},

      {"infer.stride", [](C& c, const std::string& v) { c.infer_stride = static_cast<int>(to_int("infer.stride", v)); },
       [](const C& c) { return std::to_string(c.infer_stride); }},
      {"infer.threshold", [](C& c, const std::string& v) { c.threshold = to_double("infer.threshold", v); },
       [](const C& c) { return num(c.threshold); }},
      {"infer.tile_batch", [](C& c, const std::string& v) { c.tile_batch = static_cast<int>(to_int("infer.tile_batch", v)); },
       [](const C& c) { return std::to_string(c.tile_batch); }},
      {"ablate.iters", [](C& c, const std::string& v) { c.ablate_iters = static_cast<int>(to_int("ablate.iters", v)); },
       [](const C& c) { return std::to_string(c.ablate_iters); }},
  };
  return table;
}

}  // namespace config_detail

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  fail("config: unknown key '", key, "'");
}

inline void parse_config_text(RunConfig& cfg, std::istream& in, const std::string& source) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) fail("config: ", source, ":", lineno, ": expected 'key = value'");
    std::string key = config_detail::trim(line.substr(0, eq));
    std::string value = config_detail::trim(line.substr(eq + 1));
    apply_config_line(cfg, key, value);
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open ", path);
  parse_config_text(cfg, in, path);
}

inline std::string emit_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "# effective configuration\n";
  for (const auto& f : config_detail::fields()) os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

}  // namespace retina
