#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "retina/config.hpp"
#include "retina/gradcheck_suite.hpp"
#include "retina/pipeline.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::vector<std::string> sets;
  int threads = -1;
  bool print_config = false;

  // per-subcommand
  std::string data, out, resume, checkpoint, split = "test";
  std::int64_t synth_seed = -1;
  int ablate_iters = -1;
  int gradcheck_seeds = 20;
};

void apply_common(retina::RunConfig& cfg, const CliOptions& opt) {
  if (!opt.config_path.empty()) retina::load_config_file(cfg, opt.config_path);
  for (const auto& kv : opt.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) retina::fail("--set expects key=value, got '", kv, "'");
    retina::apply_config_line(cfg, retina::config_detail::trim(kv.substr(0, eq)),
                              retina::config_detail::trim(kv.substr(eq + 1)));
  }
  if (opt.threads >= 0) cfg.threads = opt.threads;
  if (!opt.data.empty()) cfg.data_root = opt.data;
  if (!opt.out.empty()) cfg.out_root = opt.out;
  cfg.finalize();
}

template <class S>
int dispatch(const std::string& cmd, retina::RunConfig& cfg, const CliOptions& opt) {
  if (cmd == "synth") {
    retina::cmd_synth(cfg);
    std::printf("synth: wrote %d images to %s\n", cfg.synth.images, cfg.data_root.c_str());
  } else if (cmd == "prep") {
    retina::cmd_prep<S>(cfg, opt.split);
    std::printf("prep: wrote enhanced channels to %s\n", cfg.out_root.c_str());
  } else if (cmd == "train") {
    std::string ckpt = retina::cmd_train<S>(cfg, opt.resume);
    std::printf("train: final checkpoint %s\n", ckpt.c_str());
  } else if (cmd == "infer") {
    retina::cmd_infer<S>(cfg, opt.checkpoint, opt.split);
    std::printf("infer: wrote predictions to %s\n", cfg.out_root.c_str());
  } else if (cmd == "eval") {
    auto sum = retina::cmd_eval<S>(cfg, opt.checkpoint, opt.split);
    std::printf("eval: vessel acc %.4f sen %.4f sp %.4f auc %.4f | av(gt) acc %.4f\n", sum.seg.acc,
                sum.seg.sen, sum.seg.sp, sum.seg.auc, sum.av_gt.acc);
  } else if (cmd == "ablate") {
    auto rows = retina::cmd_ablate<S>(cfg);
    std::printf("%s", retina::format_ablation_table(rows).c_str());
  } else if (cmd == "gradcheck") {
    auto results = retina::full_gradcheck_suite(opt.gradcheck_seeds, opt.gradcheck_seeds);
    bool ok = true;
    for (const auto& r : results) {
      std::printf("%-28s max_rel_err %.3e  tol %.0e  %s\n", r.name.c_str(), r.max_rel_err,
                  r.tolerance, r.pass() ? "ok" : "FAIL");
      ok = ok && r.pass();
    }
    if (!ok) retina::fail("gradcheck: tolerance exceeded");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retinal vessel segmentation and artery/vein classification toolkit"};
  app.require_subcommand(0, 1);
  app.fallthrough();  // global flags remain valid after the subcommand name
  CliOptions opt;

  const char* env_cfg = std::getenv("RETINA_CONFIG");
  if (env_cfg) opt.config_path = env_cfg;
  app.add_option("--config", opt.config_path, "configuration file (key = value lines)");
  app.add_option("--set", opt.sets, "override a single configuration key (key=value)");
  app.add_option("--threads", opt.threads, "worker threads (0 = hardware)");
  app.add_flag("--print-config", opt.print_config, "print the effective configuration and exit");

  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  synth->add_option("--out", opt.data, "dataset root to create");
  synth->add_option("--seed", opt.synth_seed, "generator seed");

  auto* prep = app.add_subcommand("prep", "emit enhanced channels and stack statistics");
  prep->add_option("--data", opt.data, "dataset root");
  prep->add_option("--out", opt.out, "output directory");
  prep->add_option("--split", opt.split, "train|test|all")->default_val("all");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", opt.data, "dataset root");
  train->add_option("--out", opt.out, "output directory (checkpoints, run log)");
  train->add_option("--resume", opt.resume, "checkpoint to resume from");

  auto* infer = app.add_subcommand("infer", "predict full images from a checkpoint");
  infer->add_option("--checkpoint", opt.checkpoint, "trained checkpoint")->required();
  infer->add_option("--data", opt.data, "dataset root");
  infer->add_option("--out", opt.out, "output directory");
  infer->add_option("--split", opt.split, "train|test|all");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", opt.checkpoint, "trained checkpoint")->required();
  eval->add_option("--data", opt.data, "dataset root");
  eval->add_option("--out", opt.out, "output directory");
  eval->add_option("--split", opt.split, "train|test|all");

  auto* ablate = app.add_subcommand("ablate", "run the four-configuration ablation grid");
  ablate->add_option("--data", opt.data, "dataset root");
  ablate->add_option("--out", opt.out, "output directory");
  ablate->add_option("--iters", opt.ablate_iters, "training iterations per configuration");

  auto* gradcheck = app.add_subcommand("gradcheck", "run the 64-bit finite-difference suite");
  gradcheck->add_option("--seeds", opt.gradcheck_seeds, "random seeds per check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    retina::RunConfig cfg;
    if (synth->parsed() && opt.synth_seed >= 0)
      opt.sets.push_back("synth.seed=" + std::to_string(opt.synth_seed));
    if (ablate->parsed() && opt.ablate_iters > 0)
      opt.sets.push_back("ablate.iters=" + std::to_string(opt.ablate_iters));
    apply_common(cfg, opt);
    if (opt.print_config) {
      std::fputs(retina::emit_config(cfg).c_str(), stdout);
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::fputs(app.help().c_str(), stderr);
      return 2;
    }
    std::string cmd = app.get_subcommands()[0]->get_name();
    if (cfg.precision == "f64") return dispatch<double>(cmd, cfg, opt);
    return dispatch<float>(cmd, cfg, opt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
