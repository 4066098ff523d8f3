// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Criteria 7-9 drive the CLI end to end.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "retina/evaluation.hpp"
#include "retina/gradcheck_suite.hpp"
#include "retina/inference.hpp"
#include "retina/network.hpp"
#include "retina/pipeline.hpp"
#include "retina/training.hpp"

namespace fs = std::filesystem;
using namespace retina;

namespace {

std::string g_retina_bin;
fs::path g_workdir;
int g_failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
  std::printf("criterion %d: %s — %s (%s)\n", criterion, pass ? "PASS" : "FAIL", what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

int run_cli(const std::vector<std::string>& args, const std::string& log_name) {
  std::string cmd = g_retina_bin;
  for (const auto& a : args) cmd += " " + a;
  cmd += " >> " + (g_workdir / log_name).string() + " 2>&1";
  return std::system(cmd.c_str());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "";
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Pulls one metric from an eval_rows.tsv: row identified by scope+mode,
// column by header name.
double metric_from_rows(const fs::path& rows_path, const std::string& scope,
                        const std::string& mode, const std::string& column) {
  std::ifstream in(rows_path);
  if (!in) return std::numeric_limits<double>::quiet_NaN();
  std::string header;
  std::getline(in, header);
  std::vector<std::string> cols;
  std::stringstream hs(header);
  std::string tok;
  while (std::getline(hs, tok, '\t')) cols.push_back(tok);
  int target = -1;
  for (size_t i = 0; i < cols.size(); ++i)
    if (cols[i] == column) target = static_cast<int>(i);
  if (target < 0) return std::numeric_limits<double>::quiet_NaN();
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    while (std::getline(ls, tok, '\t')) f.push_back(tok);
    if (f.size() > static_cast<size_t>(target) && f[0] == scope && f[1] == mode)
      return std::stod(f[target]);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// --------------------------------------------------------------------------

void criterion1_spatial_activation() {
  bool ok = true;
  std::string why;
  if (std::abs(spatial_activation_value(0.0, 1.0) - 1.0) > 1e-12) ok = false, why += "m(0)!=1 ";
  if (std::abs(spatial_activation_value(1.0, 1.0) - 1.0) > 1e-12) ok = false, why += "m(1)!=1 ";

  double peak_expected = 1.0 + (1.0 - std::exp(-0.25));
  double best = -1, best_x = -1;
  bool sym = true, unimodal = true;
  for (int i = 0; i <= 1000; ++i) {
    double x = i / 1000.0;
    double m = spatial_activation_value(x, 1.0);
    if (m > best) best = m, best_x = x;
    if (x <= 0.5 &&
        std::abs(spatial_activation_value(0.5 + (0.5 - x), 1.0) - m) > 1e-12)
      sym = false;
    if (i >= 1 && i <= 500 && m <= spatial_activation_value((i - 1) / 1000.0, 1.0)) unimodal = false;
    if (i >= 501 && m >= spatial_activation_value((i - 1) / 1000.0, 1.0)) unimodal = false;
  }
  if (std::abs(best - peak_expected) > 1e-9 || best_x != 0.5) ok = false, why += "peak ";
  if (!sym) ok = false, why += "symmetry ";
  if (!unimodal) ok = false, why += "unimodality ";
  report(1, ok, "spatial activation exactness",
         ok ? "m(0)=m(1)=1, max " + fmt(best) + " at 0.5" : why);
}

void criterion2_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  auto results = op_gradcheck_suite(20);
  bool ok = true;
  double worst_op = 0;
  std::string bad;
  for (const auto& r : results) {
    worst_op = std::max(worst_op, r.max_rel_err);
    if (r.max_rel_err >= 1e-6 && r.tolerance <= 1e-6) ok = false, bad += r.name + " ";
    if (!r.pass()) ok = false, bad += r.name + " ";
  }
  auto net = network_gradcheck(20, 2);
  if (net.max_rel_err >= 1e-4) ok = false, bad += "network ";
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(2, ok, "gradient integrity (20 seeds)",
         "ops max " + fmt(worst_op) + ", net max " + fmt(net.max_rel_err) + ", " + fmt(secs) + "s" +
             (bad.empty() ? "" : " FAILING: " + bad));
}

void criterion3_loss_identities() {
  using T = ad::Tensor<double>;
  LossWeights w;
  bool ok = true;
  std::string why;

  auto flags = std::make_shared<VecX<double>>(12);
  auto valid = std::make_shared<VecX<double>>(VecX<double>::Ones(12));
  Rng rng(4);
  for (int i = 0; i < 12; ++i) (*flags)[i] = rng.uniform() < 0.5;
  auto uniform = weighted_bce(T::from({1, 3, 2, 2}, VecX<double>::Constant(12, 0.5), true),
                              BceTarget<double>{flags, valid, 3}, w);
  if (std::abs(uniform.values()[0] - std::log(2.0)) > 1e-6) ok = false, why += "ln2 ";

  auto perfect = weighted_bce(T::from({1, 3, 2, 2}, *flags, true),
                              BceTarget<double>{flags, valid, 3}, w);
  if (perfect.values()[0] > 1e-6) ok = false, why += "perfect ";

  // Composition: decay toy term and the (a+b+c)/3 side rule
  ParameterSet<double> params;
  VecX<double> theta(2);
  theta << 1.0, 2.0;
  params.add("toy.w", T::from({1, 2}, theta, true), true);
  LossWeights w_decay = w;
  w_decay.lambda = 0.1;
  NetworkOutputs<double> out;
  out.vessel = T::from({1, 1, 2, 2}, VecX<double>::Constant(4, 0.5), true);
  out.av = T::from({1, 2, 2, 2}, VecX<double>::Constant(8, 0.5), true);
  auto all_invalid = std::make_shared<VecX<double>>(VecX<double>::Zero(12));
  auto decay_only = total_loss(out, BceTarget<double>{flags, all_invalid, 3}, w_decay, params);
  if (std::abs(decay_only.values()[0] - 0.25) > 1e-12) ok = false, why += "decay ";

  LossWeights w0 = w;
  w0.lambda = 0;
  NetworkOutputs<double> with_sides = out;
  auto side_pred = [&](std::uint64_t seed) {
    Rng r(seed);
    VecX<double> v(12);
    for (auto& x : v) x = r.uniform(0.1, 0.9);
    return T::from({1, 3, 2, 2}, v, true);
  };
  with_sides.sides = {side_pred(1), side_pred(2), side_pred(3)};
  BceTarget<double> tgt{flags, valid, 3};
  ParameterSet<double> empty;
  double total = total_loss(with_sides, tgt, w0, empty).values()[0];
  double main = weighted_bce(ad::concat_channels(out.vessel, out.av), tgt, w0).values()[0];
  double a = weighted_bce(with_sides.sides[0], tgt, w0).values()[0];
  double b = weighted_bce(with_sides.sides[1], tgt, w0).values()[0];
  double c = weighted_bce(with_sides.sides[2], tgt, w0).values()[0];
  if (std::abs(total - (main + (a + b + c) / 3.0)) > 1e-12) ok = false, why += "side-mean ";

  report(3, ok, "loss identities", ok ? "ln2, perfect, 0.25 decay, side mean verified" : why);
}

void criterion4_metric_oracles() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string why;
  Rng rng(77);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    int n = 1000;
    std::vector<double> scores(n);
    std::vector<bool> labels(n);
    long long pos = 0;
    for (int i = 0; i < n; ++i) {
      scores[i] = trial % 2 ? rng.uniform() : std::floor(rng.uniform() * 40) / 40.0;
      labels[i] = rng.uniform() < 0.35;
      pos += labels[i];
    }
    if (pos == 0) labels[0] = true;
    if (pos == n) labels[0] = false;
    double fast = roc_auc(scores, labels);
    double wins = 0;
    long long p = 0, ng = 0;
    for (int i = 0; i < n; ++i) {
      if (!labels[i]) continue;
      ++p;
      for (int j = 0; j < n; ++j) {
        if (labels[j]) continue;
        wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
      }
    }
    ng = n - p;
    double oracle = wins / (double(p) * double(ng));
    worst = std::max(worst, std::abs(fast - oracle));
  }
  if (worst >= 1e-12) ok = false, why += "auc ";

  // hand-enumerated confusion matrices
  LabelTriMap gt;
  gt.vessel = Mask::Constant(20, 50, false);
  gt.artery = gt.vessel;
  gt.vein = gt.vessel;
  gt.uncertain = gt.vessel;
  Raster<double> prob = Raster<double>::Zero(20, 50);
  for (int x = 0; x < 50; ++x) gt.vessel(0, x) = gt.vessel(1, x) = true;
  for (int x = 0; x < 35; ++x) prob(0, x) = prob(1, x) = 0.8;
  for (int x = 0; x < 20; ++x) prob(2, x) = 0.8;
  auto seg = seg_metrics(prob, gt, std::nullopt, 0.5);
  if (seg.tp != 70 || seg.fn != 30 || seg.fp != 20 || seg.tn != 880) ok = false, why += "seg-counts ";
  if (std::abs(seg.acc - 0.95) > 1e-12 || std::abs(seg.sen - 0.7) > 1e-12 ||
      std::abs(seg.sp - 880.0 / 900.0) > 1e-12)
    ok = false, why += "seg-ratios ";

  LabelTriMap avgt;
  avgt.vessel = Mask::Constant(2, 10, true);
  avgt.artery = Mask::Constant(2, 10, false);
  avgt.vein = avgt.artery;
  avgt.uncertain = avgt.artery;
  TriProbMap<double> tri;
  tri.vessel = Raster<double>::Constant(2, 10, 0.9);
  tri.artery = Raster<double>::Zero(2, 10);
  tri.vein = Raster<double>::Zero(2, 10);
  for (int x = 0; x < 10; ++x) {
    avgt.artery(0, x) = true;
    avgt.vein(1, x) = true;
    tri.artery(0, x) = x < 8 ? 0.9 : 0.1;
    tri.vein(0, x) = x < 8 ? 0.1 : 0.9;
    tri.artery(1, x) = x < 9 ? 0.1 : 0.9;
    tri.vein(1, x) = x < 9 ? 0.9 : 0.1;
  }
  auto av = av_metrics(decide_av(tri, 0.5), avgt, AvMode::gt_pixels);
  if (av.tp != 8 || av.fn != 2 || av.tn != 9 || av.fp != 1) ok = false, why += "av-counts ";
  if (std::abs(av.sen - 0.8) > 1e-12 || std::abs(av.sp - 0.9) > 1e-12 ||
      std::abs(av.acc - 0.85) > 1e-12)
    ok = false, why += "av-ratios ";

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(4, ok, "metric oracle equivalence",
         ok ? "auc max dev " + fmt(worst) + " over 100 instances, counts exact, " + fmt(secs) + "s"
            : why);
}

void criterion5_tiling() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string why;
  Rng rng(55);
  for (int trial = 0; trial < 500; ++trial) {
    int patch = 8 + static_cast<int>(rng.below(120));
    int h = patch + static_cast<int>(rng.below(400));
    int w = patch + static_cast<int>(rng.below(400));
    int stride = 1 + static_cast<int>(rng.below(80));
    for (int dim : {h, w}) {
      auto axis = tile_axis(dim, patch, stride);
      std::vector<bool> covered(dim, false);
      for (int p : axis)
        for (int i = 0; i < patch; ++i) covered[p + i] = true;
      for (int i = 0; i < dim; ++i)
        if (!covered[i]) {
          ok = false;
          why = "coverage hole at trial " + std::to_string(trial);
        }
    }
  }

  auto grid = tile_positions(584, 565, 64, 10);
  if (tile_axis(584, 64, 10).size() != 53 || tile_axis(565, 64, 10).size() != 52 ||
      grid.positions.size() != 53 * 52)
    ok = false, why += " drive-grid";

  for (int stride : {3, 10, 33}) {
    TileGrid g = tile_positions(200, 170, 64, stride);
    auto fn = [&](const std::pair<int, int>*, int count, VecX<float>& out) {
      out.setConstant(Eigen::Index(count) * 64 * 64, 0.42f);
    };
    auto st = stitch_tiles<float>(200, 170, g, 1, 7, fn);
    if (st.coverage.minCoeff() < 1) ok = false, why += " coverage";
    if ((st.maps[0] - 0.42f).abs().maxCoeff() > 1e-6) ok = false, why += " stub-stitch";
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(5, ok, "tiling and stitching",
         ok ? "500 random grids covered; 53x52 drive grid; stub stitches constant, " + fmt(secs) + "s"
            : why);
}

void criterion6_schedule() {
  TrainConfig cfg;
  cfg.lr0 = 0.05;
  cfg.lr_halve_every = 7500;
  bool ok = lr_at(0, cfg) == 0.05 && lr_at(7500, cfg) == 0.025 && lr_at(15000, cfg) == 0.0125;
  report(6, ok, "learning-rate schedule fidelity", "0.05 -> 0.025@7500 -> 0.0125@15000");
}

struct PipelineResult {
  double auc = 0, av_acc = 0, seconds = 0;
  std::string rows_bytes;
  bool ok = false;
};

PipelineResult run_pipeline7(const std::string& tag) {
  PipelineResult res;
  fs::path base = g_workdir / tag;
  fs::create_directories(base);
  auto t0 = std::chrono::steady_clock::now();
  std::string data = (base / "data").string();
  std::string train_out = (base / "train").string();
  std::string infer_out = (base / "infer").string();
  std::string eval_out = (base / "eval").string();

  if (run_cli({"synth", "--out", data}, tag + ".log") != 0) return res;
  if (run_cli({"train", "--data", data, "--out", train_out}, tag + ".log") != 0) return res;
  std::string ckpt = train_out + "/checkpoint_final.ckpt";
  if (run_cli({"infer", "--checkpoint", ckpt, "--data", data, "--out", infer_out, "--split",
               "test"},
              tag + ".log") != 0)
    return res;
  if (run_cli({"eval", "--checkpoint", ckpt, "--data", data, "--out", eval_out, "--split", "test"},
              tag + ".log") != 0)
    return res;

  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fs::path rows = fs::path(eval_out) / "eval_rows.tsv";
  res.auc = metric_from_rows(rows, "overall", "vessel", "auc");
  res.av_acc = metric_from_rows(rows, "overall", "gt_pixels", "acc");
  res.rows_bytes = slurp(rows);
  res.ok = true;
  return res;
}

PipelineResult g_run7;

void criterion7_end_to_end() {
  g_run7 = run_pipeline7("run7");
  bool ok = g_run7.ok && g_run7.auc >= 0.95 && g_run7.av_acc >= 0.85;
  unsigned hw = std::thread::hardware_concurrency();
  double budget = 1200.0 * std::max(1.0, 4.0 / std::max(1u, hw));
  bool in_time = g_run7.seconds <= budget;
  report(7, ok && in_time, "desk-scale end-to-end (synth -> train -> infer -> eval)",
         "vessel AUC " + fmt(g_run7.auc) + " (>=0.95), A/V acc " + fmt(g_run7.av_acc) +
             " (>=0.85), " + fmt(g_run7.seconds) + "s of " + fmt(budget) + "s budget on " +
             std::to_string(hw) + " hw threads");
}

std::string g_ablation8;
double g_ablate_full = 0, g_ablate_base = 0;

void criterion8_ablation(const std::string& tag, bool is_rerun) {
  fs::path base = g_workdir / tag;
  fs::create_directories(base);
  std::string data = (g_workdir / "run7" / "data").string();
  if (!fs::exists(data)) {
    run_cli({"synth", "--out", data}, tag + ".log");
  }
  std::string out = (base / "ablate").string();
  bool ran = run_cli({"ablate", "--data", data, "--out", out}, tag + ".log") == 0;
  std::string rows = slurp(fs::path(out) / "ablation_rows.tsv");
  if (is_rerun) {
    g_ablation8 = rows;  // stored for criterion 9 comparison
    return;
  }
  double base_acc = std::numeric_limits<double>::quiet_NaN();
  double full_acc = std::numeric_limits<double>::quiet_NaN();
  std::stringstream ss(rows);
  std::string line;
  std::getline(ss, line);  // header
  int row = 0;
  while (std::getline(ss, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, '\t')) f.push_back(tok);
    if (f.size() >= 8) {
      if (row == 0) base_acc = std::stod(f[7]);
      if (row == 3) full_acc = std::stod(f[7]);
    }
    ++row;
  }
  g_ablate_full = full_acc;
  g_ablate_base = base_acc;
  g_ablation8 = rows;
  bool table_exists = fs::exists(fs::path(out) / "ablation.txt");
  bool ok = ran && table_exists && row == 4 && full_acc >= base_acc;
  report(8, ok, "ablation harness (baseline / +MT / +MT+MI / +MT+MI+AC)",
         "full A/V acc " + fmt(full_acc) + " >= baseline " + fmt(base_acc) + ", 4 rows emitted");
}

void criterion9_determinism() {
  bool ok = true;
  std::string why;

  // re-run criterion 7's pipeline with identical seeds
  PipelineResult rerun = run_pipeline7("run9");
  if (!rerun.ok || rerun.rows_bytes != g_run7.rows_bytes) ok = false, why += "run7-rerun ";

  // re-run criterion 8's ablation
  std::string first8 = g_ablation8;
  criterion8_ablation("run9_ablate", /*is_rerun=*/true);
  if (g_ablation8.empty() || g_ablation8 != first8) ok = false, why += "ablate-rerun ";

  // --threads N equals --threads 1, exercised on a short training + inference
  fs::path base = g_workdir / "run9_threads";
  fs::create_directories(base);
  std::string data = (g_workdir / "run7" / "data").string();
  auto short_train = [&](const std::string& out, int threads) {
    return run_cli({"train", "--data", data, "--out", out, "--threads", std::to_string(threads),
                    "--set", "train.iters=40", "--set", "train.checkpoint_every=40"},
                   "run9_threads.log") == 0;
  };
  std::string out1 = (base / "t1").string(), out4 = (base / "t4").string();
  if (!short_train(out1, 1) || !short_train(out4, 4)) ok = false, why += "threads-train ";
  std::string ck1 = slurp(fs::path(out1) / "checkpoint_final.ckpt");
  if (ck1.empty() || ck1 != slurp(fs::path(out4) / "checkpoint_final.ckpt"))
    ok = false, why += "threads-ckpt ";
  auto short_infer = [&](const std::string& out, int threads) {
    return run_cli({"infer", "--checkpoint", out1 + "/checkpoint_final.ckpt", "--data", data,
                    "--out", out, "--split", "test", "--threads", std::to_string(threads)},
                   "run9_threads.log") == 0;
  };
  std::string io1 = (base / "i1").string(), io4 = (base / "i4").string();
  if (!short_infer(io1, 1) || !short_infer(io4, 4)) ok = false, why += "threads-infer ";
  for (const char* f : {"img_030.vessel.png", "img_030.av.png"}) {
    std::string b1 = slurp(fs::path(io1) / f);
    if (b1.empty() || b1 != slurp(fs::path(io4) / f)) ok = false, why += std::string(f) + " ";
  }

  report(9, ok, "determinism (seed reruns bitwise, threads 1 == threads N)",
         ok ? "eval rows, ablation rows, checkpoints, and rasters identical" : why);
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--retina" && i + 1 < argc) g_retina_bin = argv[++i];
    else if (a == "--workdir" && i + 1 < argc) g_workdir = argv[++i];
    else if (a == "--only" && i + 1 < argc) only = std::atoi(argv[++i]);
  }
  if (g_retina_bin.empty() || g_workdir.empty()) {
    std::fprintf(stderr, "usage: acceptance --retina <cli path> --workdir <dir> [--only N]\n");
    return 2;
  }
  fs::create_directories(g_workdir);

  auto want = [&](int n) { return only == 0 || only == n; };
  if (want(1)) criterion1_spatial_activation();
  if (want(2)) criterion2_gradients();
  if (want(3)) criterion3_loss_identities();
  if (want(4)) criterion4_metric_oracles();
  if (want(5)) criterion5_tiling();
  if (want(6)) criterion6_schedule();
  if (want(7) || only == 9) criterion7_end_to_end();
  if (want(8) || only == 9) criterion8_ablation("run8", false);
  if (want(9)) criterion9_determinism();

  if (g_failures) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
