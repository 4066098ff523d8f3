#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "retina/config.hpp"
#include "retina/dataset.hpp"
#include "retina/evaluation.hpp"
#include "retina/inference.hpp"
#include "retina/training.hpp"

namespace retina {

namespace fs = std::filesystem;

template <class S>
struct LoadedImage {
  std::string name;
  FundusImage<S> image;
  LabelTriMap label;
};

template <class S>
LoadedImage<S> load_entry(const DatasetEntry& e) {
  LoadedImage<S> out;
  out.name = e.name;
  out.image = load_image<S>(e.image_path);
  out.label = load_av_label(e.label_path);
  if (!e.fov_path.empty()) out.image.fov = load_mask(e.fov_path);
  require(out.label.height() == out.image.height() && out.label.width() == out.image.width(),
          "dataset: image/label dimensions differ for " + e.name);
  return out;
}

// ---------------------------------------------------------------------------
// Optional preprocessing cache: enhanced channels requantized to bytes under
// <root>/cache, with per-channel ranges in a sidecar. Byte quantization makes
// cached runs differ from fresh ones by up to ~1/255 per channel, so the cache
// is off by default and acceptance runs never use it.

template <class S>
struct CacheChannels {
  FundusImage<S> ic;
  Raster<S> gabor, line;
};

template <class S>
InputStack<S> stack_with_cache(const FundusImage<S>& img, const std::string& name,
                               const RunConfig& cfg) {
  if (cfg.net.input_channels == 3) return build_rgb_stack(img);
  if (!cfg.cache) return preprocess_image(img, cfg.pre);

  fs::path dir = fs::path(cfg.data_root) / "cache";
  fs::path sidecar = dir / (name + ".stats.txt");
  auto quant_path = [&](const char* kind) { return dir / (name + "." + kind + ".png"); };

  auto write_quantized = [&](const Raster<S>& map, const std::string& path, std::ostream& stats,
                             const char* kind) {
    double lo = map.template cast<double>().minCoeff();
    double hi = map.template cast<double>().maxCoeff();
    double span = hi > lo ? hi - lo : 1.0;
    int h = static_cast<int>(map.rows()), w = static_cast<int>(map.cols());
    std::vector<std::uint8_t> bytes(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        bytes[static_cast<size_t>(y) * w + x] = quantize_unit((map(y, x) - lo) / span);
    write_png_gray8(path, h, w, bytes.data());
    stats << kind << " " << std::setprecision(17) << lo << " " << hi << "\n";
  };
  auto read_quantized = [&](const std::string& path, double lo, double hi) {
    Rgb8Image raw = read_png_rgb8(path);
    Raster<S> map(raw.height, raw.width);
    double span = hi > lo ? hi - lo : 1.0;
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < raw.width; ++x)
        map(y, x) = static_cast<S>(lo + raw.pixels[(static_cast<size_t>(y) * raw.width + x) * 3] / 255.0 * span);
    return map;
  };

  std::ifstream check(sidecar);
  std::string tag;
  if (check && std::getline(check, tag) && tag == "pre " + cfg.config_hash()) {
    CacheChannels<S> cc;
    std::string kind;
    double lo, hi;
    std::array<Raster<S>, 5> maps;  // ic r,g,b, gabor, line
    const char* kinds[5] = {"ic_r", "ic_g", "ic_b", "gabor", "line"};
    int found = 0;
    while (check >> kind >> lo >> hi) {
      for (int i = 0; i < 5; ++i)
        if (kind == kinds[i]) {
          maps[i] = read_quantized(quant_path(kinds[i]).string(), lo, hi);
          ++found;
        }
    }
    if (found == 5) {
      cc.ic.rgb = {maps[0], maps[1], maps[2]};
      cc.ic.fov = img.fov;
      return build_stack(img, cc.ic, maps[3], maps[4]);
    }
  }

  // cache miss: compute and fill
  double sigma = std::max(img.height(), img.width()) / cfg.pre.ic_sigma_divisor;
  FundusImage<S> ic = illumination_correct(img, sigma);
  Raster<S> inv_green = (1.0 - ic.rgb[1].template cast<double>()).template cast<S>();
  Raster<S> gabor = gabor_enhance(inv_green, cfg.pre.gabor);
  Raster<S> line = line_detect(inv_green, cfg.pre.line);

  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream stats(sidecar);
  if (stats) {
    stats << "pre " << cfg.config_hash() << "\n";
    write_quantized(ic.rgb[0], quant_path("ic_r").string(), stats, "ic_r");
    write_quantized(ic.rgb[1], quant_path("ic_g").string(), stats, "ic_g");
    write_quantized(ic.rgb[2], quant_path("ic_b").string(), stats, "ic_b");
    write_quantized(gabor, quant_path("gabor").string(), stats, "gabor");
    write_quantized(line, quant_path("line").string(), stats, "line");
  }
  return build_stack(img, ic, gabor, line);
}

// ---------------------------------------------------------------------------
// Supervision maps

template <class S>
TrainItem<S> make_train_item(const LoadedImage<S>& li, const InputStack<S>& stack, int channels) {
  TrainItem<S> item;
  item.height = li.image.height();
  item.width = li.image.width();
  item.channels = channels;
  item.stack = flatten_stack(stack, channels);
  Eigen::Index hw = Eigen::Index(item.height) * item.width;
  item.flags.resize(3 * hw);
  item.valid.resize(3 * hw);
  for (int y = 0; y < item.height; ++y)
    for (int x = 0; x < item.width; ++x) {
      Eigen::Index i = Eigen::Index(y) * item.width + x;
      bool in_fov = li.image.in_fov(y, x);
      bool unc = li.label.uncertain(y, x);
      item.flags[i] = li.label.vessel(y, x) ? S(1) : S(0);
      item.flags[hw + i] = li.label.artery(y, x) ? S(1) : S(0);
      item.flags[2 * hw + i] = li.label.vein(y, x) ? S(1) : S(0);
      item.valid[i] = in_fov ? S(1) : S(0);
      item.valid[hw + i] = (in_fov && !unc) ? S(1) : S(0);
      item.valid[2 * hw + i] = (in_fov && !unc) ? S(1) : S(0);
    }
  return item;
}

template <class S>
std::vector<TrainItem<S>> build_items(const DatasetIndex& ds, const RunConfig& cfg,
                                      const std::string& split) {
  std::vector<TrainItem<S>> items;
  for (const DatasetEntry* e : ds.split(split)) {
    LoadedImage<S> li = load_entry<S>(*e);
    InputStack<S> stack = stack_with_cache(li.image, li.name, cfg);
    items.push_back(make_train_item(li, stack, cfg.net.input_channels));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Subcommand bodies (shared by the CLI and the integration tests)

inline void cmd_synth(const RunConfig& cfg) { synth_dataset(cfg.synth, cfg.data_root); }

template <class S>
std::string cmd_train(const RunConfig& cfg, const std::string& resume = "") {
  set_threads(cfg.threads);
  fs::create_directories(cfg.out_root);
  DatasetIndex ds = load_dataset(cfg.data_root);
  auto items = build_items<S>(ds, cfg, "train");
  PatchSampler<S> sampler(std::move(items), cfg.train.patch);

  Network<S> net(cfg.net, cfg.seed);
  OptimState<S> optim = OptimState<S>::init(net.params());
  Rng rng(fnv1a64("train-stream", cfg.seed));
  CheckpointMeta meta{cfg.config_hash(), cfg.channel_layout()};
  if (!resume.empty()) load_checkpoint(resume, net, &optim, &rng, cfg.config_hash());

  std::ofstream cfg_out(fs::path(cfg.out_root) / "effective.cfg");
  cfg_out << emit_config(cfg);
  cfg_out.close();

  std::ofstream log(fs::path(cfg.out_root) / "train.log",
                    resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) fail("train: cannot write run log under ", cfg.out_root);

  std::string final_path = (fs::path(cfg.out_root) / "checkpoint_final.ckpt").string();
  train_loop<S>(
      net, optim, rng, sampler, cfg.train, cfg.loss,
      [&](long long iter, double loss, double lr) {
        log << iter << '\t' << std::setprecision(17) << loss << '\t' << lr << '\n';
        log.flush();
      },
      [&](long long iter) {
        std::string path = final_path;
        if (iter < cfg.train.max_iters) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.ckpt", iter);
          path = (fs::path(cfg.out_root) / buf).string();
        }
        save_checkpoint(path, net, optim, rng, meta);
      });
  return final_path;
}

template <class S>
struct ImagePrediction {
  std::string name;
  FullPrediction<S> pred;
  LabelTriMap label;
  std::optional<Mask> fov;
};

template <class S>
std::vector<ImagePrediction<S>> predict_split(const RunConfig& cfg, const std::string& ckpt,
                                              const std::string& split, Network<S>& net) {
  DatasetIndex ds = load_dataset(cfg.data_root);
  load_checkpoint<S>(ckpt, net, static_cast<OptimState<S>*>(nullptr), nullptr, cfg.config_hash());
  std::vector<ImagePrediction<S>> out;
  for (const DatasetEntry* e : ds.split(split)) {
    LoadedImage<S> li = load_entry<S>(*e);
    InputStack<S> stack = stack_with_cache(li.image, li.name, cfg);
    VecX<S> flat = flatten_stack(stack, cfg.net.input_channels);
    ImagePrediction<S> ip;
    ip.name = li.name;
    ip.pred = predict_stack(flat, li.image.height(), li.image.width(), net, cfg.infer_stride,
                            cfg.tile_batch);
    ip.label = std::move(li.label);
    ip.fov = li.image.fov;
    out.push_back(std::move(ip));
  }
  return out;
}

template <class S>
void cmd_infer(const RunConfig& cfg, const std::string& ckpt, const std::string& split = "test") {
  set_threads(cfg.threads);
  fs::create_directories(cfg.out_root);
  Network<S> net(cfg.net, cfg.seed);
  auto preds = predict_split(cfg, ckpt, split, net);
  for (const auto& ip : preds) {
    auto base = fs::path(cfg.out_root) / ip.name;
    write_gray_map(ip.pred.tri.vessel, base.string() + ".vessel.png");
    write_gray_map(ip.pred.tri.artery, base.string() + ".artery.png");
    write_gray_map(ip.pred.tri.vein, base.string() + ".vein.png");
    auto dec = decide_av(ip.pred.tri, cfg.threshold);
    write_av_overlay(dec.vessel, dec.artery, dec.vein, base.string() + ".av.png");
    if (ip.pred.has_activation) write_gray_map(ip.pred.activation, base.string() + ".activation.png");
    std::ofstream sidecar(base.string() + ".txt");
    sidecar << "name " << ip.name << "\nthreshold " << cfg.threshold << "\nstride "
            << cfg.infer_stride << "\nconfig " << cfg.config_hash() << "\n";
  }
}

struct EvalSummary {
  SegReport seg;
  AVReport av_gt, av_detected, av_skeletal;
};

template <class S>
EvalSummary evaluate_predictions(const std::vector<ImagePrediction<S>>& preds,
                                 const RunConfig& cfg, std::ostream* rows,
                                 std::ostream* per_image_rows = nullptr) {
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  std::vector<double> scores;
  std::vector<bool> labels;
  AvCounts gt_counts, det_counts, skel_counts;

  auto row = [&](std::ostream& os, const std::string& scope, const std::string& mode, double acc,
                 double sen, double sp, double auc, long long n) {
    os << scope << '\t' << mode << '\t' << std::setprecision(17) << acc << '\t' << sen << '\t'
       << sp << '\t' << auc << '\t' << n << '\t' << cfg.config_hash() << '\n';
  };

  for (const auto& ip : preds) {
    SegReport seg = seg_metrics(ip.pred.tri.vessel, ip.label, ip.fov, cfg.threshold);
    auto dec = decide_av(ip.pred.tri, cfg.threshold);
    AvCounts g = av_counts(dec, ip.label, AvMode::gt_pixels, ip.fov);
    AvCounts d = av_counts(dec, ip.label, AvMode::detected, ip.fov);
    AvCounts k = av_counts(dec, ip.label, AvMode::skeletal, ip.fov);
    tp += seg.tp;
    fp += seg.fp;
    tn += seg.tn;
    fn += seg.fn;
    gt_counts += g;
    det_counts += d;
    skel_counts += k;
    for (int y = 0; y < ip.label.height(); ++y)
      for (int x = 0; x < ip.label.width(); ++x) {
        if (ip.fov && !(*ip.fov)(y, x)) continue;
        scores.push_back(static_cast<double>(ip.pred.tri.vessel(y, x)));
        labels.push_back(ip.label.vessel(y, x));
      }
    if (per_image_rows) {
      row(*per_image_rows, ip.name, "vessel", seg.acc, seg.sen, seg.sp, seg.auc,
          seg.tp + seg.fp + seg.tn + seg.fn);
      for (auto [mode, c] : {std::pair{AvMode::gt_pixels, g}, {AvMode::detected, d},
                             {AvMode::skeletal, k}}) {
        if (c.total() == 0) continue;
        AVReport r = av_report_from_counts(c, mode);
        row(*per_image_rows, ip.name, av_mode_name(mode), r.acc, r.sen, r.sp,
            std::numeric_limits<double>::quiet_NaN(), r.evaluated);
      }
    }
  }

  EvalSummary sum;
  bool have_both = (tp + fn) > 0 && (tn + fp) > 0;
  sum.seg = seg_report_from_counts(tp, fp, tn, fn, have_both ? roc_auc(scores, labels) : 0.0,
                                   have_both);
  auto report_or_flag = [](const AvCounts& c, AvMode mode) {
    if (c.total() > 0) return av_report_from_counts(c, mode);
    AVReport r;  // e.g. a weak model that detects no vessel pixels at all
    r.mode = mode;
    r.degenerate = true;
    r.acc = r.sen = r.sp = std::numeric_limits<double>::quiet_NaN();
    return r;
  };
  sum.av_gt = report_or_flag(gt_counts, AvMode::gt_pixels);
  sum.av_detected = report_or_flag(det_counts, AvMode::detected);
  sum.av_skeletal = report_or_flag(skel_counts, AvMode::skeletal);
  if (rows) {
    row(*rows, "overall", "vessel", sum.seg.acc, sum.seg.sen, sum.seg.sp, sum.seg.auc,
        sum.seg.tp + sum.seg.fp + sum.seg.tn + sum.seg.fn);
    for (const AVReport* r : {&sum.av_gt, &sum.av_detected, &sum.av_skeletal})
      row(*rows, "overall", av_mode_name(r->mode), r->acc, r->sen, r->sp,
          std::numeric_limits<double>::quiet_NaN(), r->evaluated);
  }
  return sum;
}

template <class S>
EvalSummary cmd_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& split = "test") {
  set_threads(cfg.threads);
  fs::create_directories(cfg.out_root);
  Network<S> net(cfg.net, cfg.seed);
  auto preds = predict_split(cfg, ckpt, split, net);

  std::ofstream rows(fs::path(cfg.out_root) / "eval_rows.tsv");
  rows << "scope\tmode\tacc\tsen\tsp\tauc\tn\tconfig\n";
  EvalSummary sum = evaluate_predictions(preds, cfg, &rows, &rows);

  std::ofstream report(fs::path(cfg.out_root) / "eval_report.txt");
  report << "vessel segmentation (threshold " << cfg.threshold << ", split " << split << ")\n";
  report << "  Acc " << format_pct(sum.seg.acc) << "  Sen " << format_pct(sum.seg.sen) << "  Sp "
         << format_pct(sum.seg.sp) << "  AUC " << format_pct(sum.seg.auc) << "\n";
  report << "A/V classification (artery positive)\n";
  for (const AVReport* r : {&sum.av_gt, &sum.av_detected, &sum.av_skeletal})
    report << "  " << std::setw(9) << std::left << av_mode_name(r->mode) << " Acc "
           << format_pct(r->acc) << "  Sen " << format_pct(r->sen) << "  Sp " << format_pct(r->sp)
           << "  (" << r->evaluated << " px)\n";
  return sum;
}

template <class S>
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg) {
  set_threads(cfg.threads);
  fs::create_directories(cfg.out_root);
  struct Combo {
    bool mt, mi, ac;
    const char* tag;
  };
  const Combo combos[4] = {{false, false, false, "baseline"},
                           {true, false, false, "mt"},
                           {true, true, false, "mt_mi"},
                           {true, true, true, "mt_mi_ac"}};
  std::vector<AblationRow> rows;
  for (const Combo& combo : combos) {
    RunConfig sub = cfg;
    sub.net.multitask = combo.mt;
    sub.multi_input = combo.mi;
    sub.net.sigma = combo.ac ? cfg.net.sigma : 0.0;
    sub.train.max_iters = cfg.ablate_iters;
    sub.out_root = (fs::path(cfg.out_root) / (std::string("ablate_") + combo.tag)).string();
    sub.finalize();
    std::string ckpt = cmd_train<S>(sub);
    Network<S> net(sub.net, sub.seed);
    auto preds = predict_split(sub, ckpt, "test", net);
    EvalSummary sum = evaluate_predictions(preds, sub, nullptr);
    AblationRow row;
    row.mt = combo.mt;
    row.mi = combo.mi;
    row.ac = combo.ac;
    row.seg = sum.seg;
    row.av = sum.av_gt;
    row.config_hash = sub.config_hash();
    row.split_id = cfg.data_root + ":test";
    rows.push_back(row);
  }
  std::ofstream table(fs::path(cfg.out_root) / "ablation.txt");
  table << format_ablation_table(rows);
  std::ofstream tsv(fs::path(cfg.out_root) / "ablation_rows.tsv");
  tsv << ablation_rows_tsv(rows);
  return rows;
}

template <class S>
void cmd_prep(const RunConfig& cfg, const std::string& split = "all") {
  set_threads(cfg.threads);
  fs::create_directories(cfg.out_root);
  DatasetIndex ds = load_dataset(cfg.data_root);
  for (const DatasetEntry* e : ds.split(split)) {
    LoadedImage<S> li = load_entry<S>(*e);
    double sigma = std::max(li.image.height(), li.image.width()) / cfg.pre.ic_sigma_divisor;
    FundusImage<S> ic = illumination_correct(li.image, sigma);
    Raster<S> inv_green = (1.0 - ic.rgb[1].template cast<double>()).template cast<S>();
    Raster<S> gabor = gabor_enhance(inv_green, cfg.pre.gabor);
    Raster<S> line = line_detect(inv_green, cfg.pre.line);
    InputStack<S> stack = build_stack(li.image, ic, gabor, line);

    auto base = fs::path(cfg.out_root) / li.name;
    std::vector<std::uint8_t> rgb(static_cast<size_t>(li.image.height()) * li.image.width() * 3);
    for (int y = 0; y < li.image.height(); ++y)
      for (int x = 0; x < li.image.width(); ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<size_t>(y) * li.image.width() + x) * 3 + c] =
              quantize_unit(static_cast<double>(ic.rgb[c](y, x)));
    write_png_rgb8(base.string() + ".ic.png", li.image.height(), li.image.width(), rgb.data());

    auto write_norm = [&](const Raster<S>& map, const std::string& path) {
      double lo = map.template cast<double>().minCoeff();
      double hi = map.template cast<double>().maxCoeff();
      double span = hi > lo ? hi - lo : 1.0;
      Raster<S> unit = ((map.template cast<double>() - lo) / span).template cast<S>();
      write_gray_map(unit, path);
    };
    write_norm(gabor, base.string() + ".gabor.png");
    write_norm(line, base.string() + ".line.png");

    std::ofstream stats(base.string() + ".stats.txt");
    stats << "channel\tmean\tstd\n" << std::setprecision(17);
    const char* names[kStackChannels] = {"R", "G", "B", "R_ic", "G_ic", "B_ic", "gabor", "line"};
    for (int c = 0; c < kStackChannels; ++c)
      stats << names[c] << '\t' << stack.mean[c] << '\t' << stack.stdev[c] << '\n';
  }
}

}  // namespace retina
