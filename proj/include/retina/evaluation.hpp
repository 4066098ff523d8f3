#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "retina/common.hpp"
#include "retina/image.hpp"
#include "retina/inference.hpp"

namespace retina {

struct SegReport {
  double acc = 0, sen = 0, sp = 0, auc = 0;
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  bool degenerate = false;  // a ratio had an empty denominator (reported as NaN)
};

enum class AvMode { gt_pixels, detected, skeletal };

inline const char* av_mode_name(AvMode m) {
  switch (m) {
    case AvMode::gt_pixels: return "gt_pixels";
    case AvMode::detected: return "detected";
    case AvMode::skeletal: return "skeletal";
  }
  return "?";
}

// Artery is the positive class: sen = artery recall, sp = vein recall.
struct AVReport {
  double acc = 0, sen = 0, sp = 0;
  long long tp = 0, fn = 0, tn = 0, fp = 0;
  long long evaluated = 0;
  AvMode mode = AvMode::gt_pixels;
  bool degenerate = false;
};

// Exact trapezoidal ROC area; equivalently the tie-adjusted Mann-Whitney
// statistic (ties count one half).
inline double roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  require(scores.size() == labels.size(), "roc_auc: score/label size mismatch");
  long long pos = std::count(labels.begin(), labels.end(), true);
  long long neg = static_cast<long long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) fail("roc_auc: needs at least one positive and one negative");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum_pos - p * (p + 1) / 2) / (p * n);
}

namespace eval_detail {
inline double ratio(long long num, long long den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return std::numeric_limits<double>::quiet_NaN();
  }
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace eval_detail

inline SegReport seg_report_from_counts(long long tp, long long fp, long long tn, long long fn,
                                        double auc, bool auc_defined) {
  SegReport r;
  r.tp = tp;
  r.fp = fp;
  r.tn = tn;
  r.fn = fn;
  r.acc = eval_detail::ratio(tp + tn, tp + tn + fp + fn, r.degenerate);
  r.sen = eval_detail::ratio(tp, tp + fn, r.degenerate);
  r.sp = eval_detail::ratio(tn, tn + fp, r.degenerate);
  if (auc_defined) {
    r.auc = auc;
  } else {
    r.auc = std::numeric_limits<double>::quiet_NaN();
    r.degenerate = true;
  }
  return r;
}

// Vessel segmentation metrics over in-FOV pixels: threshold counts against
// gt.vessel (uncertain pixels count as vessel) plus ROC AUC on the raw scores.
template <class S>
SegReport seg_metrics(const Raster<S>& prob, const LabelTriMap& gt, const std::optional<Mask>& fov,
                      double threshold = 0.5) {
  int h = gt.height(), w = gt.width();
  require(prob.rows() == h && prob.cols() == w, "seg_metrics: dimension mismatch");
  if (fov) require(fov->rows() == h && fov->cols() == w, "seg_metrics: fov dimension mismatch");

  long long tp = 0, fp = 0, tn = 0, fn = 0;
  std::vector<double> scores;
  std::vector<bool> labels;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (fov && !(*fov)(y, x)) continue;
      bool pred = static_cast<double>(prob(y, x)) >= threshold;
      bool truth = gt.vessel(y, x);
      tp += pred && truth;
      fp += pred && !truth;
      tn += !pred && !truth;
      fn += !pred && truth;
      scores.push_back(static_cast<double>(prob(y, x)));
      labels.push_back(truth);
    }
  require(tp + fp + tn + fn > 0, "seg_metrics: empty field of view");
  bool have_both = (tp + fn) > 0 && (tn + fp) > 0;
  return seg_report_from_counts(tp, fp, tn, fn, have_both ? roc_auc(scores, labels) : 0.0,
                                have_both);
}

struct AvCounts {
  long long tp = 0, fn = 0, tn = 0, fp = 0;
  long long total() const { return tp + fn + tn + fp; }
  AvCounts& operator+=(const AvCounts& o) {
    tp += o.tp;
    fn += o.fn;
    tn += o.tn;
    fp += o.fp;
    return *this;
  }
};

// Confusion counts for one image. gt_pixels scores every ground-truth
// artery/vein pixel by argmax preference; detected restricts to pixels also
// predicted vessel; skeletal restricts to the thinned gt vessel mask.
// Uncertain pixels are always excluded.
template <class S>
AvCounts av_counts(const DecisionMap<S>& decisions, const LabelTriMap& gt, AvMode mode,
                   const std::optional<Mask>& fov = std::nullopt) {
  int h = gt.height(), w = gt.width();
  require(decisions.artery_pref.rows() == h && decisions.artery_pref.cols() == w,
          "av_counts: dimension mismatch");
  Mask skeleton;
  if (mode == AvMode::skeletal) {
    require(gt.vessel.any(), "av_counts: skeletal mode needs a non-empty gt vessel mask");
    skeleton = skeletonize(gt.vessel);
  }
  AvCounts c;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (fov && !(*fov)(y, x)) continue;
      if (gt.uncertain(y, x)) continue;
      bool is_a = gt.artery(y, x), is_v = gt.vein(y, x);
      if (!is_a && !is_v) continue;
      if (mode == AvMode::detected && !decisions.vessel(y, x)) continue;
      if (mode == AvMode::skeletal && !skeleton(y, x)) continue;
      bool pred_a = decisions.artery_pref(y, x);
      if (is_a) {
        c.tp += pred_a;
        c.fn += !pred_a;
      } else {
        c.tn += !pred_a;
        c.fp += pred_a;
      }
    }
  return c;
}

inline AVReport av_report_from_counts(const AvCounts& c, AvMode mode) {
  require(c.total() > 0, "av_metrics: empty evaluation set");
  AVReport r;
  r.mode = mode;
  r.tp = c.tp;
  r.fn = c.fn;
  r.tn = c.tn;
  r.fp = c.fp;
  r.evaluated = c.total();
  r.acc = eval_detail::ratio(c.tp + c.tn, c.total(), r.degenerate);
  r.sen = eval_detail::ratio(c.tp, c.tp + c.fn, r.degenerate);
  r.sp = eval_detail::ratio(c.tn, c.tn + c.fp, r.degenerate);
  return r;
}

template <class S>
AVReport av_metrics(const DecisionMap<S>& decisions, const LabelTriMap& gt, AvMode mode,
                    const std::optional<Mask>& fov = std::nullopt) {
  require(gt.artery.any() && gt.vein.any(),
          "av_metrics: ground truth needs both artery and vein pixels");
  return av_report_from_counts(av_counts(decisions, gt, mode, fov), mode);
}

template <class S>
AVReport skeletal_av_metrics(const DecisionMap<S>& decisions, const LabelTriMap& gt,
                             const std::optional<Mask>& fov = std::nullopt) {
  return av_report_from_counts(av_counts(decisions, gt, AvMode::skeletal, fov), AvMode::skeletal);
}

// ---------------------------------------------------------------------------
// Ablation report

struct AblationRow {
  bool mt = false, mi = false, ac = false;
  SegReport seg;
  AVReport av;
  std::string config_hash;
  std::string split_id;  // all rows must share the evaluation split
};

inline std::string format_pct(double v) {
  if (std::isnan(v)) return "   nan";
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%6.2f", v * 100.0);
  return buf;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  require(rows.size() == 4, "ablation: expected the four standard configurations");
  for (const auto& r : rows)
    require(r.split_id == rows[0].split_id, "ablation: rows evaluated on different test splits");
  std::ostringstream os;
  os << "Combination      Vessel segmentation             A/V classification\n";
  os << "MTs  MIs  AC     Acc(%) Sen(%) Sp(%)  AUC(%)     Acc(%) Sen(%) Sp(%)\n";
  for (const auto& r : rows) {
    auto flag = [](bool b) { return b ? " x  " : " -  "; };
    os << flag(r.mt) << " " << flag(r.mi) << " " << flag(r.ac) << "  ";
    os << format_pct(r.seg.acc) << " " << format_pct(r.seg.sen) << " " << format_pct(r.seg.sp)
       << " " << format_pct(r.seg.auc) << "    ";
    os << format_pct(r.av.acc) << " " << format_pct(r.av.sen) << " " << format_pct(r.av.sp) << "\n";
  }
  return os.str();
}

inline std::string ablation_rows_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "mt\tmi\tac\tvessel_acc\tvessel_sen\tvessel_sp\tvessel_auc\tav_acc\tav_sen\tav_sp\tconfig\n";
  for (const auto& r : rows) {
    os << r.mt << '\t' << r.mi << '\t' << r.ac << '\t';
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g", r.seg.acc,
                  r.seg.sen, r.seg.sp, r.seg.auc, r.av.acc, r.av.sen, r.av.sp);
    os << buf << '\t' << r.config_hash << '\n';
  }
  return os.str();
}

}  // namespace retina
