#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "retina/common.hpp"
#include "retina/image.hpp"
#include "retina/network.hpp"
#include "retina/preprocess.hpp"

namespace retina {

struct TileGrid {
  int patch = 64;
  int stride = 10;
  std::vector<std::pair<int, int>> positions;  // (y0, x0), row-major
};

// Ordered top-left positions covering the image: multiples of the stride plus
// a flush final position when (dim - patch) is not a stride multiple.
inline std::vector<int> tile_axis(int dim, int patch, int stride) {
  require(dim >= patch, "tile_positions: image smaller than patch");
  require(stride >= 1 && stride <= patch, "tile_positions: stride must be in [1, patch]");
  std::vector<int> pos;
  for (int p = 0; p + patch <= dim; p += stride) pos.push_back(p);
  if (pos.back() != dim - patch) pos.push_back(dim - patch);
  return pos;
}

inline TileGrid tile_positions(int height, int width, int patch, int stride) {
  TileGrid grid;
  grid.patch = patch;
  grid.stride = stride;
  auto ys = tile_axis(height, patch, stride);
  auto xs = tile_axis(width, patch, stride);
  grid.positions.reserve(ys.size() * xs.size());
  for (int y : ys)
    for (int x : xs) grid.positions.emplace_back(y, x);
  return grid;
}

template <class S>
struct TriProbMap {
  Raster<S> vessel, artery, vein;  // probabilities in [0,1]
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> coverage;
};

template <class S>
struct Stitched {
  std::vector<Raster<S>> maps;
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> coverage;
};

// fn(positions, count, out) fills out with [count, nmaps, p, p] tile
// predictions. Tiles are accumulated in grid order, so stitched values do not
// depend on batching or threading.
template <class S>
Stitched<S> stitch_tiles(int height, int width, const TileGrid& grid, int nmaps, int tile_batch,
                         const std::function<void(const std::pair<int, int>*, int, VecX<S>&)>& fn) {
  int p = grid.patch;
  Eigen::Index pp = Eigen::Index(p) * p;
  std::vector<Raster<double>> acc(nmaps, Raster<double>::Zero(height, width));
  Stitched<S> out;
  out.coverage.setZero(height, width);

  VecX<S> buf;
  for (size_t start = 0; start < grid.positions.size(); start += tile_batch) {
    int count = static_cast<int>(std::min<size_t>(tile_batch, grid.positions.size() - start));
    buf.resize(Eigen::Index(count) * nmaps * pp);
    fn(grid.positions.data() + start, count, buf);
    for (int t = 0; t < count; ++t) {
      auto [y0, x0] = grid.positions[start + t];
      for (int m = 0; m < nmaps; ++m) {
        const S* src = buf.data() + (Eigen::Index(t) * nmaps + m) * pp;
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x) acc[m](y0 + y, x0 + x) += static_cast<double>(src[Eigen::Index(y) * p + x]);
      }
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) out.coverage(y0 + y, x0 + x) += 1;
    }
  }
  for (int m = 0; m < nmaps; ++m)
    out.maps.push_back((acc[m] / out.coverage.template cast<double>()).template cast<S>());
  return out;
}

template <class S>
struct FullPrediction {
  TriProbMap<S> tri;
  Raster<S> activation;  // stitched then rescaled to [0,1]
  bool has_activation = false;
};

// Extracts the first `channels` stack planes as a flat [C,H,W] buffer.
template <class S>
VecX<S> flatten_stack(const InputStack<S>& stack, int channels) {
  int h = stack.height(), w = stack.width();
  VecX<S> out(Eigen::Index(channels) * h * w);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      out.segment((Eigen::Index(c) * h + y) * w, w) = stack.channels[c].row(y);
  return out;
}

// Eval-mode tiled prediction over a preprocessed stack: ordered patches,
// overlapping predictions fused by arithmetic mean.
template <class S>
FullPrediction<S> predict_stack(const VecX<S>& stack, int height, int width, Network<S>& net,
                                int stride, int tile_batch = 8) {
  const auto& cfg = net.config();
  int p = cfg.patch;
  int C = cfg.input_channels;
  TileGrid grid = tile_positions(height, width, p, stride);
  int nmaps = cfg.multitask ? 4 : 2;  // vessel, artery, vein, activation | artery, vein
  Eigen::Index pp = Eigen::Index(p) * p;

  auto fn = [&](const std::pair<int, int>* pos, int count, VecX<S>& out) {
    VecX<S> x(Eigen::Index(count) * C * pp);
    for (int t = 0; t < count; ++t) {
      auto [y0, x0] = pos[t];
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < p; ++y)
          x.segment(((Eigen::Index(t) * C + c) * p + y) * p, p) =
              stack.segment((Eigen::Index(c) * height + y0 + y) * width + x0, p);
    }
    ad::NoGradGuard ng;
    auto o = net.forward(ad::Tensor<S>::from({count, C, p, p}, std::move(x)), /*train=*/false);
    for (int t = 0; t < count; ++t) {
      S* dst = out.data() + Eigen::Index(t) * nmaps * pp;
      if (cfg.multitask) {
        std::copy_n(o.vessel.values().data() + Eigen::Index(t) * pp, pp, dst);
        std::copy_n(o.av.values().data() + Eigen::Index(t) * 2 * pp, 2 * pp, dst + pp);
        std::copy_n(o.activation.values().data() + Eigen::Index(t) * pp, pp, dst + 3 * pp);
      } else {
        std::copy_n(o.av.values().data() + Eigen::Index(t) * 2 * pp, 2 * pp, dst);
      }
    }
  };

  Stitched<S> st = stitch_tiles<S>(height, width, grid, nmaps, tile_batch, fn);
  FullPrediction<S> pred;
  pred.tri.coverage = st.coverage;
  if (cfg.multitask) {
    pred.tri.vessel = st.maps[0];
    pred.tri.artery = st.maps[1];
    pred.tri.vein = st.maps[2];
    double peak = spatial_activation_peak(cfg.sigma);
    if (peak > 0) {
      pred.activation = ((st.maps[3].template cast<double>() - 1.0) / peak)
                            .cwiseMax(0.0)
                            .cwiseMin(1.0)
                            .template cast<S>();
    } else {
      pred.activation = Raster<S>::Zero(height, width);
    }
    pred.has_activation = true;
  } else {
    pred.tri.artery = st.maps[0];
    pred.tri.vein = st.maps[1];
    pred.tri.vessel = st.maps[0].max(st.maps[1]);  // union head: vessel = a or v
    pred.activation = Raster<S>::Zero(height, width);
  }
  return pred;
}

template <class S>
FullPrediction<S> predict_full(const FundusImage<S>& img, Network<S>& net,
                               const PreprocessParams& pre, int stride, int tile_batch = 8) {
  InputStack<S> stack = preprocess_image(img, pre);
  VecX<S> flat = flatten_stack(stack, net.config().input_channels);
  return predict_stack(flat, img.height(), img.width(), net, stride, tile_batch);
}

// ---------------------------------------------------------------------------
// Decisions

template <class S>
struct DecisionMap {
  Mask vessel;       // p_vessel >= threshold
  Mask artery;       // vessel && artery preferred
  Mask vein;         // vessel && vein preferred
  Mask artery_pref;  // argmax(p_artery, p_vein) over the whole frame; ties -> artery
};

template <class S>
DecisionMap<S> decide_av(const TriProbMap<S>& tri, double vessel_threshold = 0.5) {
  require(vessel_threshold > 0 && vessel_threshold < 1, "decide_av: threshold must be in (0,1)");
  DecisionMap<S> d;
  d.vessel = tri.vessel >= static_cast<S>(vessel_threshold);
  d.artery_pref = tri.artery >= tri.vein;
  d.artery = d.vessel && d.artery_pref;
  d.vein = d.vessel && !d.artery_pref;
  return d;
}

// ---------------------------------------------------------------------------
// Zhang-Suen thinning to an 8-connected, single-pixel-wide skeleton.

inline Mask skeletonize(const Mask& mask) {
  int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
  Mask img = mask;
  auto at = [&](int y, int x) -> int {
    return (y >= 0 && y < h && x >= 0 && x < w && img(y, x)) ? 1 : 0;
  };
  std::vector<std::pair<int, int>> removals;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int step = 0; step < 2; ++step) {
      removals.clear();
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!img(y, x)) continue;
          int p2 = at(y - 1, x), p3 = at(y - 1, x + 1), p4 = at(y, x + 1), p5 = at(y + 1, x + 1);
          int p6 = at(y + 1, x), p7 = at(y + 1, x - 1), p8 = at(y, x - 1), p9 = at(y - 1, x - 1);
          int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
          if (b < 2 || b > 6) continue;
          int seq[9] = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
          int a = 0;
          for (int i = 0; i < 8; ++i) a += (seq[i] == 0 && seq[i + 1] == 1);
          if (a != 1) continue;
          if (step == 0) {
            if (p2 * p4 * p6 != 0 || p4 * p6 * p8 != 0) continue;
          } else {
            if (p2 * p4 * p8 != 0 || p2 * p6 * p8 != 0) continue;
          }
          removals.emplace_back(y, x);
        }
      for (auto [y, x] : removals) img(y, x) = false;
      changed = changed || !removals.empty();
    }
  }
  return img;
}

}  // namespace retina
