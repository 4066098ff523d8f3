#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "retina/common.hpp"

namespace retina::ad {

inline Eigen::Index numel(const std::vector<int>& shape) {
  Eigen::Index n = 1;
  for (int d : shape) n *= d;
  return n;
}

template <class S>
struct Node {
  std::vector<int> shape;
  VecX<S> value;
  VecX<S> grad;  // allocated when participating in differentiation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }

  VecX<S>& ensure_grad() {
    if (grad.size() != value.size()) grad = VecX<S>::Zero(value.size());
    return grad;
  }
};

namespace detail {
inline bool& grad_flag() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

// Disables graph construction in scope; forwards under the guard produce
// plain values with no parent links.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_flag()) { detail::grad_flag() = false; }
  ~NoGradGuard() { detail::grad_flag() = prev; }
};

inline bool grad_enabled() { return detail::grad_flag(); }

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value = VecX<S>::Zero(numel(shape));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, VecX<S> values, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    if (values.size() != numel(shape)) fail("Tensor::from: value count does not match shape");
    n->value = std::move(values);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) {
    VecX<S> one(1);
    one[0] = v;
    return from({1}, std::move(one));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  Eigen::Index size() const { return node_->value.size(); }
  VecX<S>& values() { return node_->value; }
  const VecX<S>& values() const { return node_->value; }
  VecX<S>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  void zero_grad() {
    if (node_->grad.size()) node_->grad.setZero();
  }

  std::shared_ptr<Node<S>>& node() { return node_; }
  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Builds an op node; drops graph links when no parent needs gradients or
// a NoGradGuard is active.
template <class S>
Tensor<S> make_op(const char* name, std::vector<int> shape, VecX<S> value,
                  std::vector<Tensor<S>> parents, std::function<void(Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  if (value.size() != numel(shape)) fail(name, ": value count does not match shape");
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  bool rg = false;
  if (grad_enabled())
    for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Tensor<S>(std::move(n));
}

// Accumulates d(loss)/d(node) into every reachable gradient slot in reverse
// topological order. Non-leaf gradients are reset per call; leaf gradients
// accumulate across calls.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1) fail("backward: loss must be scalar, got ", loss.size(), " elements");
  if (!loss.requires_grad()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [nd, next] = stack.back();
    if (next < nd->parents.size()) {
      Node<S>* p = nd->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(nd);
      stack.pop_back();
    }
  }

  for (Node<S>* nd : order)
    if (!nd->is_leaf()) nd->ensure_grad().setZero();
  loss.node()->ensure_grad()[0] += S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {
template <class S>
void add_grad(const std::shared_ptr<Node<S>>& p, const VecX<S>& g) {
  if (p->requires_grad) p->ensure_grad() += g;
}
}  // namespace detail

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  VecX<S> v = x.values().max(S(0));
  auto px = x.node();
  return make_op<S>("relu", x.shape(), std::move(v), {x}, [px](Node<S>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad() += (px->value > S(0)).template cast<S>() * self.grad;
  });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  VecX<S> v = (S(1) / (S(1) + (-x.values()).exp()));
  auto px = x.node();
  return make_op<S>("sigmoid", x.shape(), std::move(v), {x}, [px](Node<S>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad() += self.value * (S(1) - self.value) * self.grad;
  });
}

template <class S>
Tensor<S> scalar_affine(const Tensor<S>& x, S a, S b) {
  VecX<S> v = a * x.values() + b;
  auto px = x.node();
  return make_op<S>("scalar_affine", x.shape(), std::move(v), {x}, [px, a](Node<S>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad() += a * self.grad;
  });
}

// m(x) = sigma * (exp(-(x-0.5)^2) - exp(-1/4)) + 1
template <class S>
Tensor<S> gauss_act(const Tensor<S>& x, S sigma) {
  const S bias = std::exp(S(-0.25));
  VecX<S> sq = (x.values() - S(0.5)).square();
  VecX<S> v = sigma * ((-sq).exp() - bias) + S(1);
  auto px = x.node();
  return make_op<S>("gauss_act", x.shape(), std::move(v), {x}, [px, sigma](Node<S>& self) {
    if (!px->requires_grad) return;
    VecX<S> d = (px->value - S(0.5));
    px->ensure_grad() += (S(-2) * sigma) * d * (-d.square()).exp() * self.grad;
  });
}

namespace detail {

// Broadcast rule for binary elementwise ops: identical shapes, or 4-D tensors
// differing only in a 1-sized channel axis.
enum class Bc { same, a_wide, b_wide };

template <class S>
Bc broadcast_kind(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() == b.shape()) return Bc::same;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3]) {
    if (sb[1] == 1 && sa[1] > 1) return Bc::a_wide;
    if (sa[1] == 1 && sb[1] > 1) return Bc::b_wide;
  }
  fail("elementwise: incompatible shapes");
}

// Applies fn(wide_offset, narrow_offset, count) over matching runs.
inline void for_broadcast(const std::vector<int>& wide, const std::function<void(Eigen::Index, Eigen::Index, Eigen::Index)>& fn) {
  Eigen::Index n = wide[0], c = wide[1], hw = Eigen::Index(wide[2]) * wide[3];
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < c; ++j) fn((i * c + j) * hw, i * hw, hw);
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  auto kind = detail::broadcast_kind(a, b);
  const auto& wide_t = (kind == detail::Bc::b_wide) ? b : a;
  VecX<S> v;
  if (kind == detail::Bc::same) {
    v = a.values() + b.values();
  } else {
    const VecX<S>& wv = (kind == detail::Bc::a_wide) ? a.values() : b.values();
    const VecX<S>& nv = (kind == detail::Bc::a_wide) ? b.values() : a.values();
    v.resize(wv.size());
    detail::for_broadcast(wide_t.shape(), [&](Eigen::Index wo, Eigen::Index no, Eigen::Index cnt) {
      v.segment(wo, cnt) = wv.segment(wo, cnt) + nv.segment(no, cnt);
    });
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op<S>("add", wide_t.shape(), std::move(v), {a, b}, [pa, pb, kind](Node<S>& self) {
    auto narrow_acc = [&](const std::shared_ptr<Node<S>>& p) {
      auto& g = p->ensure_grad();
      detail::for_broadcast(self.shape, [&](Eigen::Index wo, Eigen::Index no, Eigen::Index cnt) {
        g.segment(no, cnt) += self.grad.segment(wo, cnt);
      });
    };
    if (pa->requires_grad) {
      if (kind == detail::Bc::b_wide) narrow_acc(pa);
      else pa->ensure_grad() += self.grad;
    }
    if (pb->requires_grad) {
      if (kind == detail::Bc::a_wide) narrow_acc(pb);
      else pb->ensure_grad() += self.grad;
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  auto kind = detail::broadcast_kind(a, b);
  const auto& wide_t = (kind == detail::Bc::b_wide) ? b : a;
  VecX<S> v;
  if (kind == detail::Bc::same) {
    v = a.values() * b.values();
  } else {
    const VecX<S>& wv = (kind == detail::Bc::a_wide) ? a.values() : b.values();
    const VecX<S>& nv = (kind == detail::Bc::a_wide) ? b.values() : a.values();
    v.resize(wv.size());
    detail::for_broadcast(wide_t.shape(), [&](Eigen::Index wo, Eigen::Index no, Eigen::Index cnt) {
      v.segment(wo, cnt) = wv.segment(wo, cnt) * nv.segment(no, cnt);
    });
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op<S>("mul", wide_t.shape(), std::move(v), {a, b}, [pa, pb, kind](Node<S>& self) {
    auto acc = [&](const std::shared_ptr<Node<S>>& dst, const std::shared_ptr<Node<S>>& other, bool dst_wide) {
      auto& g = dst->ensure_grad();
      if (kind == detail::Bc::same) {
        g += self.grad * other->value;
        return;
      }
      detail::for_broadcast(self.shape, [&](Eigen::Index wo, Eigen::Index no, Eigen::Index cnt) {
        bool other_wide = !dst_wide;
        auto ov = other->value.segment(other_wide ? wo : no, cnt);
        if (dst_wide)
          g.segment(wo, cnt) += self.grad.segment(wo, cnt) * ov;
        else
          g.segment(no, cnt) += self.grad.segment(wo, cnt) * ov;
      });
    };
    if (pa->requires_grad) acc(pa, pb, kind != detail::Bc::b_wide);
    if (pb->requires_grad) acc(pb, pa, kind != detail::Bc::a_wide);
  });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) acc += static_cast<double>(x.values()[i]);
  VecX<S> v(1);
  v[0] = static_cast<S>(acc);
  auto px = x.node();
  return make_op<S>("sum", {1}, std::move(v), {x}, [px](Node<S>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad() += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Structural ops

template <class S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  if (x.shape().size() != 4) fail("upsample_nearest2x: expected 4-D input");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  VecX<S> v(static_cast<Eigen::Index>(n) * c * 4 * h * w);
  const S* src = x.values().data();
  S* dst = v.data();
  for (Eigen::Index img = 0; img < Eigen::Index(n) * c; ++img) {
    const S* s = src + img * h * w;
    S* d = dst + img * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int x2 = 0; x2 < w; ++x2) {
        S val = s[y * w + x2];
        Eigen::Index base = (2 * y) * (2 * w) + 2 * x2;
        d[base] = d[base + 1] = d[base + 2 * w] = d[base + 2 * w + 1] = val;
      }
  }
  auto px = x.node();
  return make_op<S>("upsample_nearest2x", {n, c, 2 * h, 2 * w}, std::move(v), {x},
                    [px, n, c, h, w](Node<S>& self) {
                      if (!px->requires_grad) return;
                      auto& g = px->ensure_grad();
                      const S* gd = self.grad.data();
                      for (Eigen::Index img = 0; img < Eigen::Index(n) * c; ++img) {
                        S* gp = g.data() + img * h * w;
                        const S* gs = gd + img * 4 * h * w;
                        for (int y = 0; y < h; ++y)
                          for (int x2 = 0; x2 < w; ++x2) {
                            Eigen::Index base = (2 * y) * (2 * w) + 2 * x2;
                            gp[y * w + x2] += gs[base] + gs[base + 1] + gs[base + 2 * w] + gs[base + 2 * w + 1];
                          }
                      }
                    });
}

template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 4 || b.shape().size() != 4) fail("concat_channels: expected 4-D inputs");
  int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  if (b.dim(0) != n || b.dim(2) != h || b.dim(3) != w)
    fail("concat_channels: batch/spatial dimensions differ");
  Eigen::Index hw = Eigen::Index(h) * w;
  VecX<S> v(Eigen::Index(n) * (ca + cb) * hw);
  for (int i = 0; i < n; ++i) {
    v.segment(Eigen::Index(i) * (ca + cb) * hw, ca * hw) = a.values().segment(Eigen::Index(i) * ca * hw, ca * hw);
    v.segment(Eigen::Index(i) * (ca + cb) * hw + ca * hw, cb * hw) =
        b.values().segment(Eigen::Index(i) * cb * hw, cb * hw);
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op<S>("concat_channels", {n, ca + cb, h, w}, std::move(v), {a, b},
                    [pa, pb, n, ca, cb, hw](Node<S>& self) {
                      for (int i = 0; i < n; ++i) {
                        Eigen::Index base = Eigen::Index(i) * (ca + cb) * hw;
                        if (pa->requires_grad)
                          pa->ensure_grad().segment(Eigen::Index(i) * ca * hw, ca * hw) +=
                              self.grad.segment(base, ca * hw);
                        if (pb->requires_grad)
                          pb->ensure_grad().segment(Eigen::Index(i) * cb * hw, cb * hw) +=
                              self.grad.segment(base + ca * hw, cb * hw);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), im2col + GEMM.

namespace detail {

template <class S>
using GemmMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Patch matrices live row-major as (Ho*Wo) x (C*k*k): patch index down,
// kernel tap across. GEMMs run against the transposed weight view, and the
// unit-stride tap axis vectorizes the fill loops.
template <class S>
using PatchMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reusable per-thread scratch; conv layers cycle through these constantly.
template <class S>
std::vector<S>& conv_scratch(int slot) {
  thread_local std::vector<S> bufs[2];
  return bufs[slot];
}

template <class S>
void im2col(const S* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            S* col /* (Ho*Wo) x (C*k*k), row-major */) {
  Eigen::Index ckk = Eigen::Index(C) * k * k;
  for (int ho = 0; ho < Ho; ++ho)
    for (int wo = 0; wo < Wo; ++wo) {
      S* dst = col + (Eigen::Index(ho) * Wo + wo) * ckk;
      for (int c = 0; c < C; ++c) {
        const S* plane = x + Eigen::Index(c) * H * W;
        for (int i = 0; i < k; ++i) {
          int ih = ho * stride - pad + i;
          if (ih < 0 || ih >= H) {
            for (int j = 0; j < k; ++j) *dst++ = S(0);
            continue;
          }
          const S* in_row = plane + Eigen::Index(ih) * W;
          int iw0 = wo * stride - pad;
          if (iw0 >= 0 && iw0 + k <= W) {
            for (int j = 0; j < k; ++j) *dst++ = in_row[iw0 + j];
          } else {
            for (int j = 0; j < k; ++j) {
              int iw = iw0 + j;
              *dst++ = (iw >= 0 && iw < W) ? in_row[iw] : S(0);
            }
          }
        }
      }
    }
}

template <class S>
void col2im_add(const S* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
                S* dx) {
  Eigen::Index ckk = Eigen::Index(C) * k * k;
  for (int ho = 0; ho < Ho; ++ho)
    for (int wo = 0; wo < Wo; ++wo) {
      const S* src = col + (Eigen::Index(ho) * Wo + wo) * ckk;
      for (int c = 0; c < C; ++c) {
        S* plane = dx + Eigen::Index(c) * H * W;
        for (int i = 0; i < k; ++i) {
          int ih = ho * stride - pad + i;
          if (ih < 0 || ih >= H) {
            src += k;
            continue;
          }
          S* out_row = plane + Eigen::Index(ih) * W;
          int iw0 = wo * stride - pad;
          if (iw0 >= 0 && iw0 + k <= W) {
            for (int j = 0; j < k; ++j) out_row[iw0 + j] += *src++;
          } else {
            for (int j = 0; j < k; ++j) {
              int iw = iw0 + j;
              if (iw >= 0 && iw < W) out_row[iw] += *src;
              ++src;
            }
          }
        }
      }
    }
}

}  // namespace detail

// Output size follows the floor convention, matching stride-2 downsampling on
// even inputs.
inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4) fail("conv2d: expected 4-D input and weight");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int F = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C) fail("conv2d: weight channels ", w.dim(1), " != input channels ", C);
  if (w.dim(3) != k || k % 2 == 0) fail("conv2d: kernel must be square with odd size");
  if (stride != 1 && stride != 2) fail("conv2d: stride must be 1 or 2");
  if (b.shape() != std::vector<int>{F}) fail("conv2d: bias shape must be [F]");
  if (H + 2 * pad < k || W + 2 * pad < k) fail("conv2d: kernel larger than padded input");
  int Ho = conv_out_size(H, k, stride, pad);
  int Wo = conv_out_size(W, k, stride, pad);

  Eigen::Index ckk = Eigen::Index(C) * k * k, p = Eigen::Index(Ho) * Wo;
  VecX<S> out(Eigen::Index(N) * F * p);
  {
    Eigen::Map<const detail::RowMat<S>> wm(w.values().data(), F, ckk);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bv(b.values().data(), F);
    const S* xd = x.values().data();
    S* od = out.data();
    parallel_tasks(N, [&](int n) {
      auto& buf = detail::conv_scratch<S>(0);
      buf.resize(static_cast<size_t>(ckk) * p);
      detail::im2col(xd + Eigen::Index(n) * C * H * W, C, H, W, k, stride, pad, Ho, Wo, buf.data());
      Eigen::Map<const detail::PatchMat<S>> col(buf.data(), p, ckk);
      Eigen::Map<detail::RowMat<S>> om(od + Eigen::Index(n) * F * p, F, p);
      om.noalias() = wm * col.transpose();
      om.colwise() += bv;
    });
  }

  auto px = x.node();
  auto pw = w.node();
  auto pb = b.node();
  auto bp = [px, pw, pb, N, C, H, W, F, k, stride, pad, Ho, Wo, ckk, p](Node<S>& self) {
    bool need_x = px->requires_grad, need_w = pw->requires_grad, need_b = pb->requires_grad;
    const S* gy = self.grad.data();
    std::vector<detail::RowMat<S>> dw_parts;
    std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> db_parts;
    if (need_w) dw_parts.resize(N);
    if (need_b) db_parts.resize(N);
    S* gx = need_x ? px->ensure_grad().data() : nullptr;
    Eigen::Map<const detail::RowMat<S>> wm(pw->value.data(), F, ckk);

    parallel_tasks(N, [&](int n) {
      Eigen::Map<const detail::RowMat<S>> gym(gy + Eigen::Index(n) * F * p, F, p);
      if (need_w) {
        auto& buf = detail::conv_scratch<S>(0);
        buf.resize(static_cast<size_t>(ckk) * p);
        detail::im2col(px->value.data() + Eigen::Index(n) * C * H * W, C, H, W, k, stride, pad, Ho,
                       Wo, buf.data());
        Eigen::Map<const detail::PatchMat<S>> col(buf.data(), p, ckk);
        dw_parts[n].noalias() = gym * col;
      }
      if (need_x) {
        auto& dbuf = detail::conv_scratch<S>(1);
        dbuf.resize(static_cast<size_t>(ckk) * p);
        Eigen::Map<detail::PatchMat<S>> dcol(dbuf.data(), p, ckk);
        dcol.noalias() = gym.transpose() * wm;
        detail::col2im_add(dbuf.data(), C, H, W, k, stride, pad, Ho, Wo,
                           gx + Eigen::Index(n) * C * H * W);
      }
      if (need_b) db_parts[n] = gym.rowwise().sum();
    });

    // Per-sample partials merged in index order keeps results independent of
    // the thread count.
    if (need_w) {
      Eigen::Map<detail::RowMat<S>> gw(pw->ensure_grad().data(), F, ckk);
      for (int n = 0; n < N; ++n) gw += dw_parts[n];
    }
    if (need_b) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(pb->ensure_grad().data(), F);
      for (int n = 0; n < N; ++n) gb += db_parts[n];
    }
  };
  return make_op<S>("conv2d", {N, F, Ho, Wo}, std::move(out), {x, w, b}, std::move(bp));
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class S>
struct BNState {
  VecX<S> running_mean;
  VecX<S> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BNState init(int channels) {
    BNState st;
    st.running_mean = VecX<S>::Zero(channels);
    st.running_var = VecX<S>::Ones(channels);
    return st;
  }
};

template <class S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      BNState<S>& state, bool train) {
  if (x.shape().size() != 4) fail("batchnorm2d: expected 4-D input");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.size() != C || beta.size() != C) fail("batchnorm2d: affine parameter size mismatch");
  Eigen::Index hw = Eigen::Index(H) * W, m = Eigen::Index(N) * hw;
  if (train && m < 2) fail("batchnorm2d: train mode needs at least 2 values per channel");

  VecX<double> mean(C), invstd(C);
  const S* xd = x.values().data();
  if (train) {
    parallel_tasks(C, [&](int c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const S* plane = xd + (Eigen::Index(n) * C + c) * hw;
        for (Eigen::Index i = 0; i < hw; ++i) s += plane[i];
      }
      double mu = s / static_cast<double>(m);
      double v = 0;
      for (int n = 0; n < N; ++n) {
        const S* plane = xd + (Eigen::Index(n) * C + c) * hw;
        for (Eigen::Index i = 0; i < hw; ++i) {
          double d = plane[i] - mu;
          v += d * d;
        }
      }
      v /= static_cast<double>(m);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(v + state.eps);
      state.running_mean[c] =
          static_cast<S>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] =
          static_cast<S>((1.0 - state.momentum) * state.running_var[c] + state.momentum * v);
    });
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.eps);
    }
  }

  VecX<S> out(x.size());
  S* od = out.data();
  const S* gm = gamma.values().data();
  const S* bt = beta.values().data();
  parallel_tasks(C, [&](int c) {
    S a = static_cast<S>(gm[c] * invstd[c]);
    S b = static_cast<S>(bt[c] - gm[c] * invstd[c] * mean[c]);
    for (int n = 0; n < N; ++n) {
      const S* src = xd + (Eigen::Index(n) * C + c) * hw;
      S* dst = od + (Eigen::Index(n) * C + c) * hw;
      for (Eigen::Index i = 0; i < hw; ++i) dst[i] = a * src[i] + b;
    }
  });

  auto px = x.node();
  auto pg = gamma.node();
  auto pbt = beta.node();
  auto bp = [px, pg, pbt, N, C, hw, m, mean, invstd, train](Node<S>& self) {
    const S* xd2 = px->value.data();
    const S* gd = self.grad.data();
    const S* gm2 = pg->value.data();
    bool need_x = px->requires_grad, need_g = pg->requires_grad, need_b = pbt->requires_grad;
    VecX<S>* gx = need_x ? &px->ensure_grad() : nullptr;
    VecX<S>* gg = need_g ? &pg->ensure_grad() : nullptr;
    VecX<S>* gb = need_b ? &pbt->ensure_grad() : nullptr;
    parallel_tasks(C, [&](int c) {
      double sum_g = 0, sum_gx = 0;  // sums of dy and dy*xhat
      for (int n = 0; n < N; ++n) {
        const S* xp = xd2 + (Eigen::Index(n) * C + c) * hw;
        const S* gp = gd + (Eigen::Index(n) * C + c) * hw;
        for (Eigen::Index i = 0; i < hw; ++i) {
          double xhat = (xp[i] - mean[c]) * invstd[c];
          sum_g += gp[i];
          sum_gx += gp[i] * xhat;
        }
      }
      if (gg) (*gg)[c] += static_cast<S>(sum_gx);
      if (gb) (*gb)[c] += static_cast<S>(sum_g);
      if (!gx) return;
      double gscale = gm2[c] * invstd[c];
      if (train) {
        double mg = sum_g / static_cast<double>(m);
        double mgx = sum_gx / static_cast<double>(m);
        for (int n = 0; n < N; ++n) {
          const S* xp = xd2 + (Eigen::Index(n) * C + c) * hw;
          const S* gp = gd + (Eigen::Index(n) * C + c) * hw;
          S* out = gx->data() + (Eigen::Index(n) * C + c) * hw;
          for (Eigen::Index i = 0; i < hw; ++i) {
            double xhat = (xp[i] - mean[c]) * invstd[c];
            out[i] += static_cast<S>(gscale * (gp[i] - mg - xhat * mgx));
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const S* gp = gd + (Eigen::Index(n) * C + c) * hw;
          S* out = gx->data() + (Eigen::Index(n) * C + c) * hw;
          for (Eigen::Index i = 0; i < hw; ++i) out[i] += static_cast<S>(gscale * gp[i]);
        }
      }
    });
  };
  return make_op<S>("batchnorm2d", x.shape(), std::move(out), {x, gamma, beta}, std::move(bp));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

// Compares backward-pass gradients of a scalar-valued function against central
// differences. Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8). Coordinates are sampled when the tensor is
// larger than max_coords.
template <class S, class Fn>
double grad_check(Fn&& f, Tensor<S>& t, double eps = 1e-5, int max_coords = -1,
                  std::uint64_t seed = 1234) {
  Tensor<S> y = f(t);
  if (y.size() != 1) fail("grad_check: function must produce a scalar");
  t.zero_grad();
  backward(y);
  VecX<S> analytic = t.grad();

  std::vector<Eigen::Index> coords;
  if (max_coords < 0 || t.size() <= max_coords) {
    coords.resize(t.size());
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    Rng rng(seed);
    std::unordered_set<Eigen::Index> chosen;
    while (static_cast<int>(chosen.size()) < max_coords)
      chosen.insert(static_cast<Eigen::Index>(rng.below(t.size())));
    coords.assign(chosen.begin(), chosen.end());
  }

  double worst = 0;
  for (Eigen::Index i : coords) {
    S orig = t.values()[i];
    t.values()[i] = orig + static_cast<S>(eps);
    double yp = static_cast<double>(f(t).values()[0]);
    t.values()[i] = orig - static_cast<S>(eps);
    double ym = static_cast<double>(f(t).values()[0]);
    t.values()[i] = orig;
    double fd = (yp - ym) / (2 * eps);
    double a = static_cast<double>(analytic[i]);
    double rel = std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace retina::ad
