// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "phasor/tape.hpp"
#include "phasor/tensor.hpp"

namespace phasor {

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// Strides of `in` aligned to the (right-aligned) broadcast shape `out`,
// with 0 on broadcast dimensions.
inline std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  auto in_st = row_major_strides(in);
  std::vector<int64_t> st(out.size(), 0);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    st[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : in_st[i];
  }
  return st;
}

// Odometer iteration over the broadcast output; calls f(i_out, i_a, i_b).
template <typename F>
void for_each_bcast2(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const int64_t n = numel_of(out);
  if (n == 0) return;
  const size_t r = out.size();
  if (r == 0) {  // scalars
    f(0, 0, 0);
    return;
  }
  auto sa = bcast_strides(a, out);
  auto sb = bcast_strides(b, out);
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      oa += sa[ud];
      ob += sb[ud];
      if (idx[ud] < out[ud]) break;
      oa -= sa[ud] * out[ud];
      ob -= sb[ud] * out[ud];
      idx[ud] = 0;
    }
  }
}

// Single-input odometer (used to reduce a broadcast gradient back down).
template <typename F>
void for_each_bcast1(const Shape& out, const Shape& in, F&& f) {
  for_each_bcast2(out, in, in, [&](int64_t io, int64_t ii, int64_t) { f(io, ii); });
}

template <typename T>
bool tape_on() {
  return active_tape<T>() != nullptr;
}

template <typename T>
void record(std::function<void()> fn) {
  active_tape<T>()->record(std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

// Binary elementwise with numpy-style broadcasting. dfa/dfb compute the local
// partial from (a, b, out) and are evaluated lazily in the backward closure.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_ew(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da dfa, Db dfb) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::empty(os);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < out.numel(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    detail::for_each_bcast2(os, a.shape(), b.shape(),
                            [&](int64_t io, int64_t ia, int64_t ib) {
                              ov[io] = fwd(av[ia], bv[ib]);
                            });
  }
  if (detail::tape_on<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto ap = a.ptr();
    auto bp = b.ptr();
    auto op_ = out.ptr();
    Shape osc = os;
    detail::record<T>([ap, bp, op_, osc, dfa, dfb]() {
      if (op_->grad.empty()) return;
      const T* g = op_->grad.data();
      const T* avd = ap->value.data();
      const T* bvd = bp->value.data();
      const T* ovd = op_->value.data();
      if (ap->requires_grad) {
        ap->ensure_grad();
        T* ga = ap->grad.data();
        detail::for_each_bcast2(osc, ap->shape, bp->shape,
                                [&](int64_t io, int64_t ia, int64_t ib) {
                                  ga[ia] += g[io] * dfa(avd[ia], bvd[ib], ovd[io]);
                                });
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        T* gb = bp->grad.data();
        detail::for_each_bcast2(osc, ap->shape, bp->shape,
                                [&](int64_t io, int64_t ia, int64_t ib) {
                                  gb[ib] += g[io] * dfb(avd[ia], bvd[ib], ovd[io]);
                                });
      }
    });
  }
  return out;
}

template <typename T, typename Fwd, typename Dx>
Tensor<T> unary_ew(const Tensor<T>& x, Fwd fwd, Dx dfdx) {
  Tensor<T> out = Tensor<T>::empty(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) ov[i] = fwd(xv[i]);
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, dfdx]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      const T* xvd = xp->value.data();
      const T* ovd = op_->value.data();
      T* gx = xp->grad.data();
      for (int64_t i = 0; i < static_cast<int64_t>(xp->value.size()); ++i) {
        gx[i] += g[i] * dfdx(xvd[i], ovd[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  return unary_ew(
      x, [](T v) { return std::tanh(v); }, [](T, T o) { return T(1) - o * o; });
}

template <typename T>
Tensor<T> sin_op(const Tensor<T>& x) {
  return unary_ew(
      x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <typename T>
Tensor<T> cos_op(const Tensor<T>& x) {
  return unary_ew(
      x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return unary_ew(
      x, [](T v) { return std::exp(v); }, [](T, T o) { return o; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_ew(
      x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
  T tc = static_cast<T>(c);
  return unary_ew(
      x, [tc](T v) { return v * tc; }, [tc](T, T) { return tc; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
  T tc = static_cast<T>(c);
  return unary_ew(
      x, [tc](T v) { return v + tc; }, [](T, T) { return T(1); });
}

/// x * sigmoid(x), composed from the primitive ops.
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  auto denom = add_scalar(exp_op(neg(x)), 1.0);
  return divide(x, denom);
}

// ---------------------------------------------------------------------------
// matmul / linear (Eigen-backed inner kernels)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
}  // namespace detail

/// a: [..., m, k] (rank >= 2), b: [k, n]; leading dimensions of `a` broadcast
/// over the single right-hand matrix.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() >= 2 && b.rank() == 2,
        "matmul: expected a rank>=2 and b rank 2, got " + shape_str(a.shape()) +
            " x " + shape_str(b.shape()));
  int64_t k = a.dim(-1);
  check(b.dim(0) == k, "matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
  int64_t n = b.dim(1);
  int64_t rows = a.numel() / k;
  Shape os(a.shape().begin(), a.shape().end() - 1);
  os.push_back(n);
  Tensor<T> out = Tensor<T>::empty(os);
  {
    detail::ECMap<T> A(a.data().data(), rows, k);
    detail::ECMap<T> B(b.data().data(), k, n);
    detail::EMap<T> O(out.data().data(), rows, n);
    O.noalias() = A * B;
  }
  if (detail::tape_on<T>() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto ap = a.ptr();
    auto bp = b.ptr();
    auto op_ = out.ptr();
    detail::record<T>([ap, bp, op_, rows, k, n]() {
      if (op_->grad.empty()) return;
      detail::ECMap<T> G(op_->grad.data(), rows, n);
      detail::ECMap<T> A(ap->value.data(), rows, k);
      detail::ECMap<T> B(bp->value.data(), k, n);
      if (ap->requires_grad) {
        ap->ensure_grad();
        detail::EMap<T> GA(ap->grad.data(), rows, k);
        GA.noalias() += G * B.transpose();
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        detail::EMap<T> GB(bp->grad.data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

/// x: [..., k], w: [n, k]; returns x·wᵀ = [..., n]. The projection idiom used
/// throughout the model so weights keep [out, in] layout.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  check(x.rank() >= 1 && w.rank() == 2, "linear: bad ranks");
  int64_t k = x.dim(-1);
  check(w.dim(1) == k, "linear: input dim " + shape_str(x.shape()) +
                           " does not match weight " + shape_str(w.shape()));
  int64_t n = w.dim(0);
  int64_t rows = x.numel() / k;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  os.push_back(n);
  Tensor<T> out = Tensor<T>::empty(os);
  {
    detail::ECMap<T> X(x.data().data(), rows, k);
    detail::ECMap<T> W(w.data().data(), n, k);
    detail::EMap<T> O(out.data().data(), rows, n);
    O.noalias() = X * W.transpose();
  }
  if (detail::tape_on<T>() && (x.requires_grad() || w.requires_grad())) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto wp = w.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, wp, op_, rows, k, n]() {
      if (op_->grad.empty()) return;
      detail::ECMap<T> G(op_->grad.data(), rows, n);
      detail::ECMap<T> X(xp->value.data(), rows, k);
      detail::ECMap<T> W(wp->value.data(), n, k);
      if (xp->requires_grad) {
        xp->ensure_grad();
        detail::EMap<T> GX(xp->grad.data(), rows, k);
        GX.noalias() += G * W;
      }
      if (wp->requires_grad) {
        wp->ensure_grad();
        detail::EMap<T> GW(wp->grad.data(), n, k);
        GW.noalias() += G.transpose() * X;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      T g = op_->grad[0];
      for (auto& gv : xp->grad) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  check(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

namespace detail {
// Decompose shape around `axis` into (outer, len, inner) for strided loops.
struct AxisSplit {
  int64_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, int axis) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "axis out of range for shape " + shape_str(s));
  AxisSplit sp{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) sp.inner *= s[static_cast<size_t>(i)];
  return sp;
}
inline int norm_axis(const Shape& s, int axis) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "axis out of range for shape " + shape_str(s));
  return axis;
}
}  // namespace detail

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  int ax = detail::norm_axis(x.shape(), axis);
  auto sp = detail::split_axis(x.shape(), ax);
  Shape os;
  for (int i = 0; i < x.rank(); ++i) {
    if (i == ax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.shape()[static_cast<size_t>(i)]);
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor<T> out = Tensor<T>::zeros(os);
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t j = 0; j < sp.len; ++j) {
      const T* src = xv.data() + (o * sp.len + j) * sp.inner;
      T* dst = ov.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, sp]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t j = 0; j < sp.len; ++j) {
          T* dst = gx + (o * sp.len + j) * sp.inner;
          const T* src = g + o * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

/// Inclusive prefix sum along `axis`. Accumulates in double (with the same
/// rounding points in forward and backward) so long chains stay accurate at
/// 32-bit.
template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, int axis) {
  int ax = detail::norm_axis(x.shape(), axis);
  auto sp = detail::split_axis(x.shape(), ax);
  Tensor<T> out = Tensor<T>::empty(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double acc = 0;
      for (int64_t j = 0; j < sp.len; ++j) {
        int64_t off = (o * sp.len + j) * sp.inner + i;
        acc += static_cast<double>(xv[off]);
        ov[off] = static_cast<T>(acc);
      }
    }
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, sp]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      // d(out_j)/d(x_t) = 1 for t <= j: reversed suffix sum.
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
          double acc = 0;
          for (int64_t j = sp.len - 1; j >= 0; --j) {
            int64_t off = (o * sp.len + j) * sp.inner + i;
            acc += static_cast<double>(g[off]);
            gx[off] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// movement
// ---------------------------------------------------------------------------

/// out[j, ...] = x[idx[j], ...], gathering along axis 0.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const IdxArray& idx) {
  check(x.rank() >= 1, "gather_rows: rank-0 input");
  int64_t rows = x.dim(0);
  int64_t rs = x.numel() / rows;
  for (int64_t i = 0; i < idx.numel(); ++i) {
    check(idx.at(i) >= 0 && idx.at(i) < rows,
          "gather_rows: index " + std::to_string(idx.at(i)) + " out of range [0," +
              std::to_string(rows) + ")");
  }
  Shape os = idx.shape;
  for (size_t i = 1; i < x.shape().size(); ++i) os.push_back(x.shape()[i]);
  Tensor<T> out = Tensor<T>::empty(os);
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t j = 0; j < idx.numel(); ++j) {
    std::memcpy(ov.data() + j * rs, xv.data() + idx.at(j) * rs,
                static_cast<size_t>(rs) * sizeof(T));
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    auto ids = idx.v;
    detail::record<T>([xp, op_, ids, rs]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (size_t j = 0; j < ids.size(); ++j) {
        T* dst = gx + ids[j] * rs;
        const T* src = g + static_cast<int64_t>(j) * rs;
        for (int64_t i = 0; i < rs; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

/// out has `n_rows` rows; out[idx[j], ...] += src[j, ...]. Rows are applied
/// in index-array order so results do not depend on scheduling.
template <typename T>
Tensor<T> scatter_add_rows(int64_t n_rows, const Tensor<T>& src, const IdxArray& idx) {
  check(src.rank() >= 1, "scatter_add_rows: rank-0 source");
  check(idx.numel() > 0 || src.numel() == 0, "scatter_add_rows: empty index");
  int64_t j_rows = idx.numel();
  check(src.numel() % std::max<int64_t>(j_rows, 1) == 0, "scatter_add_rows: shape mismatch");
  int64_t rs = j_rows > 0 ? src.numel() / j_rows : 0;
  for (int64_t i = 0; i < idx.numel(); ++i) {
    check(idx.at(i) >= 0 && idx.at(i) < n_rows,
          "scatter_add_rows: index " + std::to_string(idx.at(i)) +
              " out of range [0," + std::to_string(n_rows) + ")");
  }
  Shape os{n_rows};
  int lead = static_cast<int>(idx.shape.size());
  for (int i = lead; i < src.rank(); ++i) os.push_back(src.shape()[static_cast<size_t>(i)]);
  check(numel_of(os) == n_rows * rs, "scatter_add_rows: row shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(os);
  auto sv = src.data();
  auto ov = out.data();
  for (int64_t j = 0; j < j_rows; ++j) {
    T* dst = ov.data() + idx.at(j) * rs;
    const T* s = sv.data() + j * rs;
    for (int64_t i = 0; i < rs; ++i) dst[i] += s[i];
  }
  if (detail::tape_on<T>() && src.requires_grad()) {
    out.set_requires_grad(true);
    auto sp = src.ptr();
    auto op_ = out.ptr();
    auto ids = idx.v;
    detail::record<T>([sp, op_, ids, rs]() {
      if (op_->grad.empty() || !sp->requires_grad) return;
      sp->ensure_grad();
      const T* g = op_->grad.data();
      T* gs = sp->grad.data();
      for (size_t j = 0; j < ids.size(); ++j) {
        const T* src_ = g + ids[j] * rs;
        T* dst = gs + static_cast<int64_t>(j) * rs;
        for (int64_t i = 0; i < rs; ++i) dst[i] += src_[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  int ax = detail::norm_axis(parts[0].shape(), axis);
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    check(p.rank() == parts[0].rank(), "concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i) {
      if (i != ax) {
        check(p.shape()[static_cast<size_t>(i)] == os[static_cast<size_t>(i)],
              "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(os));
      }
    }
    total += p.dim(ax);
  }
  os[static_cast<size_t>(ax)] = total;
  Tensor<T> out = Tensor<T>::empty(os);
  auto sp = detail::split_axis(os, ax);
  auto ov = out.data();
  bool any_rg = false;
  int64_t offset = 0;
  struct Piece {
    std::shared_ptr<TensorData<T>> p;
    int64_t off, len;
  };
  std::vector<Piece> pieces;
  for (const auto& part : parts) {
    int64_t len = part.dim(ax);
    auto pv = part.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::memcpy(ov.data() + (o * sp.len + offset) * sp.inner,
                  pv.data() + o * len * sp.inner,
                  static_cast<size_t>(len * sp.inner) * sizeof(T));
    }
    any_rg = any_rg || part.requires_grad();
    pieces.push_back({part.ptr(), offset, len});
    offset += len;
  }
  if (detail::tape_on<T>() && any_rg) {
    out.set_requires_grad(true);
    auto op_ = out.ptr();
    detail::record<T>([op_, pieces, sp]() {
      if (op_->grad.empty()) return;
      const T* g = op_->grad.data();
      for (const auto& pc : pieces) {
        if (!pc.p->requires_grad) continue;
        pc.p->ensure_grad();
        T* gp = pc.p->grad.data();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const T* src = g + (o * sp.len + pc.off) * sp.inner;
          T* dst = gp + o * pc.len * sp.inner;
          for (int64_t i = 0; i < pc.len * sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  int ax = detail::norm_axis(x.shape(), axis);
  check(start >= 0 && len >= 0 && start + len <= x.dim(ax),
        "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
            ") out of bounds for axis size " + std::to_string(x.dim(ax)));
  Shape os = x.shape();
  os[static_cast<size_t>(ax)] = len;
  auto sp = detail::split_axis(x.shape(), ax);
  Tensor<T> out = Tensor<T>::empty(os);
  auto xv = x.data();
  auto ov = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::memcpy(ov.data() + o * len * sp.inner,
                xv.data() + (o * sp.len + start) * sp.inner,
                static_cast<size_t>(len * sp.inner) * sizeof(T));
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, sp, start, len]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (int64_t o = 0; o < sp.outer; ++o) {
        T* dst = gx + (o * sp.len + start) * sp.inner;
        const T* src = g + o * len * sp.inner;
        for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  check(numel_of(new_shape) == x.numel(),
        "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  Tensor<T> out = Tensor<T>::empty(new_shape);
  std::memcpy(out.data().data(), x.data().data(), static_cast<size_t>(x.numel()) * sizeof(T));
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (size_t i = 0; i < xp->value.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  int r = x.rank();
  check(static_cast<int>(perm.size()) == r, "permute: wrong axis count");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int p = perm[static_cast<size_t>(i)];
    check(p >= 0 && p < r && !seen[static_cast<size_t>(p)], "permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    os[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(p)];
  }
  auto in_st = detail::row_major_strides(x.shape());
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) src_stride[static_cast<size_t>(i)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  Tensor<T> out = Tensor<T>::empty(os);
  auto xv = x.data();
  auto ov = out.data();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src_off = 0;
  const int64_t n = x.numel();
  std::vector<int64_t> perm_map(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    ov[i] = xv[src_off];
    perm_map[static_cast<size_t>(i)] = src_off;
    for (int d = r - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      src_off += src_stride[ud];
      if (idx[ud] < os[ud]) break;
      src_off -= src_stride[ud] * os[ud];
      idx[ud] = 0;
    }
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, perm_map = std::move(perm_map)]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (size_t i = 0; i < perm_map.size(); ++i) gx[perm_map[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  check(x.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

// ---------------------------------------------------------------------------
// argmax / softmax / rmsnorm
// ---------------------------------------------------------------------------

/// Argmax along the last axis; ties break to the lowest index. Not recorded
/// on the tape.
template <typename T>
IdxArray argmax_last(const Tensor<T>& x) {
  check(x.rank() >= 1, "argmax_last: rank-0 input");
  int64_t len = x.dim(-1);
  check(len > 0, "argmax_last: empty axis");
  int64_t rows = x.numel() / len;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  if (os.empty()) os.push_back(1);
  IdxArray out(os);
  auto xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * len;
    int64_t best = 0;
    for (int64_t i = 1; i < len; ++i) {
      if (row[i] > row[best]) best = i;
    }
    out.at(r) = best;
  }
  return out;
}

/// Numerically stabilized softmax along `axis`. Rejects NaN input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  int ax = detail::norm_axis(x.shape(), axis);
  auto sp = detail::split_axis(x.shape(), ax);
  auto xv = x.data();
  for (T v : xv) {
    if (std::isnan(v)) fail("softmax: NaN input");
  }
  Tensor<T> out = Tensor<T>::empty(x.shape());
  auto ov = out.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      auto at = [&](int64_t j) { return (o * sp.len + j) * sp.inner + i; };
      T mx = xv[at(0)];
      for (int64_t j = 1; j < sp.len; ++j) mx = std::max(mx, xv[at(j)]);
      double denom = 0;
      for (int64_t j = 0; j < sp.len; ++j) {
        T e = std::exp(xv[at(j)] - mx);
        ov[at(j)] = e;
        denom += static_cast<double>(e);
      }
      for (int64_t j = 0; j < sp.len; ++j) ov[at(j)] = static_cast<T>(ov[at(j)] / denom);
    }
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_, sp]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      const T* y = op_->value.data();
      T* gx = xp->grad.data();
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
          auto at = [&](int64_t j) { return (o * sp.len + j) * sp.inner + i; };
          double dot = 0;
          for (int64_t j = 0; j < sp.len; ++j) dot += static_cast<double>(g[at(j)]) * y[at(j)];
          for (int64_t j = 0; j < sp.len; ++j) {
            gx[at(j)] += static_cast<T>((static_cast<double>(g[at(j)]) - dot) * y[at(j)]);
          }
        }
      }
    });
  }
  return out;
}

/// y = x / sqrt(mean(x^2) + eps) * gain, normalizing the last axis.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, double eps = 1e-6) {
  int64_t dim = x.dim(-1);
  check(gain.numel() == dim, "rmsnorm: gain " + shape_str(gain.shape()) +
                                 " does not match last axis of " + shape_str(x.shape()));
  int64_t rows = x.numel() / dim;
  Tensor<T> out = Tensor<T>::empty(x.shape());
  std::vector<T> inv_rms(static_cast<size_t>(rows));
  auto xv = x.data();
  auto gv = gain.data();
  auto ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * dim;
    double ms = 0;
    for (int64_t i = 0; i < dim; ++i) ms += static_cast<double>(row[i]) * row[i];
    ms = ms / static_cast<double>(dim) + eps;
    T inv = static_cast<T>(1.0 / std::sqrt(ms));
    inv_rms[static_cast<size_t>(r)] = inv;
    T* orow = ov.data() + r * dim;
    for (int64_t i = 0; i < dim; ++i) orow[i] = row[i] * inv * gv[i];
  }
  if (detail::tape_on<T>() && (x.requires_grad() || gain.requires_grad())) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto gp = gain.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, gp, op_, rows, dim, inv_rms = std::move(inv_rms)]() {
      if (op_->grad.empty()) return;
      const T* g = op_->grad.data();
      const T* xv_ = xp->value.data();
      const T* gv_ = gp->value.data();
      if (xp->requires_grad) xp->ensure_grad();
      if (gp->requires_grad) gp->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv_ + r * dim;
        const T* grow = g + r * dim;
        T inv = inv_rms[static_cast<size_t>(r)];
        if (xp->requires_grad) {
          // dx_j = inv*g_j*gain_j - inv^3/dim * x_j * sum_i(g_i*gain_i*x_i)
          double dot = 0;
          for (int64_t i = 0; i < dim; ++i) {
            dot += static_cast<double>(grow[i]) * gv_[i] * row[i];
          }
          double c = static_cast<double>(inv) * inv * inv * dot / static_cast<double>(dim);
          T* gx = xp->grad.data() + r * dim;
          for (int64_t j = 0; j < dim; ++j) {
            gx[j] += static_cast<T>(static_cast<double>(inv) * grow[j] * gv_[j] -
                                    c * row[j]);
          }
        }
        if (gp->requires_grad) {
          T* gg = gp->grad.data();
          for (int64_t j = 0; j < dim; ++j) gg[j] += grow[j] * row[j] * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// stop-gradient / phase wrap
// ---------------------------------------------------------------------------

/// Forward identity (bit-exact copy); contributes no gradient to x.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detached_copy();
}

/// Reduce into [0, 2π). Backward is the identity: the wrap is a translation
/// almost everywhere, and boundary points are measure-zero.
template <typename T>
Tensor<T> wrap_mod_2pi(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::empty(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  const T two_pi = static_cast<T>(kTwoPi);
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = std::fmod(xv[i], two_pi);
    if (v < T(0)) v += two_pi;
    if (v >= two_pi) v = T(0);  // fmod rounding can land exactly on 2π
    ov[i] = v;
  }
  if (detail::tape_on<T>() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xp = x.ptr();
    auto op_ = out.ptr();
    detail::record<T>([xp, op_]() {
      if (op_->grad.empty() || !xp->requires_grad) return;
      xp->ensure_grad();
      const T* g = op_->grad.data();
      T* gx = xp->grad.data();
      for (size_t i = 0; i < xp->value.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// cross-entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood (nats) over masked positions. `targets` and
/// `mask` match logits' leading shape; mask entries are 0/1. When
/// `normalizer` > 0 it replaces the mask count as the denominator (used to
/// combine shard losses under a batch-wide normalizer).
template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, const IdxArray& targets,
                               const IdxArray& mask, double normalizer = -1.0) {
  check(logits.rank() >= 2, "cross_entropy: logits must have a class axis");
  int64_t vocab = logits.dim(-1);
  int64_t rows = logits.numel() / vocab;
  check(targets.numel() == rows, "cross_entropy: targets shape mismatch");
  check(mask.numel() == rows, "cross_entropy: mask shape mismatch");
  int64_t count = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (mask.at(r) != 0) {
      check(targets.at(r) >= 0 && targets.at(r) < vocab,
            "cross_entropy: target " + std::to_string(targets.at(r)) +
                " outside [0," + std::to_string(vocab) + ")");
      ++count;
    }
  }
  check(count > 0, "cross_entropy: empty mask");
  double denom = normalizer > 0 ? normalizer : static_cast<double>(count);

  auto lv = logits.data();
  std::vector<T> probs;  // kept for backward
  bool rg = detail::tape_on<T>() && logits.requires_grad();
  if (rg) probs.resize(static_cast<size_t>(logits.numel()));
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    if (mask.at(r) == 0) continue;
    const T* row = lv.data() + r * vocab;
    T mx = row[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int64_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    double lse = std::log(z) + static_cast<double>(mx);
    total += lse - static_cast<double>(row[targets.at(r)]);
    if (rg) {
      T* prow = probs.data() + r * vocab;
      for (int64_t j = 0; j < vocab; ++j) {
        prow[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
      }
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / denom));
  if (rg) {
    out.set_requires_grad(true);
    auto lp = logits.ptr();
    auto op_ = out.ptr();
    auto tg = targets.v;
    auto mk = mask.v;
    detail::record<T>([lp, op_, tg, mk, vocab, denom, probs = std::move(probs)]() {
      if (op_->grad.empty() || !lp->requires_grad) return;
      lp->ensure_grad();
      T g = op_->grad[0];
      T* gl = lp->grad.data();
      int64_t rows2 = static_cast<int64_t>(tg.size());
      for (int64_t r = 0; r < rows2; ++r) {
        if (mk[static_cast<size_t>(r)] == 0) continue;
        const T* prow = probs.data() + r * vocab;
        T* grow = gl + r * vocab;
        T s = static_cast<T>(static_cast<double>(g) / denom);
        for (int64_t j = 0; j < vocab; ++j) grow[j] += s * prow[j];
        grow[tg[static_cast<size_t>(r)]] -= s;
      }
    });
  }
  return out;
}

}  // namespace phasor
