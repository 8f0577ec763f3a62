#include "eyedx/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>

namespace eyedx {

namespace {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Map = Eigen::Map<EMat<S>>;
template <typename S>
using CMap = Eigen::Map<const EMat<S>>;

template <typename S>
CMap<S> cmap(const Tensor<S>& t) {
  return CMap<S>(t.data(), t.rows(), t.cols());
}
template <typename S>
Map<S> map(Tensor<S>& t) {
  return Map<S>(t.data(), t.rows(), t.cols());
}

template <typename S>
Tape<S>& tape_of(Var<S> a, const char* op) {
  if (a.tape == nullptr || a.id < 0) throw ShapeError(std::string(op) + ": unbound var");
  return *a.tape;
}

void check_mask(const Mask& mask, int cols, const char* op) {
  if (!mask.empty() && static_cast<int>(mask.size()) != cols)
    throw ShapeError(std::string(op) + ": mask length " +
                     std::to_string(mask.size()) + " does not match " +
                     std::to_string(cols) + " columns");
}

}  // namespace

template <typename S>
void Tape<S>::backward(const Var<S>& loss) {
  if (loss.tape != this || loss.id < 0 ||
      loss.id >= static_cast<int>(nodes_.size()))
    throw ShapeError("backward: loss is not a node of this tape");
  Node& ln = nodes_[loss.id];
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw ShapeError("backward: loss must be scalar, got " +
                     ln.value.shape_str());
  for (int i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (n.grad.same_shape(n.value))
      n.grad.fill(S(0));
    else
      n.grad = Tensor<S>(n.value.rows(), n.value.cols());
  }
  ln.grad[0] = S(1);
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this, i);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = tape_of(a, "add");
  const Tensor<S>&av = t.value(a.id), &bv = t.value(b.id);
  if (!av.same_shape(bv))
    throw ShapeError("add: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<S> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), true, [aid, bid](Tape<S>& t, int self) {
    const Tensor<S>& g = t.grad_ref(self);
    if (t.tracked(aid)) {
      Tensor<S>& ga = t.grad_ref(aid);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.tracked(bid)) {
      Tensor<S>& gb = t.grad_ref(bid);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    }
  }));
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = tape_of(a, "mul");
  const Tensor<S>&av = t.value(a.id), &bv = t.value(b.id);
  if (!av.same_shape(bv))
    throw ShapeError("mul: " + av.shape_str() + " vs " + bv.shape_str());
  Tensor<S> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), true, [aid, bid](Tape<S>& t, int self) {
    const Tensor<S>& g = t.grad_ref(self);
    const Tensor<S>&av = t.value(aid), &bv = t.value(bid);
    if (t.tracked(aid)) {
      Tensor<S>& ga = t.grad_ref(aid);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.tracked(bid)) {
      Tensor<S>& gb = t.grad_ref(bid);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  }));
}

template <typename S>
Var<S> scale(Var<S> a, double c) {
  Tape<S>& t = tape_of(a, "scale");
  const Tensor<S>& av = t.value(a.id);
  Tensor<S> out(av.rows(), av.cols());
  const S cs = static_cast<S>(c);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * cs;
  int aid = a.id;
  return t.wrap(t.push(std::move(out), true, [aid, cs](Tape<S>& t, int self) {
    if (!t.tracked(aid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    Tensor<S>& ga = t.grad_ref(aid);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * cs;
  }));
}

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = tape_of(x, "relu");
  const Tensor<S>& xv = t.value(x.id);
  Tensor<S> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = xv[i] > S(0) ? xv[i] : S(0);
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true, [xid](Tape<S>& t, int self) {
    if (!t.tracked(xid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    const Tensor<S>& xv = t.value(xid);
    Tensor<S>& gx = t.grad_ref(xid);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xv[i] > S(0)) gx[i] += g[i];
  }));
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tape<S>& t = tape_of(x, "sigmoid");
  const Tensor<S>& xv = t.value(x.id);
  Tensor<S> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(xv[i]);
    double y = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
    out[i] = static_cast<S>(y);
  }
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true, [xid](Tape<S>& t, int self) {
    if (!t.tracked(xid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    const Tensor<S>& y = t.value(self);
    Tensor<S>& gx = t.grad_ref(xid);
    for (std::size_t i = 0; i < g.numel(); ++i)
      gx[i] += g[i] * y[i] * (S(1) - y[i]);
  }));
}

// ---------------------------------------------------------------------------
// matrix products (Eigen-backed kernels)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = tape_of(a, "matmul");
  const Tensor<S>&av = t.value(a.id), &bv = t.value(b.id);
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: " + av.shape_str() + " x " + bv.shape_str());
  Tensor<S> out(av.rows(), bv.cols());
  map(out).noalias() = cmap(av) * cmap(bv);
  int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), true, [aid, bid](Tape<S>& t, int self) {
    const Tensor<S>& g = t.grad_ref(self);
    if (t.tracked(aid))
      map(t.grad_ref(aid)).noalias() += cmap(g) * cmap(t.value(bid)).transpose();
    if (t.tracked(bid))
      map(t.grad_ref(bid)).noalias() += cmap(t.value(aid)).transpose() * cmap(g);
  }));
}

template <typename S>
Var<S> matmul_tn(Var<S> a, Var<S> b, double s) {
  Tape<S>& t = tape_of(a, "matmul_tn");
  const Tensor<S>&av = t.value(a.id), &bv = t.value(b.id);
  if (av.rows() != bv.rows())
    throw ShapeError("matmul_tn: " + av.shape_str() + " x " + bv.shape_str());
  Tensor<S> out(av.cols(), bv.cols());
  const S ss = static_cast<S>(s);
  map(out).noalias() = ss * (cmap(av).transpose() * cmap(bv));
  int aid = a.id, bid = b.id;
  return t.wrap(
      t.push(std::move(out), true, [aid, bid, ss](Tape<S>& t, int self) {
        const Tensor<S>& g = t.grad_ref(self);
        if (t.tracked(aid))
          map(t.grad_ref(aid)).noalias() +=
              ss * (cmap(t.value(bid)) * cmap(g).transpose());
        if (t.tracked(bid))
          map(t.grad_ref(bid)).noalias() += ss * (cmap(t.value(aid)) * cmap(g));
      }));
}

template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = tape_of(a, "matmul_nt");
  const Tensor<S>&av = t.value(a.id), &bv = t.value(b.id);
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_nt: " + av.shape_str() + " x " + bv.shape_str());
  Tensor<S> out(av.rows(), bv.rows());
  map(out).noalias() = cmap(av) * cmap(bv).transpose();
  int aid = a.id, bid = b.id;
  return t.wrap(t.push(std::move(out), true, [aid, bid](Tape<S>& t, int self) {
    const Tensor<S>& g = t.grad_ref(self);
    if (t.tracked(aid))
      map(t.grad_ref(aid)).noalias() += cmap(g) * cmap(t.value(bid));
    if (t.tracked(bid))
      map(t.grad_ref(bid)).noalias() += cmap(g).transpose() * cmap(t.value(aid));
  }));
}

template <typename S>
Var<S> affine(Var<S> w, Var<S> x, Var<S> b) {
  Tape<S>& t = tape_of(w, "affine");
  const Tensor<S>&wv = t.value(w.id), &xv = t.value(x.id), &bv = t.value(b.id);
  if (wv.cols() != xv.rows() || bv.rows() != wv.rows() || bv.cols() != 1)
    throw ShapeError("affine: w" + wv.shape_str() + " x" + xv.shape_str() +
                     " b" + bv.shape_str());
  Tensor<S> out(wv.rows(), xv.cols());
  map(out).noalias() = cmap(wv) * cmap(xv);
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) += bv[r];
  int wid = w.id, xid = x.id, bid = b.id;
  return t.wrap(
      t.push(std::move(out), true, [wid, xid, bid](Tape<S>& t, int self) {
        const Tensor<S>& g = t.grad_ref(self);
        if (t.tracked(wid))
          map(t.grad_ref(wid)).noalias() +=
              cmap(g) * cmap(t.value(xid)).transpose();
        if (t.tracked(xid))
          map(t.grad_ref(xid)).noalias() +=
              cmap(t.value(wid)).transpose() * cmap(g);
        if (t.tracked(bid)) {
          Tensor<S>& gb = t.grad_ref(bid);
          for (int r = 0; r < g.rows(); ++r) {
            double acc = 0;
            for (int c = 0; c < g.cols(); ++c) acc += g.at(r, c);
            gb[r] += static_cast<S>(acc);
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// structure ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> embedding_lookup(Var<S> table, const std::vector<int>& ids) {
  Tape<S>& t = tape_of(table, "embedding_lookup");
  const Tensor<S>& tv = t.value(table.id);
  const int d = tv.cols(), T = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= tv.rows())
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " outside table of " + std::to_string(tv.rows()));
  Tensor<S> out(d, T);
  for (int c = 0; c < T; ++c)
    for (int r = 0; r < d; ++r) out.at(r, c) = tv.at(ids[c], r);
  int tid = table.id;
  return t.wrap(t.push(std::move(out), true, [tid, ids](Tape<S>& t, int self) {
    if (!t.tracked(tid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    Tensor<S>& gt = t.grad_ref(tid);
    for (int c = 0; c < g.cols(); ++c)
      for (int r = 0; r < g.rows(); ++r) gt.at(ids[c], r) += g.at(r, c);
  }));
}

template <typename S>
Var<S> dropout(Var<S> x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return x;  // exact identity in eval mode
  Tape<S>& t = tape_of(x, "dropout");
  const Tensor<S>& xv = t.value(x.id);
  Mask keep(xv.numel());
  const S inv = static_cast<S>(1.0 / (1.0 - rate));
  Tensor<S> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    keep[i] = rng.uniform() >= rate;
    out[i] = keep[i] ? xv[i] * inv : S(0);
  }
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true,
                       [xid, keep = std::move(keep), inv](Tape<S>& t, int self) {
                         if (!t.tracked(xid)) return;
                         const Tensor<S>& g = t.grad_ref(self);
                         Tensor<S>& gx = t.grad_ref(xid);
                         for (std::size_t i = 0; i < g.numel(); ++i)
                           if (keep[i]) gx[i] += g[i] * inv;
                       }));
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty input");
  Tape<S>& t = tape_of(xs[0], "concat_cols");
  const int rows = t.value(xs[0].id).rows();
  int cols = 0;
  for (const Var<S>& x : xs) {
    if (t.value(x.id).rows() != rows)
      throw ShapeError("concat_cols: row mismatch");
    cols += t.value(x.id).cols();
  }
  Tensor<S> out(rows, cols);
  std::vector<int> ids;
  std::vector<int> offs;
  int off = 0;
  for (const Var<S>& x : xs) {
    const Tensor<S>& xv = t.value(x.id);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < xv.cols(); ++c) out.at(r, off + c) = xv.at(r, c);
    ids.push_back(x.id);
    offs.push_back(off);
    off += xv.cols();
  }
  return t.wrap(t.push(std::move(out), true,
                       [ids = std::move(ids), offs = std::move(offs)](
                           Tape<S>& t, int self) {
                         const Tensor<S>& g = t.grad_ref(self);
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                           if (!t.tracked(ids[k])) continue;
                           Tensor<S>& gx = t.grad_ref(ids[k]);
                           for (int r = 0; r < gx.rows(); ++r)
                             for (int c = 0; c < gx.cols(); ++c)
                               gx.at(r, c) += g.at(r, offs[k] + c);
                         }
                       }));
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty input");
  Tape<S>& t = tape_of(xs[0], "concat_rows");
  const int cols = t.value(xs[0].id).cols();
  int rows = 0;
  for (const Var<S>& x : xs) {
    if (t.value(x.id).cols() != cols)
      throw ShapeError("concat_rows: column mismatch");
    rows += t.value(x.id).rows();
  }
  Tensor<S> out(rows, cols);
  std::vector<int> ids, offs;
  int off = 0;
  for (const Var<S>& x : xs) {
    const Tensor<S>& xv = t.value(x.id);
    for (int r = 0; r < xv.rows(); ++r)
      for (int c = 0; c < cols; ++c) out.at(off + r, c) = xv.at(r, c);
    ids.push_back(x.id);
    offs.push_back(off);
    off += xv.rows();
  }
  return t.wrap(t.push(std::move(out), true,
                       [ids = std::move(ids), offs = std::move(offs)](
                           Tape<S>& t, int self) {
                         const Tensor<S>& g = t.grad_ref(self);
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                           if (!t.tracked(ids[k])) continue;
                           Tensor<S>& gx = t.grad_ref(ids[k]);
                           for (int r = 0; r < gx.rows(); ++r)
                             for (int c = 0; c < gx.cols(); ++c)
                               gx.at(r, c) += g.at(offs[k] + r, c);
                         }
                       }));
}

template <typename S>
Var<S> slice_rows(Var<S> x, int r0, int r1) {
  Tape<S>& t = tape_of(x, "slice_rows");
  const Tensor<S>& xv = t.value(x.id);
  if (r0 < 0 || r1 <= r0 || r1 > xv.rows())
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") of " + xv.shape_str());
  Tensor<S> out(r1 - r0, xv.cols());
  for (int r = r0; r < r1; ++r)
    for (int c = 0; c < xv.cols(); ++c) out.at(r - r0, c) = xv.at(r, c);
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true, [xid, r0](Tape<S>& t, int self) {
    if (!t.tracked(xid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    Tensor<S>& gx = t.grad_ref(xid);
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) gx.at(r0 + r, c) += g.at(r, c);
  }));
}

template <typename S>
Var<S> transpose(Var<S> x) {
  Tape<S>& t = tape_of(x, "transpose");
  const Tensor<S>& xv = t.value(x.id);
  Tensor<S> out(xv.cols(), xv.rows());
  for (int r = 0; r < xv.rows(); ++r)
    for (int c = 0; c < xv.cols(); ++c) out.at(c, r) = xv.at(r, c);
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true, [xid](Tape<S>& t, int self) {
    if (!t.tracked(xid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    Tensor<S>& gx = t.grad_ref(xid);
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) gx.at(c, r) += g.at(r, c);
  }));
}

// ---------------------------------------------------------------------------
// normalization / reduction ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> softmax_rows(Var<S> scores, const Mask& mask) {
  Tape<S>& t = tape_of(scores, "softmax_rows");
  const Tensor<S>& sv = t.value(scores.id);
  const int cols = sv.cols();
  check_mask(mask, cols, "softmax_rows");
  bool any_active = mask.empty();
  for (std::uint8_t m : mask) any_active = any_active || m;
  if (!any_active) throw MaskError("softmax_rows: all positions masked");

  Tensor<S> out(sv.rows(), cols);
  for (int r = 0; r < sv.rows(); ++r) {
    double mx = -HUGE_VAL;
    for (int c = 0; c < cols; ++c)
      if (mask.empty() || mask[c]) mx = std::max(mx, double(sv.at(r, c)));
    double sum = 0;
    for (int c = 0; c < cols; ++c)
      if (mask.empty() || mask[c]) sum += std::exp(double(sv.at(r, c)) - mx);
    for (int c = 0; c < cols; ++c)
      out.at(r, c) = (mask.empty() || mask[c])
                         ? static_cast<S>(std::exp(double(sv.at(r, c)) - mx) / sum)
                         : S(0);
  }
  int sid = scores.id;
  return t.wrap(t.push(std::move(out), true, [sid](Tape<S>& t, int self) {
    if (!t.tracked(sid)) return;
    const Tensor<S>& g = t.grad_ref(self);
    const Tensor<S>& y = t.value(self);
    Tensor<S>& gs = t.grad_ref(sid);
    for (int r = 0; r < g.rows(); ++r) {
      double dot = 0;
      for (int c = 0; c < g.cols(); ++c) dot += double(g.at(r, c)) * y.at(r, c);
      for (int c = 0; c < g.cols(); ++c)
        gs.at(r, c) += static_cast<S>(y.at(r, c) * (double(g.at(r, c)) - dot));
    }
  }));
}

template <typename S>
Var<S> layer_norm_cols(Var<S> x, Var<S> gain, Var<S> bias, double eps) {
  Tape<S>& t = tape_of(x, "layer_norm");
  const Tensor<S>&xv = t.value(x.id), &gv = t.value(gain.id),
        &bv = t.value(bias.id);
  const int d = xv.rows(), n = xv.cols();
  if (gv.rows() != d || gv.cols() != 1 || bv.rows() != d || bv.cols() != 1)
    throw ShapeError("layer_norm: gain/bias must be (" + std::to_string(d) +
                     ",1)");
  Tensor<S> out(d, n);
  std::vector<double> mu(n), inv(n);
  for (int c = 0; c < n; ++c) {
    double m = 0;
    for (int r = 0; r < d; ++r) m += xv.at(r, c);
    m /= d;
    double var = 0;
    for (int r = 0; r < d; ++r) {
      double dvr = xv.at(r, c) - m;
      var += dvr * dvr;
    }
    var /= d;
    mu[c] = m;
    inv[c] = 1.0 / std::sqrt(var + eps);
    for (int r = 0; r < d; ++r)
      out.at(r, c) =
          static_cast<S>(gv[r] * ((xv.at(r, c) - m) * inv[c]) + bv[r]);
  }
  int xid = x.id, gid = gain.id, bid = bias.id;
  return t.wrap(t.push(
      std::move(out), true,
      [xid, gid, bid, mu = std::move(mu), inv = std::move(inv)](Tape<S>& t,
                                                                int self) {
        const Tensor<S>& g = t.grad_ref(self);
        const Tensor<S>&xv = t.value(xid), &gv = t.value(gid);
        const int d = xv.rows(), n = xv.cols();
        for (int c = 0; c < n; ++c) {
          double sum_dxh = 0, sum_dxh_xh = 0;
          for (int r = 0; r < d; ++r) {
            double xh = (xv.at(r, c) - mu[c]) * inv[c];
            double dxh = double(g.at(r, c)) * gv[r];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          if (t.tracked(xid)) {
            Tensor<S>& gx = t.grad_ref(xid);
            for (int r = 0; r < d; ++r) {
              double xh = (xv.at(r, c) - mu[c]) * inv[c];
              double dxh = double(g.at(r, c)) * gv[r];
              gx.at(r, c) += static_cast<S>(
                  inv[c] * (dxh - sum_dxh / d - xh * sum_dxh_xh / d));
            }
          }
          if (t.tracked(gid)) {
            Tensor<S>& gg = t.grad_ref(gid);
            for (int r = 0; r < d; ++r)
              gg[r] += static_cast<S>(double(g.at(r, c)) *
                                      ((xv.at(r, c) - mu[c]) * inv[c]));
          }
          if (t.tracked(bid)) {
            Tensor<S>& gb = t.grad_ref(bid);
            for (int r = 0; r < d; ++r) gb[r] += g.at(r, c);
          }
        }
      }));
}

template <typename S>
Var<S> masked_mean_pool(Var<S> x, const Mask& mask) {
  Tape<S>& t = tape_of(x, "masked_mean_pool");
  const Tensor<S>& xv = t.value(x.id);
  const int d = xv.rows(), n = xv.cols();
  check_mask(mask, n, "masked_mean_pool");
  int k = 0;
  for (int c = 0; c < n; ++c)
    if (mask.empty() || mask[c]) ++k;
  if (k == 0) throw MaskError("masked_mean_pool: all positions masked");
  Tensor<S> out(d, 1);
  for (int r = 0; r < d; ++r) {
    double acc = 0;
    for (int c = 0; c < n; ++c)
      if (mask.empty() || mask[c]) acc += xv.at(r, c);
    out[r] = static_cast<S>(acc / k);
  }
  int xid = x.id;
  return t.wrap(t.push(std::move(out), true,
                       [xid, mask, k](Tape<S>& t, int self) {
                         if (!t.tracked(xid)) return;
                         const Tensor<S>& g = t.grad_ref(self);
                         Tensor<S>& gx = t.grad_ref(xid);
                         const S w = static_cast<S>(1.0 / k);
                         for (int r = 0; r < gx.rows(); ++r)
                           for (int c = 0; c < gx.cols(); ++c)
                             if (mask.empty() || mask[c])
                               gx.at(r, c) += g[r] * w;
                       }));
}

template <typename S>
Var<S> per_label_affine(Var<S> v, Var<S> w, Var<S> b) {
  Tape<S>& t = tape_of(v, "per_label_affine");
  const Tensor<S>&vv = t.value(v.id), &wv = t.value(w.id), &bv = t.value(b.id);
  const int d = vv.rows(), L = vv.cols();
  if (wv.rows() != L || wv.cols() != d || bv.rows() != L || bv.cols() != 1)
    throw ShapeError("per_label_affine: v" + vv.shape_str() + " w" +
                     wv.shape_str() + " b" + bv.shape_str());
  Tensor<S> out(L, 1);
  for (int l = 0; l < L; ++l) {
    double acc = bv[l];
    for (int i = 0; i < d; ++i) acc += double(wv.at(l, i)) * vv.at(i, l);
    out[l] = static_cast<S>(acc);
  }
  int vid = v.id, wid = w.id, bid = b.id;
  return t.wrap(
      t.push(std::move(out), true, [vid, wid, bid](Tape<S>& t, int self) {
        const Tensor<S>& g = t.grad_ref(self);
        const Tensor<S>&vv = t.value(vid), &wv = t.value(wid);
        const int d = vv.rows(), L = vv.cols();
        for (int l = 0; l < L; ++l) {
          const S gl = g[l];
          if (t.tracked(wid)) {
            Tensor<S>& gw = t.grad_ref(wid);
            for (int i = 0; i < d; ++i) gw.at(l, i) += gl * vv.at(i, l);
          }
          if (t.tracked(vid)) {
            Tensor<S>& gv = t.grad_ref(vid);
            for (int i = 0; i < d; ++i) gv.at(i, l) += gl * wv.at(l, i);
          }
          if (t.tracked(bid)) t.grad_ref(bid)[l] += gl;
        }
      }));
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = tape_of(x, "sum_all");
  const Tensor<S>& xv = t.value(x.id);
  double acc = 0;
  for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  int xid = x.id;
  return t.wrap(
      t.push(Tensor<S>::scalar(static_cast<S>(acc)), true,
             [xid](Tape<S>& t, int self) {
               if (!t.tracked(xid)) return;
               const S g = t.grad_ref(self)[0];
               Tensor<S>& gx = t.grad_ref(xid);
               for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
             }));
}

template <typename S>
Var<S> bce_sum(Var<S> probs, const std::vector<std::uint8_t>& labels,
               double eps) {
  Tape<S>& t = tape_of(probs, "bce_sum");
  const Tensor<S>& pv = t.value(probs.id);
  if (pv.numel() != labels.size())
    throw ShapeError("bce_sum: " + std::to_string(pv.numel()) +
                     " probabilities vs " + std::to_string(labels.size()) +
                     " labels");
  double loss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double p = std::clamp(double(pv[i]), eps, 1.0 - eps);
    loss -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  int pid = probs.id;
  return t.wrap(t.push(
      Tensor<S>::scalar(static_cast<S>(loss)), true,
      [pid, labels, eps](Tape<S>& t, int self) {
        if (!t.tracked(pid)) return;
        const S g = t.grad_ref(self)[0];
        const Tensor<S>& pv = t.value(pid);
        Tensor<S>& gp = t.grad_ref(pid);
        for (std::size_t i = 0; i < labels.size(); ++i) {
          double p = double(pv[i]);
          if (p <= eps || p >= 1.0 - eps) continue;  // clamped: flat region
          double d = labels[i] ? -1.0 / p : 1.0 / (1.0 - p);
          gp[i] += static_cast<S>(double(g) * d);
        }
      }));
}

template <typename S>
Var<S> multi_head_self_attention(Var<S> x, const AttentionWeights<S>& w,
                                 const Mask& key_mask, int n_heads) {
  Tape<S>& t = tape_of(x, "attention");
  const int d = t.value(x.id).rows();
  if (n_heads < 1 || d % n_heads != 0)
    throw ConfigError("attention: dimension " + std::to_string(d) +
                      " not divisible by " + std::to_string(n_heads) +
                      " heads");
  const int dh = d / n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  Var<S> q = affine(w.wq, x, w.bq);
  Var<S> k = affine(w.wk, x, w.bk);
  Var<S> v = affine(w.wv, x, w.bv);
  std::vector<Var<S>> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Var<S> qh = slice_rows(q, h * dh, (h + 1) * dh);
    Var<S> kh = slice_rows(k, h * dh, (h + 1) * dh);
    Var<S> vh = slice_rows(v, h * dh, (h + 1) * dh);
    Var<S> attn = softmax_rows(matmul_tn(qh, kh, s), key_mask);
    heads.push_back(matmul_nt(vh, attn));
  }
  Var<S> cat = n_heads == 1 ? heads[0] : concat_rows(heads);
  return affine(w.wo, cat, w.bo);
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::vector<Tensor<double>*>& params,
                  const LossBuilder& build, double eps) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> t;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (Tensor<double>* p : params) vars.push_back(t.leaf(*p));
    Var<double> loss = build(t, vars);
    t.backward(loss);
    for (const Var<double>& v : vars) analytic.push_back(t.grad(v.id));
  }
  auto eval = [&]() {
    Tape<double> t;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (Tensor<double>* p : params) vars.push_back(t.leaf(*p));
    Var<double> loss = build(t, vars);
    return t.value(loss.id)[0];
  };
  double max_rel = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double fp = eval();
      p[i] = orig - eps;
      const double fm = eval();
      p[i] = orig;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[pi][i];
      const double rel = std::abs(ana - num) /
                         std::max({std::abs(ana), std::abs(num), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define EYEDX_INSTANTIATE_AUTODIFF(S)                                          \
  template class Tape<S>;                                                      \
  template Var<S> add<S>(Var<S>, Var<S>);                                      \
  template Var<S> mul<S>(Var<S>, Var<S>);                                      \
  template Var<S> scale<S>(Var<S>, double);                                    \
  template Var<S> matmul<S>(Var<S>, Var<S>);                                   \
  template Var<S> matmul_tn<S>(Var<S>, Var<S>, double);                        \
  template Var<S> matmul_nt<S>(Var<S>, Var<S>);                                \
  template Var<S> affine<S>(Var<S>, Var<S>, Var<S>);                           \
  template Var<S> relu<S>(Var<S>);                                             \
  template Var<S> sigmoid<S>(Var<S>);                                          \
  template Var<S> embedding_lookup<S>(Var<S>, const std::vector<int>&);        \
  template Var<S> dropout<S>(Var<S>, double, bool, Rng&);                      \
  template Var<S> concat_cols<S>(const std::vector<Var<S>>&);                  \
  template Var<S> concat_rows<S>(const std::vector<Var<S>>&);                  \
  template Var<S> slice_rows<S>(Var<S>, int, int);                             \
  template Var<S> transpose<S>(Var<S>);                                        \
  template Var<S> softmax_rows<S>(Var<S>, const Mask&);                        \
  template Var<S> layer_norm_cols<S>(Var<S>, Var<S>, Var<S>, double);          \
  template Var<S> masked_mean_pool<S>(Var<S>, const Mask&);                    \
  template Var<S> per_label_affine<S>(Var<S>, Var<S>, Var<S>);                 \
  template Var<S> sum_all<S>(Var<S>);                                          \
  template Var<S> bce_sum<S>(Var<S>, const std::vector<std::uint8_t>&,         \
                             double);                                          \
  template Var<S> multi_head_self_attention<S>(                                \
      Var<S>, const AttentionWeights<S>&, const Mask&, int);

EYEDX_INSTANTIATE_AUTODIFF(float)
EYEDX_INSTANTIATE_AUTODIFF(double)

#undef EYEDX_INSTANTIATE_AUTODIFF

}  // namespace eyedx
