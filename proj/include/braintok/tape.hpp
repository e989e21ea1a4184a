#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "braintok/errors.hpp"

namespace braintok {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct ParamTensor {
  std::string name;
  Mat<S> value;
  Mat<S> grad;      // accumulated by Tape::backward
  Mat<S> adam_m;    // optimizer moments; empty on teacher parameters
  Mat<S> adam_v;
  bool decay = false;  // eligible for decoupled weight decay
};

// Reverse-mode autodiff over dense matrices. Nodes are recorded in creation
// order, which is a topological order of the compute graph, so the backward
// sweep is a single reverse pass. Intermediate buffers are released as the
// sweep passes them to bound peak memory on long training graphs.
//
// A tape constructed with grad_enabled=false records values only (used for
// teacher forward passes and evaluation).
template <typename S>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  // ---- leaves -------------------------------------------------------------

  Var constant(Mat<S> v) { return push(std::move(v), false, nullptr); }

  Var constant_scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  // Differentiable input; its gradient is retained for inspection.
  Var leaf(Mat<S> v) { return push(std::move(v), grad_enabled_, nullptr); }

  // Model parameter; after backward() the node gradient is added into
  // pt.grad, so one tape can serve a whole batch accumulation.
  Var param(ParamTensor<S>& pt) { return push(pt.value, grad_enabled_, &pt); }

  // ---- access -------------------------------------------------------------

  const Mat<S>& val(Var v) const { return nodes_[check(v)].value; }

  S scalar(Var v) const {
    const Mat<S>& m = val(v);
    if (m.rows() != 1 || m.cols() != 1)
      throw NumericError("scalar() on non 1x1 node");
    return m(0, 0);
  }

  // Gradient of a leaf/param node after backward(); zero matrix if the loss
  // did not depend on it.
  Mat<S> grad_of(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // ---- ops ----------------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Mat<S> v = val(a) + val(b);
    return push(std::move(v), tracked(a) || tracked(b),
                [a, b](Tape& t, const Node& n) {
                  t.accum(a, n.grad);
                  t.accum(b, n.grad);
                });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Mat<S> v = val(a) - val(b);
    return push(std::move(v), tracked(a) || tracked(b),
                [a, b](Tape& t, const Node& n) {
                  t.accum(a, n.grad);
                  if (t.tracked(b)) t.accum_expr(b, (-n.grad).eval());
                });
  }

  Var cmul(Var a, Var b) {  // elementwise
    same_shape(a, b, "cmul");
    Mat<S> v = val(a).cwiseProduct(val(b));
    return push(std::move(v), tracked(a) || tracked(b),
                [a, b](Tape& t, const Node& n) {
                  if (t.tracked(a)) t.accum_expr(a, n.grad.cwiseProduct(t.val(b)).eval());
                  if (t.tracked(b)) t.accum_expr(b, n.grad.cwiseProduct(t.val(a)).eval());
                });
  }

  Var scale(Var a, S s) {
    Mat<S> v = val(a) * s;
    return push(std::move(v), tracked(a), [a, s](Tape& t, const Node& n) {
      t.accum_expr(a, (n.grad * s).eval());
    });
  }

  Var matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows())
      throw NumericError("matmul: inner dimensions disagree");
    Mat<S> v = val(a) * val(b);
    return push(std::move(v), tracked(a) || tracked(b),
                [a, b](Tape& t, const Node& n) {
                  if (t.tracked(a)) t.accum_expr(a, (n.grad * t.val(b).transpose()).eval());
                  if (t.tracked(b)) t.accum_expr(b, (t.val(a).transpose() * n.grad).eval());
                });
  }

  Var transpose(Var a) {
    Mat<S> v = val(a).transpose();
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      t.accum_expr(a, n.grad.transpose().eval());
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw NumericError("concat_rows: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts[0]).cols();
    bool track = false;
    for (Var p : parts) {
      if (val(p).cols() != cols) throw NumericError("concat_rows: column mismatch");
      rows += val(p).rows();
      track = track || tracked(p);
    }
    Mat<S> v(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      v.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    return push(std::move(v), track, [parts](Tape& t, const Node& n) {
      Eigen::Index r = 0;
      for (Var p : parts) {
        const Eigen::Index pr = t.val(p).rows();
        if (t.tracked(p)) t.accum_expr(p, n.grad.middleRows(r, pr).eval());
        r += pr;
      }
    });
  }

  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index nrows) {
    if (r0 < 0 || r0 + nrows > val(a).rows())
      throw NumericError("slice_rows: out of range");
    Mat<S> v = val(a).middleRows(r0, nrows);
    return push(std::move(v), tracked(a), [a, r0, nrows](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      t.node(a).grad.middleRows(r0, nrows) += n.grad;
    });
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index ncols) {
    if (c0 < 0 || c0 + ncols > val(a).cols())
      throw NumericError("slice_cols: out of range");
    Mat<S> v = val(a).middleCols(c0, ncols);
    return push(std::move(v), tracked(a), [a, c0, ncols](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      t.node(a).grad.middleCols(c0, ncols) += n.grad;
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw NumericError("concat_cols: empty");
    const Eigen::Index rows = val(parts[0]).rows();
    Eigen::Index cols = 0;
    bool track = false;
    for (Var p : parts) {
      if (val(p).rows() != rows) throw NumericError("concat_cols: row mismatch");
      cols += val(p).cols();
      track = track || tracked(p);
    }
    Mat<S> v(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      v.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    return push(std::move(v), track, [parts](Tape& t, const Node& n) {
      Eigen::Index c = 0;
      for (Var p : parts) {
        const Eigen::Index pc = t.val(p).cols();
        if (t.tracked(p)) t.accum_expr(p, n.grad.middleCols(c, pc).eval());
        c += pc;
      }
    });
  }

  Var sum_all(Var a) {
    Mat<S> v(1, 1);
    v(0, 0) = val(a).sum();
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      const S g = n.grad(0, 0);
      t.ensure_grad(a);
      t.node(a).grad.array() += g;
    });
  }

  // Mean over columns: (R x C) -> (R x 1).
  Var mean_cols(Var a) {
    const S inv = S(1) / static_cast<S>(val(a).cols());
    Mat<S> v = val(a).rowwise().mean();
    return push(std::move(v), tracked(a), [a, inv](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      t.node(a).grad += (n.grad * inv).replicate(1, t.val(a).cols());
    });
  }

  // Mean over rows: (R x C) -> (1 x C).
  Var mean_rows(Var a) {
    const S inv = S(1) / static_cast<S>(val(a).rows());
    Mat<S> v = val(a).colwise().mean();
    return push(std::move(v), tracked(a), [a, inv](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      t.node(a).grad += (n.grad * inv).replicate(t.val(a).rows(), 1);
    });
  }

  // Subtract the per-column mean taken over rows (batch centering).
  Var center_cols(Var a) {
    Mat<S> mu = val(a).colwise().mean();
    Mat<S> v = val(a).rowwise() - mu.row(0);
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      Mat<S> gmu = n.grad.colwise().mean();
      t.ensure_grad(a);
      t.node(a).grad += n.grad.rowwise() - gmu.row(0);
    });
  }

  // Exact (erf-based) GELU.
  Var gelu(Var a) {
    const Mat<S>& x = val(a);
    Mat<S> v = x.unaryExpr([](S t) {
      return S(0.5) * t * (S(1) + std::erf(t * S(M_SQRT1_2)));
    });
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      const Mat<S>& x = t.val(a);
      Mat<S> d = x.unaryExpr([](S u) {
        const S cdf = S(0.5) * (S(1) + std::erf(u * S(M_SQRT1_2)));
        const S pdf = std::exp(S(-0.5) * u * u) * S(0.3989422804014326779);
        return cdf + u * pdf;
      });
      t.accum_expr(a, d.cwiseProduct(n.grad).eval());
    });
  }

  Var softmax_rows(Var a) {
    const Mat<S>& x = val(a);
    Mat<S> v(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const S mx = x.row(i).maxCoeff();
      v.row(i) = (x.row(i).array() - mx).exp();
      v.row(i) /= v.row(i).sum();
    }
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      const Mat<S>& y = n.value;
      Mat<S> d(y.rows(), y.cols());
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const S dot = y.row(i).dot(n.grad.row(i));
        d.row(i) = y.row(i).cwiseProduct(n.grad.row(i).array().eval().matrix() -
                                          Mat<S>::Constant(1, y.cols(), dot));
      }
      t.accum(a, d);
    });
  }

  // Per-row layer normalization of (L x D) with learnable (1 x D) gain/bias.
  Var layernorm_rows(Var a, Var gain, Var bias, S eps = S(1e-6)) {
    const Mat<S>& x = val(a);
    const Eigen::Index d = x.cols();
    Mat<S> xhat(x.rows(), d);
    Mat<S> istd(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const S mu = x.row(i).mean();
      const S var = (x.row(i).array() - mu).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      istd(i, 0) = is;
      xhat.row(i) = (x.row(i).array() - mu) * is;
    }
    Mat<S> v = (xhat.array().rowwise() * val(gain).row(0).array()).rowwise() +
               val(bias).row(0).array();
    const bool track = tracked(a) || tracked(gain) || tracked(bias);
    return push(std::move(v), track,
                [a, gain, bias, xhat, istd](Tape& t, const Node& n) {
                  const Eigen::Index d = xhat.cols();
                  if (t.tracked(gain))
                    t.accum_expr(gain, (n.grad.cwiseProduct(xhat)).colwise().sum().eval());
                  if (t.tracked(bias))
                    t.accum_expr(bias, n.grad.colwise().sum().eval());
                  if (!t.tracked(a)) return;
                  Mat<S> dxhat = n.grad.array().rowwise() * t.val(gain).row(0).array();
                  Mat<S> dx(xhat.rows(), d);
                  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                    const S m1 = dxhat.row(i).mean();
                    const S m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                    dx.row(i) =
                        istd(i, 0) *
                        (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                  t.accum(a, dx);
                });
  }

  // Row-wise L2 normalization; rejects degenerate (zero) rows.
  Var l2normalize_rows(Var a) {
    const Mat<S>& x = val(a);
    Mat<S> v(x.rows(), x.cols());
    Mat<S> inorm(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const S nrm = x.row(i).norm();
      if (!(nrm > S(0)))
        throw NumericError("l2normalize: zero vector before normalization");
      inorm(i, 0) = S(1) / nrm;
      v.row(i) = x.row(i) * inorm(i, 0);
    }
    return push(std::move(v), tracked(a), [a, inorm](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      const Mat<S>& u = n.value;
      Mat<S> dx(u.rows(), u.cols());
      for (Eigen::Index i = 0; i < u.rows(); ++i) {
        const S dot = u.row(i).dot(n.grad.row(i));
        dx.row(i) = inorm(i, 0) * (n.grad.row(i) - dot * u.row(i));
      }
      t.accum(a, dx);
    });
  }

  // log det of a symmetric positive-definite matrix via Cholesky.
  Var logdet_psd(Var a) {
    const Mat<S>& m = val(a);
    if (m.rows() != m.cols()) throw NumericError("logdet_psd: non-square");
    Eigen::LLT<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> llt(m);
    if (llt.info() != Eigen::Success)
      throw NumericError("logdet_psd: matrix not positive definite");
    S ld = 0;
    const auto& L = llt.matrixLLT();
    for (Eigen::Index i = 0; i < m.rows(); ++i) ld += std::log(L(i, i));
    Mat<S> v(1, 1);
    v(0, 0) = S(2) * ld;
    return push(std::move(v), tracked(a), [a](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      const Mat<S>& m = t.val(a);
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> inv =
          Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>::Identity(m.rows(), m.rows());
      Eigen::LLT<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> llt(m);
      inv = llt.solve(inv);
      t.accum_expr(a, (n.grad(0, 0) * inv).eval());
    });
  }

  // Column-vector broadcasts over (C x T): per-row bias / per-row scaling.
  Var add_colvec(Var a, Var v) {
    if (val(v).cols() != 1 || val(v).rows() != val(a).rows())
      throw NumericError("add_colvec: shape mismatch");
    Mat<S> out = val(a).colwise() + val(v).col(0);
    return push(std::move(out), tracked(a) || tracked(v),
                [a, v](Tape& t, const Node& n) {
                  t.accum(a, n.grad);
                  if (t.tracked(v)) t.accum_expr(v, n.grad.rowwise().sum().eval());
                });
  }

  Var mul_colvec(Var a, Var v) {
    if (val(v).cols() != 1 || val(v).rows() != val(a).rows())
      throw NumericError("mul_colvec: shape mismatch");
    Mat<S> out = val(a).array().colwise() * val(v).col(0).array();
    return push(std::move(out), tracked(a) || tracked(v),
                [a, v](Tape& t, const Node& n) {
                  if (t.tracked(a))
                    t.accum_expr(a, (n.grad.array().colwise() * t.val(v).col(0).array())
                                        .matrix()
                                        .eval());
                  if (t.tracked(v))
                    t.accum_expr(v, n.grad.cwiseProduct(t.val(a)).rowwise().sum().eval());
                });
  }

  // Row-vector broadcasts over (L x D): per-column bias / scaling.
  Var add_rowvec(Var a, Var v) {
    if (val(v).rows() != 1 || val(v).cols() != val(a).cols())
      throw NumericError("add_rowvec: shape mismatch");
    Mat<S> out = val(a).rowwise() + val(v).row(0);
    return push(std::move(out), tracked(a) || tracked(v),
                [a, v](Tape& t, const Node& n) {
                  t.accum(a, n.grad);
                  if (t.tracked(v)) t.accum_expr(v, n.grad.colwise().sum().eval());
                });
  }

  Var mul_rowvec(Var a, Var v) {
    if (val(v).rows() != 1 || val(v).cols() != val(a).cols())
      throw NumericError("mul_rowvec: shape mismatch");
    Mat<S> out = val(a).array().rowwise() * val(v).row(0).array();
    return push(std::move(out), tracked(a) || tracked(v),
                [a, v](Tape& t, const Node& n) {
                  if (t.tracked(a))
                    t.accum_expr(a, (n.grad.array().rowwise() * t.val(v).row(0).array())
                                        .matrix()
                                        .eval());
                  if (t.tracked(v))
                    t.accum_expr(v, n.grad.cwiseProduct(t.val(a)).colwise().sum().eval());
                });
  }

  // im2col for 1-D convolution along columns: (C x T) -> (C*k x T), where
  // out(c*k + j, t) = a(c, t + j - pad_left), zero outside [0, T).
  Var unfold1d(Var a, int k, int pad_left) {
    const Mat<S>& x = val(a);
    const Eigen::Index C = x.rows(), T = x.cols();
    Mat<S> v = Mat<S>::Zero(C * k, T);
    for (Eigen::Index c = 0; c < C; ++c)
      for (int j = 0; j < k; ++j)
        for (Eigen::Index t = 0; t < T; ++t) {
          const Eigen::Index src = t + j - pad_left;
          if (src >= 0 && src < T) v(c * k + j, t) = x(c, src);
        }
    return push(std::move(v), tracked(a), [a, k, pad_left](Tape& tp, const Node& n) {
      if (!tp.tracked(a)) return;
      const Eigen::Index C = tp.val(a).rows(), T = tp.val(a).cols();
      tp.ensure_grad(a);
      Mat<S>& g = tp.node(a).grad;
      for (Eigen::Index c = 0; c < C; ++c)
        for (int j = 0; j < k; ++j)
          for (Eigen::Index t = 0; t < T; ++t) {
            const Eigen::Index src = t + j - pad_left;
            if (src >= 0 && src < T) g(c, src) += n.grad(c * k + j, t);
          }
    });
  }

  // Depthwise 1-D cross-correlation: x (C x T), ker (C x K),
  // out(c, t) = sum_j ker(c, j) * x(c, t + j - pad_left).
  Var dwconv1d(Var x, Var ker, int pad_left) {
    const Mat<S>& xv = val(x);
    const Mat<S>& kv = val(ker);
    if (xv.rows() != kv.rows()) throw NumericError("dwconv1d: channel mismatch");
    const Eigen::Index C = xv.rows(), T = xv.cols(), K = kv.cols();
    Mat<S> v = Mat<S>::Zero(C, T);
    for (Eigen::Index c = 0; c < C; ++c)
      for (Eigen::Index t = 0; t < T; ++t) {
        S acc = 0;
        for (Eigen::Index j = 0; j < K; ++j) {
          const Eigen::Index src = t + j - pad_left;
          if (src >= 0 && src < T) acc += kv(c, j) * xv(c, src);
        }
        v(c, t) = acc;
      }
    return push(std::move(v), tracked(x) || tracked(ker),
                [x, ker, pad_left](Tape& tp, const Node& n) {
                  const Mat<S>& xv = tp.val(x);
                  const Mat<S>& kv = tp.val(ker);
                  const Eigen::Index C = xv.rows(), T = xv.cols(), K = kv.cols();
                  if (tp.tracked(x)) {
                    tp.ensure_grad(x);
                    Mat<S>& gx = tp.node(x).grad;
                    for (Eigen::Index c = 0; c < C; ++c)
                      for (Eigen::Index t = 0; t < T; ++t)
                        for (Eigen::Index j = 0; j < K; ++j) {
                          const Eigen::Index src = t + j - pad_left;
                          if (src >= 0 && src < T) gx(c, src) += kv(c, j) * n.grad(c, t);
                        }
                  }
                  if (tp.tracked(ker)) {
                    tp.ensure_grad(ker);
                    Mat<S>& gk = tp.node(ker).grad;
                    for (Eigen::Index c = 0; c < C; ++c)
                      for (Eigen::Index j = 0; j < K; ++j) {
                        S acc = 0;
                        for (Eigen::Index t = 0; t < T; ++t) {
                          const Eigen::Index src = t + j - pad_left;
                          if (src >= 0 && src < T) acc += xv(c, src) * n.grad(c, t);
                        }
                        gk(c, j) += acc;
                      }
                  }
                });
  }

  // Nearest-neighbour upsampling along columns by an integer factor.
  Var upsample_cols(Var a, int factor) {
    const Mat<S>& x = val(a);
    Mat<S> v(x.rows(), x.cols() * factor);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (int f = 0; f < factor; ++f) v.col(j * factor + f) = x.col(j);
    return push(std::move(v), tracked(a), [a, factor](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      Mat<S>& g = t.node(a).grad;
      for (Eigen::Index j = 0; j < g.cols(); ++j)
        for (int f = 0; f < factor; ++f) g.col(j) += n.grad.col(j * factor + f);
    });
  }

  // Replicates each row H times, interleaved: out(c*H + h, :) = a(c, :).
  Var replicate_rows(Var a, int H) {
    const Mat<S>& x = val(a);
    Mat<S> v(x.rows() * H, x.cols());
    for (Eigen::Index c = 0; c < x.rows(); ++c)
      for (int h = 0; h < H; ++h) v.row(c * H + h) = x.row(c);
    return push(std::move(v), tracked(a), [a, H](Tape& t, const Node& n) {
      if (!t.tracked(a)) return;
      t.ensure_grad(a);
      Mat<S>& g = t.node(a).grad;
      for (Eigen::Index c = 0; c < g.rows(); ++c)
        for (int h = 0; h < H; ++h) g.row(c) += n.grad.row(c * H + h);
    });
  }

  // out(i, :) = a(perm[i], :); perm must be a permutation of the row range.
  Var permute_rows(Var a, std::vector<int> perm) {
    const Mat<S>& x = val(a);
    if (static_cast<Eigen::Index>(perm.size()) != x.rows())
      throw NumericError("permute_rows: size mismatch");
    Mat<S> v(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i)
      v.row(static_cast<Eigen::Index>(i)) = x.row(perm[i]);
    return push(std::move(v), tracked(a),
                [a, perm = std::move(perm)](Tape& t, const Node& n) {
                  if (!t.tracked(a)) return;
                  t.ensure_grad(a);
                  Mat<S>& g = t.node(a).grad;
                  for (std::size_t i = 0; i < perm.size(); ++i)
                    g.row(perm[i]) += n.grad.row(static_cast<Eigen::Index>(i));
                });
  }

  // Row gather from an embedding table: out(i, :) = table(idx[i], :).
  Var gather_rows(Var table, std::vector<int> idx) {
    const Mat<S>& tb = val(table);
    Mat<S> v(static_cast<Eigen::Index>(idx.size()), tb.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= tb.rows())
        throw NumericError("gather_rows: index out of range");
      v.row(static_cast<Eigen::Index>(i)) = tb.row(idx[i]);
    }
    return push(std::move(v), tracked(table),
                [table, idx = std::move(idx)](Tape& t, const Node& n) {
                  if (!t.tracked(table)) return;
                  t.ensure_grad(table);
                  Mat<S>& g = t.node(table).grad;
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
                });
  }

  // Replaces row i with the (1 x D) mask embedding wherever bits[i] == 1.
  Var apply_mask_rows(Var tokens, std::vector<std::uint8_t> bits, Var mask_emb) {
    const Mat<S>& x = val(tokens);
    if (static_cast<Eigen::Index>(bits.size()) != x.rows())
      throw NumericError("apply_mask_rows: bit count mismatch");
    if (val(mask_emb).rows() != 1 || val(mask_emb).cols() != x.cols())
      throw NumericError("apply_mask_rows: mask embedding shape");
    Mat<S> v = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (bits[static_cast<std::size_t>(i)]) v.row(i) = val(mask_emb).row(0);
    return push(std::move(v), tracked(tokens) || tracked(mask_emb),
                [tokens, mask_emb, bits = std::move(bits)](Tape& t, const Node& n) {
                  if (t.tracked(tokens)) {
                    t.ensure_grad(tokens);
                    Mat<S>& g = t.node(tokens).grad;
                    for (Eigen::Index i = 0; i < g.rows(); ++i)
                      if (!bits[static_cast<std::size_t>(i)]) g.row(i) += n.grad.row(i);
                  }
                  if (t.tracked(mask_emb)) {
                    t.ensure_grad(mask_emb);
                    Mat<S>& g = t.node(mask_emb).grad;
                    for (Eigen::Index i = 0; i < n.grad.rows(); ++i)
                      if (bits[static_cast<std::size_t>(i)]) g.row(0) += n.grad.row(i);
                  }
                });
  }

  // ---- backward -----------------------------------------------------------

  void backward(Var loss) {
    const int lid = check(loss);
    Node& ln = nodes_[static_cast<std::size_t>(lid)];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw NumericError("backward: loss must be scalar");
    if (!grad_enabled_) throw NumericError("backward on grad-disabled tape");
    ensure_grad(loss);
    ln.grad(0, 0) = S(1);
    for (int i = lid; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.track || n.grad.size() == 0) continue;
      if (n.back) n.back(*this, n);
      if (n.param) n.param->grad += n.grad;
      if (n.back) {  // interior node: buffers are dead past this point
        n.value.resize(0, 0);
        n.grad.resize(0, 0);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool track = false;
    ParamTensor<S>* param = nullptr;
    std::function<void(Tape&, const Node&)> back;
  };

  friend struct NodeAccess;

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(check(v))]; }

  int check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw NumericError("invalid tape variable");
    return v.id;
  }

  bool tracked(Var v) const { return nodes_[static_cast<std::size_t>(check(v))].track; }

  void same_shape(Var a, Var b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw NumericError(std::string(op) + ": shape mismatch");
  }

  void ensure_grad(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  void accum(Var v, const Mat<S>& g) {
    if (!tracked(v)) return;
    ensure_grad(v);
    node(v).grad += g;
  }

  template <typename Expr>
  void accum_expr(Var v, Expr&& g) {
    if (!tracked(v)) return;
    ensure_grad(v);
    node(v).grad += g;
  }

  Var push(Mat<S> v, bool track, std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.value = std::move(v);
    n.track = grad_enabled_ && track;
    if (n.track) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push(Mat<S> v, bool track, ParamTensor<S>* pt) {
    Node n;
    n.value = std::move(v);
    n.track = grad_enabled_ && track;
    n.param = n.track ? pt : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace braintok
