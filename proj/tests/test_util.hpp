#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>

#include "braintok/params.hpp"
#include "braintok/tape.hpp"

namespace braintok::testutil {

inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central finite differences of a scalar function w.r.t. one matrix input,
// compared against the tape gradient. build() must construct the loss from a
// leaf holding the current matrix.
template <typename S>
double max_grad_rel_err(
    Mat<S> x,
    const std::function<typename Tape<S>::Var(Tape<S>&, typename Tape<S>::Var)>& build,
    double h = 1e-5) {
  Tape<S> tape(true);
  auto leaf = tape.leaf(x);
  auto loss = build(tape, leaf);
  tape.backward(loss);
  const Mat<S> grad = tape.grad_of(leaf);

  const auto eval = [&](const Mat<S>& m) {
    Tape<S> t(false);
    return static_cast<double>(t.scalar(build(t, t.leaf(m))));
  };
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Mat<S> xp = x, xm = x;
      const double step = h * (1.0 + std::abs(static_cast<double>(x(i, j))));
      xp(i, j) += static_cast<S>(step);
      xm(i, j) -= static_cast<S>(step);
      const double fd = (eval(xp) - eval(xm)) / (2.0 * step);
      worst = std::max(worst, rel_err(static_cast<double>(grad(i, j)), fd));
    }
  return worst;
}

// Finite-difference check of d(loss)/d(theta) for every scalar in every
// parameter tensor of a store. forward() must rebuild the loss value from the
// current parameter values (no gradient needed). Returns the worst violation
// factor |analytic - fd| / (atol + rtol * max(|analytic|, |fd|)); a value
// <= 1 means every parameter passed at the given tolerances. The absolute
// term absorbs central-difference roundoff noise on true-zero gradients.
template <typename S>
double max_param_grad_violation(ParamSet<S>& params,
                                const std::function<double()>& forward,
                                const std::function<void()>& backward_fill_grads,
                                double rtol, double atol, double h = 1e-5) {
  params.zero_grad();
  backward_fill_grads();
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& pt = params[p];
    for (Eigen::Index i = 0; i < pt.value.rows(); ++i)
      for (Eigen::Index j = 0; j < pt.value.cols(); ++j) {
        const S saved = pt.value(i, j);
        const double step = h * (1.0 + std::abs(static_cast<double>(saved)));
        pt.value(i, j) = saved + static_cast<S>(step);
        const double fp = forward();
        pt.value(i, j) = saved - static_cast<S>(step);
        const double fm = forward();
        pt.value(i, j) = saved;
        const double fd = (fp - fm) / (2.0 * step);
        const double an = static_cast<double>(pt.grad(i, j));
        const double viol =
            std::abs(an - fd) / (atol + rtol * std::max(std::abs(an), std::abs(fd)));
        worst = std::max(worst, viol);
      }
  }
  return worst;
}

template <typename S>
Mat<S> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(rng.normal(0.0, scale));
  return m;
}

}  // namespace braintok::testutil
