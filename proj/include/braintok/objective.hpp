#pragma once

#include <cmath>
#include <vector>

#include "braintok/mask.hpp"
#include "braintok/params.hpp"
#include "braintok/tape.hpp"

namespace braintok {

struct ObjectiveConfig {
  double lambda_tok = 0.5;
  double lambda_ttr = 0.5;
  double ttr_decay_fraction = 0.05;
  double epsilon = 0.05;
  // Divide the masked-token sum by the masked-token count so lambda_tok keeps
  // the same meaning across masking ratios; set false for the raw sum.
  bool normalize_token_loss = true;

  void validate() const {
    if (lambda_tok < 0.0 || lambda_ttr < 0.0)
      throw ConfigError("objective: loss weights must be >= 0");
    if (!(ttr_decay_fraction > 0.0) || ttr_decay_fraction > 1.0)
      throw ConfigError("objective: ttr_decay_fraction must be in (0, 1]");
    if (!(epsilon > 0.0)) throw ConfigError("objective: epsilon must be positive");
  }
};

// Balancing heuristic gamma = (D_proj + B) / (D_proj * B).
inline double gamma_weight(int d_proj, int batch) {
  if (d_proj < 1 || batch < 1) throw ConfigError("gamma: dimensions must be >= 1");
  return static_cast<double>(d_proj + batch) /
         (static_cast<double>(d_proj) * static_cast<double>(batch));
}

// R_eps(Sigma) = 0.5 * logdet(I + (D_proj / eps) * Sigma) for a given
// covariance. Kept separate from the batch version so it can be checked
// directly against an eigenvalue-form oracle.
template <typename S>
typename Tape<S>::Var coding_rate_from_cov(Tape<S>& tape, typename Tape<S>::Var cov,
                                           double epsilon) {
  const Eigen::Index d = tape.val(cov).rows();
  if (tape.val(cov).cols() != d) throw NumericError("coding_rate: covariance not square");
  const S c = static_cast<S>(static_cast<double>(d) / epsilon);
  Mat<S> eye = Mat<S>::Identity(d, d);
  auto m = tape.add(tape.constant(std::move(eye)), tape.scale(cov, c));
  return tape.scale(tape.logdet_psd(m), S(0.5));
}

// Coding rate of a batch of projections Z (B x D_proj), using the
// mean-centered batch covariance Sigma = Zc^T Zc / B.
template <typename S>
typename Tape<S>::Var coding_rate(Tape<S>& tape, typename Tape<S>::Var z, double epsilon) {
  const Eigen::Index b = tape.val(z).rows();
  if (b < 2) throw ConfigError("coding_rate: batch size must be >= 2");
  if (!tape.val(z).allFinite()) throw NumericError("coding_rate: non-finite input");
  auto zc = tape.center_cols(z);
  auto cov = tape.scale(tape.matmul(tape.transpose(zc), zc), S(1) / static_cast<S>(b));
  return coding_rate_from_cov(tape, cov, epsilon);
}

template <typename S>
struct LossParts {
  typename Tape<S>::Var loss;  // dist - gamma * rate (token loss: dist only)
  typename Tape<S>::Var dist;
  typename Tape<S>::Var rate;
};

// Mean squared-distance helper: sum((a - b)^2) / rows.
template <typename S>
typename Tape<S>::Var mean_sqdist(Tape<S>& tape, typename Tape<S>::Var a,
                                  const Mat<S>& b) {
  auto d = tape.sub(a, tape.constant(b));
  return tape.scale(tape.sum_all(tape.cmul(d, d)), S(1) / static_cast<S>(b.rows()));
}

// Bidirectional CLS consistency with the coding-rate regularizer averaged
// over both student views. Teacher batches enter as plain matrices, so no
// gradient can flow to them.
template <typename S>
LossParts<S> cls_loss(Tape<S>& tape, typename Tape<S>::Var s1, typename Tape<S>::Var s2,
                      const Mat<S>& t1, const Mat<S>& t2, double gamma, double epsilon) {
  if (tape.val(s1).rows() != t2.rows() || tape.val(s2).rows() != t1.rows())
    throw ConfigError("cls_loss: batch size mismatch");
  LossParts<S> out;
  out.dist = tape.add(mean_sqdist(tape, s1, t2), mean_sqdist(tape, s2, t1));
  out.rate = tape.scale(
      tape.add(coding_rate(tape, s1, epsilon), coding_rate(tape, s2, epsilon)), S(0.5));
  out.loss = tape.sub(out.dist, tape.scale(out.rate, static_cast<S>(gamma)));
  return out;
}

// Masked-token distillation. One entry per (item, view): the student's
// projected grid, the teacher's projected grid, and the mask applied to the
// student's input. Per entry the masked squared distances are summed (and
// divided by the masked count when normalizing); entries are averaged.
template <typename S>
typename Tape<S>::Var token_loss(Tape<S>& tape,
                                 const std::vector<typename Tape<S>::Var>& student_grids,
                                 const std::vector<Mat<S>>& teacher_grids,
                                 const std::vector<const MaskGrid*>& masks,
                                 bool normalize = true) {
  if (student_grids.empty() || student_grids.size() != teacher_grids.size() ||
      student_grids.size() != masks.size())
    throw ConfigError("token_loss: entry count mismatch");
  typename Tape<S>::Var acc;
  for (std::size_t i = 0; i < student_grids.size(); ++i) {
    const MaskGrid& mask = *masks[i];
    const int n_masked = mask.count_masked();
    if (n_masked == 0) throw ConfigError("token_loss: mask has no masked tokens");
    Mat<S> sel(static_cast<Eigen::Index>(mask.bits.size()), 1);
    for (std::size_t k = 0; k < mask.bits.size(); ++k)
      sel(static_cast<Eigen::Index>(k), 0) = static_cast<S>(mask.bits[k]);
    auto d = tape.sub(student_grids[i], tape.constant(teacher_grids[i]));
    auto sq = tape.cmul(d, d);
    auto masked_sum = tape.sum_all(tape.mul_colvec(sq, tape.constant(std::move(sel))));
    if (normalize) masked_sum = tape.scale(masked_sum, S(1) / static_cast<S>(n_masked));
    acc = i == 0 ? masked_sum : tape.add(acc, masked_sum);
  }
  return tape.scale(acc, S(1) / static_cast<S>(student_grids.size()));
}

// Teacher-guided temporal regularizer on per-network time-averaged summary
// tokens. Inputs are per-network batches (B x D_proj): student summaries for
// both views and teacher summaries for both views (constants). The coding
// rate is averaged over both student views, mirroring cls_loss.
template <typename S>
LossParts<S> ttr_loss(Tape<S>& tape,
                      const std::vector<typename Tape<S>::Var>& s1,
                      const std::vector<typename Tape<S>::Var>& s2,
                      const std::vector<Mat<S>>& t1, const std::vector<Mat<S>>& t2,
                      double gamma, double epsilon) {
  const std::size_t n = s1.size();
  if (n == 0 || s2.size() != n || t1.size() != n || t2.size() != n)
    throw ConfigError("ttr_loss: per-network batch counts disagree");
  typename Tape<S>::Var dist, rate;
  for (std::size_t i = 0; i < n; ++i) {
    auto d = tape.add(mean_sqdist(tape, s1[i], t2[i]), mean_sqdist(tape, s2[i], t1[i]));
    dist = i == 0 ? d : tape.add(dist, d);
    auto r = tape.scale(tape.add(coding_rate(tape, s1[i], epsilon),
                                 coding_rate(tape, s2[i], epsilon)),
                        S(0.5));
    rate = i == 0 ? r : tape.add(rate, r);
  }
  LossParts<S> out;
  out.dist = dist;
  out.rate = rate;
  out.loss = tape.sub(dist, tape.scale(rate, static_cast<S>(gamma)));
  return out;
}

// Cosine decay of the TTR weight to zero over the first decay_fraction of
// training: lambda_ttr * 0.5 * (1 + cos(pi * s / (f * S))) for s <= f * S.
inline double ttr_weight(double step, double total_steps, const ObjectiveConfig& cfg) {
  if (step < 0.0 || step > total_steps)
    throw ConfigError("ttr_weight: step outside [0, total_steps]");
  const double horizon = cfg.ttr_decay_fraction * total_steps;
  if (horizon <= 0.0 || step >= horizon) return 0.0;
  return cfg.lambda_ttr * 0.5 * (1.0 + std::cos(M_PI * step / horizon));
}

// Per-step scalar record, emitted to the metrics CSV.
struct LossBreakdown {
  double l_cls = 0.0;   // CLS distance term
  double l_tok = 0.0;
  double l_ttr = 0.0;   // TTR distance term
  double r_cls = 0.0;   // coding rate paired with the CLS loss
  double r_ttr = 0.0;
  double total = 0.0;
  double ttr_weight_used = 0.0;
};

// Combines the components per the total objective:
// total = (l_cls - gamma r_cls) + lambda_tok * l_tok
//         + w_ttr(step) * (l_ttr - gamma r_ttr).
template <typename S>
typename Tape<S>::Var total_loss(Tape<S>& tape, const LossParts<S>& cls,
                                 typename Tape<S>::Var tok, const LossParts<S>& ttr,
                                 double w_ttr, const ObjectiveConfig& cfg,
                                 LossBreakdown* breakdown = nullptr) {
  auto total = tape.add(cls.loss, tape.scale(tok, static_cast<S>(cfg.lambda_tok)));
  if (w_ttr != 0.0) total = tape.add(total, tape.scale(ttr.loss, static_cast<S>(w_ttr)));
  const double t = static_cast<double>(tape.scalar(total));
  if (!std::isfinite(t)) throw NumericError("total loss is non-finite");
  if (breakdown != nullptr) {
    breakdown->l_cls = static_cast<double>(tape.scalar(cls.dist));
    breakdown->r_cls = static_cast<double>(tape.scalar(cls.rate));
    breakdown->l_tok = static_cast<double>(tape.scalar(tok));
    breakdown->l_ttr = static_cast<double>(tape.scalar(ttr.dist));
    breakdown->r_ttr = static_cast<double>(tape.scalar(ttr.rate));
    breakdown->total = t;
    breakdown->ttr_weight_used = w_ttr;
  }
  return total;
}

}  // namespace braintok
