#pragma once

// Two-stage estimation: fit nuisances (on all data, or out-of-fold), build
// the linear moment, solve A_n theta = -V_n, and attach the sandwich
// covariance A_n^{-1} Sigma A_n^{-T} / n with normal confidence intervals.

#include "stable_dml/core.hpp"
#include "stable_dml/learners.hpp"
#include "stable_dml/moments.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace sdml {

enum class Mode { nosplit, crossfit };

struct ModeSpec {
  Mode mode = Mode::nosplit;
  int K = 2;  // crossfit only

  static ModeSpec nosplit() { return {Mode::nosplit, 1}; }
  static ModeSpec crossfit(int folds) { return {Mode::crossfit, folds}; }

  // The "cv" column of summary tables: 1 for no-split, K otherwise.
  int cv() const { return mode == Mode::nosplit ? 1 : K; }
  std::string label() const {
    return mode == Mode::nosplit ? "nosplit" : "crossfit(" + std::to_string(K) + ")";
  }
};

struct EstimateResult {
  Eigen::VectorXd theta_hat;
  Eigen::MatrixXd cov_hat;
  Eigen::VectorXd se;
  Eigen::VectorXd ci_low;
  Eigen::VectorXd ci_high;
  bool degenerate = false;
  double min_singular_value = 0.0;
  ModeSpec mode;
  double level = 0.95;
  Index clipped_propensities = 0;
};

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), p);
}

// Two-sided critical value: level 0.95 -> 1.959964.
inline double critical_value(double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("confidence level must lie in (0, 1)");
  return normal_quantile(0.5 + 0.5 * level);
}

// ---------------------------------------------------------------------------
// Nuisances
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::MatrixXd with_leading_column(double value, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd out(X.rows(), X.cols() + 1);
  out.col(0).setConstant(value);
  out.rightCols(X.cols()) = X;
  return out;
}

inline Eigen::MatrixXd as_matrix(const Eigen::VectorXd& v) { return v; }

// Fits every nuisance the moment needs on `train` and evaluates it on `eval`.
// Each nuisance draws from its own child stream.
inline NuisancePredictions fit_predict(const Dataset& train, const Dataset& eval,
                                       const MomentSpec& spec, const LearnerConfig& cfg,
                                       const Rng& rng) {
  NuisancePredictions out;
  switch (spec.kind) {
    case MomentKind::plr:
    case MomentKind::pliv: {
      out.q = fit_learner(cfg, train.X, as_matrix(train.Y), rng.child("q", 0)).predict(eval.X).col(0);
      out.p = fit_learner(cfg, train.X, train.T, rng.child("p", 0)).predict(eval.X);
      if (spec.kind == MomentKind::pliv) {
        if (!train.W || !eval.W) throw std::invalid_argument("pliv moment needs an instrument W");
        out.r = fit_learner(cfg, train.X, *train.W, rng.child("r", 0)).predict(eval.X);
      }
      break;
    }
    case MomentKind::ate:
    case MomentKind::policy: {
      if (!is_binary_treatment(train))
        throw std::invalid_argument(to_string(spec.kind) +
                                    " moment needs a single binary treatment column with values in {0, 1}");
      Eigen::MatrixXd features(train.n(), train.dx() + 1);
      features.col(0) = train.T.col(0);
      features.rightCols(train.dx()) = train.X;
      const auto outcome = fit_learner(cfg, features, as_matrix(train.Y), rng.child("q", 0));
      out.q0 = outcome.predict(with_leading_column(0.0, eval.X)).col(0);
      out.q1 = outcome.predict(with_leading_column(1.0, eval.X)).col(0);
      out.e = fit_learner(cfg, train.X, train.T, rng.child("e", 0)).predict(eval.X).col(0);
      break;
    }
  }
  return out;
}

inline void scatter_rows(std::optional<Eigen::MatrixXd>& dst, const std::optional<Eigen::MatrixXd>& src,
                         const std::vector<Index>& rows, Index n) {
  if (!src) return;
  if (!dst) dst = Eigen::MatrixXd::Zero(n, src->cols());
  for (std::size_t k = 0; k < rows.size(); ++k) dst->row(rows[k]) = src->row(static_cast<Index>(k));
}

inline void scatter_rows(std::optional<Eigen::VectorXd>& dst, const std::optional<Eigen::VectorXd>& src,
                         const std::vector<Index>& rows, Index n) {
  if (!src) return;
  if (!dst) dst = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < rows.size(); ++k) (*dst)(rows[k]) = (*src)(static_cast<Index>(k));
}

}  // namespace detail

// Nuisances fitted on all n observations and evaluated at the same points.
inline NuisancePredictions fit_nuisances_nosplit(const Dataset& data, const MomentSpec& spec,
                                                 const LearnerConfig& cfg, const Rng& rng) {
  data.validate();
  return detail::fit_predict(data, data, spec, cfg, rng.child("nosplit", 0));
}

// Observation i is predicted by nuisances fitted on the folds other than its
// own. Subsample sizes are resolved against the training-fold size.
inline NuisancePredictions fit_nuisances_crossfit(const Dataset& data, const MomentSpec& spec,
                                                  const LearnerConfig& cfg, int K, const Rng& rng) {
  data.validate();
  Rng fold_rng = rng.child("folds", static_cast<std::uint64_t>(K));
  const FoldAssignment folds = make_folds(data.n(), K, fold_rng);
  NuisancePredictions out;
  const Index n = data.n();
  for (int k = 0; k < K; ++k) {
    const auto eval_rows = folds.members(k);
    const auto train_rows = folds.complement(k);
    const auto preds = detail::fit_predict(data.rows(train_rows), data.rows(eval_rows), spec, cfg,
                                           rng.child("fold", static_cast<std::uint64_t>(k)));
    detail::scatter_rows(out.q, preds.q, eval_rows, n);
    detail::scatter_rows(out.p, preds.p, eval_rows, n);
    detail::scatter_rows(out.r, preds.r, eval_rows, n);
    detail::scatter_rows(out.q0, preds.q0, eval_rows, n);
    detail::scatter_rows(out.q1, preds.q1, eval_rows, n);
    detail::scatter_rows(out.e, preds.e, eval_rows, n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Solve and sandwich
// ---------------------------------------------------------------------------

struct LinearSolve {
  Eigen::VectorXd theta_hat;
  bool degenerate = false;
  double min_singular_value = 0.0;
};

// theta solves A_n theta = -V_n when sigma_min(A_n) > 1e-12 (1 + ||A_n||_op);
// otherwise theta = 0 and the solve is flagged degenerate.
inline LinearSolve solve_linear_moment(const MomentComponents& mc) {
  if (mc.n() < 1) throw std::invalid_argument("solve_linear_moment: no observations");
  const Eigen::MatrixXd A = mc.A_n();
  const Eigen::VectorXd V = mc.V_n();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const auto& sv = svd.singularValues();
  LinearSolve out;
  out.min_singular_value = sv.minCoeff();
  const double op_norm = sv.maxCoeff();
  if (!(out.min_singular_value > 1e-12 * (1.0 + op_norm))) {
    out.theta_hat = Eigen::VectorXd::Zero(mc.p);
    out.degenerate = true;
    return out;
  }
  out.theta_hat = A.fullPivLu().solve(-V);
  return out;
}

struct Sandwich {
  Eigen::MatrixXd cov_hat;
  Eigen::VectorXd se;
  bool degenerate = false;
};

inline Sandwich sandwich_se(const MomentComponents& mc, const Eigen::VectorXd& theta_hat,
                            bool degenerate = false) {
  Sandwich out;
  const Index p = mc.p, n = mc.n();
  if (degenerate) {
    out.cov_hat = Eigen::MatrixXd::Zero(p, p);
    out.se = Eigen::VectorXd::Zero(p);
    out.degenerate = true;
    return out;
  }
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(p, p);
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd mi = mc.moment_at(i, theta_hat);
    sigma += mi * mi.transpose();
  }
  sigma /= static_cast<double>(n);
  const Eigen::MatrixXd Ainv = mc.A_n().inverse();
  out.cov_hat = Ainv * sigma * Ainv.transpose() / static_cast<double>(n);
  out.se = out.cov_hat.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

inline EstimateResult finish_estimate(const MomentComponents& mc, const ModeSpec& mode, double level) {
  const double z = critical_value(level);
  const auto solve = solve_linear_moment(mc);
  const auto sw = sandwich_se(mc, solve.theta_hat, solve.degenerate);
  EstimateResult res;
  res.theta_hat = solve.theta_hat;
  res.cov_hat = sw.cov_hat;
  res.se = sw.se;
  res.ci_low = res.theta_hat - z * res.se;
  res.ci_high = res.theta_hat + z * res.se;
  res.degenerate = solve.degenerate;
  res.min_singular_value = solve.min_singular_value;
  res.mode = mode;
  res.level = level;
  res.clipped_propensities = mc.clipped_propensities;
  return res;
}

inline EstimateResult estimate(const Dataset& data, const MomentSpec& spec, const LearnerConfig& cfg,
                               const ModeSpec& mode, double level, const Rng& rng) {
  const NuisancePredictions preds =
      mode.mode == Mode::nosplit ? fit_nuisances_nosplit(data, spec, cfg, rng)
                                 : fit_nuisances_crossfit(data, spec, cfg, mode.K, rng);
  return finish_estimate(moment_components(data, preds, spec), mode, level);
}

}  // namespace sdml
