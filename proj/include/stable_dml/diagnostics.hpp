#pragma once

// Empirical stability and equicontinuity diagnostics, the (B, m) regime
// advisory, the 1-NN misclassification counterexample, and a bagged 1-NN
// RMSE rate experiment.

#include "stable_dml/core.hpp"
#include "stable_dml/learners.hpp"
#include "stable_dml/moments.hpp"
#include "stable_dml/parallel.hpp"
#include "stable_dml/simulation.hpp"
#include "stable_dml/stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdml {

// ---------------------------------------------------------------------------
// Leave-one-out stability
// ---------------------------------------------------------------------------

enum class Coupling { coupled, resampled };

struct StabilityOptions {
  Index probes = -1;        // -1: min(n, 20)
  Index replications = 20;  // R_mc
  Index eval_points = 200;  // fresh X draws approximating sup_x
  double r = 1.0;           // sup norm reported in L^{2r}
  Coupling coupling = Coupling::coupled;
  unsigned threads = 1;
};

struct StabilityReport {
  Index n = 0, m = 0, B = 0;
  Index probes = 0, replications = 0;
  double est_a_train_L1 = 0.0;  // max_l E|a(Z_l, g) - a(Z_l, g^(-l))|
  double est_a_fresh_L2 = 0.0;  // max_l sqrt E[(a(Z, g) - a(Z, g^(-l)))^2]
  double est_nu_train_L1 = 0.0;
  double est_nu_fresh_L2 = 0.0;
  double est_sup_loo = 0.0;     // max_l || sup_x |g(x) - g^(-l)(x)|_2 ||_{2r}
  double est_sup_loo_q = 0.0;   // same, outcome nuisance alone
  double est_sup_loo_p = 0.0;   // same, treatment nuisance alone
};

namespace detail {

// g'(x) - g(x) at each query row. With coupled bags only the bags whose model
// changed contribute; otherwise the replacement is evaluated in full.
inline Eigen::MatrixXd ensemble_shift(const BaggedEnsemble& g, const BaggedEnsemble& g_alt,
                                      const Eigen::MatrixXd& g_at_queries, const Eigen::MatrixXd& queries,
                                      bool coupled) {
  if (!coupled) return g_alt.predict(queries) - g_at_queries;
  Eigen::MatrixXd shift = Eigen::MatrixXd::Zero(queries.rows(), g.outputs());
  Eigen::VectorXd a(g.outputs()), b(g.outputs());
  Eigen::VectorXd x(queries.cols());
  for (Index k = 0; k < g.B(); ++k) {
    const auto& old_model = *g.bags()[static_cast<std::size_t>(k)].model;
    const auto& new_model = *g_alt.bags()[static_cast<std::size_t>(k)].model;
    if (&old_model == &new_model) continue;
    for (Index q = 0; q < queries.rows(); ++q) {
      x = queries.row(q).transpose();
      old_model.predict(x.data(), a.data());
      new_model.predict(x.data(), b.data());
      shift.row(q) += (b - a).transpose();
    }
  }
  return shift / static_cast<double>(g.B());
}

}  // namespace detail

// Replace-one stability of the partially linear nuisances (q: Y on X, p: T on X)
// on datasets from `dgp`. Each replication draws a dataset and fits g once;
// each probed row l is then replaced by a fresh draw and g^(-l) refitted.
inline StabilityReport loo_stability(const DgpConfig& dgp, Index n, const LearnerConfig& cfg,
                                     MomentKind moment, const StabilityOptions& opt, const Rng& rng) {
  if (moment != MomentKind::plr) throw std::invalid_argument("loo_stability supports the plr moment");
  if (n < 2) throw std::invalid_argument("loo_stability needs n >= 2");
  const Index L = opt.probes < 0 ? std::min<Index>(n, 20) : opt.probes;
  if (L < 1 || L > n) throw std::invalid_argument("loo_stability needs 1 <= probes <= n");
  if (opt.replications < 1) throw std::invalid_argument("loo_stability needs replications >= 1");
  if (opt.eval_points < 2) throw std::invalid_argument("loo_stability needs eval_points >= 2");
  if (!(opt.r >= 1.0)) throw std::invalid_argument("loo_stability needs r >= 1");
  dgp.validate();

  Rng probe_rng = rng.child("probes", 0);
  const auto probes = subsample_without_replacement(n, L, probe_rng);
  const bool coupled = opt.coupling == Coupling::coupled;
  const double power = 2.0 * opt.r;

  // Per (replication, probe) statistics.
  struct Cell {
    double a_train = 0, nu_train = 0, a_fresh_sq = 0, nu_fresh_sq = 0, sup = 0, sup_q = 0, sup_p = 0;
  };
  const auto R = opt.replications;
  std::vector<Cell> cells(static_cast<std::size_t>(R * L));
  Index resolved_m = 0, resolved_B = 0;

  parallel_for(static_cast<std::size_t>(R), resolve_threads(opt.threads), [&](std::size_t rr) {
    const Rng rep_rng = rng.child("rep", rr);
    const Dataset data = generate_plr_data(dgp, n, rep_rng.child("data", 0));
    const Dataset fresh = generate_plr_data(dgp, opt.eval_points, rep_rng.child("fresh", 0));
    const Eigen::MatrixXd Yq = data.Y;
    const auto q_hat = fit_learner(cfg, data.X, Yq, rep_rng.child("q", 0));
    const auto p_hat = fit_learner(cfg, data.X, data.T, rep_rng.child("p", 0));
    if (rr == 0) {
      resolved_m = q_hat.m();
      resolved_B = q_hat.B();
    }
    const Eigen::MatrixXd q_fresh = q_hat.predict(fresh.X);
    const Eigen::MatrixXd p_fresh = p_hat.predict(fresh.X);

    std::vector<double> x_new(static_cast<std::size_t>(dgp.n_x));
    for (Index k = 0; k < L; ++k) {
      const Index l = probes[static_cast<std::size_t>(k)];
      Rng replace_rng = rep_rng.child("replace", static_cast<std::uint64_t>(k));
      double t_new = 0, y_new = 0;
      draw_plr_observation(dgp, replace_rng, x_new.data(), t_new, y_new);

      Eigen::MatrixXd X_alt = data.X;
      Eigen::MatrixXd T_alt = data.T;
      Eigen::MatrixXd Y_alt = Yq;
      for (Index j = 0; j < dgp.n_x; ++j) X_alt(l, j) = x_new[static_cast<std::size_t>(j)];
      T_alt(l, 0) = t_new;
      Y_alt(l, 0) = y_new;

      BaggedEnsemble q_alt, p_alt;
      if (coupled) {
        q_alt = q_hat.with_row_replaced(X_alt, Y_alt, l);
        p_alt = p_hat.with_row_replaced(X_alt, T_alt, l);
      } else {
        q_alt = fit_learner(cfg, X_alt, Y_alt, rep_rng.child("q_resampled", static_cast<std::uint64_t>(k)));
        p_alt = fit_learner(cfg, X_alt, T_alt, rep_rng.child("p_resampled", static_cast<std::uint64_t>(k)));
      }

      // Queries: fresh points, then the original and the replacement row.
      Eigen::MatrixXd queries(fresh.n() + 2, dgp.n_x);
      queries.topRows(fresh.n()) = fresh.X;
      queries.row(fresh.n()) = data.X.row(l);
      for (Index j = 0; j < dgp.n_x; ++j) queries(fresh.n() + 1, j) = x_new[static_cast<std::size_t>(j)];
      Eigen::MatrixXd q_base(queries.rows(), 1), p_base(queries.rows(), 1);
      q_base.topRows(fresh.n()) = q_fresh;
      p_base.topRows(fresh.n()) = p_fresh;
      q_base.bottomRows(2) = q_hat.predict(Eigen::MatrixXd(queries.bottomRows(2)));
      p_base.bottomRows(2) = p_hat.predict(Eigen::MatrixXd(queries.bottomRows(2)));
      const Eigen::MatrixXd dq = detail::ensemble_shift(q_hat, q_alt, q_base, queries, coupled);
      const Eigen::MatrixXd dp = detail::ensemble_shift(p_hat, p_alt, p_base, queries, coupled);

      Cell& c = cells[rr * static_cast<std::size_t>(L) + static_cast<std::size_t>(k)];
      auto moments_at = [](double t, double y, double q, double p) {
        const double eta = t - p;
        return std::pair{-eta * eta, (y - q) * eta};
      };
      // Train point Z_l, both fits evaluated at the original observation.
      {
        const Index row = fresh.n();
        const auto [a0, nu0] = moments_at(data.T(l, 0), data.Y(l), q_base(row, 0), p_base(row, 0));
        const auto [a1, nu1] =
            moments_at(data.T(l, 0), data.Y(l), q_base(row, 0) + dq(row, 0), p_base(row, 0) + dp(row, 0));
        c.a_train = std::abs(a0 - a1);
        c.nu_train = std::abs(nu0 - nu1);
      }
      double a_sq = 0, nu_sq = 0;
      for (Index z = 0; z < fresh.n(); ++z) {
        const auto [a0, nu0] = moments_at(fresh.T(z, 0), fresh.Y(z), q_base(z, 0), p_base(z, 0));
        const auto [a1, nu1] =
            moments_at(fresh.T(z, 0), fresh.Y(z), q_base(z, 0) + dq(z, 0), p_base(z, 0) + dp(z, 0));
        a_sq += (a0 - a1) * (a0 - a1);
        nu_sq += (nu0 - nu1) * (nu0 - nu1);
      }
      c.a_fresh_sq = a_sq / static_cast<double>(fresh.n());
      c.nu_fresh_sq = nu_sq / static_cast<double>(fresh.n());
      double sup = 0, sup_q = 0, sup_p = 0;
      for (Index z = 0; z < queries.rows(); ++z) {
        sup = std::max(sup, std::hypot(dq(z, 0), dp(z, 0)));
        sup_q = std::max(sup_q, std::abs(dq(z, 0)));
        sup_p = std::max(sup_p, std::abs(dp(z, 0)));
      }
      c.sup = std::pow(sup, power);
      c.sup_q = std::pow(sup_q, power);
      c.sup_p = std::pow(sup_p, power);
    }
  });

  StabilityReport rep;
  rep.n = n;
  rep.m = resolved_m;
  rep.B = resolved_B;
  rep.probes = L;
  rep.replications = R;
  const auto Rd = static_cast<double>(R);
  for (Index k = 0; k < L; ++k) {
    Cell sum;
    for (Index rr = 0; rr < R; ++rr) {
      const Cell& c = cells[static_cast<std::size_t>(rr * L + k)];
      sum.a_train += c.a_train;
      sum.nu_train += c.nu_train;
      sum.a_fresh_sq += c.a_fresh_sq;
      sum.nu_fresh_sq += c.nu_fresh_sq;
      sum.sup += c.sup;
      sum.sup_q += c.sup_q;
      sum.sup_p += c.sup_p;
    }
    rep.est_a_train_L1 = std::max(rep.est_a_train_L1, sum.a_train / Rd);
    rep.est_nu_train_L1 = std::max(rep.est_nu_train_L1, sum.nu_train / Rd);
    rep.est_a_fresh_L2 = std::max(rep.est_a_fresh_L2, std::sqrt(sum.a_fresh_sq / Rd));
    rep.est_nu_fresh_L2 = std::max(rep.est_nu_fresh_L2, std::sqrt(sum.nu_fresh_sq / Rd));
    rep.est_sup_loo = std::max(rep.est_sup_loo, std::pow(sum.sup / Rd, 1.0 / power));
    rep.est_sup_loo_q = std::max(rep.est_sup_loo_q, std::pow(sum.sup_q / Rd, 1.0 / power));
    rep.est_sup_loo_p = std::max(rep.est_sup_loo_p, std::pow(sum.sup_p / Rd, 1.0 / power));
  }
  return rep;
}

struct RateScan {
  std::vector<StabilityReport> reports;
  std::optional<stats::LinearFit> fit;  // empty when some estimate is zero
  bool applicable() const { return fit.has_value(); }
};

// OLS slope of log(est_sup_loo) against log(n).
inline RateScan stability_rate_scan(const std::vector<Index>& ns, const DgpConfig& dgp, const LearnerConfig& cfg,
                                    const StabilityOptions& opt, const Rng& rng) {
  if (ns.size() < 3) throw std::invalid_argument("stability_rate_scan needs at least 3 sample sizes");
  for (std::size_t i = 1; i < ns.size(); ++i)
    if (ns[i] <= ns[i - 1]) throw std::invalid_argument("stability_rate_scan needs increasing sample sizes");
  RateScan scan;
  std::vector<double> lx, ly;
  bool positive = true;
  for (Index n : ns) {
    scan.reports.push_back(loo_stability(dgp, n, cfg, MomentKind::plr, opt,
                                         rng.child("n", static_cast<std::uint64_t>(n))));
    const double v = scan.reports.back().est_sup_loo;
    if (!(v > 0.0)) positive = false;
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(v > 0.0 ? std::log(v) : 0.0);
  }
  if (positive) scan.fit = stats::ols_line(lx, ly);
  return scan;
}

// ---------------------------------------------------------------------------
// Stochastic equicontinuity
// ---------------------------------------------------------------------------

struct EquicontinuityStat {
  double stat_A = 0.0;  // sqrt(n) |A(g) - A(g0) - (A_n(g) - A_n(g0))|
  double stat_V = 0.0;  // same for V
};

// Population terms use M_pop fresh draws shared by g and g0. With
// plug_truth the fitted nuisances are replaced by the true ones.
inline EquicontinuityStat equicontinuity_stat(const DgpConfig& dgp, Index n, const LearnerConfig& cfg,
                                              MomentKind moment, Index M_pop, const Rng& rng,
                                              bool plug_truth = false) {
  if (moment != MomentKind::plr) throw std::invalid_argument("equicontinuity_stat supports the plr moment");
  if (M_pop < 0) M_pop = std::max<Index>(100000, 100 * n);
  if (M_pop < 2) throw std::invalid_argument("equicontinuity_stat needs M_pop >= 2");
  const Dataset data = generate_plr_data(dgp, n, rng.child("data", 0));
  const Dataset pop = generate_plr_data(dgp, M_pop, rng.child("population", 0));

  auto truth = [&](const Dataset& d) {
    Eigen::VectorXd q(d.n()), p(d.n());
    for (Index i = 0; i < d.n(); ++i) {
      const Eigen::VectorXd x = d.X.row(i).transpose();
      q(i) = dgp.q0(x.data());
      p(i) = dgp.p0(x.data());
    }
    return std::pair{q, p};
  };
  auto means = [](const Dataset& d, const Eigen::VectorXd& q, const Eigen::VectorXd& p) {
    double A = 0, V = 0;
    for (Index i = 0; i < d.n(); ++i) {
      const double eta = d.T(i, 0) - p(i);
      A += -eta * eta;
      V += (d.Y(i) - q(i)) * eta;
    }
    return std::pair{A / static_cast<double>(d.n()), V / static_cast<double>(d.n())};
  };

  const auto [q0_s, p0_s] = truth(data);
  const auto [q0_p, p0_p] = truth(pop);
  Eigen::VectorXd qh_s = q0_s, ph_s = p0_s, qh_p = q0_p, ph_p = p0_p;
  if (!plug_truth) {
    const Eigen::MatrixXd Yq = data.Y;
    const auto q_hat = fit_learner(cfg, data.X, Yq, rng.child("q", 0));
    const auto p_hat = fit_learner(cfg, data.X, data.T, rng.child("p", 0));
    qh_s = q_hat.predict(data.X).col(0);
    ph_s = p_hat.predict(data.X).col(0);
    qh_p = q_hat.predict(pop.X).col(0);
    ph_p = p_hat.predict(pop.X).col(0);
  }
  const auto [An_hat, Vn_hat] = means(data, qh_s, ph_s);
  const auto [An_0, Vn_0] = means(data, q0_s, p0_s);
  const auto [A_hat, V_hat] = means(pop, qh_p, ph_p);
  const auto [A_0, V_0] = means(pop, q0_p, p0_p);
  const double root_n = std::sqrt(static_cast<double>(n));
  EquicontinuityStat out;
  out.stat_A = plug_truth ? 0.0 : root_n * std::abs((A_hat - A_0) - (An_hat - An_0));
  out.stat_V = plug_truth ? 0.0 : root_n * std::abs((V_hat - V_0) - (Vn_hat - Vn_0));
  return out;
}

// ---------------------------------------------------------------------------
// Regime advisory
// ---------------------------------------------------------------------------

enum class RegimeTheorem { subsample_moments, relaxed };  // k-moment and 2r-moment conditions
enum class RegimeVerdict { stable, marginal, unstable };

inline std::string to_string(RegimeVerdict v) {
  switch (v) {
    case RegimeVerdict::stable: return "stable";
    case RegimeVerdict::marginal: return "marginal";
    case RegimeVerdict::unstable: return "unstable";
  }
  return "?";
}

struct RegimeReport {
  RegimeVerdict verdict = RegimeVerdict::unstable;
  double m_stable_bound = 0.0;    // n^0.49
  double m_marginal_bound = 0.0;  // n^0.5
  double required_B = 0.0;
  std::string explanation;
};

// Finite-n reading of asymptotic (B, m) conditions; advisory only.
//   stable:   m <= n^0.49 and B >= m^{2/k} n^{1-2/k}          (k-moment form)
//             m <= n^0.49 and B >= m^{1/(2r-1)} n^{(r-1)/(2r-1)} (relaxed form)
//   marginal: n^0.49 < m <= n^0.5
//   unstable: anything else
inline RegimeReport regime_check(Index n, Index m, Index B, double k, RegimeTheorem theorem, double r = 1.5) {
  if (n < 1 || m < 1 || m > n || B < 1) throw std::invalid_argument("regime_check needs 1 <= m <= n and B >= 1");
  if (theorem == RegimeTheorem::subsample_moments && !(k >= 2.0))
    throw std::invalid_argument("regime_check needs moment order k >= 2");
  if (theorem == RegimeTheorem::relaxed && !(r > 1.0)) throw std::invalid_argument("regime_check needs r > 1");
  const auto nd = static_cast<double>(n), md = static_cast<double>(m);
  RegimeReport rep;
  rep.m_stable_bound = std::pow(nd, 0.49);
  rep.m_marginal_bound = std::sqrt(nd);
  rep.required_B = theorem == RegimeTheorem::subsample_moments
                       ? std::pow(md, 2.0 / k) * std::pow(nd, 1.0 - 2.0 / k)
                       : std::pow(md, 1.0 / (2.0 * r - 1.0)) * std::pow(nd, (r - 1.0) / (2.0 * r - 1.0));
  const bool m_ok = md <= rep.m_stable_bound;
  const bool b_ok = static_cast<double>(B) >= rep.required_B;
  char buf[256];
  if (m_ok && b_ok) {
    rep.verdict = RegimeVerdict::stable;
    std::snprintf(buf, sizeof buf, "m=%lld <= n^0.49=%.3f and B=%lld >= %.3f",
                  static_cast<long long>(m), rep.m_stable_bound, static_cast<long long>(B), rep.required_B);
  } else if (md > rep.m_stable_bound && md <= rep.m_marginal_bound) {
    rep.verdict = RegimeVerdict::marginal;
    std::snprintf(buf, sizeof buf, "n^0.49=%.3f < m=%lld <= n^0.5=%.3f", rep.m_stable_bound,
                  static_cast<long long>(m), rep.m_marginal_bound);
  } else if (m_ok) {
    rep.verdict = RegimeVerdict::unstable;
    std::snprintf(buf, sizeof buf, "m=%lld <= n^0.49=%.3f but B=%lld < %.3f", static_cast<long long>(m),
                  rep.m_stable_bound, static_cast<long long>(B), rep.required_B);
  } else {
    rep.verdict = RegimeVerdict::unstable;
    std::snprintf(buf, sizeof buf, "m=%lld > n^0.5=%.3f", static_cast<long long>(m), rep.m_marginal_bound);
  }
  rep.explanation = buf;
  return rep;
}

// ---------------------------------------------------------------------------
// Counterexample: scaled 1-NN misclassification indicator
// ---------------------------------------------------------------------------
//
// X_i ~ U[0, 1], Y_i = 1{X_i <= 1/2}; g(x, y) = n^{1/6} 1{y != Y_nn(x)} and
// nu(Z, g) = g(Z)^3. The 1-NN rule errs exactly between 1/2 and the midpoint
// M of the closest training points on either side of 1/2, so all population
// quantities follow from M.

struct CounterexampleReport {
  Index n = 0;
  Index replications = 0;
  std::vector<double> lambda_samples;    // (n/2) |1 - (X_c1 + X_c2)|
  std::vector<double> equicont_samples;  // sqrt(n) |V(g) - V(g0) - (V_n(g) - V_n(g0))|
  double nu_loo_l2 = 0.0;                // || nu(Z, g) - nu(Z, g^(-1)) ||_2
  double max_training_nu = 0.0;          // largest nu(Z_i, g) over training points

  double mean_lambda() const { return stats::mean(lambda_samples); }
};

namespace detail {

// Closest training values at or below 1/2 (two largest) and above 1/2 (two
// smallest), with their indices; -1 marks "absent".
struct HalfNeighbours {
  double below[2] = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  double above[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  Index below_idx[2] = {-1, -1};
  Index above_idx[2] = {-1, -1};

  void add(double x, Index i) {
    if (x <= 0.5) {
      if (x > below[0]) {
        below[1] = below[0], below_idx[1] = below_idx[0];
        below[0] = x, below_idx[0] = i;
      } else if (x > below[1]) {
        below[1] = x, below_idx[1] = i;
      }
    } else {
      if (x < above[0]) {
        above[1] = above[0], above_idx[1] = above_idx[0];
        above[0] = x, above_idx[0] = i;
      } else if (x < above[1]) {
        above[1] = x, above_idx[1] = i;
      }
    }
  }
};

// Endpoint of the error interval [1/2, M] (or [M, 1/2]), clipped to [0, 1].
inline double error_endpoint(double below, double above) {
  if (std::isinf(below) && std::isinf(above)) return 0.5;
  return std::clamp(0.5 * (below + above), 0.0, 1.0);
}

// Integral over [0, len] of |f| for f linear from f0 to f1.
inline double integral_abs_linear(double f0, double f1, double len) {
  if (len <= 0.0) return 0.0;
  if ((f0 >= 0.0 && f1 >= 0.0) || (f0 <= 0.0 && f1 <= 0.0)) return len * std::abs(f0 + f1) / 2.0;
  return len * (f0 * f0 + f1 * f1) / (2.0 * (std::abs(f0) + std::abs(f1)));
}

// E over x ~ U[0, 1] of |M0 - M(others + {x})|, where the remaining training
// set has closest values `lo` (<= 1/2) and `hi` (> 1/2).
inline double expected_endpoint_shift(double M0, double lo, double hi) {
  if (std::isinf(lo) || std::isinf(hi)) {
    // Only reachable when one side of 1/2 is empty; midpoint rule suffices.
    constexpr int kGrid = 20000;
    double acc = 0.0;
    for (int g = 0; g < kGrid; ++g) {
      const double x = (g + 0.5) / kGrid;
      const double b = x <= 0.5 ? std::max(lo, x) : lo;
      const double a = x > 0.5 ? std::min(hi, x) : hi;
      acc += std::abs(M0 - error_endpoint(b, a));
    }
    return acc / kGrid;
  }
  const double Ml = 0.5 * (lo + hi);
  double total = (lo + (1.0 - hi)) * std::abs(M0 - Ml);
  // x in (lo, 1/2]: M = (x + hi) / 2; x in (1/2, hi): M = (lo + x) / 2.
  total += integral_abs_linear(M0 - 0.5 * (lo + hi), M0 - 0.5 * (0.5 + hi), 0.5 - lo);
  total += integral_abs_linear(M0 - 0.5 * (lo + 0.5), M0 - 0.5 * (lo + hi), hi - 0.5);
  return total;
}

}  // namespace detail

// Per replication: lambda, the equicontinuity draw (computed from V(g) and the
// training-point average V_n(g)), and the exact expectation over the
// replacement X~ and fresh Z of (nu(Z, g) - nu(Z, g^(-l)))^2, averaged over l.
// By exchangeability the l-average has the same mean as l = 1.
inline CounterexampleReport counterexample_run(Index n, Index R, const Rng& rng, unsigned threads = 1) {
  if (n < 4) throw std::invalid_argument("counterexample needs n >= 4");
  if (R < 1) throw std::invalid_argument("counterexample needs R >= 1");
  CounterexampleReport rep;
  rep.n = n;
  rep.replications = R;
  rep.lambda_samples.resize(static_cast<std::size_t>(R));
  rep.equicont_samples.resize(static_cast<std::size_t>(R));
  std::vector<double> sq_shift(static_cast<std::size_t>(R));
  std::vector<double> train_nu(static_cast<std::size_t>(R));
  const auto nd = static_cast<double>(n);
  const double scale = std::pow(nd, 1.0 / 6.0);

  parallel_for(static_cast<std::size_t>(R), resolve_threads(threads), [&](std::size_t r) {
    Rng rr = rng.child("rep", r);
    Eigen::MatrixXd X(n, 1), Y(n, 1);
    detail::HalfNeighbours nb;
    for (Index i = 0; i < n; ++i) {
      X(i, 0) = rr.uniform();
      Y(i, 0) = X(i, 0) <= 0.5 ? 1.0 : 0.0;
      nb.add(X(i, 0), i);
    }
    const double M0 = detail::error_endpoint(nb.below[0], nb.above[0]);
    // (n/2)|1 - (X_c1 + X_c2)|; with one side of 1/2 empty the interval runs to the boundary.
    rep.lambda_samples[r] = nd * std::abs(M0 - 0.5);

    // V_n(g): nu at the training points through an actual 1-NN fit.
    const auto nn = OneNNModel::fit(X, Y);
    double vn = 0.0, max_nu = 0.0;
    for (Index i = 0; i < n; ++i) {
      double pred = 0.0;
      nn.predict(&X(i, 0), &pred);
      const double g = scale * (Y(i, 0) != pred ? 1.0 : 0.0);
      vn += g * g * g;
      max_nu = std::max(max_nu, g * g * g);
    }
    vn /= nd;
    train_nu[r] = max_nu;
    const double V_hat = std::sqrt(nd) * std::abs(M0 - 0.5);  // E[g(Z)^3] = n^{1/2} |E|
    rep.equicont_samples[r] = std::sqrt(nd) * std::abs(V_hat - vn);

    // Only the closest point on either side changes the others' neighbours.
    auto shift_without = [&](Index l) {
      double lo = nb.below[0], hi = nb.above[0];
      if (l == nb.below_idx[0]) lo = nb.below[1];
      if (l == nb.above_idx[0]) hi = nb.above[1];
      return detail::expected_endpoint_shift(M0, lo, hi);
    };
    double acc = 0.0;
    Index special = 0;
    for (Index l : {nb.below_idx[0], nb.above_idx[0]}) {
      if (l < 0) continue;
      acc += shift_without(l);
      ++special;
    }
    const Index ordinary = n - special;
    if (ordinary > 0) {
      const Index probe = [&] {
        for (Index i = 0; i < n; ++i)
          if (i != nb.below_idx[0] && i != nb.above_idx[0]) return i;
        return Index{0};
      }();
      acc += static_cast<double>(ordinary) * shift_without(probe);
    }
    // |E triangle E'| = |M - M'| and nu differs by n^{1/2} there: E sq = n E|M - M'|.
    sq_shift[r] = nd * (acc / nd);
  });

  rep.nu_loo_l2 = std::sqrt(stats::mean(sq_shift));
  rep.max_training_nu = *std::max_element(train_nu.begin(), train_nu.end());
  return rep;
}

// Frequency with which replacing observation 0 by a fresh draw changes the
// index of the training point closest to 1/2.
inline double counterexample_nearest_change_frequency(Index n, Index R, const Rng& rng) {
  if (n < 2 || R < 1) throw std::invalid_argument("need n >= 2 and R >= 1");
  Index changed = 0;
  for (Index r = 0; r < R; ++r) {
    Rng rr = rng.child("rep", static_cast<std::uint64_t>(r));
    Index best = -1, best_alt = -1;
    double d = std::numeric_limits<double>::infinity(), d_alt = d;
    for (Index i = 0; i < n; ++i) {
      const double x = rr.uniform();
      const double dist = std::abs(x - 0.5);
      if (dist < d) d = dist, best = i;
      if (i > 0 && dist < d_alt) d_alt = dist, best_alt = i;
    }
    const double x_new = rr.uniform();
    if (std::abs(x_new - 0.5) < d_alt) best_alt = 0;
    if (best_alt != best) ++changed;
  }
  return static_cast<double>(changed) / static_cast<double>(R);
}

// Kolmogorov-Smirnov distance between the empirical CDF and 1 - exp(-2 t).
inline double exp_rate2_ks(std::vector<double> samples) {
  if (samples.size() < 100) throw std::invalid_argument("exp_rate2_ks needs at least 100 samples");
  std::sort(samples.begin(), samples.end());
  const auto N = static_cast<double>(samples.size());
  double D = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = samples[i] <= 0.0 ? 0.0 : 1.0 - std::exp(-2.0 * samples[i]);
    D = std::max({D, (static_cast<double>(i) + 1.0) / N - F, F - static_cast<double>(i) / N});
  }
  return D;
}

// ---------------------------------------------------------------------------
// Bagged 1-NN RMSE rate on a one-dimensional Lipschitz regression
// ---------------------------------------------------------------------------

struct RmsePoint {
  Index n = 0, m = 0, B = 0;
  double rmse = 0.0;
};

struct RmseScan {
  std::vector<RmsePoint> points;
  stats::LinearFit fit;  // log rmse against log n
};

// X ~ U[0, 1], g0(x) = sin(2 pi x), Y = g0(X) + U(-1/2, 1/2).
inline double lipschitz_truth(double x) { return std::sin(6.283185307179586 * x); }

inline RmseScan bagged_nn_rmse_scan(const std::vector<Index>& ns, double alpha, Index reps, Index test_points,
                                    const Rng& rng, unsigned threads = 1) {
  if (ns.size() < 2 || reps < 1 || test_points < 1) throw std::invalid_argument("invalid rmse scan");
  RmseScan scan;
  std::vector<double> lx, ly;
  LearnerConfig cfg;
  cfg.base = BaseKind::one_nn;
  cfg.m_rule = MRule::power(alpha);
  for (Index n : ns) {
    std::vector<double> mse(static_cast<std::size_t>(reps));
    RmsePoint pt;
    pt.n = n;
    pt.m = cfg.m_rule.resolve(n);
    pt.B = cfg.b_rule.resolve(n, pt.m);
    const Rng n_rng = rng.child("n", static_cast<std::uint64_t>(n));
    parallel_for(static_cast<std::size_t>(reps), resolve_threads(threads), [&](std::size_t r) {
      Rng rr = n_rng.child("rep", r);
      Eigen::MatrixXd X(n, 1), Y(n, 1);
      for (Index i = 0; i < n; ++i) {
        X(i, 0) = rr.uniform();
        Y(i, 0) = lipschitz_truth(X(i, 0)) + rr.uniform(-0.5, 0.5);
      }
      const auto g = fit_learner(cfg, X, Y, rr.child("fit", 0));
      Eigen::MatrixXd Xt(test_points, 1);
      for (Index i = 0; i < test_points; ++i) Xt(i, 0) = rr.uniform();
      const Eigen::MatrixXd pred = g.predict(Xt);
      double acc = 0.0;
      for (Index i = 0; i < test_points; ++i) {
        const double e = pred(i, 0) - lipschitz_truth(Xt(i, 0));
        acc += e * e;
      }
      mse[r] = acc / static_cast<double>(test_points);
    });
    pt.rmse = std::sqrt(stats::mean(mse));
    scan.points.push_back(pt);
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(pt.rmse));
  }
  scan.fit = stats::ols_line(lx, ly);
  return scan;
}

}  // namespace sdml
