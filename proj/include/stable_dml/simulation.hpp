#pragma once

// Partially linear Monte Carlo experiment: data generation, replication
// harness, summary rows and Q-Q data.
//
//   T = coef * X[j] + eta,           eta ~ N(0, 1)
//   Y = theta0 * T + coef * X[j] + eps,  eps ~ N(0, 1)
//
// with a single confounding coordinate j among n_x covariates.

#include "stable_dml/core.hpp"
#include "stable_dml/estimator.hpp"
#include "stable_dml/learners.hpp"
#include "stable_dml/moments.hpp"
#include "stable_dml/parallel.hpp"
#include "stable_dml/stats.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdml {

enum class XDist { std_normal, uniform };

struct DgpConfig {
  double theta0 = 0.5;
  Index n_x = 1;
  Index sparse_index = 0;
  double coef = 1.0;
  XDist x_dist = XDist::std_normal;  // uniform means U(-sqrt 3, sqrt 3)

  void validate() const {
    if (n_x < 1) throw std::invalid_argument("dgp needs n_x >= 1");
    if (sparse_index < 0 || sparse_index >= n_x) throw std::invalid_argument("dgp sparse_index out of range");
    if (!std::isfinite(coef) || !std::isfinite(theta0)) throw std::invalid_argument("dgp coefficients must be finite");
  }

  double p0(const double* x) const { return coef * x[sparse_index]; }
  double f0(const double* x) const { return coef * x[sparse_index]; }
  double q0(const double* x) const { return theta0 * p0(x) + f0(x); }
};

// Draws one observation into x (length n_x), t and y: X row, then eta, then eps.
inline void draw_plr_observation(const DgpConfig& dgp, Rng& rng, double* x, double& t, double& y) {
  const double half_width = std::sqrt(3.0);
  for (Index j = 0; j < dgp.n_x; ++j)
    x[j] = dgp.x_dist == XDist::std_normal ? rng.normal() : rng.uniform(-half_width, half_width);
  const double eta = rng.normal();
  const double eps = rng.normal();
  t = dgp.p0(x) + eta;
  y = dgp.theta0 * t + dgp.f0(x) + eps;
}

inline Dataset generate_plr_data(const DgpConfig& dgp, Index n, Rng rng) {
  dgp.validate();
  if (n < 2) throw std::invalid_argument("generate_plr_data needs n >= 2");
  Dataset data;
  data.X.resize(n, dgp.n_x);
  data.T.resize(n, 1);
  data.Y.resize(n);
  std::vector<double> x(static_cast<std::size_t>(dgp.n_x));
  for (Index i = 0; i < n; ++i) {
    draw_plr_observation(dgp, rng, x.data(), data.T(i, 0), data.Y(i));
    for (Index j = 0; j < dgp.n_x; ++j) data.X(i, j) = x[static_cast<std::size_t>(j)];
  }
  return data;
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

struct SummaryStats {
  double bias = 0.0;     // |mean(theta) - theta0|
  double std = 0.0;      // sample sd, divisor R - 1
  double std_est = 0.0;  // mean(se)
  double cov95 = 0.0;    // share of reps with |theta - theta0| <= z se
  Index reps = 0;
  Index degenerate_reps = 0;
  bool insufficient_reps = false;  // R < 2
};

// Degenerate replications always count as coverage misses.
inline SummaryStats summarize(std::span<const double> theta_hats, std::span<const double> ses, double theta0,
                              double level, std::span<const bool> degenerate = {}) {
  if (theta_hats.empty()) throw std::invalid_argument("summarize: no replications");
  if (ses.size() != theta_hats.size() || (!degenerate.empty() && degenerate.size() != theta_hats.size()))
    throw std::invalid_argument("summarize: length mismatch");
  const double z = critical_value(level);
  SummaryStats s;
  s.reps = static_cast<Index>(theta_hats.size());
  s.bias = std::abs(stats::mean(theta_hats) - theta0);
  s.std = stats::sample_sd(theta_hats);
  s.std_est = stats::mean(ses);
  Index covered = 0;
  for (std::size_t r = 0; r < theta_hats.size(); ++r) {
    const bool degen = !degenerate.empty() && degenerate[r];
    if (degen) ++s.degenerate_reps;
    if (!degen && std::abs(theta_hats[r] - theta0) <= z * ses[r]) ++covered;
  }
  s.cov95 = static_cast<double>(covered) / static_cast<double>(s.reps);
  s.insufficient_reps = s.reps < 2;
  return s;
}

struct QqResult {
  std::vector<double> theoretical;
  std::vector<double> sample;
  bool zero_variance = false;

  // Largest gap once both axes are mapped through the normal CDF.
  double max_probability_gap() const {
    const boost::math::normal_distribution<double> nd(0.0, 1.0);
    double gap = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i)
      gap = std::max(gap, std::abs(boost::math::cdf(nd, sample[i]) - boost::math::cdf(nd, theoretical[i])));
    return gap;
  }
  double max_quantile_gap() const {
    double gap = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) gap = std::max(gap, std::abs(sample[i] - theoretical[i]));
    return gap;
  }
};

// Standardized sorted values against normal quantiles at (i - 0.5) / R.
inline QqResult qq_points(std::span<const double> theta_hats) {
  if (theta_hats.size() < 10) throw std::invalid_argument("qq_points needs at least 10 values");
  QqResult out;
  const double mu = stats::mean(theta_hats);
  const double sd = stats::sample_sd(theta_hats);
  if (!(sd > 0.0)) {
    out.zero_variance = true;
    return out;
  }
  std::vector<double> z(theta_hats.begin(), theta_hats.end());
  for (double& v : z) v = (v - mu) / sd;
  std::sort(z.begin(), z.end());
  const auto R = static_cast<double>(z.size());
  out.sample = std::move(z);
  out.theoretical.resize(out.sample.size());
  for (std::size_t i = 0; i < out.sample.size(); ++i)
    out.theoretical[i] = normal_quantile((static_cast<double>(i) + 0.5) / R);
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

struct McConfig {
  std::string config_id = "custom";
  DgpConfig dgp;
  Index n = 100;
  LearnerConfig learner;
  std::vector<ModeSpec> modes{ModeSpec::nosplit(), ModeSpec::crossfit(2)};
  Index reps = 100;
  double level = 0.95;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct RepEstimate {
  Index rep = 0;
  int cv = 1;
  double theta_hat = 0.0;
  double se = 0.0;
  bool degenerate = false;
};

struct SummaryRow {
  std::string config;
  Index n = 0;
  Index n_x = 0;
  std::string learner;
  std::string m_rule;
  int cv = 1;
  SummaryStats stats;
  std::uint64_t seed = 0;
};

struct McResult {
  std::vector<SummaryRow> rows;  // one per mode, in the configured order
  std::vector<RepEstimate> raw;  // rep-major, modes in configured order
};

// Rep r draws its dataset from the stream (n, n_x, rep r) under the master seed,
// independent of learner and mode, so every mode sees the same data.
inline Rng replication_rng(std::uint64_t master, Index n, Index n_x, Index rep) {
  return Rng(master)
      .child("n", static_cast<std::uint64_t>(n))
      .child("nx", static_cast<std::uint64_t>(n_x))
      .child("rep", static_cast<std::uint64_t>(rep));
}

inline Dataset replication_dataset(const McConfig& mc, Index rep) {
  return generate_plr_data(mc.dgp, mc.n, replication_rng(mc.seed, mc.n, mc.dgp.n_x, rep).child("data", 0));
}

inline McResult run_monte_carlo(const McConfig& mc) {
  if (mc.reps < 1) throw std::invalid_argument("monte carlo needs reps >= 1");
  if (mc.modes.empty()) throw std::invalid_argument("monte carlo needs at least one mode");
  mc.dgp.validate();
  const std::size_t n_modes = mc.modes.size();
  std::vector<RepEstimate> raw(static_cast<std::size_t>(mc.reps) * n_modes);
  const MomentSpec spec{MomentKind::plr, {}, 0.01};

  parallel_for(static_cast<std::size_t>(mc.reps), resolve_threads(mc.threads), [&](std::size_t r) {
    const auto rep = static_cast<Index>(r);
    const Rng rep_rng = replication_rng(mc.seed, mc.n, mc.dgp.n_x, rep);
    const Dataset data = generate_plr_data(mc.dgp, mc.n, rep_rng.child("data", 0));
    for (std::size_t k = 0; k < n_modes; ++k) {
      const ModeSpec& mode = mc.modes[k];
      const auto res = estimate(data, spec, mc.learner, mode, mc.level,
                                rep_rng.child("estimate", static_cast<std::uint64_t>(mode.cv())));
      raw[r * n_modes + k] = RepEstimate{rep, mode.cv(), res.theta_hat(0), res.se(0), res.degenerate};
    }
  });

  McResult out;
  for (std::size_t k = 0; k < n_modes; ++k) {
    std::vector<double> th, se;
    const auto flags = std::make_unique<bool[]>(static_cast<std::size_t>(mc.reps));
    for (Index r = 0; r < mc.reps; ++r) {
      const auto& e = raw[static_cast<std::size_t>(r) * n_modes + k];
      th.push_back(e.theta_hat);
      se.push_back(e.se);
      flags[static_cast<std::size_t>(r)] = e.degenerate;
    }
    SummaryRow row;
    row.config = mc.config_id;
    row.n = mc.n;
    row.n_x = mc.dgp.n_x;
    row.learner = to_string(mc.learner.base);
    row.m_rule = mc.learner.m_rule.label();
    row.cv = mc.modes[k].cv();
    row.stats = summarize(th, se, mc.dgp.theta0, mc.level, std::span<const bool>(flags.get(), th.size()));
    row.seed = mc.seed;
    out.rows.push_back(std::move(row));
  }
  out.raw = std::move(raw);
  return out;
}

}  // namespace sdml
