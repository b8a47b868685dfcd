#pragma once

// Linear moment pieces m(Z; theta, g) = a(Z; g) theta + nu(Z; g) for the
// partially linear model, partially linear IV, and average linear functionals
// (ATE and policy value).

#include "stable_dml/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

namespace sdml {

enum class MomentKind { plr, pliv, ate, policy };

inline std::string to_string(MomentKind k) {
  switch (k) {
    case MomentKind::plr: return "plr";
    case MomentKind::pliv: return "pliv";
    case MomentKind::ate: return "ate";
    case MomentKind::policy: return "policy";
  }
  return "?";
}

// Binary treatment policy pi: X -> {0, 1}.
using Policy = std::function<int(const Eigen::VectorXd&)>;

struct MomentSpec {
  MomentKind kind = MomentKind::plr;
  Policy policy;                 // policy only
  double propensity_clip = 0.01; // ate/policy: e is clipped to [clip, 1 - clip]
};

// Nuisance values at each observation. Which fields are set depends on the
// moment: q, p (plr); q, p, r (pliv); q0, q1, e (ate, policy).
struct NuisancePredictions {
  std::optional<Eigen::VectorXd> q;   // E[Y | X]
  std::optional<Eigen::MatrixXd> p;   // E[T | X], n x p_t
  std::optional<Eigen::MatrixXd> r;   // E[W | X], n x p_w
  std::optional<Eigen::VectorXd> q0;  // E[Y | T = 0, X]
  std::optional<Eigen::VectorXd> q1;  // E[Y | T = 1, X]
  std::optional<Eigen::VectorXd> e;   // P(T = 1 | X), before clipping
};

// Row i of `a` stores a_i (p x p) in column-major order; row i of `nu` is nu_i.
struct MomentComponents {
  Index p = 0;
  Eigen::MatrixXd a;
  Eigen::MatrixXd nu;
  Index clipped_propensities = 0;  // e outside (0, 1) before clipping

  Index n() const { return nu.rows(); }

  Eigen::MatrixXd a_at(Index i) const {
    return Eigen::Map<const Eigen::MatrixXd>(Eigen::RowVectorXd(a.row(i)).data(), p, p);
  }
  Eigen::VectorXd nu_at(Index i) const { return nu.row(i).transpose(); }

  // m(Z_i; theta, g)
  Eigen::VectorXd moment_at(Index i, const Eigen::VectorXd& theta) const {
    return a_at(i) * theta + nu_at(i);
  }

  Eigen::MatrixXd A_n() const {
    const Eigen::RowVectorXd mean = a.colwise().mean();
    return Eigen::Map<const Eigen::MatrixXd>(mean.data(), p, p);
  }
  Eigen::VectorXd V_n() const { return nu.colwise().mean().transpose(); }
};

namespace detail {
inline void store_a(MomentComponents& mc, Index i, const Eigen::MatrixXd& ai) {
  mc.a.row(i) = Eigen::Map<const Eigen::RowVectorXd>(ai.data(), ai.size());
}
}  // namespace detail

// eta = T - p(X), resid = Y - q(X): a = -eta eta', nu = resid * eta.
inline MomentComponents plr_components(const Dataset& data, const NuisancePredictions& preds) {
  if (!preds.q || !preds.p) throw std::invalid_argument("plr moment needs q and p nuisances");
  const Index n = data.n(), p = data.pt();
  if (preds.q->size() != n || preds.p->rows() != n || preds.p->cols() != p)
    throw std::invalid_argument("plr moment: nuisance shape mismatch");
  MomentComponents mc;
  mc.p = p;
  mc.a.resize(n, p * p);
  mc.nu.resize(n, p);
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd eta = (data.T.row(i) - preds.p->row(i)).transpose();
    const double resid = data.Y(i) - (*preds.q)(i);
    detail::store_a(mc, i, -eta * eta.transpose());
    mc.nu.row(i) = (resid * eta).transpose();
  }
  return mc;
}

// w = W - r(X): a = -w (T - p(X))', nu = (Y - q(X)) w.
inline MomentComponents pliv_components(const Dataset& data, const NuisancePredictions& preds) {
  if (!data.W) throw std::invalid_argument("pliv moment needs an instrument W");
  if (!preds.q || !preds.p || !preds.r)
    throw std::invalid_argument("pliv moment needs q, p and r nuisances");
  const Index n = data.n(), p = data.pt();
  if (data.W->cols() != p) throw std::invalid_argument("pliv moment needs dim(W) == dim(T)");
  if (preds.q->size() != n || preds.p->rows() != n || preds.r->rows() != n ||
      preds.p->cols() != p || preds.r->cols() != p)
    throw std::invalid_argument("pliv moment: nuisance shape mismatch");
  MomentComponents mc;
  mc.p = p;
  mc.a.resize(n, p * p);
  mc.nu.resize(n, p);
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd w = (data.W->row(i) - preds.r->row(i)).transpose();
    const Eigen::VectorXd eta = (data.T.row(i) - preds.p->row(i)).transpose();
    const double resid = data.Y(i) - (*preds.q)(i);
    detail::store_a(mc, i, -w * eta.transpose());
    mc.nu.row(i) = (resid * w).transpose();
  }
  return mc;
}

inline bool is_binary_treatment(const Dataset& data) {
  if (data.pt() != 1) return false;
  for (Index i = 0; i < data.n(); ++i)
    if (data.T(i, 0) != 0.0 && data.T(i, 0) != 1.0) return false;
  return true;
}

// Riesz representer mu = T / e - (1 - T) / (1 - e) with clipped e; weight
// w = 1 (ATE) or pi(X) (policy). a = 1 and
// nu = -(w (q1 - q0) + w mu (Y - q_T)), so theta solves mean of the AIPW score.
inline MomentComponents functional_components(const Dataset& data, const NuisancePredictions& preds,
                                              const MomentSpec& spec) {
  if (spec.kind != MomentKind::ate && spec.kind != MomentKind::policy)
    throw std::invalid_argument("functional moment needs kind ate or policy");
  if (!is_binary_treatment(data))
    throw std::invalid_argument(to_string(spec.kind) +
                                " moment needs a single binary treatment column with values in {0, 1}");
  if (!preds.q0 || !preds.q1 || !preds.e)
    throw std::invalid_argument("functional moment needs q0, q1 and e nuisances");
  if (spec.kind == MomentKind::policy && !spec.policy)
    throw std::invalid_argument("policy moment needs a policy function");
  const double clip = spec.propensity_clip;
  if (!(clip > 0.0 && clip < 0.5)) throw std::invalid_argument("propensity clip must lie in (0, 0.5)");
  const Index n = data.n();
  MomentComponents mc;
  mc.p = 1;
  mc.a = Eigen::MatrixXd::Ones(n, 1);
  mc.nu.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    double e = (*preds.e)(i);
    if (!(e > 0.0 && e < 1.0)) ++mc.clipped_propensities;
    e = std::clamp(e, clip, 1.0 - clip);
    const double t = data.T(i, 0);
    const double mu = t / e - (1.0 - t) / (1.0 - e);
    double w = 1.0;
    if (spec.kind == MomentKind::policy) {
      const int pi = spec.policy(data.X.row(i).transpose());
      if (pi != 0 && pi != 1) throw std::invalid_argument("policy must return 0 or 1");
      w = pi;
    }
    const double q1 = (*preds.q1)(i), q0 = (*preds.q0)(i);
    const double qt = t == 1.0 ? q1 : q0;
    mc.nu(i, 0) = -(w * (q1 - q0) + w * mu * (data.Y(i) - qt));
  }
  return mc;
}

inline MomentComponents moment_components(const Dataset& data, const NuisancePredictions& preds,
                                          const MomentSpec& spec) {
  switch (spec.kind) {
    case MomentKind::plr: return plr_components(data, preds);
    case MomentKind::pliv: return pliv_components(data, preds);
    case MomentKind::ate:
    case MomentKind::policy: return functional_components(data, preds, spec);
  }
  throw std::invalid_argument("unknown moment kind");
}

}  // namespace sdml
