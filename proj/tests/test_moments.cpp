#include "stable_dml/core.hpp"
#include "stable_dml/moments.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace sdml;

namespace {

Dataset scalar_data(std::initializer_list<double> t, std::initializer_list<double> y) {
  Dataset d;
  const auto n = static_cast<Index>(t.size());
  d.X = Eigen::MatrixXd::Zero(n, 1);
  d.T.resize(n, 1);
  d.Y.resize(n);
  Index i = 0;
  for (double v : t) d.T(i++, 0) = v;
  i = 0;
  for (double v : y) d.Y(i++) = v;
  return d;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(Plr, PerfectInterpolationGivesZero) {
  Dataset d = scalar_data({1, 2, 3}, {4, 5, 6});
  NuisancePredictions p;
  p.q = d.Y;
  p.p = d.T;
  const auto mc = plr_components(d, p);
  EXPECT_TRUE(mc.a.isZero(0));
  EXPECT_TRUE(mc.nu.isZero(0));
}

TEST(Plr, ScalarPlugIn) {
  Dataset d = scalar_data({2}, {3});
  d.X = Eigen::MatrixXd::Zero(1, 1);
  NuisancePredictions p;
  p.q = vec({1});
  p.p = Eigen::MatrixXd::Zero(1, 1);
  const auto mc = plr_components(d, p);
  EXPECT_EQ(mc.a(0, 0), -4.0);
  EXPECT_EQ(mc.nu(0, 0), 4.0);
}

TEST(Plr, ZeroNuisanceGivesOlsMoments) {
  Dataset d = scalar_data({1, -2, 0.5}, {3, 1, -4});
  NuisancePredictions p;
  p.q = Eigen::VectorXd::Zero(3);
  p.p = Eigen::MatrixXd::Zero(3, 1);
  const auto mc = plr_components(d, p);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_EQ(mc.a(i, 0), -d.T(i, 0) * d.T(i, 0));
    EXPECT_EQ(mc.nu(i, 0), d.Y(i) * d.T(i, 0));
  }
}

TEST(Plr, MissingNuisance) {
  Dataset d = scalar_data({1, 2}, {1, 2});
  NuisancePredictions p;
  p.q = d.Y;
  EXPECT_THROW(plr_components(d, p), std::invalid_argument);
}

TEST(Pliv, InstrumentEqualsTreatmentReducesToPlr) {
  Rng rng(1);
  Dataset d = scalar_data({0.3, -1.2, 2.0, 0.7}, {1, 2, 3, 4});
  d.W = d.T;
  NuisancePredictions p;
  p.q = Eigen::VectorXd::NullaryExpr(4, [&] { return rng.normal(); });
  p.p = Eigen::MatrixXd::NullaryExpr(4, 1, [&] { return rng.normal(); });
  p.r = p.p;
  const auto a = pliv_components(d, p);
  const auto b = plr_components(d, p);
  EXPECT_EQ(a.a, b.a);
  EXPECT_EQ(a.nu, b.nu);
}

TEST(Pliv, ScalarPlugIn) {
  Dataset d = scalar_data({1}, {3});
  d.W = Eigen::MatrixXd::Constant(1, 1, 2.0);
  NuisancePredictions p;
  p.q = vec({0});
  p.p = Eigen::MatrixXd::Zero(1, 1);
  p.r = Eigen::MatrixXd::Zero(1, 1);
  const auto mc = pliv_components(d, p);
  EXPECT_EQ(mc.a(0, 0), -2.0);
  EXPECT_EQ(mc.nu(0, 0), 6.0);
}

TEST(Pliv, DegenerateInstrumentResidual) {
  Dataset d = scalar_data({1, 2}, {3, 4});
  d.W = Eigen::MatrixXd::Constant(2, 1, 5.0);
  NuisancePredictions p;
  p.q = vec({0, 0});
  p.p = Eigen::MatrixXd::Zero(2, 1);
  p.r = *d.W;
  const auto mc = pliv_components(d, p);
  EXPECT_TRUE(mc.a.isZero(0));
  EXPECT_TRUE(mc.nu.isZero(0));
}

TEST(Pliv, MissingInstrument) {
  Dataset d = scalar_data({1, 2}, {3, 4});
  NuisancePredictions p;
  p.q = vec({0, 0});
  p.p = Eigen::MatrixXd::Zero(2, 1);
  p.r = Eigen::MatrixXd::Zero(2, 1);
  EXPECT_THROW(pliv_components(d, p), std::invalid_argument);
}

// a_i theta + nu_i against the moment written out directly, p = 2.
TEST(Moments, SignConsistencyMultivariate) {
  Rng rng(2);
  const Index n = 7;
  Dataset d;
  d.X = Eigen::MatrixXd::Zero(n, 1);
  d.T = Eigen::MatrixXd::NullaryExpr(n, 2, [&] { return rng.normal(); });
  d.Y = Eigen::VectorXd::NullaryExpr(n, [&] { return rng.normal(); });
  d.W = Eigen::MatrixXd::NullaryExpr(n, 2, [&] { return rng.normal(); });
  NuisancePredictions p;
  p.q = Eigen::VectorXd::NullaryExpr(n, [&] { return rng.normal(); });
  p.p = Eigen::MatrixXd::NullaryExpr(n, 2, [&] { return rng.normal(); });
  p.r = Eigen::MatrixXd::NullaryExpr(n, 2, [&] { return rng.normal(); });
  const Eigen::Vector2d theta(0.7, -1.3);
  const auto plr = plr_components(d, p);
  const auto pliv = pliv_components(d, p);
  for (Index i = 0; i < n; ++i) {
    const Eigen::Vector2d eta = (d.T.row(i) - p.p->row(i)).transpose();
    const Eigen::Vector2d w = (d.W->row(i) - p.r->row(i)).transpose();
    const double resid = d.Y(i) - (*p.q)(i);
    const Eigen::Vector2d m_plr = (resid - theta.dot(eta)) * eta;
    const Eigen::Vector2d m_pliv = (resid - theta.dot(eta)) * w;
    EXPECT_LT((plr.moment_at(i, theta) - m_plr).norm(), 1e-12);
    EXPECT_LT((pliv.moment_at(i, theta) - m_pliv).norm(), 1e-12);
  }
}

TEST(Functional, ExactOutcomeModelGivesContrast) {
  Dataset d = scalar_data({1, 0, 1, 0}, {0, 0, 0, 0});
  NuisancePredictions p;
  p.q0 = vec({0.2, -1.0, 3.0, 0.5});
  p.q1 = (*p.q0).array() + 1.75;
  for (Index i = 0; i < 4; ++i) d.Y(i) = d.T(i, 0) == 1.0 ? (*p.q1)(i) : (*p.q0)(i);
  p.e = vec({0.3, 0.6, 0.5, 0.9});
  const auto mc = functional_components(d, p, MomentSpec{MomentKind::ate, {}, 0.01});
  EXPECT_DOUBLE_EQ(-mc.V_n()(0) / mc.A_n()(0, 0), 1.75);
}

TEST(Functional, SingleObservationPlugIn) {
  Dataset d = scalar_data({1}, {2});
  NuisancePredictions p;
  p.q0 = vec({0});
  p.q1 = vec({1});
  p.e = vec({0.5});
  const auto mc = functional_components(d, p, MomentSpec{MomentKind::ate, {}, 0.01});
  EXPECT_EQ(mc.a(0, 0), 1.0);
  EXPECT_EQ(mc.nu(0, 0), -3.0);
}

TEST(Functional, NullPolicyGivesZero) {
  Dataset d = scalar_data({1, 0, 1}, {2, -1, 4});
  NuisancePredictions p;
  p.q0 = vec({0, 1, 2});
  p.q1 = vec({1, 2, 3});
  p.e = vec({0.5, 0.4, 0.7});
  MomentSpec spec{MomentKind::policy, [](const Eigen::VectorXd&) { return 0; }, 0.01};
  const auto mc = functional_components(d, p, spec);
  EXPECT_TRUE(mc.nu.isZero(0));
}

TEST(Functional, PolicyWeightsMatchDirectFormula) {
  Dataset d = scalar_data({1, 0, 1, 0}, {2, -1, 4, 0.5});
  d.X.col(0) << -1, 1, 2, -3;
  NuisancePredictions p;
  p.q0 = vec({0, 1, 2, 0});
  p.q1 = vec({1, 2, 3, 1});
  p.e = vec({0.5, 0.4, 0.7, 0.2});
  MomentSpec spec{MomentKind::policy, [](const Eigen::VectorXd& x) { return x(0) > 0 ? 1 : 0; }, 0.01};
  const auto mc = functional_components(d, p, spec);
  for (Index i = 0; i < 4; ++i) {
    const double w = d.X(i, 0) > 0 ? 1 : 0;
    const double t = d.T(i, 0), e = (*p.e)(i);
    const double mu = t / e - (1 - t) / (1 - e);
    const double qt = t == 1 ? (*p.q1)(i) : (*p.q0)(i);
    EXPECT_DOUBLE_EQ(mc.nu(i, 0), -(w * ((*p.q1)(i) - (*p.q0)(i)) + w * mu * (d.Y(i) - qt)));
  }
}

TEST(Functional, NonBinaryTreatmentRejected) {
  Dataset d = scalar_data({1, 0.5}, {2, 1});
  NuisancePredictions p;
  p.q0 = vec({0, 0});
  p.q1 = vec({0, 0});
  p.e = vec({0.5, 0.5});
  try {
    functional_components(d, p, MomentSpec{MomentKind::ate, {}, 0.01});
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("binary"), std::string::npos);
  }
}

TEST(Functional, PropensityClippingIsCounted) {
  Dataset d = scalar_data({1, 0, 1}, {1, 1, 1});
  NuisancePredictions p;
  p.q0 = vec({0, 0, 0});
  p.q1 = vec({0, 0, 0});
  p.e = vec({0.0, 1.0, 0.5});
  const auto mc = functional_components(d, p, MomentSpec{MomentKind::ate, {}, 0.01});
  EXPECT_EQ(mc.clipped_propensities, 2);
  // e = 0 clipped to 0.01: mu = 1 / 0.01.
  EXPECT_DOUBLE_EQ(mc.nu(0, 0), -(1.0 / 0.01));
  EXPECT_TRUE(mc.nu.allFinite());
}

// AIPW unbiasedness with the true nuisances plugged in: E[nu] = -theta0.
TEST(Functional, RieszPropertyKnownDgp) {
  const Index n = 200000;
  const double theta0 = 1.25;
  Rng rng(3);
  Dataset d;
  d.X.resize(n, 1);
  d.T.resize(n, 1);
  d.Y.resize(n);
  NuisancePredictions p;
  p.q0 = Eigen::VectorXd(n);
  p.q1 = Eigen::VectorXd(n);
  p.e = Eigen::VectorXd(n);
  for (Index i = 0; i < n; ++i) {
    const double x = rng.normal();
    const double e = 1.0 / (1.0 + std::exp(-x));
    const double t = rng.uniform() <= e ? 1.0 : 0.0;
    d.X(i, 0) = x;
    d.T(i, 0) = t;
    d.Y(i) = theta0 * t + std::sin(x) + rng.normal();
    (*p.q0)(i) = std::sin(x);
    (*p.q1)(i) = theta0 + std::sin(x);
    (*p.e)(i) = e;
  }
  const auto mc = functional_components(d, p, MomentSpec{MomentKind::ate, {}, 0.001});
  const double mean = mc.nu.col(0).mean();
  const double sd = std::sqrt((mc.nu.col(0).array() - mean).square().sum() / static_cast<double>(n - 1));
  EXPECT_NEAR(mean, -theta0, 4 * sd / std::sqrt(static_cast<double>(n)));
}

TEST(Moments, DispatchAndMeans) {
  Dataset d = scalar_data({1, 2}, {2, 4});
  NuisancePredictions p;
  p.q = vec({0, 0});
  p.p = Eigen::MatrixXd::Zero(2, 1);
  const auto mc = moment_components(d, p, MomentSpec{});
  EXPECT_DOUBLE_EQ(mc.A_n()(0, 0), -2.5);
  EXPECT_DOUBLE_EQ(mc.V_n()(0), 5.0);
}
