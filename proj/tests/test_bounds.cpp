#include "qvcbi/elbo.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace qvcbi;

namespace {

long double lambda_ld(long double xi) { return (1.0L / (1.0L + std::exp(-xi)) - 0.5L) / (2.0L * xi); }

double log_sum_exp(const StateVector& z) {
  const double top = z.maxCoeff();
  return top + std::log((z.array() - top).exp().sum());
}

StateVector random_vector(std::mt19937_64& rng, int n, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  StateVector v(n);
  for (int m = 0; m < n; ++m) v(m) = g(rng);
  return v;
}

MomentCache random_moments(std::mt19937_64& rng, int n) {
  MomentCache mc;
  mc.ez = random_vector(rng, n, 2.0);
  StateMatrix a(n, n);
  for (int r = 0; r < n; ++r) a.row(r) = random_vector(rng, n, 0.7).transpose();
  mc.ezz = a * a.transpose() + mc.ez * mc.ez.transpose();
  return mc;
}

}  // namespace

TEST(Lambda, LimitAtZeroAndRange) {
  EXPECT_DOUBLE_EQ(lambda_xi(0.0), 0.125);
  double prev = lambda_xi(0.0);
  for (double xi = 1e-6; xi < 60.0; xi *= 1.3) {
    const double v = lambda_xi(xi);
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 0.125);
    EXPECT_LE(v, prev);
    prev = v;
  }
  EXPECT_THROW(lambda_xi(-1e-3), ConfigError);
}

TEST(Lambda, SeriesAgreesWithClosedFormNearZero) {
  EXPECT_NEAR(lambda_xi(1e-5), static_cast<double>(lambda_ld(1e-5L)), 1e-12);
  EXPECT_NEAR(lambda_xi(0.99e-4), static_cast<double>(lambda_ld(0.99e-4L)), 1e-12);
  EXPECT_NEAR(lambda_xi(1.01e-4), static_cast<double>(lambda_ld(1.01e-4L)), 1e-12);
}

TEST(Lambda, ExtendedPrecisionAtFour) {
  EXPECT_NEAR(lambda_xi(4.0), static_cast<double>(lambda_ld(4.0L)), 1e-14);
}

TEST(Lambda, DerivativeMatchesFiniteDifferences) {
  for (double xi : {0.1, 1.0, 5.0}) {
    const double h = 1e-5;
    const double fd = (lambda_xi(xi + h) - lambda_xi(xi - h)) / (2.0 * h);
    EXPECT_NEAR(lambda_xi_derivative(xi), fd, 1e-6);
  }
  EXPECT_NEAR(lambda_xi_derivative(0.0099), (lambda_xi(0.0099 + 1e-6) - lambda_xi(0.0099 - 1e-6)) / 2e-6, 1e-6);
  EXPECT_NEAR(lambda_xi_derivative(0.0101), (lambda_xi(0.0101 + 1e-6) - lambda_xi(0.0101 - 1e-6)) / 2e-6, 1e-6);
}

TEST(LseBound, TwoZerosAtTheOrigin) {
  StateVector z = StateVector::Zero(2), xi = StateVector::Zero(2);
  EXPECT_NEAR(lse_upper_bound(z, 0.0, xi), 2.0 * std::log(2.0), 1e-15);
  EXPECT_NEAR(log_sum_exp(z), std::log(2.0), 1e-15);
}

TEST(LseBound, TightAtXiEqualToResidualForOneElement) {
  for (double t : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    for (double alpha : {-1.0, 0.0, 2.5}) {
      StateVector z(1), xi(1);
      z << t;
      xi << std::abs(t - alpha);
      const double b = lse_upper_bound(z, alpha, xi);
      EXPECT_NEAR(b, alpha + softplus(t - alpha), 1e-12);
      EXPECT_GE(b, t);
      EXPECT_NEAR(b - t, std::log1p(std::exp(-(t - alpha))), 1e-12);
    }
  }
}

TEST(LseBound, ValidOverRandomDraws) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 3.0);
  double worst = 1e300;
  for (int d = 0; d < 10000; ++d) {
    const int n = 2 + d % 3;
    const StateVector z = random_vector(rng, n, 3.0);
    StateVector xi(n);
    for (int m = 0; m < n; ++m) xi(m) = 6.0 * unit(rng) * unit(rng);
    const double alpha = g(rng);
    worst = std::min(worst, lse_upper_bound(z, alpha, xi) - log_sum_exp(z));
  }
  EXPECT_GE(worst, -1e-10);
}

TEST(LseBound, GapAtTheLogSumExpAnchorIsBounded) {
  std::mt19937_64 rng(9);
  for (int d = 0; d < 500; ++d) {
    const StateVector z = random_vector(rng, 2 + d % 5, 10.0);
    const double lse = log_sum_exp(z);
    for (double shift : {0.0, 1e3}) {
      const StateVector zs = z.array() + shift;
      const double alpha = lse + shift;
      const StateVector xi = (zs.array() - alpha).abs();
      const double gap = lse_upper_bound(zs, alpha, xi) - (lse + shift);
      EXPECT_GE(gap, -1e-9);
      EXPECT_LE(gap, 1.0 + 1e-9);
    }
  }
}

TEST(LseBound, RejectsMismatchedLengthsAndNegativeXi) {
  StateVector z = StateVector::Zero(2), xi3 = StateVector::Zero(3), neg(2);
  neg << 0.0, -0.1;
  EXPECT_THROW(lse_upper_bound(z, 0.0, xi3), ConfigError);
  EXPECT_THROW(lse_upper_bound(z, 0.0, neg), ConfigError);
}

TEST(OptimalAlpha, WorkedValues) {
  StateVector ez(2), lam(2);
  ez << 1, 3;
  lam << 0.1, 0.1;
  EXPECT_DOUBLE_EQ(optimal_alpha(ez, lam, 1), 2.0);
  StateVector c = StateVector::Constant(2, 1.7), l2(2);
  l2 << 0.05, 0.11;
  EXPECT_NEAR(optimal_alpha(c, l2, 1), 1.7, 1e-15);
  StateVector e4(4), l4 = StateVector::Constant(4, 0.125);
  e4 << 0, 1, 2, 3;
  EXPECT_DOUBLE_EQ(optimal_alpha(e4, l4, 3), 2.5);
  EXPECT_THROW(optimal_alpha(ez, StateVector::Zero(2), 1), ConfigError);
}

TEST(OptimalAlpha, PerturbationNeverDecreasesTheBound) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> unit(0.0, 4.0);
  for (int d = 0; d < 500; ++d) {
    const int n = 2 + d % 3;
    const StateVector ez = random_vector(rng, n, 2.0);
    StateVector xi(n);
    for (int m = 0; m < n; ++m) xi(m) = unit(rng);
    const StateVector lam = lambda_vector(xi);
    const double a = optimal_alpha(ez, lam, n - 1);
    const double at = lse_upper_bound(ez, a, xi);
    for (double delta : {1e-3, -1e-3, 1e-2, -1e-2}) EXPECT_GE(lse_upper_bound(ez, a + delta, xi), at - 1e-12);
  }
}

TEST(XiFixedPoint, DeterministicLogitsGiveZero) {
  MomentCache mc;
  mc.ez = StateVector::Constant(2, 0.8);
  mc.ezz = mc.ez * mc.ez.transpose();
  const MomentCache arr[] = {mc};
  const XiSolve s = minimize_xi_fixedpoint(arr, StateVector::Constant(2, 1.0));
  EXPECT_TRUE(s.converged);
  EXPECT_LT(s.xi.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(XiFixedPoint, InitializerIsTheRootMeanSquareResidual) {
  MomentCache mc;
  mc.ez = StateVector(2);
  mc.ez << -2.0, 2.0;
  mc.ezz = mc.ez * mc.ez.transpose();
  const MomentCache arr[] = {mc};
  const XiSolve one = minimize_xi_fixedpoint(arr, StateVector::Constant(2, 0.5), 1.0, 1e-8, 1);
  EXPECT_NEAR(one.xi(0), 2.0, 1e-14);
  EXPECT_NEAR(one.xi(1), 2.0, 1e-14);
}

TEST(XiFixedPoint, ResultIsMinimalAgainstRandomProbes) {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 2 + trial % 3;
    std::vector<MomentCache> mcs;
    for (int l = 0; l < 6; ++l) mcs.push_back(random_moments(rng, n));
    const XiSolve s = minimize_xi_fixedpoint(mcs, StateVector::Constant(n, 1.0), 1.0, 1e-12, 2000);
    auto total = [&](const StateVector& xi) {
      double v = 0.0;
      for (const auto& mc : mcs) v += expected_lse_bound(mc, xi);
      return v;
    };
    const double best = total(s.xi);
    for (int p = 0; p < 200; ++p) {
      StateVector probe = s.xi;
      for (int m = 0; m < n; ++m) probe(m) = std::max(0.0, probe(m) + g(rng));
      EXPECT_LE(best, total(probe) + 1e-9);
    }
  }
}

TEST(XiFixedPoint, IteratesNeverIncreaseTheBound) {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 3;
    std::vector<MomentCache> mcs;
    for (int l = 0; l < 4; ++l) mcs.push_back(random_moments(rng, n));
    auto total = [&](const StateVector& xi) {
      double v = 0.0;
      for (const auto& mc : mcs) v += expected_lse_bound(mc, xi);
      return v;
    };
    StateVector xi = StateVector::Constant(n, 0.3);
    double prev = total(xi);
    for (int it = 0; it < 15; ++it) {
      xi = minimize_xi_fixedpoint(mcs, xi, 1.0, 0.0, 1).xi;
      const double v = total(xi);
      EXPECT_LE(v, prev + 1e-10);
      prev = v;
    }
  }
}

TEST(ExpectedBound, IsAtLeastTheExpectedLogSumExp) {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial % 3;
    StateMatrix a(n, n);
    for (int r = 0; r < n; ++r) a.row(r) = random_vector(rng, n, 0.6).transpose();
    MomentCache mc;
    mc.ez = random_vector(rng, n, 1.5);
    mc.ezz = a * a.transpose() + mc.ez * mc.ez.transpose();
    const StateVector xi = minimize_xi_fixedpoint(std::span(&mc, 1), StateVector::Constant(n, 1.0)).xi;
    double lse = 0.0;
    const int draws = 200000;
    for (int d = 0; d < draws; ++d) {
      StateVector e(n);
      for (int m = 0; m < n; ++m) e(m) = n01(rng);
      lse += log_sum_exp(mc.ez + a * e);
    }
    EXPECT_GE(expected_lse_bound(mc, xi), lse / draws - 1e-2);
  }
}

TEST(ExpectedMoments, ParentsAtStateZeroLeaveLeakAndNoise) {
  const CausalNetwork net = build_network(NetworkSpec::full(3, 1, 1, true, false));
  qvcbi::testing::Toy t = qvcbi::testing::random_toy(2, 1, NetworkSpec::full(3, 1, 1, true, false));
  LocalState st = local_state(t.net, t.ev, t.post, 0);
  st.q[idx(HazardKind::LS)] << 1.0, 0.0;
  st.q[idx(HazardKind::LF)] << 1.0, 0.0;
  const auto& nw = t.w.node[idx(HazardKind::BD)];
  const MomentCache mc = expected_moments(net, t.w, HazardKind::BD, st, t.xi.xi[idx(HazardKind::BD)]);
  for (int m = 0; m < 4; ++m) {
    EXPECT_NEAR(mc.ez(m), nw.leak(m), 1e-15);
    EXPECT_NEAR(mc.ezz(m, m), nw.noise(m) * nw.noise(m) + nw.leak(m) * nw.leak(m), 1e-14);
  }
  EXPECT_GE((mc.ez2() - mc.ez.cwiseAbs2()).minCoeff(), -1e-9);
}

TEST(ExpectedMoments, SingleBinaryParentIsLinearInItsProbability) {
  const NetworkSpec spec = NetworkSpec::full(2, 1, 1, false, false);
  qvcbi::testing::Toy t = qvcbi::testing::random_toy(4, 1, spec);
  LocalState st = local_state(t.net, t.ev, t.post, 0);
  const double p = 0.37;
  st.q[idx(HazardKind::LS)] << 1.0 - p, p;
  st.q[idx(HazardKind::LF)] << 1.0, 0.0;
  const auto& nw = t.w.node[idx(HazardKind::BD)];
  const MomentCache mc = expected_moments(t.net, t.w, HazardKind::BD, st, t.xi.xi[idx(HazardKind::BD)]);
  for (int m = 1; m < 3; ++m) EXPECT_NEAR(mc.ez(m), nw.leak(m) + nw.parent[idx(HazardKind::LS)](m) * p, 1e-14);
}

TEST(ExpectedMoments, MatchesMonteCarlo) {
  const NetworkSpec spec = NetworkSpec::full(3, 2, 1, true, true);
  qvcbi::testing::Toy t = qvcbi::testing::random_toy(6, 1, spec, 1.0);
  const LocalState st = local_state(t.net, t.ev, t.post, 0);
  const MomentCache mc = expected_moments(t.net, t.w, HazardKind::BD, st, t.xi.xi[idx(HazardKind::BD)]);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  auto draw_state = [&](const StateVector& q) {
    std::discrete_distribution<int> d(q.data(), q.data() + q.size());
    return d(rng);
  };
  const int draws = 1000000, n = 4;
  Eigen::Array<double, Eigen::Dynamic, 1> s1 = Eigen::ArrayXd::Zero(n), s2 = s1, s4 = s1;
  for (int d = 0; d < draws; ++d) {
    const StateAssignment parents{draw_state(st.q[0]), draw_state(st.q[1]), -1};
    StateVector eps(n);
    for (int m = 0; m < n; ++m) eps(m) = n01(rng);
    const StateVector z = activation_logits(t.net, HazardKind::BD, parents, eps, t.w, &st.offset[idx(HazardKind::BD)]);
    const Eigen::ArrayXd za = z.array(), z2 = za * za;
    s1 += za;
    s2 += z2;
    s4 += z2 * z2;
  }
  const Eigen::ArrayXd mean = s1 / draws, mean2 = s2 / draws;
  const Eigen::ArrayXd se1 = ((mean2 - mean * mean) / draws).sqrt();
  const Eigen::ArrayXd se2 = ((s4 / draws - mean2 * mean2) / draws).sqrt();
  for (int m = 1; m < n; ++m) {
    EXPECT_LE(std::abs(mc.ez(m) - mean(m)), 3.0 * se1(m) + 1e-12) << "state " << m;
    EXPECT_LE(std::abs(mc.ezz(m, m) - mean2(m)), 3.0 * se2(m) + 1e-12) << "state " << m;
  }
  EXPECT_EQ(mc.ez(0), 0.0);
}
