#include "qvcbi/inference.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace qvcbi;
namespace qt = qvcbi::testing;

namespace {

NetworkSpec bd_only(int m_bd) {
  NetworkSpec s;
  s.nodes = {"leak", "BD", "y"};
  s.max_state = {0, 0, m_bd};
  s.edges = {{"BD", "y"}};
  s.priors = {HazardKind::BD};
  return s;
}

struct OracleCase {
  qt::Toy toy;
  double state_scaled = 0.0;
  double probability = 0.0;
  double log_marginal = 0.0;
  double se = 0.0;
};

// Random BD-only toy with posteriors and xi tightened by coordinate ascent.
OracleCase oracle_case(std::uint64_t seed, int draws) {
  std::mt19937_64 rng(seed);
  OracleCase c{qt::random_toy(seed, 10, bd_only(1 + static_cast<int>(seed % 2)), 1.0)};
  qt::Toy& t = c.toy;
  for (int round = 0; round < 5; ++round) {
    e_step(t.net, t.w, t.xi, t.ev, t.post, t.all, 3);
    FitConfig cfg;
    t.xi = update_xi(t.net, t.w, t.xi, t.ev, t.post, t.all, cfg);
  }
  c.probability = elbo(t.net, t.w, t.xi, t.ev, t.post, t.all);
  c.state_scaled = elbo(t.net, t.w, t.xi, t.ev, t.post, t.all, {1, LatentWeighting::state_scaled});
  double var = 0.0;
  for (Index l : t.all) {
    const qt::LogMarginal lm = qt::bd_only_log_marginal(t.net, t.w, t.ev, l, draws, rng);
    c.log_marginal += lm.value;
    var += lm.se * lm.se;
  }
  c.se = std::sqrt(var);
  return c;
}

}  // namespace

TEST(Elbo, BelowTheEnumeratedLogMarginal) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const OracleCase c = oracle_case(seed, 20000);
    EXPECT_LE(c.probability, c.log_marginal + 3.0 * c.se) << "seed " << seed;
  }
}

TEST(Elbo, StateScaledWeightingOvershootsTheLogMarginal) {
  int violations = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const OracleCase c = oracle_case(seed, 20000);
    if (c.state_scaled > c.log_marginal + 3.0 * c.se) ++violations;
  }
  EXPECT_GT(violations, 0);
}

TEST(Elbo, WithoutLatentParentsOfYItIsTheObservationLogDensity) {
  NetworkSpec s;
  s.nodes = {"leak", "y"};
  const CausalNetwork net = build_network(s);
  WeightSet w = WeightSet::zeros(net);
  w.obs_leak = -0.6;
  w.obs_noise = 0.8;
  Evidence ev;
  ev.log_y = Vector(5);
  ev.log_y << -0.1, -1.0, -2.5, -0.3, -4.0;
  ev.u = Vector::Zero(5);
  const PosteriorField post = PosteriorField::uniform(net, 5);
  const VariationalParams xi = VariationalParams::constant(net, 1.0);
  const std::vector<Index> all{0, 1, 2, 3, 4};
  double expected = 0.0;
  for (Index l = 0; l < 5; ++l) expected += observation_logpdf(std::exp(ev.log_y(l)), net, kNoStates, w);
  EXPECT_NEAR(elbo(net, w, xi, ev, post, all), expected, 1e-12);
}

TEST(Elbo, DuplicatingEveryLocationDoublesIt) {
  qt::Toy t = qt::random_toy(3, 16, NetworkSpec::full(3, 1, 1));
  const double once = elbo(t.net, t.w, t.xi, t.ev, t.post, t.all);
  Evidence ev2;
  ev2.log_y = Vector(32);
  ev2.log_y << t.ev.log_y, t.ev.log_y;
  ev2.u = Vector::Zero(32);
  PosteriorField p2;
  for (HazardKind h : t.net.latent_nodes()) {
    const Matrix& q = t.post.q[idx(h)];
    p2.q[idx(h)] = Matrix(q.rows(), 32);
    p2.q[idx(h)] << q, q;
    const Matrix& o = t.ev.prior_offset[idx(h)];
    ev2.prior_offset[idx(h)] = Matrix(o.rows(), 32);
    ev2.prior_offset[idx(h)] << o, o;
  }
  std::vector<Index> all2(32);
  for (Index l = 0; l < 32; ++l) all2[l] = l;
  EXPECT_EQ(elbo(t.net, t.w, t.xi, ev2, p2, all2), 2.0 * once);
}

TEST(Elbo, IndependentOfWorkerCountAndBatchOrder) {
  qt::Toy t = qt::random_toy(5, 101, NetworkSpec::full(3, 2, 1));
  const double ref = elbo(t.net, t.w, t.xi, t.ev, t.post, t.all);
  std::vector<Index> shuffled = t.all;
  std::mt19937_64 rng(1);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_EQ(elbo(t.net, t.w, t.xi, t.ev, t.post, shuffled), ref);
  EXPECT_EQ(elbo(t.net, t.w, t.xi, t.ev, t.post, t.all, {4}), ref);
}

TEST(Elbo, RejectsEmptyBatchAndNaNPosterior) {
  qt::Toy t = qt::random_toy(7, 4, NetworkSpec::full());
  EXPECT_THROW(elbo(t.net, t.w, t.xi, t.ev, t.post, std::vector<Index>{}), Error);
  t.post.q[idx(HazardKind::BD)](1, 2) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(elbo(t.net, t.w, t.xi, t.ev, t.post, t.all), Error);
}

TEST(Entropy, ZeroForPointMassesAndLogNForUniform) {
  StateVector one_hot = StateVector::Zero(4);
  one_hot(2) = 1.0;
  EXPECT_EQ(entropy(one_hot), 0.0);
  EXPECT_NEAR(entropy(StateVector::Constant(4, 0.25)), std::log(4.0), 1e-15);
  StateVector partial(3);
  partial << 0.5, 0.5, 0.0;
  EXPECT_NEAR(entropy(partial), std::log(2.0), 1e-15);
}

TEST(Entropy, PointMassPosteriorsContributeNoEntropy) {
  qt::Toy t = qt::random_toy(9, 6, NetworkSpec::full(3, 1, 1));
  for (HazardKind h : t.net.latent_nodes()) {
    t.post.q[idx(h)].setZero();
    t.post.q[idx(h)].row(0).setOnes();
  }
  for (Index l : t.all) {
    const LocalState st = local_state(t.net, t.ev, t.post, l);
    double h = 0.0;
    for (HazardKind k : t.net.latent_nodes()) h += entropy(st.q[idx(k)]);
    EXPECT_EQ(h, 0.0);
  }
}

TEST(PairwiseSum, MatchesCompensatedSum) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 100.0);
  std::vector<double> v(1000);
  long double ref = 0.0L;
  for (double& x : v) {
    x = n(rng);
    ref += x;
  }
  EXPECT_NEAR(pairwise_sum(v), static_cast<double>(ref), 1e-9);
  EXPECT_EQ(pairwise_sum(std::vector<double>{}), 0.0);
}
