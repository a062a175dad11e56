#ifndef QVCBI_TESTS_SUPPORT_HPP
#define QVCBI_TESTS_SUPPORT_HPP

#include "qvcbi/inference.hpp"

#include <random>

namespace qvcbi::testing {

struct Toy {
  CausalNetwork net;
  WeightSet w;
  VariationalParams xi;
  Evidence ev;
  PosteriorField post;
  std::vector<Index> all;
};

inline StateVector random_simplex(std::mt19937_64& rng, int n) {
  std::gamma_distribution<double> g(1.0, 1.0);
  StateVector q(n);
  for (int m = 0; m < n; ++m) q(m) = g(rng) + 1e-3;
  return q / q.sum();
}

inline NetworkSpec random_spec(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> bd(1, 3), hz(1, 2), coin(0, 1);
  return NetworkSpec::full(bd(rng), hz(rng), hz(rng), coin(rng) == 1, coin(rng) == 1);
}

/// Random weights, xi, evidence and posteriors over `locations` cells.
inline Toy random_toy(std::uint64_t seed, Index locations, const NetworkSpec& spec, double weight_scale = 0.7) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Toy t{build_network(spec), {}, {}, {}, {}, {}};
  t.w = WeightSet::zeros(t.net);
  for (const ParamEntry& e : gradient_entries(t.net)) entry_ref(t.w, e) = weight_scale * normal(rng);
  t.w.obs_noise = 0.5 + unit(rng);
  t.w.sigma_xor = 0.5 + unit(rng);
  t.xi = VariationalParams::constant(t.net, 0.0);
  for (HazardKind h : t.net.latent_nodes())
    for (Index m = 0; m < t.xi.xi[idx(h)].size(); ++m) t.xi.xi[idx(h)](m) = 0.2 + 2.8 * unit(rng);
  t.ev.log_y = Vector(locations);
  t.ev.u = Vector::Zero(locations);
  for (Index l = 0; l < locations; ++l) t.ev.log_y(l) = -1.0 + normal(rng);
  for (HazardKind h : t.net.latent_nodes()) {
    if (!t.net.has_prior(h)) continue;
    const int n = t.net.num_states(h);
    Matrix off = Matrix::Zero(n, locations);
    for (Index l = 0; l < locations; ++l)
      for (int m = 1; m < n; ++m) off(m, l) = normal(rng);
    t.ev.prior_offset[idx(h)] = off;
  }
  t.post = PosteriorField::uniform(t.net, locations);
  for (HazardKind h : t.net.latent_nodes())
    for (Index l = 0; l < locations; ++l) t.post.q[idx(h)].col(l) = random_simplex(rng, t.net.num_states(h));
  for (Index l = 0; l < locations; ++l) t.all.push_back(l);
  return t;
}

}  // namespace qvcbi::testing

#endif  // QVCBI_TESTS_SUPPORT_HPP
