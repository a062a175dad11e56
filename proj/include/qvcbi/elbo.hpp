#ifndef QVCBI_ELBO_HPP
#define QVCBI_ELBO_HPP

// Closed-form evidence lower bound of the causal network and its exact derivatives.
//
// Per location l the bound is
//   E_q[log p(y|x)] + sum_i ( sum_m q_{i,m} E(z_{i,m}) - E[bound_i] ) + E_q[log p(u|x)] + H(q),
// where bound_i is the quadratic log-sum-exp bound with alpha_hat(z) substituted, so that
//   E[bound_i] = -Lambda E(alpha_hat^2) + sum_m lambda_m (E(z_m^2) - xi_m^2)
//                + 1/2 sum_m (E(z_m) - xi_m) + sum_m log(1 + e^xi_m).
// The bound is affine in each node's posterior when the others are held fixed, which makes the
// E-step an exact coordinate ascent.

#include "qvcbi/bounds.hpp"
#include "qvcbi/graph_model.hpp"

#include <span>
#include <vector>

namespace qvcbi {

/// Factorized categorical posteriors. q[i] is (M_i + 1) x N with one column per location.
struct PosteriorField {
  std::array<Matrix, kHazardCount> q;

  Index size() const;
  static PosteriorField uniform(const CausalNetwork& net, Index locations);
  /// Throws if a column does not sum to one within `tol` or leaves [0, 1].
  void check_normalized(const CausalNetwork& net, double tol = 1e-9) const;
};

/// Shared xi per latent node and state (entry m = 0 included).
struct VariationalParams {
  std::array<Vector, kHazardCount> xi;

  static VariationalParams constant(const CausalNetwork& net, double value);
};

/// Observed data per location, aligned with PosteriorField columns.
struct Evidence {
  Vector log_y;                                  // ln of the (clamped) DPM value
  Vector u;                                      // XOR observation, 0 when exclusivity holds
  std::array<Matrix, kHazardCount> prior_offset; // (M_i + 1) x N log-odds vs state 0; empty if no prior
  std::vector<std::uint8_t> bd_pruned;           // BD held at state 0; empty means nothing pruned

  Index size() const { return log_y.size(); }
  bool pruned(Index l) const { return !bd_pruned.empty() && bd_pruned[static_cast<std::size_t>(l)] != 0; }
};

/// How the expected log-conditional of each latent node is weighted.
enum class LatentWeighting {
  probability,  // sum_m q_m E(z_m) - E[bound]: a valid lower bound
  state_scaled  // sum_m m q_m (E(z_m) - E[bound]); can exceed the log marginal, kept for comparison
};

/// Inputs of the bound at one location.
struct LocalState {
  std::array<StateVector, kHazardCount> q;
  std::array<StateVector, kHazardCount> offset;  // zero vectors when no prior is attached
  double log_y = 0.0;
  double u = 0.0;
};

LocalState local_state(const CausalNetwork& net, const Evidence& ev, const PosteriorField& post, Index l);

/// Derivatives of the local bound. dq excludes the entropy term: it is the T(.) of the E-step.
struct LocalGradient {
  std::array<StateVector, kHazardCount> dq;
  std::array<StateVector, kHazardCount> dxi;
};

enum GradientFlags : unsigned { kValueOnly = 0, kGradPosterior = 1, kGradWeights = 2, kGradXi = 4 };

/// Value of the local bound. Derivatives are written to `grad` and, for weights, accumulated into
/// `dw` (which must be shaped like `w`).
double local_elbo(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const LocalState& st,
                  unsigned flags = kValueOnly, LocalGradient* grad = nullptr, WeightSet* dw = nullptr,
                  LatentWeighting weighting = LatentWeighting::probability);

/// Moments of z for `node` at one location given the parents' posteriors.
MomentCache expected_moments(const CausalNetwork& net, const WeightSet& w, HazardKind node, const LocalState& st,
                             const StateVector& xi);

/// -sum q log q with 0 log 0 = 0.
double entropy(const StateVector& q);

/// Sum of pairwise partial sums over `values` in the given order; independent of thread count.
double pairwise_sum(std::span<const double> values);

struct ElboOptions {
  int workers = 1;
  LatentWeighting weighting = LatentWeighting::probability;
};

/// Sum of the local bounds over `batch`; reduction runs over the sorted location indices.
double elbo(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
            const PosteriorField& post, std::span<const Index> batch, const ElboOptions& opts = {});

}  // namespace qvcbi

#endif  // QVCBI_ELBO_HPP
