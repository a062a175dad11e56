#ifndef QVCBI_GRAPH_MODEL_HPP
#define QVCBI_GRAPH_MODEL_HPP

#include "qvcbi/core.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace qvcbi {

// Node names used in NetworkSpec: "leak", "LS", "LF", "BD", "u" (XOR), "y" (DPM).
inline constexpr std::string_view kLeakNode = "leak";
inline constexpr std::string_view kXorNode = "u";
inline constexpr std::string_view kObservationNode = "y";

/// Declarative description of a causal network. Validated by build_network().
struct NetworkSpec {
  /// Declared nodes. The leak node is implicit when omitted.
  std::vector<std::string> nodes;
  /// M_i per hazard (number of states minus one); ignored for absent hazards.
  std::array<int, kHazardCount> max_state{0, 0, 0};
  /// Directed edges (parent, child). Edges out of the leak node are implicit and may be omitted.
  std::vector<std::pair<std::string, std::string>> edges;
  /// Hazards fed by a per-location prior grid through a predetermined-weight parent.
  std::vector<HazardKind> priors;

  /// The full three-layer topology: LS, LF -> BD; LS, LF, BD -> y; LS, LF -> u.
  static NetworkSpec full(int m_bd = 3, int m_ls = 1, int m_lf = 1, bool with_xor = true,
                          bool with_priors = true);
};

/// Validated, immutable network. Hazard indices are stable (LS=0, LF=1, BD=2).
class CausalNetwork {
 public:
  bool has(HazardKind h) const { return present_[idx(h)]; }
  int max_state(HazardKind h) const { return max_state_[idx(h)]; }
  int num_states(HazardKind h) const { return max_state_[idx(h)] + 1; }

  /// Latent parents P(i), excluding the leak node, in hazard order.
  const std::vector<HazardKind>& parents(HazardKind h) const { return parents_[idx(h)]; }
  /// Latent children C(i).
  const std::vector<HazardKind>& children(HazardKind h) const { return children_[idx(h)]; }
  /// S(i, k) = P(k) \ {i}.
  std::vector<HazardKind> spouses(HazardKind i, HazardKind child) const;

  const std::vector<HazardKind>& observation_parents() const { return y_parents_; }
  bool observes(HazardKind h) const;

  bool has_xor() const { return xor_parents_.has_value(); }
  std::pair<HazardKind, HazardKind> xor_parents() const;
  bool in_xor(HazardKind h) const;

  bool has_prior(HazardKind h) const { return prior_[idx(h)]; }

  /// Present hazards in sweep order (LS, LF, BD).
  const std::vector<HazardKind>& latent_nodes() const { return latent_; }
  /// Present hazards with every parent before its children.
  const std::vector<HazardKind>& topological_order() const { return topo_; }

  /// Latent nodes + leak + y + XOR node + one node per prior attachment.
  int node_count() const;

  const NetworkSpec& spec() const { return spec_; }

 private:
  friend CausalNetwork build_network(const NetworkSpec& spec);
  CausalNetwork() = default;

  NetworkSpec spec_;
  std::array<bool, kHazardCount> present_{};
  std::array<int, kHazardCount> max_state_{};
  std::array<std::vector<HazardKind>, kHazardCount> parents_;
  std::array<std::vector<HazardKind>, kHazardCount> children_;
  std::array<bool, kHazardCount> prior_{};
  std::vector<HazardKind> y_parents_;
  std::optional<std::pair<HazardKind, HazardKind>> xor_parents_;
  std::vector<HazardKind> latent_;
  std::vector<HazardKind> topo_;
};

/// Validates a spec. Throws ConfigError on cycles, a malformed XOR node, a missing observation
/// node, M_i < 1 or M_i + 1 > kMaxStates.
CausalNetwork build_network(const NetworkSpec& spec);

/// Causal coefficients of one latent node i. Every vector is indexed by the target state m_i and
/// entry 0 is pinned to zero.
struct NodeWeights {
  Vector leak;                                // w_{0,i,m}
  Vector noise;                               // w_{eps_i,m}
  std::array<Vector, kHazardCount> parent;    // parent[k](m) = w_{k,i,m}; empty unless k in P(i)
  double prior = 1.0;                         // multiplier of the attached prior log-odds
};

/// All location-invariant weights of the network.
struct WeightSet {
  std::array<NodeWeights, kHazardCount> node;
  /// obs[k](m_k) = w_{k,y,m_k}, indexed by the parent's state; empty unless k observes y.
  std::array<Vector, kHazardCount> obs;
  double obs_leak = 0.0;   // w_{0,y}
  double obs_noise = 1.0;  // w_{eps_y}, nonzero
  double sigma_xor = 0.1;

  /// All-zero weights shaped for `net` (obs_noise = 1, sigma_xor = 0.1).
  static WeightSet zeros(const CausalNetwork& net);
  /// Same shape as `*this` with every entry (including scalars) set to zero.
  WeightSet zeros_like() const;

  WeightSet& operator+=(const WeightSet& other);
  WeightSet& operator*=(double s);
};

/// Throws ConfigError if shapes disagree with `net`, a state-0 entry is nonzero, obs_noise is
/// zero or sigma_xor < 1e-3.
void validate_weights(const CausalNetwork& net, const WeightSet& w);

/// State assignment of the latent nodes; -1 marks "not given".
using StateAssignment = std::array<int, kHazardCount>;
inline constexpr StateAssignment kNoStates{-1, -1, -1};

/// z[m] = sum_k w_{k,i,m} x_k + w_{eps_i,m} eps[m] + w_{0,i,m} (+ prior * offset[m]); z[0] = 0.
StateVector activation_logits(const CausalNetwork& net, HazardKind node, const StateAssignment& parents,
                              const StateVector& eps, const WeightSet& w,
                              const StateVector* prior_offset = nullptr);
/// Scalar-noise overload: the same eps drives every state.
StateVector activation_logits(const CausalNetwork& net, HazardKind node, const StateAssignment& parents,
                              double eps, const WeightSet& w);

/// Numerically safe softmax.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> conditional_categorical(
    const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  using std::exp;
  const Scalar top = z.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> p = (z.array() - top).unaryExpr([](Scalar v) { return exp(v); });
  return p / p.sum();
}

/// Mean of ln y given the parent states: sum_k w_{k,y,x_k} x_k + w_{0,y}.
double observation_mean(const CausalNetwork& net, const StateAssignment& parents, const WeightSet& w);

/// Log-normal log density of the DPM value y > 0.
double observation_logpdf(double y, const CausalNetwork& net, const StateAssignment& parents,
                          const WeightSet& w);

/// log N(u; prod of the parent states, sigma^2).
double xor_logpdf(double u, int parent_a_state, int parent_b_state, double sigma);

}  // namespace qvcbi

#endif  // QVCBI_GRAPH_MODEL_HPP
