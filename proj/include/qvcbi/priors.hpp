#ifndef QVCBI_PRIORS_HPP
#define QVCBI_PRIORS_HPP

// Per-location categorical priors for BD (fragility or a PAGER-style stub) and binary LS/LF priors
// from ground-failure probability grids, turned into log-odds offsets on the activation logits.

#include "qvcbi/graph_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

namespace qvcbi {

/// Lognormal exceedance curves P(damage >= d | PGA) = Phi(ln(pga / median_d) / dispersion_d).
struct FragilityCurve {
  std::vector<double> median;      // theta_d in g, strictly increasing
  std::vector<double> dispersion;  // beta_d > 0

  int max_state() const { return static_cast<int>(median.size()); }
  void validate() const;
};

/// Reads {"median": [...], "dispersion": [...]} from a JSON file.
FragilityCurve read_fragility_curve(const std::filesystem::path& path);
void write_fragility_curve(const FragilityCurve& curve, const std::filesystem::path& path);

/// Differenced exceedances [1 - E_1, E_1 - E_2, ..., E_M]. Negative differences (crossing curves)
/// are clipped to zero and the vector renormalized; `clipped` reports whether that happened.
Vector hazus_state_probs(double pga, const FragilityCurve& curve, bool* clipped = nullptr);

/// Logistic exceedance family E_d = sigmoid(intercept_d + slope_d ln pga), 0 at pga = 0.
struct PagerStub {
  std::vector<double> intercept;
  std::vector<double> slope;

  int max_state() const { return static_cast<int>(intercept.size()); }
  /// Zero slopes with intercepts that make every state equally likely for pga > 0.
  static PagerStub flat(int max_state);
  /// Weakly discriminating defaults: slope 0.25, uniform at 1 g.
  static PagerStub weak(int max_state);
};

Vector pager_stub_probs(double pga, const PagerStub& stub, bool* clipped = nullptr);

enum class PriorMode { hazus, pager, combined };
PriorMode prior_mode_from_string(std::string_view name);
std::string_view to_string(PriorMode mode);

/// hazus, pager, or gamma * hazus + (1 - gamma) * pager renormalized.
Vector combine_priors(const Vector& p_hazus, const Vector& p_pager, PriorMode mode, double gamma = 0.5);

/// Prior probabilities per hazard, (M_i + 1) x N; empty for hazards without a prior.
struct PriorField {
  std::array<Matrix, kHazardCount> p;
};

struct PriorOptions {
  PriorMode mode = PriorMode::hazus;
  double gamma = 0.5;
  FragilityCurve curve;
  PagerStub pager;
};

/// BD prior from PGA plus binary [1 - p, p] LS/LF priors from probability values.
/// Returns the number of locations whose BD vector needed clipping in `clipped_count`.
PriorField build_prior_field(const CausalNetwork& net, const Vector& pga, const Vector& p_ls, const Vector& p_lf,
                             const PriorOptions& opts, Index* clipped_count = nullptr);

/// log(p_m / p_0) with p clipped to [1e-6, 1 - 1e-6]; entry 0 is zero.
template <typename Derived>
StateVector prior_log_odds(const Eigen::MatrixBase<Derived>& p) {
  constexpr double lo = 1e-6, hi = 1.0 - 1e-6;
  StateVector out(p.size());
  const double base = std::log(std::clamp(static_cast<double>(p(0)), lo, hi));
  out(0) = 0.0;
  for (Index m = 1; m < p.size(); ++m) out(m) = std::log(std::clamp(static_cast<double>(p(m)), lo, hi)) - base;
  return out;
}

/// Log-odds offsets for every hazard carrying a prior. Throws ConfigError when a prior is missing
/// or its location count differs from `locations`.
std::array<Matrix, kHazardCount> attach_priors(const CausalNetwork& net, const PriorField& field, Index locations);

}  // namespace qvcbi

#endif  // QVCBI_PRIORS_HPP
