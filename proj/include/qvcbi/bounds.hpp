#ifndef QVCBI_BOUNDS_HPP
#define QVCBI_BOUNDS_HPP

// Quadratic upper bound on log-sum-exp: a product-of-sigmoids bound followed by the Jaakkola
// bound on log(1 + e^x). Primitives are templated on the scalar type.

#include "qvcbi/core.hpp"

#include <cmath>
#include <span>

namespace qvcbi {

/// log(1 + e^x) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

/// Logistic sigmoid.
template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

/// lambda(xi) = (sigmoid(xi) - 1/2) / (2 xi) = tanh(xi/2) / (4 xi); 1/8 at xi = 0.
template <typename Scalar>
Scalar lambda_xi(Scalar xi) {
  using std::tanh;
  if (xi < Scalar(0)) throw ConfigError("lambda_xi: xi must be nonnegative");
  if (xi < Scalar(1e-4)) {
    const Scalar x2 = xi * xi;
    return Scalar(1) / Scalar(8) - x2 / Scalar(96) + x2 * x2 / Scalar(960);
  }
  return tanh(xi / Scalar(2)) / (Scalar(4) * xi);
}

/// d lambda / d xi (nonpositive on [0, inf)).
template <typename Scalar>
Scalar lambda_xi_derivative(Scalar xi) {
  using std::cosh;
  using std::tanh;
  if (xi < Scalar(0)) throw ConfigError("lambda_xi_derivative: xi must be nonnegative");
  if (xi < Scalar(1e-2)) {
    const Scalar x2 = xi * xi;
    return -xi / Scalar(48) + xi * x2 / Scalar(240) - Scalar(17) * xi * x2 * x2 / Scalar(26880);
  }
  const Scalar c = cosh(xi / Scalar(2));
  return (xi / (Scalar(2) * c * c) - tanh(xi / Scalar(2))) / (Scalar(4) * xi * xi);
}

/// alpha + sum_m [lambda(xi_m)((z_m - alpha)^2 - xi_m^2) + (z_m - alpha - xi_m)/2 + log(1 + e^xi_m)].
/// Never below log(sum_m exp(z_m)).
template <typename DerivedZ, typename DerivedXi>
typename DerivedZ::Scalar lse_upper_bound(const Eigen::MatrixBase<DerivedZ>& z, typename DerivedZ::Scalar alpha,
                                          const Eigen::MatrixBase<DerivedXi>& xi) {
  using Scalar = typename DerivedZ::Scalar;
  if (z.size() != xi.size()) throw ConfigError("lse_upper_bound: z and xi lengths differ");
  Scalar total = alpha;
  for (Index m = 0; m < z.size(); ++m) {
    const Scalar x = xi(m);
    if (x < Scalar(0)) throw ConfigError("lse_upper_bound: xi must be nonnegative");
    const Scalar d = z(m) - alpha;
    total += lambda_xi(x) * (d * d - x * x) + (d - x) / Scalar(2) + softplus(x);
  }
  return total;
}

/// The alpha minimizing the bound: [4 sum_m ez_m lam_m - (1 - M)] / (4 sum_m lam_m).
template <typename DerivedE, typename DerivedL>
typename DerivedE::Scalar optimal_alpha(const Eigen::MatrixBase<DerivedE>& ez, const Eigen::MatrixBase<DerivedL>& lam,
                                        int max_state) {
  using Scalar = typename DerivedE::Scalar;
  if (ez.size() != lam.size()) throw ConfigError("optimal_alpha: length mismatch");
  const Scalar total = lam.sum();
  if (total == Scalar(0)) throw ConfigError("optimal_alpha: sum of lambda is zero");
  return (Scalar(4) * ez.dot(lam) - Scalar(1 - max_state)) / (Scalar(4) * total);
}

/// Elementwise lambda over a vector of xi.
inline StateVector lambda_vector(const StateVector& xi) {
  return xi.unaryExpr([](double x) { return lambda_xi(x); });
}

/// First and second moments of the logits z of one node at one location under q and eps ~ N(0,1).
struct MomentCache {
  StateVector ez;   // E(z_m)
  StateMatrix ezz;  // E(z_r z_s); the diagonal holds E(z_m^2)
  double ealpha2 = 0.0;  // E(alpha_hat^2) for the xi the cache was built with

  StateVector ez2() const { return ezz.diagonal(); }
  StateMatrix covariance() const { return ezz - ez * ez.transpose(); }
};

/// E(alpha_hat^2) with alpha_hat = (4 sum_m lambda_m z_m + M - 1) / (4 sum_m lambda_m).
double expected_alpha_sq(const MomentCache& mc, const StateVector& xi);

/// E[bound(z, alpha_hat(z), xi)] in closed form; an upper bound on E[log sum exp z].
double expected_lse_bound(const MomentCache& mc, const StateVector& xi);

/// E[(z_m - alpha_hat(z))^2] for every m.
StateVector expected_sq_residual(const MomentCache& mc, const StateVector& xi);

struct XiSolve {
  StateVector xi;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// Minimizes sum_l E[bound] over a shared xi by the fixed point xi_m^2 = mean_l E[(z_m - alpha_hat)^2].
/// The first iterate is the closed-form tightness point sqrt(E((z_m - alpha)^2)) at xi0; each
/// iterate never increases the summed bound.
XiSolve minimize_xi_fixedpoint(std::span<const MomentCache> moments, const StateVector& xi0,
                               double damping = 1.0, double tol = 1e-8, int max_iter = 100);

}  // namespace qvcbi

#endif  // QVCBI_BOUNDS_HPP
