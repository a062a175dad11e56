#include "qvcbi/bounds.hpp"

#include <algorithm>

namespace qvcbi {

double expected_alpha_sq(const MomentCache& mc, const StateVector& xi) {
  const StateVector lam = lambda_vector(xi);
  const double total = lam.sum();
  const double mm1 = static_cast<double>(mc.ez.size()) - 2.0;  // M - 1
  const double quad = lam.dot(mc.ezz * lam);
  return (16.0 * quad + 8.0 * mm1 * lam.dot(mc.ez) + mm1 * mm1) / (16.0 * total * total);
}

double expected_lse_bound(const MomentCache& mc, const StateVector& xi) {
  const StateVector lam = lambda_vector(xi);
  double value = -lam.sum() * expected_alpha_sq(mc, xi);
  for (Index m = 0; m < xi.size(); ++m) {
    value += lam(m) * (mc.ezz(m, m) - xi(m) * xi(m)) + 0.5 * (mc.ez(m) - xi(m)) + softplus(xi(m));
  }
  return value;
}

StateVector expected_sq_residual(const MomentCache& mc, const StateVector& xi) {
  const StateVector lam = lambda_vector(xi);
  const double total = lam.sum();
  const double kappa = (static_cast<double>(mc.ez.size()) - 2.0) / (4.0 * total);
  const StateMatrix cov = mc.covariance();
  const StateVector cov_lam = cov * lam;
  const double quad = lam.dot(cov_lam);
  const double mean_alpha = lam.dot(mc.ez) / total + kappa;
  StateVector out(xi.size());
  for (Index m = 0; m < xi.size(); ++m) {
    const double d = mc.ez(m) - mean_alpha;
    out(m) = d * d + cov(m, m) - 2.0 * cov_lam(m) / total + quad / (total * total);
  }
  return out;
}

XiSolve minimize_xi_fixedpoint(std::span<const MomentCache> moments, const StateVector& xi0, double damping,
                               double tol, int max_iter) {
  XiSolve out;
  out.xi = xi0.cwiseMax(0.0);
  if (moments.empty()) {
    out.converged = true;
    return out;
  }
  for (int it = 0; it < max_iter; ++it) {
    StateVector target = StateVector::Zero(xi0.size());
    for (const auto& mc : moments) target += expected_sq_residual(mc, out.xi);
    target /= static_cast<double>(moments.size());
    const StateVector proposal = target.cwiseMax(0.0).cwiseSqrt();
    const StateVector step = damping * (proposal - out.xi);
    out.xi += step;
    out.iterations = it + 1;
    out.residual = (proposal - out.xi + step).cwiseAbs().maxCoeff();
    if (out.residual < tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace qvcbi
