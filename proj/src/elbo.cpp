#include "qvcbi/elbo.hpp"

#include "qvcbi/parallel.hpp"

#include <algorithm>
#include <numbers>

namespace qvcbi {

Index PosteriorField::size() const {
  for (const auto& m : q)
    if (m.cols() > 0) return m.cols();
  return 0;
}

PosteriorField PosteriorField::uniform(const CausalNetwork& net, Index locations) {
  PosteriorField p;
  for (HazardKind h : net.latent_nodes()) {
    const int n = net.num_states(h);
    p.q[idx(h)] = Matrix::Constant(n, locations, 1.0 / n);
  }
  return p;
}

void PosteriorField::check_normalized(const CausalNetwork& net, double tol) const {
  for (HazardKind h : net.latent_nodes()) {
    const Matrix& m = q[idx(h)];
    for (Index l = 0; l < m.cols(); ++l) {
      const auto col = m.col(l);
      if (!col.allFinite()) throw Error("posterior contains NaN at location " + std::to_string(l));
      if (std::abs(col.sum() - 1.0) > tol || col.minCoeff() < -tol || col.maxCoeff() > 1.0 + tol)
        throw Error("posterior of " + std::string(to_string(h)) + " not normalized at location " +
                    std::to_string(l));
    }
  }
}

VariationalParams VariationalParams::constant(const CausalNetwork& net, double value) {
  VariationalParams v;
  for (HazardKind h : net.latent_nodes()) v.xi[idx(h)] = Vector::Constant(net.num_states(h), value);
  return v;
}

LocalState local_state(const CausalNetwork& net, const Evidence& ev, const PosteriorField& post, Index l) {
  LocalState st;
  for (HazardKind h : net.latent_nodes()) {
    const int i = idx(h);
    st.q[i] = post.q[i].col(l);
    if (net.has_prior(h) && ev.prior_offset[i].cols() > 0)
      st.offset[i] = ev.prior_offset[i].col(l);
    else
      st.offset[i] = StateVector::Zero(net.num_states(h));
  }
  st.log_y = ev.log_y(l);
  st.u = ev.u.size() > 0 ? ev.u(l) : 0.0;
  return st;
}

double entropy(const StateVector& q) {
  double h = 0.0;
  for (Index m = 0; m < q.size(); ++m)
    if (q(m) > 0.0) h -= q(m) * std::log(q(m));
  return h;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2 pi)

struct NodeMoments {
  StateVector mean;  // E(z)
  StateMatrix cov;   // Cov(z)
};

NodeMoments node_moments(const CausalNetwork& net, const WeightSet& w, HazardKind node, const LocalState& st,
                         const std::array<double, kHazardCount>& e1, const std::array<double, kHazardCount>& var) {
  const int i = idx(node);
  const auto& nw = w.node[i];
  const int n = net.num_states(node);
  NodeMoments out;
  out.mean = nw.leak;
  if (net.has_prior(node)) out.mean += nw.prior * st.offset[i];
  out.cov = StateMatrix::Zero(n, n);
  out.cov.diagonal() = nw.noise.cwiseAbs2();
  for (HazardKind k : net.parents(node)) {
    const Vector& wk = nw.parent[idx(k)];
    out.mean += wk * e1[idx(k)];
    out.cov.noalias() += var[idx(k)] * wk * wk.transpose();
  }
  return out;
}

}  // namespace

MomentCache expected_moments(const CausalNetwork& net, const WeightSet& w, HazardKind node, const LocalState& st,
                             const StateVector& xi) {
  std::array<double, kHazardCount> e1{}, var{};
  for (HazardKind h : net.latent_nodes()) {
    const StateVector& q = st.q[idx(h)];
    double m1 = 0.0, m2 = 0.0;
    for (Index m = 1; m < q.size(); ++m) {
      const double s = static_cast<double>(m);
      m1 += s * q(m);
      m2 += s * s * q(m);
    }
    e1[idx(h)] = m1;
    var[idx(h)] = m2 - m1 * m1;
  }
  const NodeMoments nm = node_moments(net, w, node, st, e1, var);
  MomentCache mc;
  mc.ez = nm.mean;
  mc.ezz = nm.cov + nm.mean * nm.mean.transpose();
  mc.ealpha2 = expected_alpha_sq(mc, xi);
  return mc;
}

double local_elbo(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const LocalState& st,
                  unsigned flags, LocalGradient* grad, WeightSet* dw, LatentWeighting weighting) {
  const bool gq = (flags & kGradPosterior) != 0;
  const bool gw = (flags & kGradWeights) != 0;
  const bool gx = (flags & kGradXi) != 0;
  const bool any = gq || gw || gx;

  std::array<double, kHazardCount> e1{}, e2{}, var{}, de1{}, de2{}, dvar{};
  for (HazardKind h : net.latent_nodes()) {
    const int i = idx(h);
    const StateVector& q = st.q[i];
    for (Index m = 1; m < q.size(); ++m) {
      const double s = static_cast<double>(m);
      e1[i] += s * q(m);
      e2[i] += s * s * q(m);
    }
    var[i] = e2[i] - e1[i] * e1[i];
    if (gq) grad->dq[i] = StateVector::Zero(q.size());
    if (gx) grad->dxi[i] = StateVector::Zero(q.size());
  }

  // Observation term: E_q[log N(ln y; mu, s^2)] - ln y.
  double value = 0.0;
  {
    const double s = w.obs_noise;
    const double inv2 = 1.0 / (2.0 * s * s);
    double r = st.log_y - w.obs_leak;
    double spread = 0.0;
    std::array<double, kHazardCount> b{};
    for (HazardKind k : net.observation_parents()) {
      const int i = idx(k);
      const Vector& wo = w.obs[i];
      const StateVector& q = st.q[i];
      double bk = 0.0, dk = 0.0;
      for (Index m = 1; m < q.size(); ++m) {
        const double c = wo(m) * static_cast<double>(m);
        bk += c * q(m);
        dk += c * c * q(m);
      }
      b[i] = bk;
      r -= bk;
      spread += dk - bk * bk;
    }
    const double sq = r * r + spread;
    value += -st.log_y - std::log(std::abs(s)) - 0.5 * kLog2Pi - sq * inv2;
    if (gq || gw) {
      const double dsq = -inv2;
      const double dr = dsq * 2.0 * r;
      if (gw) {
        dw->obs_leak -= dr;
        dw->obs_noise += -1.0 / s + sq / (s * s * s);
      }
      for (HazardKind k : net.observation_parents()) {
        const int i = idx(k);
        const Vector& wo = w.obs[i];
        const StateVector& q = st.q[i];
        const double db = -dr - 2.0 * dsq * b[i];
        for (Index m = 1; m < q.size(); ++m) {
          const double sm = static_cast<double>(m);
          const double c = wo(m) * sm;
          if (gq) grad->dq[i](m) += db * c + dsq * c * c;
          if (gw) dw->obs[i](m) += db * sm * q(m) + dsq * 2.0 * wo(m) * sm * sm * q(m);
        }
      }
    }
  }

  // Latent terms: sum_m omega_m E(z_m) - Omega E[bound].
  for (HazardKind h : net.latent_nodes()) {
    const int i = idx(h);
    const int n = net.num_states(h);
    const double mm1 = n - 2.0;  // M - 1
    const NodeMoments nm = node_moments(net, w, h, st, e1, var);
    const StateVector& a = nm.mean;
    const StateMatrix& cov = nm.cov;
    const StateVector& x = xi.xi[i];
    const StateVector lam = lambda_vector(x);
    const double total = lam.sum();
    const double beta = (4.0 * lam.dot(a) + mm1) / (4.0 * total);
    const StateVector cov_lam = cov * lam;
    const double quad = lam.dot(cov_lam);
    double bound = -total * beta * beta - quad / total;
    for (Index m = 0; m < n; ++m)
      bound += lam(m) * (a(m) * a(m) + cov(m, m) - x(m) * x(m)) + 0.5 * (a(m) - x(m)) + softplus(x(m));

    const StateVector& q = st.q[i];
    StateVector omega = q;
    double scale = 1.0;
    if (weighting == LatentWeighting::state_scaled) {
      for (Index m = 0; m < n; ++m) omega(m) = static_cast<double>(m) * q(m);
      scale = omega.sum();
    }
    value += omega.dot(a) - scale * bound;
    if (!any) continue;

    if (gq) {
      if (weighting == LatentWeighting::probability) {
        grad->dq[i] += a;
      } else {
        for (Index m = 0; m < n; ++m) grad->dq[i](m) += static_cast<double>(m) * (a(m) - bound);
      }
    }
    if (gx) {
      for (Index m = 0; m < n; ++m) {
        const double d = a(m) - beta;
        const double dbound_dlam = d * d + cov(m, m) - x(m) * x(m) - 2.0 * cov_lam(m) / total + quad / (total * total);
        const double dbound_dxi = lambda_xi_derivative(x(m)) * dbound_dlam - 2.0 * lam(m) * x(m) - 0.5 + sigmoid(x(m));
        grad->dxi[i](m) -= scale * dbound_dxi;
      }
    }
    if (!(gq || gw)) continue;
    // d bound / d a = 2 lambda (a - beta) + 1/2;  d bound / d Cov = diag(lambda) - lambda lambda^T / Lambda.
    const StateVector da = omega - scale * (2.0 * lam.cwiseProduct(a - StateVector::Constant(n, beta)) +
                                            StateVector::Constant(n, 0.5));
    StateMatrix dcov = (lam * lam.transpose()) * (scale / total);
    dcov.diagonal() -= scale * lam;
    if (gw) {
      auto& g = dw->node[i];
      const auto& nw = w.node[i];
      g.leak.tail(n - 1) += da.tail(n - 1);
      if (net.has_prior(h)) g.prior += da.dot(st.offset[i]);
      for (Index m = 1; m < n; ++m) g.noise(m) += dcov(m, m) * 2.0 * nw.noise(m);
    }
    for (HazardKind k : net.parents(h)) {
      const int pk = idx(k);
      const Vector& wk = w.node[i].parent[pk];
      if (gw) {
        StateVector g = da * e1[pk] + 2.0 * var[pk] * (dcov * wk);
        dw->node[i].parent[pk].tail(n - 1) += g.tail(n - 1);
      }
      de1[pk] += da.dot(wk);
      dvar[pk] += wk.dot(dcov * wk);
    }
  }

  // XOR term: E_q[log N(u; x_a x_b, sigma^2)].
  if (net.has_xor()) {
    const auto [ha, hb] = net.xor_parents();
    const int ia = idx(ha), ib = idx(hb);
    const double sig = w.sigma_xor;
    const double inv2 = 1.0 / (2.0 * sig * sig);
    const double u = st.u;
    value += -0.5 * (kLog2Pi + 2.0 * std::log(sig)) - (u * u - 2.0 * u * e1[ia] * e1[ib] + e2[ia] * e2[ib]) * inv2;
    if (gq) {
      de1[ia] += 2.0 * u * e1[ib] * inv2;
      de1[ib] += 2.0 * u * e1[ia] * inv2;
      de2[ia] -= e2[ib] * inv2;
      de2[ib] -= e2[ia] * inv2;
    }
  }

  for (HazardKind h : net.latent_nodes()) value += entropy(st.q[idx(h)]);

  if (gq) {
    for (HazardKind h : net.latent_nodes()) {
      const int i = idx(h);
      const double g1 = de1[i] - 2.0 * e1[i] * dvar[i];
      const double g2 = de2[i] + dvar[i];
      for (Index m = 1; m < grad->dq[i].size(); ++m) {
        const double s = static_cast<double>(m);
        grad->dq[i](m) += s * g1 + s * s * g2;
      }
    }
  }
  return value;
}

double pairwise_sum(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (values.size() == 1) return values[0];
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double elbo(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
            const PosteriorField& post, std::span<const Index> batch, const ElboOptions& opts) {
  if (batch.empty()) throw Error("elbo: empty batch");
  std::vector<Index> sorted(batch.begin(), batch.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> terms(sorted.size());
  parallel_for(sorted.size(), opts.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t j = begin; j < end; ++j) {
      const LocalState st = local_state(net, ev, post, sorted[j]);
      for (HazardKind h : net.latent_nodes())
        if (!st.q[idx(h)].allFinite())
          throw Error("posterior contains NaN at location " + std::to_string(sorted[j]));
      terms[j] = local_elbo(net, w, xi, st, kValueOnly, nullptr, nullptr, opts.weighting);
    }
  });
  return pairwise_sum(terms);
}

}  // namespace qvcbi
