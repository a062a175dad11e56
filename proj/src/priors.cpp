#include "qvcbi/priors.hpp"

#include "qvcbi/bounds.hpp"

#include <json.hpp>

#include <fstream>

namespace qvcbi {

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

Vector difference_exceedances(const std::vector<double>& exceed, bool* clipped) {
  const std::size_t m = exceed.size();
  Vector p(static_cast<Index>(m + 1));
  p(0) = 1.0 - exceed[0];
  for (std::size_t d = 1; d < m; ++d) p(static_cast<Index>(d)) = exceed[d - 1] - exceed[d];
  p(static_cast<Index>(m)) = exceed[m - 1];
  const bool negative = (p.array() < 0.0).any();
  if (clipped) *clipped = negative;
  if (negative) {
    p = p.cwiseMax(0.0);
    p /= p.sum();
  }
  return p;
}

}  // namespace

void FragilityCurve::validate() const {
  if (median.empty()) throw ConfigError("fragility curve has no damage states");
  if (median.size() != dispersion.size())
    throw ConfigError("fragility curve: " + std::to_string(median.size()) + " medians but " +
                      std::to_string(dispersion.size()) + " dispersions");
  for (std::size_t d = 0; d < median.size(); ++d) {
    if (!(median[d] > 0.0)) throw ConfigError("fragility curve: median must be positive");
    if (!(dispersion[d] > 0.0)) throw ConfigError("fragility curve: dispersion must be positive");
    if (d > 0 && !(median[d] > median[d - 1]))
      throw ConfigError("fragility curve: medians must be strictly increasing");
  }
}

FragilityCurve read_fragility_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open fragility curve file " + path.string());
  FragilityCurve curve;
  try {
    const nlohmann::json doc = nlohmann::json::parse(in);
    for (const auto& [key, _] : doc.items())
      if (key != "median" && key != "dispersion")
        throw ConfigError("fragility curve " + path.string() + ": unknown key '" + key + "'");
    curve.median = doc.at("median").get<std::vector<double>>();
    curve.dispersion = doc.at("dispersion").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("fragility curve " + path.string() + ": " + e.what());
  }
  curve.validate();
  return curve;
}

void write_fragility_curve(const FragilityCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"median", curve.median}, {"dispersion", curve.dispersion}}.dump(2) << '\n';
}

Vector hazus_state_probs(double pga, const FragilityCurve& curve, bool* clipped) {
  curve.validate();
  if (!(pga >= 0.0)) throw DataError("PGA must be nonnegative");
  std::vector<double> exceed(curve.median.size(), 0.0);
  if (pga > 0.0)
    for (std::size_t d = 0; d < exceed.size(); ++d)
      exceed[d] = normal_cdf(std::log(pga / curve.median[d]) / curve.dispersion[d]);
  return difference_exceedances(exceed, clipped);
}

PagerStub PagerStub::flat(int max_state) {
  PagerStub s;
  for (int d = 1; d <= max_state; ++d) {
    const double tail = static_cast<double>(max_state + 1 - d) / (max_state + 1);
    s.intercept.push_back(std::log(tail / (1.0 - tail)));
    s.slope.push_back(0.0);
  }
  return s;
}

PagerStub PagerStub::weak(int max_state) {
  PagerStub s = flat(max_state);
  s.slope.assign(static_cast<std::size_t>(max_state), 0.25);
  return s;
}

Vector pager_stub_probs(double pga, const PagerStub& stub, bool* clipped) {
  if (stub.intercept.empty() || stub.intercept.size() != stub.slope.size())
    throw ConfigError("PAGER stub needs one intercept and one slope per damage state");
  if (!(pga >= 0.0)) throw DataError("PGA must be nonnegative");
  std::vector<double> exceed(stub.intercept.size(), 0.0);
  if (pga > 0.0)
    for (std::size_t d = 0; d < exceed.size(); ++d)
      exceed[d] = sigmoid(stub.intercept[d] + stub.slope[d] * std::log(pga));
  return difference_exceedances(exceed, clipped);
}

PriorMode prior_mode_from_string(std::string_view name) {
  if (name == "hazus") return PriorMode::hazus;
  if (name == "pager") return PriorMode::pager;
  if (name == "combined") return PriorMode::combined;
  throw ConfigError("unknown prior mode '" + std::string(name) + "' (expected hazus, pager or combined)");
}

std::string_view to_string(PriorMode mode) {
  switch (mode) {
    case PriorMode::hazus: return "hazus";
    case PriorMode::pager: return "pager";
    case PriorMode::combined: return "combined";
  }
  return "?";
}

Vector combine_priors(const Vector& p_hazus, const Vector& p_pager, PriorMode mode, double gamma) {
  if (p_hazus.size() != p_pager.size())
    throw ConfigError("combine_priors: vectors of length " + std::to_string(p_hazus.size()) + " and " +
                      std::to_string(p_pager.size()));
  switch (mode) {
    case PriorMode::hazus: return p_hazus;
    case PriorMode::pager: return p_pager;
    case PriorMode::combined: {
      if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("combined prior weight gamma must lie in [0, 1]");
      if (gamma == 1.0) return p_hazus;
      const Vector mix = gamma * p_hazus + (1.0 - gamma) * p_pager;
      return mix / mix.sum();
    }
  }
  throw ConfigError("bad prior mode");
}

PriorField build_prior_field(const CausalNetwork& net, const Vector& pga, const Vector& p_ls, const Vector& p_lf,
                             const PriorOptions& opts, Index* clipped_count) {
  PriorField field;
  Index clipped_total = 0;
  const Index n = pga.size();
  if (net.has_prior(HazardKind::BD)) {
    const int states = net.num_states(HazardKind::BD);
    const bool need_hazus = opts.mode != PriorMode::pager;
    const bool need_pager = opts.mode != PriorMode::hazus;
    if (need_hazus && opts.curve.max_state() + 1 != states)
      throw ConfigError("fragility curve has " + std::to_string(opts.curve.max_state()) +
                        " damage states but BD has " + std::to_string(states - 1));
    if (need_pager && opts.pager.max_state() + 1 != states)
      throw ConfigError("PAGER stub has " + std::to_string(opts.pager.max_state()) + " damage states but BD has " +
                        std::to_string(states - 1));
    Matrix& p = field.p[idx(HazardKind::BD)];
    p.resize(states, n);
    for (Index l = 0; l < n; ++l) {
      bool c1 = false, c2 = false;
      const Vector h = need_hazus ? hazus_state_probs(pga(l), opts.curve, &c1) : Vector();
      const Vector g = need_pager ? pager_stub_probs(pga(l), opts.pager, &c2) : Vector();
      p.col(l) = combine_priors(need_hazus ? h : g, need_pager ? g : h, opts.mode, opts.gamma);
      clipped_total += (c1 || c2) ? 1 : 0;
    }
  }
  auto binary = [&](HazardKind h, const Vector& prob) {
    if (!net.has_prior(h)) return;
    if (net.num_states(h) != 2)
      throw ConfigError(std::string(to_string(h)) + " prior grids are binary but the node has " +
                        std::to_string(net.num_states(h)) + " states");
    if (prob.size() != n) throw DataError(std::string(to_string(h)) + " prior grid size mismatch");
    Matrix& p = field.p[idx(h)];
    p.resize(2, n);
    for (Index l = 0; l < n; ++l) {
      if (!(prob(l) >= 0.0 && prob(l) <= 1.0))
        throw DataError(std::string(to_string(h)) + " prior probability outside [0, 1] at location " +
                        std::to_string(l));
      p(0, l) = 1.0 - prob(l);
      p(1, l) = prob(l);
    }
  };
  binary(HazardKind::LS, p_ls);
  binary(HazardKind::LF, p_lf);
  if (clipped_count) *clipped_count = clipped_total;
  return field;
}

std::array<Matrix, kHazardCount> attach_priors(const CausalNetwork& net, const PriorField& field, Index locations) {
  std::array<Matrix, kHazardCount> out;
  for (HazardKind h : net.latent_nodes()) {
    if (!net.has_prior(h)) continue;
    const Matrix& p = field.p[idx(h)];
    if (p.cols() != locations)
      throw ConfigError("prior for " + std::string(to_string(h)) + " covers " + std::to_string(p.cols()) +
                        " locations, expected " + std::to_string(locations));
    if (p.rows() != net.num_states(h))
      throw ConfigError("prior for " + std::string(to_string(h)) + " has the wrong number of states");
    out[idx(h)].resize(p.rows(), locations);
    for (Index l = 0; l < locations; ++l) out[idx(h)].col(l) = prior_log_odds(p.col(l));
  }
  return out;
}

}  // namespace qvcbi
