#include "qvcbi/graph_model.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace qvcbi {

std::string_view to_string(HazardKind h) {
  switch (h) {
    case HazardKind::LS: return "LS";
    case HazardKind::LF: return "LF";
    case HazardKind::BD: return "BD";
  }
  return "?";
}

HazardKind hazard_from_string(std::string_view name) {
  if (name == "LS") return HazardKind::LS;
  if (name == "LF") return HazardKind::LF;
  if (name == "BD") return HazardKind::BD;
  throw ConfigError("unknown hazard '" + std::string(name) + "' (expected LS, LF or BD)");
}

NetworkSpec NetworkSpec::full(int m_bd, int m_ls, int m_lf, bool with_xor, bool with_priors) {
  NetworkSpec spec;
  spec.nodes = {"leak", "LS", "LF", "BD", "y"};
  spec.max_state = {m_ls, m_lf, m_bd};
  spec.edges = {{"LS", "BD"}, {"LF", "BD"}, {"LS", "y"}, {"LF", "y"}, {"BD", "y"}};
  if (with_xor) {
    spec.nodes.emplace_back("u");
    spec.edges.emplace_back("LS", "u");
    spec.edges.emplace_back("LF", "u");
  }
  if (with_priors) spec.priors = {HazardKind::LS, HazardKind::LF, HazardKind::BD};
  return spec;
}

namespace {

bool is_hazard_name(std::string_view n) { return n == "LS" || n == "LF" || n == "BD"; }

}  // namespace

CausalNetwork build_network(const NetworkSpec& spec) {
  CausalNetwork net;
  net.spec_ = spec;

  std::set<std::string> declared;
  for (const auto& n : spec.nodes) {
    if (!is_hazard_name(n) && n != kLeakNode && n != kXorNode && n != kObservationNode)
      throw ConfigError("unknown node '" + n + "'");
    if (!declared.insert(n).second) throw ConfigError("node '" + n + "' declared twice");
  }
  declared.insert(std::string(kLeakNode));
  if (!declared.count(std::string(kObservationNode))) throw ConfigError("missing observation node 'y'");

  for (HazardKind h : kAllHazards) {
    if (!declared.count(std::string(to_string(h)))) continue;
    const int m = spec.max_state[idx(h)];
    if (m < 1) throw ConfigError("node " + std::string(to_string(h)) + " needs M >= 1");
    if (m + 1 > kMaxStates) throw ConfigError("node " + std::string(to_string(h)) + " has too many states");
    net.present_[idx(h)] = true;
    net.max_state_[idx(h)] = m;
  }

  // Adjacency over all declared nodes, used for the cycle check.
  std::map<std::string, std::vector<std::string>> succ;
  std::vector<std::string> xor_parents;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [from, to] : spec.edges) {
    if (!declared.count(from)) throw ConfigError("edge from undeclared node '" + from + "'");
    if (!declared.count(to)) throw ConfigError("edge to undeclared node '" + to + "'");
    if (from == to) throw ConfigError("cycle detected: self loop on '" + from + "'");
    if (!seen.insert({from, to}).second) throw ConfigError("duplicate edge " + from + " -> " + to);
    succ[from].push_back(to);
    if (to == kLeakNode) throw ConfigError("the leak node cannot have parents");
    if (from == kLeakNode) continue;  // implicit anyway
    if (to == kXorNode) {
      if (!is_hazard_name(from)) throw ConfigError("XOR parents must be latent hazards");
      xor_parents.push_back(from);
    } else if (to == kObservationNode) {
      if (!is_hazard_name(from)) throw ConfigError("observation parents must be latent hazards");
      net.y_parents_.push_back(hazard_from_string(from));
    } else {
      if (!is_hazard_name(from)) throw ConfigError("node '" + from + "' cannot have children");
      const HazardKind p = hazard_from_string(from), c = hazard_from_string(to);
      net.parents_[idx(c)].push_back(p);
      net.children_[idx(p)].push_back(c);
    }
  }

  // Kahn's algorithm over every declared node.
  std::map<std::string, int> indeg;
  for (const auto& n : declared) indeg[n] = 0;
  for (const auto& [from, tos] : succ)
    for (const auto& t : tos) ++indeg[t];
  std::vector<std::string> ready;
  for (const auto& [n, d] : indeg)
    if (d == 0) ready.push_back(n);
  std::size_t visited = 0;
  while (!ready.empty()) {
    const std::string n = ready.back();
    ready.pop_back();
    ++visited;
    if (is_hazard_name(n)) net.topo_.push_back(hazard_from_string(n));
    for (const auto& t : succ[n])
      if (--indeg[t] == 0) ready.push_back(t);
  }
  if (visited != declared.size()) throw ConfigError("cycle detected in network");

  if (declared.count(std::string(kXorNode))) {
    if (xor_parents.size() != 2)
      throw ConfigError("XOR node needs exactly 2 parents, got " + std::to_string(xor_parents.size()));
    net.xor_parents_ = std::make_pair(hazard_from_string(xor_parents[0]), hazard_from_string(xor_parents[1]));
  }
  if (!succ[std::string(kObservationNode)].empty() || !succ[std::string(kXorNode)].empty())
    throw ConfigError("observed nodes cannot have children");

  for (HazardKind h : spec.priors) {
    if (!net.has(h)) throw ConfigError("prior attached to absent node " + std::string(to_string(h)));
    net.prior_[idx(h)] = true;
  }
  for (HazardKind h : kAllHazards) {
    if (net.has(h)) net.latent_.push_back(h);
    std::sort(net.parents_[idx(h)].begin(), net.parents_[idx(h)].end());
    std::sort(net.children_[idx(h)].begin(), net.children_[idx(h)].end());
  }
  std::sort(net.y_parents_.begin(), net.y_parents_.end());
  return net;
}

std::vector<HazardKind> CausalNetwork::spouses(HazardKind i, HazardKind child) const {
  std::vector<HazardKind> out;
  for (HazardKind p : parents(child))
    if (p != i) out.push_back(p);
  return out;
}

bool CausalNetwork::observes(HazardKind h) const {
  return std::find(y_parents_.begin(), y_parents_.end(), h) != y_parents_.end();
}

std::pair<HazardKind, HazardKind> CausalNetwork::xor_parents() const {
  if (!xor_parents_) throw ConfigError("network has no XOR node");
  return *xor_parents_;
}

bool CausalNetwork::in_xor(HazardKind h) const {
  return xor_parents_ && (xor_parents_->first == h || xor_parents_->second == h);
}

int CausalNetwork::node_count() const {
  int n = static_cast<int>(latent_.size()) + 2;  // leak + y
  if (has_xor()) ++n;
  for (bool p : prior_) n += p ? 1 : 0;
  return n;
}

WeightSet WeightSet::zeros(const CausalNetwork& net) {
  WeightSet w;
  for (HazardKind i : net.latent_nodes()) {
    auto& nw = w.node[idx(i)];
    const int n = net.num_states(i);
    nw.leak = Vector::Zero(n);
    nw.noise = Vector::Zero(n);
    for (HazardKind k : net.parents(i)) nw.parent[idx(k)] = Vector::Zero(n);
    nw.prior = 1.0;
  }
  for (HazardKind k : net.observation_parents()) w.obs[idx(k)] = Vector::Zero(net.num_states(k));
  return w;
}

WeightSet WeightSet::zeros_like() const {
  WeightSet z = *this;
  for (auto& nw : z.node) {
    nw.leak.setZero();
    nw.noise.setZero();
    for (auto& p : nw.parent) p.setZero();
    nw.prior = 0.0;
  }
  for (auto& o : z.obs) o.setZero();
  z.obs_leak = z.obs_noise = z.sigma_xor = 0.0;
  return z;
}

WeightSet& WeightSet::operator+=(const WeightSet& other) {
  for (int i = 0; i < kHazardCount; ++i) {
    node[i].leak += other.node[i].leak;
    node[i].noise += other.node[i].noise;
    for (int k = 0; k < kHazardCount; ++k) node[i].parent[k] += other.node[i].parent[k];
    node[i].prior += other.node[i].prior;
    obs[i] += other.obs[i];
  }
  obs_leak += other.obs_leak;
  obs_noise += other.obs_noise;
  sigma_xor += other.sigma_xor;
  return *this;
}

WeightSet& WeightSet::operator*=(double s) {
  for (int i = 0; i < kHazardCount; ++i) {
    node[i].leak *= s;
    node[i].noise *= s;
    for (auto& p : node[i].parent) p *= s;
    node[i].prior *= s;
    obs[i] *= s;
  }
  obs_leak *= s;
  obs_noise *= s;
  sigma_xor *= s;
  return *this;
}

void validate_weights(const CausalNetwork& net, const WeightSet& w) {
  auto check = [](const Vector& v, Index n, const std::string& what) {
    if (v.size() != n) throw ConfigError(what + ": expected " + std::to_string(n) + " entries");
    if (n > 0 && v(0) != 0.0) throw ConfigError(what + ": state-0 entry must be zero");
    if (!v.allFinite()) throw ConfigError(what + ": non-finite entry");
  };
  for (HazardKind i : kAllHazards) {
    const auto& nw = w.node[idx(i)];
    const std::string name(to_string(i));
    const Index n = net.has(i) ? net.num_states(i) : 0;
    check(nw.leak, n, "leak weights of " + name);
    check(nw.noise, n, "noise weights of " + name);
    for (HazardKind k : kAllHazards) {
      const bool is_parent = net.has(i) && std::find(net.parents(i).begin(), net.parents(i).end(), k) !=
                                               net.parents(i).end();
      check(nw.parent[idx(k)], is_parent ? n : 0, "parent weights " + std::string(to_string(k)) + "->" + name);
    }
    check(w.obs[idx(i)], net.observes(i) ? net.num_states(i) : 0, "observation weights of " + name);
  }
  if (w.obs_noise == 0.0 || !std::isfinite(w.obs_noise)) throw ConfigError("obs_noise must be nonzero");
  if (!(w.sigma_xor >= 1e-3)) throw ConfigError("sigma_xor must be >= 1e-3");
}

StateVector activation_logits(const CausalNetwork& net, HazardKind node, const StateAssignment& parents,
                              const StateVector& eps, const WeightSet& w, const StateVector* prior_offset) {
  const auto& nw = w.node[idx(node)];
  const int n = net.num_states(node);
  StateVector z = nw.leak.head(n);
  for (HazardKind k : net.parents(node)) {
    const int xk = parents[idx(k)];
    if (xk < 0) throw ConfigError("missing state of parent " + std::string(to_string(k)));
    z += nw.parent[idx(k)] * static_cast<double>(xk);
  }
  z += nw.noise.cwiseProduct(eps);
  if (prior_offset) z += nw.prior * *prior_offset;
  z(0) = 0.0;
  return z;
}

StateVector activation_logits(const CausalNetwork& net, HazardKind node, const StateAssignment& parents,
                              double eps, const WeightSet& w) {
  return activation_logits(net, node, parents, StateVector::Constant(net.num_states(node), eps), w);
}

double observation_mean(const CausalNetwork& net, const StateAssignment& parents, const WeightSet& w) {
  double mu = w.obs_leak;
  for (HazardKind k : net.observation_parents()) {
    const int xk = parents[idx(k)];
    if (xk < 0) throw ConfigError("missing state of observation parent " + std::string(to_string(k)));
    mu += w.obs[idx(k)](xk) * xk;
  }
  return mu;
}

double observation_logpdf(double y, const CausalNetwork& net, const StateAssignment& parents,
                          const WeightSet& w) {
  if (!(y > 0.0)) throw DataError("observation must be positive, got " + std::to_string(y));
  const double ly = std::log(y);
  const double r = ly - observation_mean(net, parents, w);
  const double s = w.obs_noise;
  return -ly - std::log(std::abs(s)) - 0.5 * std::log(2.0 * std::numbers::pi) - r * r / (2.0 * s * s);
}

double xor_logpdf(double u, int parent_a_state, int parent_b_state, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  const double r = u - static_cast<double>(parent_a_state) * parent_b_state;
  return -std::log(std::sqrt(2.0 * std::numbers::pi) * sigma) - r * r / (2.0 * sigma * sigma);
}

}  // namespace qvcbi
