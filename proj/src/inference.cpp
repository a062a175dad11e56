#include "qvcbi/inference.hpp"

#include "qvcbi/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

namespace qvcbi {

void FitConfig::validate(Index active) const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (e_step_sweeps < 1) throw ConfigError("e_step_sweeps must be >= 1");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("lambda1 and lambda2 must be >= 0");
  if (!(sigma_xor >= 1e-3)) throw ConfigError("sigma_xor must be >= 1e-3");
  if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(xi_learning_rate > 0.0)) throw ConfigError("xi_learning_rate must be positive");
  if (audit_size < 1) throw ConfigError("audit_size must be >= 1");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (!(init_min_obs_weight >= 0.0)) throw ConfigError("init_min_obs_weight must be >= 0");
  if (!(init_max_obs_noise > 0.0)) throw ConfigError("init_max_obs_noise must be positive");
  if (!full_batch && active > 0 && batch_size > active)
    throw ConfigError("batch_size (" + std::to_string(batch_size) + ") exceeds the number of active locations (" +
                      std::to_string(active) + ")");
}

// ---------------------------------------------------------------------------------------------
// Parameter layout

std::vector<ParamEntry> gradient_entries(const CausalNetwork& net) {
  std::vector<ParamEntry> out;
  for (HazardKind i : net.latent_nodes()) {
    const int n = net.num_states(i);
    for (int m = 1; m < n; ++m) out.push_back({ParamGroup::leak, i, i, m});
    for (int m = 1; m < n; ++m) out.push_back({ParamGroup::noise, i, i, m});
    for (HazardKind k : net.parents(i))
      for (int m = 1; m < n; ++m) out.push_back({ParamGroup::parent, i, k, m});
    if (net.has_prior(i)) out.push_back({ParamGroup::prior, i, i, 0});
  }
  for (HazardKind k : net.observation_parents())
    for (int m = 1; m < net.num_states(k); ++m) out.push_back({ParamGroup::obs, k, k, m});
  out.push_back({ParamGroup::obs_leak});
  out.push_back({ParamGroup::obs_noise});
  return out;
}

std::vector<ParamEntry> free_entries(const CausalNetwork& net) {
  auto all = gradient_entries(net);
  std::erase_if(all, [](const ParamEntry& e) { return e.group == ParamGroup::prior && e.node == HazardKind::BD; });
  return all;
}

double& entry_ref(WeightSet& w, const ParamEntry& e) {
  auto& nw = w.node[idx(e.node)];
  switch (e.group) {
    case ParamGroup::leak: return nw.leak(e.state);
    case ParamGroup::noise: return nw.noise(e.state);
    case ParamGroup::parent: return nw.parent[idx(e.parent)](e.state);
    case ParamGroup::prior: return nw.prior;
    case ParamGroup::obs: return w.obs[idx(e.node)](e.state);
    case ParamGroup::obs_leak: return w.obs_leak;
    case ParamGroup::obs_noise: return w.obs_noise;
  }
  throw Error("bad parameter entry");
}

double entry_value(const WeightSet& w, const ParamEntry& e) { return entry_ref(const_cast<WeightSet&>(w), e); }

std::string entry_name(const ParamEntry& e) {
  const std::string node(to_string(e.node));
  const std::string m = std::to_string(e.state);
  switch (e.group) {
    case ParamGroup::leak: return "leak[" + node + "," + m + "]";
    case ParamGroup::noise: return "noise[" + node + "," + m + "]";
    case ParamGroup::parent: return "parent[" + std::string(to_string(e.parent)) + "->" + node + "," + m + "]";
    case ParamGroup::prior: return "prior[" + node + "]";
    case ParamGroup::obs: return "obs[" + node + "->y," + m + "]";
    case ParamGroup::obs_leak: return "obs_leak";
    case ParamGroup::obs_noise: return "obs_noise";
  }
  return "?";
}

Vector pack(const WeightSet& w, std::span<const ParamEntry> entries) {
  Vector v(static_cast<Index>(entries.size()));
  for (std::size_t j = 0; j < entries.size(); ++j) v(static_cast<Index>(j)) = entry_value(w, entries[j]);
  return v;
}

void unpack(const Vector& v, std::span<const ParamEntry> entries, WeightSet& w) {
  for (std::size_t j = 0; j < entries.size(); ++j) entry_ref(w, entries[j]) = v(static_cast<Index>(j));
}

WeightSet initial_weights(const CausalNetwork& net, std::uint64_t seed, double sigma_xor) {
  WeightSet w = WeightSet::zeros(net);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x77u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 0.01);
  for (const ParamEntry& e : free_entries(net)) {
    if (e.group == ParamGroup::prior || e.group == ParamGroup::obs_noise) continue;
    entry_ref(w, e) = normal(rng);
  }
  w.obs_noise = 1.0;
  w.sigma_xor = sigma_xor;
  return w;
}

WeightSet fit_observation_model(const CausalNetwork& net, const WeightSet& w, const Evidence& ev,
                                const PosteriorField& post, std::span<const Index> locations) {
  if (locations.empty()) return w;
  // Features: a constant, then the indicator of every nonzero state of every observed parent.
  struct Block {
    HazardKind node;
    Index offset;
    int states;
  };
  std::vector<Block> blocks;
  Index dim = 1;
  for (HazardKind k : net.observation_parents()) {
    blocks.push_back({k, dim, net.max_state(k)});
    dim += net.max_state(k);
  }
  Matrix a = Matrix::Zero(dim, dim);
  Vector b = Vector::Zero(dim);
  Vector mean(dim);
  for (Index l : locations) {
    mean(0) = 1.0;
    for (const Block& bl : blocks) mean.segment(bl.offset, bl.states) = post.q[idx(bl.node)].col(l).tail(bl.states);
    Matrix outer = mean * mean.transpose();
    for (const Block& bl : blocks) {
      outer.block(bl.offset, bl.offset, bl.states, bl.states).setZero();
      outer.block(bl.offset, bl.offset, bl.states, bl.states).diagonal() = mean.segment(bl.offset, bl.states);
    }
    a += outer;
    b += ev.log_y(l) * mean;
  }
  const double ridge = 1e-9 * std::max(a.diagonal().maxCoeff(), 1.0);
  const Vector theta = (a + ridge * Matrix::Identity(dim, dim)).ldlt().solve(b);

  WeightSet out = w;
  out.obs_leak = theta(0);
  for (const Block& bl : blocks)
    for (int m = 1; m <= bl.states; ++m) out.obs[idx(bl.node)](m) = theta(bl.offset + m - 1) / m;

  // Expected squared residual E[(ln y - mean)^2] = (ln y - E mean)^2 + Var(mean).
  double sq = 0.0;
  for (Index l : locations) {
    double mu = theta(0), var = 0.0;
    for (const Block& bl : blocks) {
      const Vector q = post.q[idx(bl.node)].col(l).tail(bl.states);
      const Vector t = theta.segment(bl.offset, bl.states);
      const double e = q.dot(t);
      mu += e;
      var += q.dot(t.cwiseAbs2()) - e * e;
    }
    sq += (ev.log_y(l) - mu) * (ev.log_y(l) - mu) + var;
  }
  out.obs_noise = std::max(std::sqrt(sq / static_cast<double>(locations.size())), 1e-3);
  return out;
}

WeightSet initial_weights(const CausalNetwork& net, const Evidence& ev, std::uint64_t seed, double sigma_xor,
                          double min_obs_weight, double max_obs_noise) {
  const std::vector<Index> active = active_locations(ev);
  WeightSet w = fit_observation_model(net, initial_weights(net, seed, sigma_xor), ev, initial_posterior(net, ev), active);
  for (HazardKind k : net.observation_parents()) {
    auto& o = w.obs[idx(k)];
    for (Index m = 1; m < o.size(); ++m) o(m) = std::max(o(m), min_obs_weight);
  }
  w.obs_noise = std::min(w.obs_noise, max_obs_noise);
  return w;
}

PosteriorField initial_posterior(const CausalNetwork& net, const Evidence& ev) {
  const Index n_loc = ev.size();
  PosteriorField post = PosteriorField::uniform(net, n_loc);
  for (HazardKind h : net.latent_nodes()) {
    const int i = idx(h);
    if (net.has_prior(h) && ev.prior_offset[i].cols() == n_loc) {
      for (Index l = 0; l < n_loc; ++l) post.q[i].col(l) = conditional_categorical(ev.prior_offset[i].col(l));
    }
  }
  if (net.has(HazardKind::BD)) {
    auto& qbd = post.q[idx(HazardKind::BD)];
    for (Index l = 0; l < n_loc; ++l) {
      if (ev.pruned(l)) {
        qbd.col(l).setZero();
        qbd(0, l) = 1.0;
      }
    }
  }
  return post;
}

// ---------------------------------------------------------------------------------------------
// E-step

double e_step_update(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, LocalState& st,
                     bool bd_pruned, int sweeps) {
  double change = 0.0;
  LocalGradient g;
  for (int s = 0; s < sweeps; ++s) {
    for (HazardKind h : net.latent_nodes()) {
      if (h == HazardKind::BD && bd_pruned) continue;
      local_elbo(net, w, xi, st, kGradPosterior, &g);
      const StateVector updated = conditional_categorical(g.dq[idx(h)]);
      change = std::max(change, (updated - st.q[idx(h)]).cwiseAbs().maxCoeff());
      st.q[idx(h)] = updated;
    }
  }
  return change;
}

bool best_point_mass(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, LocalState& st,
                     bool bd_pruned) {
  const auto& nodes = net.latent_nodes();
  Index combos = 1;
  for (HazardKind h : nodes)
    if (!(h == HazardKind::BD && bd_pruned)) combos *= net.num_states(h);
  if (combos > kMaxPointMassStarts) return false;

  LocalState trial = st;
  double best = -std::numeric_limits<double>::infinity();
  StateAssignment best_x = kNoStates;
  StateAssignment x{0, 0, 0};
  for (Index c = 0; c < combos; ++c) {
    Index rest = c;
    for (HazardKind h : nodes) {
      const int n = (h == HazardKind::BD && bd_pruned) ? 1 : net.num_states(h);
      x[idx(h)] = static_cast<int>(rest % n);
      rest /= n;
      trial.q[idx(h)] = StateVector::Zero(net.num_states(h));
      trial.q[idx(h)](x[idx(h)]) = 1.0;
    }
    const double v = local_elbo(net, w, xi, trial);
    if (v > best) best = v, best_x = x;
  }
  for (HazardKind h : nodes) {
    st.q[idx(h)] = StateVector::Zero(net.num_states(h));
    st.q[idx(h)](best_x[idx(h)]) = 1.0;
  }
  return true;
}

void e_step(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
            PosteriorField& post, std::span<const Index> batch, int sweeps, int workers, bool restarts) {
  parallel_for(batch.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t j = begin; j < end; ++j) {
      const Index l = batch[j];
      LocalState st = local_state(net, ev, post, l);
      e_step_update(net, w, xi, st, ev.pruned(l), sweeps);
      if (restarts) {
        LocalState alt = st;
        if (best_point_mass(net, w, xi, alt, ev.pruned(l))) {
          e_step_update(net, w, xi, alt, ev.pruned(l), sweeps);
          if (local_elbo(net, w, xi, alt) > local_elbo(net, w, xi, st))
            st = alt;
        }
      }
      for (HazardKind h : net.latent_nodes()) {
        if (!st.q[idx(h)].allFinite())
          throw DivergenceError("NaN posterior at location " + std::to_string(l), -1, -1, l);
        post.q[idx(h)].col(l) = st.q[idx(h)];
      }
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Gradients

namespace {

// Column-block pairwise reduction: the result depends only on the column order.
Vector pairwise_columns(const Matrix& m, Index begin, Index end) {
  if (end - begin <= 8) {
    Vector s = Vector::Zero(m.rows());
    for (Index c = begin; c < end; ++c) s += m.col(c);
    return s;
  }
  const Index mid = begin + (end - begin) / 2;
  return pairwise_columns(m, begin, mid) + pairwise_columns(m, mid, end);
}

std::vector<Index> sorted_copy(std::span<const Index> batch) {
  std::vector<Index> s(batch.begin(), batch.end());
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace

WeightSet grad_weights(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
                       const PosteriorField& post, std::span<const Index> batch, int workers) {
  if (batch.empty()) throw Error("grad_weights: empty batch");
  const auto entries = gradient_entries(net);
  const std::vector<Index> sorted = sorted_copy(batch);
  Matrix cols(static_cast<Index>(entries.size()), static_cast<Index>(sorted.size()));
  parallel_for(sorted.size(), workers, [&](std::size_t begin, std::size_t end, int) {
    WeightSet dw = w.zeros_like();
    for (std::size_t j = begin; j < end; ++j) {
      const LocalState st = local_state(net, ev, post, sorted[j]);
      dw = w.zeros_like();
      local_elbo(net, w, xi, st, kGradWeights, nullptr, &dw);
      cols.col(static_cast<Index>(j)) = pack(dw, entries);
    }
  });
  WeightSet out = w.zeros_like();
  unpack(pairwise_columns(cols, 0, cols.cols()), entries, out);
  return out;
}

VariationalParams grad_xi(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi,
                          const Evidence& ev, const PosteriorField& post, std::span<const Index> batch) {
  VariationalParams out;
  for (HazardKind h : net.latent_nodes()) out.xi[idx(h)] = Vector::Zero(net.num_states(h));
  LocalGradient g;
  for (Index l : sorted_copy(batch)) {
    local_elbo(net, w, xi, local_state(net, ev, post, l), kGradXi, &g);
    for (HazardKind h : net.latent_nodes()) out.xi[idx(h)] += g.dxi[idx(h)];
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// M-step

WeightSet m_step(const CausalNetwork& net, const WeightSet& w, const WeightSet& grad, const FitConfig& cfg,
                 PreconditionerState& state) {
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  const auto entries = free_entries(net);
  const Vector g = pack(grad, entries);
  Vector scale = Vector::Ones(g.size());
  if (cfg.preconditioner == PreconditionerMode::rmsprop) {
    if (state.mean_sq.size() != g.size()) state.mean_sq = g.cwiseAbs2();
    state.mean_sq = 0.9 * state.mean_sq + 0.1 * g.cwiseAbs2();
    scale = (state.mean_sq.cwiseSqrt().array() + 1e-8).inverse().matrix();
  }
  WeightSet out = w;
  for (std::size_t j = 0; j < entries.size(); ++j) {
    const ParamEntry& e = entries[j];
    const Index jj = static_cast<Index>(j);
    const double step = cfg.learning_rate * scale(jj);
    double v = entry_value(w, e) + step * g(jj);
    double shrink = 0.0;
    if (e.group == ParamGroup::obs) shrink = step * cfg.lambda1;
    if (e.group == ParamGroup::prior) shrink = step * cfg.lambda2;
    if (shrink > 0.0) v = std::copysign(std::max(std::abs(v) - shrink, 0.0), v);
    if (e.group == ParamGroup::obs_noise && std::abs(v) < 1e-3) v = v < 0.0 ? -1e-3 : 1e-3;
    entry_ref(out, e) = v;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// xi

namespace {

VariationalParams xi_fixedpoint(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi,
                                const Evidence& ev, const PosteriorField& post, std::span<const Index> batch) {
  VariationalParams out = xi;
  const std::vector<Index> sorted = sorted_copy(batch);
  std::vector<LocalState> states;
  states.reserve(sorted.size());
  for (Index l : sorted) states.push_back(local_state(net, ev, post, l));
  std::vector<MomentCache> moments(sorted.size());
  for (HazardKind h : net.latent_nodes()) {
    const StateVector x0 = xi.xi[idx(h)];
    for (std::size_t j = 0; j < states.size(); ++j) moments[j] = expected_moments(net, w, h, states[j], x0);
    const XiSolve solved = minimize_xi_fixedpoint(moments, x0);
    out.xi[idx(h)] = solved.xi;
  }
  return out;
}

}  // namespace

VariationalParams update_xi(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi,
                            const Evidence& ev, const PosteriorField& post, std::span<const Index> batch,
                            const FitConfig& cfg) {
  if (batch.empty()) return xi;
  if (cfg.xi_mode == XiMode::fixedpoint) return xi_fixedpoint(net, w, xi, ev, post, batch);

  const double before = elbo(net, w, xi, ev, post, batch);
  const VariationalParams g = grad_xi(net, w, xi, ev, post, batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double step = cfg.xi_learning_rate;
  for (int attempt = 0; attempt < 30; ++attempt, step *= 0.5) {
    VariationalParams trial = xi;
    for (HazardKind h : net.latent_nodes())
      trial.xi[idx(h)] = (xi.xi[idx(h)] + step * inv_n * g.xi[idx(h)]).cwiseMax(0.0);
    if (elbo(net, w, trial, ev, post, batch) >= before - 1e-9) return trial;
  }
  return xi;
}

VariationalParams initial_xi(const CausalNetwork& net, const WeightSet& w, const Evidence& ev,
                             const PosteriorField& post, std::span<const Index> batch) {
  return xi_fixedpoint(net, w, VariationalParams::constant(net, 0.0), ev, post, batch);
}

// ---------------------------------------------------------------------------------------------
// Driver

std::vector<Index> active_locations(const Evidence& ev) {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(ev.size()));
  for (Index l = 0; l < ev.size(); ++l)
    if (!ev.pruned(l)) out.push_back(l);
  return out;
}

namespace {

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), stream};
  return std::mt19937_64(seq);
}

bool weights_finite(const CausalNetwork& net, const WeightSet& w) {
  for (const auto& e : gradient_entries(net))
    if (!std::isfinite(entry_value(w, e))) return false;
  return true;
}

}  // namespace

FitResult fit(const CausalNetwork& net, const Evidence& ev, const WeightSet& w_init, const FitConfig& cfg,
              const FitCallbacks& callbacks, const FitCheckpoint* resume) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Index> active = active_locations(ev);
  cfg.validate(static_cast<Index>(active.size()));
  WeightSet w = w_init;
  w.sigma_xor = cfg.sigma_xor;
  validate_weights(net, w);
  const int workers = resolve_workers(cfg.workers);

  std::vector<Index> audit = active;
  if (!cfg.full_batch && static_cast<Index>(active.size()) > cfg.audit_size) {
    auto rng = epoch_rng(cfg.seed, -1, 0xA0D17u);
    std::vector<Index> pool = active;
    std::shuffle(pool.begin(), pool.end(), rng);
    audit.assign(pool.begin(), pool.begin() + cfg.audit_size);
    std::sort(audit.begin(), audit.end());
  }

  FitResult result;
  PreconditionerState precond;
  int start_epoch = 0;
  int stall = 0;
  if (resume) {
    w = resume->weights;
    result.posterior = resume->posterior;
    result.xi = resume->xi;
    precond = resume->precond;
    result.trace = resume->trace;
    start_epoch = resume->epoch;
    stall = resume->stall;
  } else {
    result.posterior = initial_posterior(net, ev);
    result.xi = active.empty() ? VariationalParams::constant(net, 1.0)
                               : initial_xi(net, w, ev, result.posterior, audit);
  }
  PosteriorField& post = result.posterior;

  int epoch = start_epoch;
  for (; epoch < cfg.max_epochs && !active.empty(); ++epoch) {
    std::vector<Index> order = active;
    if (!cfg.full_batch) {
      auto rng = epoch_rng(cfg.seed, epoch, 0xE0C4u);
      std::shuffle(order.begin(), order.end(), rng);
    }
    const std::size_t bs = cfg.full_batch ? order.size() : static_cast<std::size_t>(cfg.batch_size);
    double grad_norm = 0.0;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs, ++batch_index) {
      std::vector<Index> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + bs)));
      std::sort(batch.begin(), batch.end());
      try {
        e_step(net, w, result.xi, ev, post, batch, cfg.e_step_sweeps, workers, cfg.e_step_restarts);
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.what(), epoch, batch_index, e.location());
      }
      if (cfg.update_xi) result.xi = update_xi(net, w, result.xi, ev, post, batch, cfg);
      if (cfg.update_weights && epoch >= cfg.warmup_epochs) {
        WeightSet g = grad_weights(net, w, result.xi, ev, post, batch, workers);
        g *= 1.0 / static_cast<double>(batch.size());
        const Vector gv = pack(g, free_entries(net));
        if (!gv.allFinite())
          throw DivergenceError("non-finite weight gradient", epoch, batch_index, -1);
        grad_norm = gv.norm();
        w = m_step(net, w, g, cfg, precond);
        if (!weights_finite(net, w)) throw DivergenceError("non-finite weights", epoch, batch_index, -1);
      }
    }
    if (cfg.update_weights && epoch < cfg.warmup_epochs) {
      const WeightSet refit = fit_observation_model(net, w, ev, post, active);
      grad_norm = (pack(refit, free_entries(net)) - pack(w, free_entries(net))).norm();
      w = refit;
    }
    const double audit_elbo = elbo(net, w, result.xi, ev, post, audit, {.workers = workers});
    if (!std::isfinite(audit_elbo)) throw DivergenceError("audit ELBO is not finite", epoch, batch_index - 1, -1);
    if (!result.trace.empty()) {
      const double prev = result.trace.back();
      const double rel = std::abs(audit_elbo - prev) / std::max(std::abs(prev), 1e-12);
      stall = rel < cfg.tolerance ? stall + 1 : 0;
    }
    result.trace.push_back(audit_elbo);
    if (callbacks.on_epoch) callbacks.on_epoch({epoch, audit_elbo, grad_norm});
    if (callbacks.on_checkpoint && callbacks.checkpoint_every > 0 && (epoch + 1) % callbacks.checkpoint_every == 0)
      callbacks.on_checkpoint({epoch + 1, w, post, result.xi, precond, result.trace, stall});
    if (stall >= cfg.patience) {
      result.converged = true;
      ++epoch;
      break;
    }
  }
  result.epochs = epoch;

  // Pruned locations: LS/LF coordinate ascent with BD held at state 0.
  if (epoch > 0 && static_cast<Index>(active.size()) < ev.size()) {
    std::vector<Index> pruned;
    for (Index l = 0; l < ev.size(); ++l)
      if (ev.pruned(l)) pruned.push_back(l);
    parallel_for(pruned.size(), workers, [&](std::size_t begin, std::size_t end, int) {
      for (std::size_t j = begin; j < end; ++j) {
        auto ascend = [&](LocalState& st) {
          for (int s = 0; s < 50; ++s)
            if (e_step_update(net, w, result.xi, st, true, 1) < 1e-12) break;
        };
        LocalState st = local_state(net, ev, post, pruned[j]);
        ascend(st);
        LocalState alt = st;
        if (cfg.e_step_restarts && best_point_mass(net, w, result.xi, alt, true)) {
          ascend(alt);
          if (local_elbo(net, w, result.xi, alt) > local_elbo(net, w, result.xi, st)) st = alt;
        }
        for (HazardKind h : net.latent_nodes()) post.q[idx(h)].col(pruned[j]) = st.q[idx(h)];
      }
    });
  }

  result.weights = w;
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace qvcbi
