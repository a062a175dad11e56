#ifndef QVCBI_INFERENCE_HPP
#define QVCBI_INFERENCE_HPP

// Stochastic variational EM: mini-batch E-step coordinate ascent on the posteriors, a shared xi
// refresh, and a preconditioned proximal gradient M-step on the weights.

#include "qvcbi/elbo.hpp"

#include <functional>
#include <optional>

namespace qvcbi {

enum class XiMode { fixedpoint, gradient };
enum class PreconditionerMode { identity, rmsprop };

struct FitConfig {
  double learning_rate = 0.02;
  int batch_size = 512;
  int max_epochs = 40;
  int e_step_sweeps = 2;
  bool e_step_restarts = true;  // also restart each location from its best joint point mass
  double lambda1 = 0.0;  // L1 strength on observation weights (per location)
  double lambda2 = 0.0;  // L1 strength on the LS/LF prior attachment weights (per location)
  double sigma_xor = 0.1;
  std::uint64_t seed = 1;
  double tolerance = 1e-5;  // relative audit-ELBO change
  int patience = 5;
  XiMode xi_mode = XiMode::fixedpoint;
  double xi_learning_rate = 0.5;
  bool full_batch = false;
  PreconditionerMode preconditioner = PreconditionerMode::rmsprop;
  bool update_weights = true;  // false gives E-step-only epochs
  int warmup_epochs = 10;      // leading epochs that refit only the observation model, in closed form
  double init_min_obs_weight = 1.0;  // initial_weights() arguments used by the command-line tool
  double init_max_obs_noise = 0.25;
  bool update_xi = true;
  int audit_size = 1024;
  int workers = 1;

  void validate(Index active_locations) const;
};

/// One free scalar of a WeightSet.
enum class ParamGroup { leak, noise, parent, prior, obs, obs_leak, obs_noise };
struct ParamEntry {
  ParamGroup group;
  HazardKind node = HazardKind::LS;
  HazardKind parent = HazardKind::LS;
  int state = 0;
};

/// Every entry that carries a gradient (state-0 entries and sigma_xor excluded).
std::vector<ParamEntry> gradient_entries(const CausalNetwork& net);
/// gradient_entries() minus the predetermined BD prior weight.
std::vector<ParamEntry> free_entries(const CausalNetwork& net);
double& entry_ref(WeightSet& w, const ParamEntry& e);
double entry_value(const WeightSet& w, const ParamEntry& e);
std::string entry_name(const ParamEntry& e);
Vector pack(const WeightSet& w, std::span<const ParamEntry> entries);
void unpack(const Vector& v, std::span<const ParamEntry> entries, WeightSet& w);

/// Seeded initial weights: free entries ~ N(0, 0.01^2), obs_noise = 1, prior multipliers = 1.
WeightSet initial_weights(const CausalNetwork& net, std::uint64_t seed, double sigma_xor = 0.1);

/// Exact maximizer of the expected observation log-likelihood over obs_leak, the observation
/// weights and obs_noise with the posteriors held fixed (least squares on expected indicators).
WeightSet fit_observation_model(const CausalNetwork& net, const WeightSet& w, const Evidence& ev,
                                const PosteriorField& post, std::span<const Index> locations);

/// initial_weights() followed by fit_observation_model() at the initial posterior over the
/// active locations. Observation weights are then raised to at least `min_obs_weight` and the
/// noise capped at `max_obs_noise`, so that the first E-step separates states the prior leaves
/// mixed and ranks them in increasing order.
WeightSet initial_weights(const CausalNetwork& net, const Evidence& ev, std::uint64_t seed, double sigma_xor = 0.1,
                          double min_obs_weight = 1.0, double max_obs_noise = 0.25);

/// Per-location prior categorical (softmax of the attached log-odds), uniform where no prior is
/// attached, and BD fixed at state 0 where pruned.
PosteriorField initial_posterior(const CausalNetwork& net, const Evidence& ev);

/// Coordinate ascent over the nodes (LS, LF, BD) at one location. Each node's posterior is set to
/// softmax(T) where T = d bound / d q (entropy excluded), which maximizes the bound exactly.
/// Returns the largest absolute change of any posterior entry.
double e_step_update(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, LocalState& st,
                     bool bd_pruned, int sweeps = 1);

/// Joint state configurations enumerated by best_point_mass().
inline constexpr Index kMaxPointMassStarts = 64;

/// Sets `st.q` to the point mass on the joint state with the highest local bound. Returns false
/// (leaving `st` alone) when the network has more than kMaxPointMassStarts joint states.
bool best_point_mass(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, LocalState& st,
                     bool bd_pruned);

/// e_step_update over a batch, in parallel over locations. With `restarts`, each location also
/// runs the same sweeps from best_point_mass() and keeps whichever result has the higher bound.
void e_step(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
            PosteriorField& post, std::span<const Index> batch, int sweeps, int workers = 1,
            bool restarts = false);

/// Sum over the batch of d elbo / d w; the reduction order is the sorted location order.
WeightSet grad_weights(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi, const Evidence& ev,
                       const PosteriorField& post, std::span<const Index> batch, int workers = 1);

/// Sum over the batch of d elbo / d xi.
VariationalParams grad_xi(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi,
                          const Evidence& ev, const PosteriorField& post, std::span<const Index> batch);

/// Running mean of squared gradients over the free entries (rmsprop mode only).
struct PreconditionerState {
  Vector mean_sq;
};

/// w + rho A grad followed by soft-thresholding of the observation weights (rho A lambda1) and the
/// LS/LF prior multipliers (rho A lambda2). `grad` is the per-location mean gradient.
WeightSet m_step(const CausalNetwork& net, const WeightSet& w, const WeightSet& grad, const FitConfig& cfg,
                 PreconditionerState& state);

/// Refreshes xi on the batch, by fixed point or by projected gradient ascent with step halving.
VariationalParams update_xi(const CausalNetwork& net, const WeightSet& w, const VariationalParams& xi,
                            const Evidence& ev, const PosteriorField& post, std::span<const Index> batch,
                            const FitConfig& cfg);

/// Fixed-point xi for the initial posterior over `batch`, starting from xi = 0.
VariationalParams initial_xi(const CausalNetwork& net, const WeightSet& w, const Evidence& ev,
                             const PosteriorField& post, std::span<const Index> batch);

struct EpochReport {
  int epoch = 0;
  double audit_elbo = 0.0;
  double grad_norm = 0.0;
};

/// Complete optimizer state after `epoch` epochs.
struct FitCheckpoint {
  int epoch = 0;
  WeightSet weights;
  PosteriorField posterior;
  VariationalParams xi;
  PreconditionerState precond;
  std::vector<double> trace;
  int stall = 0;
};

struct FitCallbacks {
  std::function<void(const EpochReport&)> on_epoch;
  int checkpoint_every = 0;
  std::function<void(const FitCheckpoint&)> on_checkpoint;
};

struct FitResult {
  WeightSet weights;
  PosteriorField posterior;
  VariationalParams xi;
  std::vector<double> trace;  // audit ELBO per epoch
  int epochs = 0;
  bool converged = false;
  double wall_seconds = 0.0;
};

/// Locations taking part in EM (all locations whose BD node is not pruned).
std::vector<Index> active_locations(const Evidence& ev);

/// Runs stochastic variational EM. Pruned locations are excluded from the EM loop and receive a
/// final LS/LF coordinate ascent at the fitted weights. Throws DivergenceError on NaN.
FitResult fit(const CausalNetwork& net, const Evidence& ev, const WeightSet& w_init, const FitConfig& cfg,
              const FitCallbacks& callbacks = {}, const FitCheckpoint* resume = nullptr);

}  // namespace qvcbi

#endif  // QVCBI_INFERENCE_HPP
