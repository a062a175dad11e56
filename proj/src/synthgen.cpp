#include "qvcbi/synthgen.hpp"

#include "qvcbi/bounds.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace qvcbi {

namespace fs = std::filesystem;

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

enum Stream : std::uint32_t { kLocation = 1, kLandslide = 2, kLiquefaction = 3, kFootprint = 4, kCorruption = 5 };

int sample_categorical(const StateVector& p, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (Index m = 0; m + 1 < p.size(); ++m) {
    acc += p(m);
    if (u < acc) return static_cast<int>(m);
  }
  return static_cast<int>(p.size() - 1);
}

// Fractional position (x, y in [0, 1], y pointing north) of a cell centre.
std::pair<double, double> unit_position(const SynthConfig& cfg, Index cell) {
  const Index r = cell / cfg.ncols, c = cell % cfg.ncols;
  return {(static_cast<double>(c) + 0.5) / static_cast<double>(cfg.ncols),
          (static_cast<double>(cfg.nrows - 1 - r) + 0.5) / static_cast<double>(cfg.nrows)};
}

Vector pga_field(const SynthConfig& cfg) {
  const Index n = cfg.ncols * cfg.nrows;
  Vector out(n);
  const auto& s = cfg.pga;
  for (Index cell = 0; cell < n; ++cell) {
    const auto [x, y] = unit_position(cfg, cell);
    switch (s.shape) {
      case PgaShape::constant: out(cell) = s.peak; break;
      case PgaShape::ramp: out(cell) = s.floor + (s.peak - s.floor) * x; break;
      case PgaShape::radial: {
        const double d2 = ((x - s.epicenter_x) * (x - s.epicenter_x) + (y - s.epicenter_y) * (y - s.epicenter_y)) / 2.0;
        out(cell) = s.floor + (s.peak - s.floor) * std::exp(-d2 / (2.0 * s.radius * s.radius));
        break;
      }
    }
  }
  return out;
}

Vector ground_failure_field(const SynthConfig& cfg, const GroundFailureSpec& spec, std::uint32_t stream) {
  auto rng = stream_rng(cfg.seed, stream, 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::pair<double, double>> centres;
  for (int b = 0; b < spec.bumps; ++b) {
    const double x = unit(rng), y = unit(rng);
    centres.emplace_back(x, y);
  }
  const Index n = cfg.ncols * cfg.nrows;
  Vector p(n);
  for (Index cell = 0; cell < n; ++cell) {
    const auto [x, y] = unit_position(cfg, cell);
    double s = 0.0;
    for (const auto& [cx, cy] : centres) {
      const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / 2.0;
      s += std::exp(-d2 / (2.0 * spec.bump_radius * spec.bump_radius));
    }
    p(cell) = sigmoid(spec.base + spec.gain * std::min(s, 1.0));
  }
  return p;
}

// Exactly round(fraction * n) indices of `pool`, drawn without replacement with weights `w`.
std::vector<Index> weighted_subset(const std::vector<Index>& pool, const std::vector<double>& w, double fraction,
                                   std::mt19937_64& rng) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  std::vector<std::pair<double, Index>> keys;
  keys.reserve(pool.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double u = unit(rng);
    keys.emplace_back(w[i] > 0.0 ? std::log(std::max(u, 1e-300)) / w[i] : -HUGE_VAL, pool[i]);
  }
  std::sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Index> out;
  for (std::size_t i = 0; i < k && i < keys.size(); ++i) out.push_back(keys[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

GridHeader synth_header(const SynthConfig& cfg) {
  GridHeader h;
  h.ncols = cfg.ncols;
  h.nrows = cfg.nrows;
  h.cellsize = cfg.cellsize;
  h.xllcorner = cfg.xllcorner;
  h.yllcorner = cfg.yllcorner;
  return h;
}

Grid values_grid(const GridHeader& h, const Vector& v) {
  Grid g{h, Matrix(h.nrows, h.ncols)};
  for (Index cell = 0; cell < h.cell_count(); ++cell) g.values(cell / h.ncols, cell % h.ncols) = v(cell);
  return g;
}

}  // namespace

void SynthConfig::validate() const {
  if (ncols < 1 || nrows < 1) throw ConfigError("synthetic grid needs at least one row and column");
  if (!(cellsize > 0.0)) throw ConfigError("synthetic cellsize must be positive");
  if (!(footprint_coverage >= 0.0 && footprint_coverage <= 1.0))
    throw ConfigError("footprint coverage must lie in [0, 1]");
  if (!(footprint_corruption >= 0.0 && footprint_corruption <= 1.0))
    throw ConfigError("footprint corruption must lie in [0, 1]");
  if (!(pga_noise >= 0.0)) throw ConfigError("pga_noise must be nonnegative");
  if (!(pga.peak >= 0.0 && pga.floor >= 0.0 && pga.radius > 0.0)) throw ConfigError("invalid PGA field");
  const CausalNetwork net = build_network(network);
  validate_weights(net, weights);
  if (net.has_prior(HazardKind::BD)) {
    curve.validate();
    if (curve.max_state() != net.max_state(HazardKind::BD))
      throw ConfigError("fragility curve and BD cardinality disagree");
  }
}

SynthScene sample_scene(const SynthConfig& cfg) {
  cfg.validate();
  const CausalNetwork net = build_network(cfg.network);
  const WeightSet& w = cfg.weights;
  const Index n = cfg.ncols * cfg.nrows;
  const GridHeader header = synth_header(cfg);

  const Vector pga = pga_field(cfg);
  const Vector p_ls = ground_failure_field(cfg, cfg.landslide, kLandslide);
  const Vector p_lf = ground_failure_field(cfg, cfg.liquefaction, kLiquefaction);

  SynthScene out;
  LatentTruth& truth = out.truth;
  truth.building.assign(static_cast<std::size_t>(n), 0);
  {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    auto rng = stream_rng(cfg.seed, kFootprint, 0);
    for (Index cell : weighted_subset(all, std::vector<double>(all.size(), 1.0), cfg.footprint_coverage, rng))
      truth.building[static_cast<std::size_t>(cell)] = 1;
  }
  std::vector<std::uint8_t> footprint = truth.building;
  if (cfg.footprint_corruption > 0.0) {
    std::vector<Index> pool;
    std::vector<double> weight;
    for (Index cell = 0; cell < n; ++cell) {
      if (!truth.building[static_cast<std::size_t>(cell)]) continue;
      pool.push_back(cell);
      weight.push_back(std::pow(std::max(pga(cell), 1e-12), cfg.corruption_pga_bias));
    }
    auto rng = stream_rng(cfg.seed, kCorruption, 0);
    for (Index cell : weighted_subset(pool, weight, cfg.footprint_corruption, rng))
      footprint[static_cast<std::size_t>(cell)] = 0;
  }

  for (HazardKind h : net.latent_nodes()) {
    truth.state[idx(h)].assign(static_cast<std::size_t>(n), 0);
    truth.eps[idx(h)] = Matrix::Zero(net.num_states(h), n);
  }
  truth.mu.resize(n);
  Vector dpm(n), pga_obs(n);

  for (Index l = 0; l < n; ++l) {
    auto rng = stream_rng(cfg.seed, kLocation, static_cast<std::uint64_t>(l));
    std::normal_distribution<double> normal(0.0, 1.0);
    StateAssignment x{0, 0, 0};
    std::array<StateVector, kHazardCount> offset;
    for (HazardKind h : net.latent_nodes()) {
      offset[idx(h)] = StateVector::Zero(net.num_states(h));
      if (!net.has_prior(h)) continue;
      if (h == HazardKind::BD) offset[idx(h)] = prior_log_odds(hazus_state_probs(pga(l), cfg.curve));
      if (h == HazardKind::LS) offset[idx(h)] = prior_log_odds(Eigen::Vector2d(1.0 - p_ls(l), p_ls(l)));
      if (h == HazardKind::LF) offset[idx(h)] = prior_log_odds(Eigen::Vector2d(1.0 - p_lf(l), p_lf(l)));
    }
    auto draw = [&](HazardKind h) {
      StateVector eps = StateVector::Zero(net.num_states(h));
      for (Index m = 1; m < eps.size(); ++m) eps(m) = normal(rng);
      const StateVector* off = net.has_prior(h) ? &offset[idx(h)] : nullptr;
      const StateVector z = activation_logits(net, h, x, eps, w, off);
      truth.eps[idx(h)].col(l) = eps;
      return sample_categorical(conditional_categorical(z), rng);
    };
    std::array<bool, kHazardCount> done{};
    for (HazardKind h : net.topological_order()) {
      int s = draw(h);
      if (cfg.xor_exclusive && net.has_xor() && net.in_xor(h)) {
        const auto [a, b] = net.xor_parents();
        const HazardKind other = h == a ? b : a;
        if (done[idx(other)] && x[idx(other)] > 0) {
          for (int tries = 0; s > 0 && tries < 100; ++tries) s = draw(h);
          if (s > 0) s = 0, ++truth.xor_forced;
        }
      }
      if (h == HazardKind::BD && !truth.building[static_cast<std::size_t>(l)]) s = 0;
      x[idx(h)] = s;
      done[idx(h)] = true;
      truth.state[idx(h)][static_cast<std::size_t>(l)] = s;
    }
    truth.mu(l) = observation_mean(net, x, w);
    dpm(l) = std::min(std::exp(truth.mu(l) + w.obs_noise * normal(rng)), 1.0);
    pga_obs(l) = cfg.pga_noise > 0.0 ? pga(l) * std::exp(cfg.pga_noise * normal(rng)) : pga(l);
  }

  out.grids.dpm = values_grid(header, dpm);
  out.grids.pga = values_grid(header, pga_obs);
  out.grids.prior_ls = values_grid(header, p_ls);
  out.grids.prior_lf = values_grid(header, p_lf);
  Vector fp(n);
  for (Index l = 0; l < n; ++l) fp(l) = footprint[static_cast<std::size_t>(l)];
  out.grids.footprint = values_grid(header, fp);
  out.u_obs = Grid::filled(header, 0.0);
  return out;
}

FragilityCurve default_fragility_curve() { return {{0.15, 0.35, 0.7}, {0.3, 0.3, 0.3}}; }

std::vector<std::string> scenario_names() { return {"clean", "weak-prior", "overlapping-hazards", "missing-footprint"}; }

SynthConfig scenario_preset(const std::string& name, std::uint64_t seed, Index size) {
  SynthConfig cfg;
  cfg.name = name;
  cfg.seed = seed;
  cfg.ncols = cfg.nrows = size;
  cfg.network = NetworkSpec::full(3, 1, 1);
  cfg.curve = default_fragility_curve();
  const CausalNetwork net = build_network(cfg.network);
  WeightSet w = WeightSet::zeros(net);
  auto& ls = w.node[idx(HazardKind::LS)];
  auto& lf = w.node[idx(HazardKind::LF)];
  auto& bd = w.node[idx(HazardKind::BD)];
  ls.noise << 0.0, 0.3;
  lf.noise << 0.0, 0.3;
  bd.noise << 0.0, 0.3, 0.3, 0.3;
  bd.parent[idx(HazardKind::LS)] << 0.0, 0.5, 1.0, 1.5;
  bd.parent[idx(HazardKind::LF)] << 0.0, 0.5, 1.0, 1.5;
  w.obs[idx(HazardKind::BD)] << 0.0, 0.8, 0.8, 0.8;
  w.obs[idx(HazardKind::LS)] << 0.0, 3.0;
  w.obs[idx(HazardKind::LF)] << 0.0, 6.0;
  w.obs_leak = -8.8;
  w.obs_noise = 0.15;
  w.sigma_xor = 0.1;
  cfg.weights = w;

  if (name == "clean") {
    cfg.footprint_coverage = 1.0;
  } else if (name == "weak-prior") {
    cfg.pga_noise = 5.0;
  } else if (name == "overlapping-hazards") {
    cfg.landslide = {-8.0, 12.0, 6, 0.09};
    cfg.liquefaction = {-8.0, 12.0, 6, 0.09};
  } else if (name == "missing-footprint") {
    cfg.footprint_coverage = 0.6;
    cfg.footprint_corruption = 0.3;
    cfg.corruption_pga_bias = 2.0;
  } else {
    std::string list;
    for (const auto& n : scenario_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown scenario preset '" + name + "' (available: " + list + ")");
  }
  return cfg;
}

std::vector<TruthPoint> truth_points(const SynthConfig& cfg, const LatentTruth& truth, HazardKind h) {
  const GridHeader header = synth_header(cfg);
  std::vector<TruthPoint> out;
  const auto& states = truth.state[idx(h)];
  for (std::size_t l = 0; l < states.size(); ++l) {
    if (h == HazardKind::BD && !truth.building[l]) continue;
    const auto [x, y] = header.cell_center(static_cast<Index>(l));
    out.push_back({x, y, states[l], static_cast<Index>(l)});
  }
  return out;
}

void write_synth_scene(const SynthConfig& cfg, const SynthScene& scene, const fs::path& outdir) {
  std::error_code ec;
  fs::create_directories(outdir, ec);
  if (ec || !fs::is_directory(outdir)) throw DataError("cannot create output directory " + outdir.string());
  write_grid(scene.grids.dpm, outdir / "dpm.asc");
  write_grid(*scene.grids.pga, outdir / "pga.asc");
  write_grid(*scene.grids.prior_ls, outdir / "prior_ls.asc");
  write_grid(*scene.grids.prior_lf, outdir / "prior_lf.asc");
  write_grid(*scene.grids.footprint, outdir / "footprint.asc");
  write_grid(scene.u_obs, outdir / "u_obs.asc");
  const CausalNetwork net = build_network(cfg.network);
  for (HazardKind h : net.latent_nodes())
    write_ground_truth(truth_points(cfg, scene.truth, h), outdir / ("truth_" + std::string(to_string(h)) + ".csv"));
}

}  // namespace qvcbi
