#ifndef QVCBI_SYNTHGEN_HPP
#define QVCBI_SYNTHGEN_HPP

// Forward sampling of complete synthetic scenes from the causal network with known weights.

#include "qvcbi/priors.hpp"
#include "qvcbi/scene_io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace qvcbi {

enum class PgaShape { constant, ramp, radial };

/// Shaking intensity in g: constant `peak`; a west-to-east ramp from `floor` to `peak`; or a
/// Gaussian bump of width `radius` (fraction of the grid diagonal) centred on the epicentre.
struct PgaFieldSpec {
  PgaShape shape = PgaShape::radial;
  double peak = 0.9;
  double floor = 0.05;
  double epicenter_x = 0.5;  // fractions of the extent
  double epicenter_y = 0.5;
  double radius = 0.15;
};

/// Ground-failure susceptibility: p = sigmoid(base + gain * sum of `bumps` random Gaussian hills).
struct GroundFailureSpec {
  double base = -8.0;
  double gain = 12.0;
  int bumps = 3;
  double bump_radius = 0.07;  // fraction of the grid diagonal
};

struct SynthConfig {
  std::string name = "custom";
  Index ncols = 64;
  Index nrows = 64;
  double cellsize = 0.001;
  double xllcorner = 0.0;
  double yllcorner = 0.0;
  NetworkSpec network = NetworkSpec::full(3, 1, 1);
  WeightSet weights;  // true weights; shaped for `network`
  FragilityCurve curve;
  PgaFieldSpec pga;
  GroundFailureSpec landslide;
  GroundFailureSpec liquefaction;
  double footprint_coverage = 0.7;   // exact fraction of cells with a building
  double footprint_corruption = 0.0; // exact fraction of building cells masked out of the footprint grid
  double corruption_pga_bias = 0.0;  // masking weight proportional to pga^bias
  double pga_noise = 0.0;            // log-normal noise on the emitted PGA grid
  bool xor_exclusive = true;         // reject joint LS/LF activation
  std::uint64_t seed = 1;

  void validate() const;
};

/// Latent states of one scene. Never part of the observable Scene.
struct LatentTruth {
  std::array<std::vector<int>, kHazardCount> state;  // per location, empty for absent hazards
  std::array<Matrix, kHazardCount> eps;              // (M_i + 1) x N noise draws
  Vector mu;                                         // noiseless mean of ln y
  std::vector<std::uint8_t> building;                // true building presence
  Index xor_forced = 0;                              // locations where rejection gave up
};

struct SynthScene {
  SceneInputs grids;  // dpm, pga, prior_ls, prior_lf, footprint
  Grid u_obs;
  LatentTruth truth;
};

SynthScene sample_scene(const SynthConfig& cfg);

/// clean, weak-prior, overlapping-hazards, missing-footprint.
SynthConfig scenario_preset(const std::string& name, std::uint64_t seed = 1, Index size = 64);
std::vector<std::string> scenario_names();

/// Fragility curve shared by the presets (median 0.15, 0.35, 0.7 g; dispersion 0.3).
FragilityCurve default_fragility_curve();

/// Writes dpm.asc, pga.asc, prior_ls.asc, prior_lf.asc, footprint.asc, u_obs.asc and
/// truth_<node>.csv (cell centres) into `outdir`.
void write_synth_scene(const SynthConfig& cfg, const SynthScene& scene, const std::filesystem::path& outdir);

/// Truth labels of `h` as points at the cell centres.
std::vector<TruthPoint> truth_points(const SynthConfig& cfg, const LatentTruth& truth, HazardKind h);

}  // namespace qvcbi

#endif  // QVCBI_SYNTHGEN_HPP
