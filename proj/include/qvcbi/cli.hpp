#ifndef QVCBI_CLI_HPP
#define QVCBI_CLI_HPP

// Run configuration, the scene-to-metrics pipeline helpers and the synth/fit/eval/pipeline
// commands behind the qvcbi executable.

#include "qvcbi/eval.hpp"
#include "qvcbi/inference.hpp"
#include "qvcbi/priors.hpp"
#include "qvcbi/scene_io.hpp"
#include "qvcbi/synthgen.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace qvcbi {

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------------------------
// Configuration
//
// INI document; every key is optional unless noted, unknown sections and keys are rejected and
// relative paths resolve against the directory of the config file.
//
//   [network]   nodes = LS, LF, BD      present hazards; edges follow the full topology
//               ls_max_state = 1        M_i per hazard
//               lf_max_state = 1
//               bd_max_state = 3
//               xor = true              LS/LF exclusivity node
//               priors = LS, LF, BD     hazards fed by a prior grid ("none" for no priors)
//   [priors]    mode = hazus            hazus | pager | combined
//               gamma = 0.5             hazus weight in combined mode
//               curve = <json>          fragility curve {"median": [...], "dispersion": [...]}
//               pager_intercept, pager_slope   comma lists of length M_BD (default: weak stub)
//               prior_ls, prior_lf = <asc>     ground-failure probability grids
//   [data]      dpm, pga, footprint = <asc>; shakemap = <xml> (instead of pga)
//               truth_ls, truth_lf, truth_bd = <csv>
//               y_floor = 1e-4; allow_resample = false
//   [synth]     preset = clean; size = 64; plus optional footprint_coverage,
//               footprint_corruption, corruption_pga_bias, pga_noise overrides. Grid and truth
//               paths then come from the output directory and must not be set in [data].
//   [pruning]   mode = none | strict | compensated; tau = 0.2
//   [fit]       every FitConfig field by name (xi_mode fixedpoint | gradient,
//               preconditioner identity | rmsprop), seed, checkpoint_every = 10
//   [output]    dir = out; threshold = 0.5; roc = true

struct NetworkSection {
  std::vector<HazardKind> nodes{HazardKind::LS, HazardKind::LF, HazardKind::BD};
  std::array<int, kHazardCount> max_state{1, 1, 3};
  bool xor_node = true;
  std::vector<HazardKind> priors{HazardKind::LS, HazardKind::LF, HazardKind::BD};

  NetworkSpec spec() const;
};

struct PriorsSection {
  PriorMode mode = PriorMode::hazus;
  double gamma = 0.5;
  std::filesystem::path curve;  // empty: built-in default curve
  std::vector<double> pager_intercept;
  std::vector<double> pager_slope;
  std::filesystem::path prior_ls;
  std::filesystem::path prior_lf;
};

struct DataSection {
  std::filesystem::path dpm;
  std::filesystem::path pga;
  std::filesystem::path shakemap;
  std::filesystem::path footprint;
  std::array<std::filesystem::path, kHazardCount> truth;
  double y_floor = 1e-4;
  bool allow_resample = false;
};

struct SynthSection {
  std::string preset = "clean";
  Index size = 64;
  std::optional<double> footprint_coverage;
  std::optional<double> footprint_corruption;
  std::optional<double> corruption_pga_bias;
  std::optional<double> pga_noise;
};

struct OutputSection {
  std::filesystem::path dir = "out";
  double threshold = 0.5;
  bool roc = true;
};

struct RunConfig {
  NetworkSection network;
  PriorsSection priors;
  DataSection data;
  std::optional<SynthSection> synth;
  PruneOptions pruning;
  FitConfig fit;
  int checkpoint_every = 10;
  OutputSection output;

  /// Every setting in fixed section and key order with resolved values; parsing the result
  /// gives back the same configuration.
  std::string canonical() const;
  /// Synth settings for the [synth] section (requires it).
  SynthConfig synth_config() const;
};

/// Parses INI text. Throws ConfigError on syntax errors, unknown sections or keys and bad values.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

enum class Command { synth, fit, eval, pipeline };
Command command_from_string(std::string_view name);
std::string_view to_string(Command c);

/// Throws ConfigError when an input the command reads is not configured or does not exist.
void validate_inputs(const RunConfig& cfg, Command cmd);

// ---------------------------------------------------------------------------------------------
// Pipeline helpers

/// Inputs of one fit: the scene, its priors and evidence with the pruning mask applied.
struct PreparedScene {
  CausalNetwork net;
  Scene scene;
  PriorField prior;
  Evidence evidence;
  Index clipped_priors = 0;
  Index pruned = 0;
};

/// assemble -> priors -> prune -> evidence.
PreparedScene prepare_scene(const NetworkSpec& spec, const SceneInputs& inputs, const SceneOptions& scene_opts,
                            const PriorOptions& prior_opts, const PruneOptions& prune_opts);

/// Reads the grids named by the config (the [synth] scene from `scene_dir` when configured).
SceneInputs read_scene_inputs(const RunConfig& cfg, const std::filesystem::path& scene_dir);
PriorOptions prior_options(const RunConfig& cfg);

/// Spreads per-location columns over the full extent; NaN at cells without a location.
Matrix to_cells(const Scene& scene, const Matrix& per_location);

/// Cell-indexed posterior and prior matrices plus truth points, evaluated one-vs-rest per state,
/// with cross-entropy and the damaged/undamaged confusion matrix per node.
struct EvalInputs {
  std::array<Matrix, kHazardCount> posterior;  // (M_i + 1) x cells
  std::array<Matrix, kHazardCount> prior;      // empty when the node has no prior
  std::array<std::vector<TruthPoint>, kHazardCount> truth;
  double threshold = 0.5;
};

struct NamedRoc {
  std::string name;  // <node>_<state>_<posterior|prior>
  RocResult roc;
};

/// Throws DataError when a node with truth has no usable points.
MetricsReport evaluate(const CausalNetwork& net, const EvalInputs& in, std::vector<NamedRoc>* rocs = nullptr);

// ---------------------------------------------------------------------------------------------
// Commands

enum class LogLevel { quiet = 0, error = 1, info = 2, debug = 3 };
/// QVCBI_LOG = quiet | error | info | debug (default info).
LogLevel log_level_from_env();

struct CommandOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;  // default: hardware concurrency
  bool deterministic = false;  // forces one worker
  LogLevel log = LogLevel::info;
  std::ostream* out_stream = nullptr;  // manifest; std::cout when null
  std::ostream* err_stream = nullptr;  // progress and log lines; std::cerr when null
  /// Called after every epoch; exceptions thrown here abort the run, leaving the partial marker.
  std::function<void(const EpochReport&)> on_epoch;
};

/// Applies --out and --seed overrides and returns the effective worker count.
int apply_overrides(RunConfig& cfg, const CommandOptions& opts);

/// Each returns the run manifest (also written to <out>/manifest.json).
std::string cmd_synth(const RunConfig& cfg, const CommandOptions& opts);
std::string cmd_fit(const RunConfig& cfg, const CommandOptions& opts);
std::string cmd_eval(const RunConfig& cfg, const CommandOptions& opts);
std::string cmd_pipeline(const RunConfig& cfg, const CommandOptions& opts);

/// Loads the config, runs the command and maps errors to exit codes (0 ok, 2 config, 3 data,
/// 4 divergence) with the message on the error stream.
int run_command(Command cmd, const std::filesystem::path& config, const CommandOptions& opts);

inline constexpr const char* kPartialMarker = "fit.partial";
inline constexpr const char* kCheckpointFile = "checkpoint.json";

}  // namespace qvcbi

#endif  // QVCBI_CLI_HPP
