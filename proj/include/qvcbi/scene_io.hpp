#ifndef QVCBI_SCENE_IO_HPP
#define QVCBI_SCENE_IO_HPP

// ESRI ASCII rasters, scene assembly, footprint pruning, ground truth and ShakeMap readers, and
// the result writers.

#include "qvcbi/inference.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace qvcbi {

struct GridHeader {
  Index ncols = 0;
  Index nrows = 0;
  double xllcorner = 0.0;  // lower-left corner, or lower-left cell centre when `center` is set
  double yllcorner = 0.0;
  double cellsize = 1.0;
  double nodata = -9999.0;
  bool center = false;     // header used XLLCENTER/YLLCENTER

  /// Lower-left corner of the lower-left cell.
  double x0() const { return center ? xllcorner - 0.5 * cellsize : xllcorner; }
  double y0() const { return center ? yllcorner - 0.5 * cellsize : yllcorner; }
  /// Equal dimensions and cell size, corners within `tol`.
  bool same_geometry(const GridHeader& other, double tol = 1e-9) const;
  /// Centre coordinates of a row-major cell (row 0 is the northern row).
  std::pair<double, double> cell_center(Index cell) const;
  Index cell_count() const { return ncols * nrows; }
};

/// Row-major raster; values(r, c) with r = 0 the northern row.
struct Grid {
  GridHeader header;
  Matrix values;

  bool is_nodata(Index r, Index c) const { return values(r, c) == header.nodata; }
  double at(Index cell) const { return values(cell / header.ncols, cell % header.ncols); }
  static Grid filled(const GridHeader& header, double value);
};

/// Parses an ESRI ASCII grid. Errors carry the file name and line number.
Grid read_grid(const std::filesystem::path& path);
/// Writes the shortest decimal form that reads back to the same double (at most 17 digits).
void write_grid(const Grid& grid, const std::filesystem::path& path);

/// Nearest-cell resampling of `src` onto `target` geometry; cells outside `src` become NODATA.
Grid resample_nearest(const Grid& src, const GridHeader& target);

struct SceneInputs {
  Grid dpm;
  std::optional<Grid> pga;        // zero shaking when absent
  std::optional<Grid> prior_ls;   // needed when LS carries a prior
  std::optional<Grid> prior_lf;
  std::optional<Grid> footprint;  // all ones when absent
};

struct SceneOptions {
  double y_floor = 1e-4;
  bool allow_nearest_resample = false;
};

/// Aligned per-location inputs. Locations are the non-NODATA DPM cells in row-major order.
struct Scene {
  GridHeader header;
  std::vector<Index> cells;  // location -> cell index
  Vector y;                  // DPM clamped to [y_floor, 1]
  Vector pga;
  Vector p_ls;
  Vector p_lf;
  Vector footprint;          // 0 or 1
  Vector u;                  // XOR observation, 0 everywhere

  Index size() const { return static_cast<Index>(cells.size()); }
};

/// Throws DataError on a geometry mismatch (unless resampling is allowed and the extents agree),
/// on NODATA inside auxiliary grids at a valid DPM cell, and on a scene without valid cells.
Scene assemble_scene(const SceneInputs& inputs, const SceneOptions& opts = {});

enum class PruneMode { none, strict, compensated };
PruneMode prune_mode_from_string(std::string_view name);
std::string_view to_string(PruneMode mode);

struct PruneOptions {
  PruneMode mode = PruneMode::none;
  double tau = 0.2;
};

/// Per-location mask of BD-pruned cells. strict: footprint 0 is pruned; compensated: footprint 0 is
/// pruned only when the prior P(BD > 0) is below tau. `bd_prior` is (M + 1) x N.
std::vector<std::uint8_t> prune_by_footprint(const Scene& scene, const PruneOptions& opts,
                                             const Matrix* bd_prior = nullptr);

/// Evidence for fitting: log y, u, prior offsets and the pruning mask.
Evidence scene_evidence(const Scene& scene, std::array<Matrix, kHazardCount> prior_offset,
                        std::vector<std::uint8_t> pruned);

/// Sets BD to state 0 with certainty at pruned locations.
void reintegrate_pruned(PosteriorField& post, const std::vector<std::uint8_t>& pruned);

/// Full-extent grid of `values` (one per location); NODATA elsewhere.
Grid location_grid(const Scene& scene, const Vector& values);

struct TruthPoint {
  double lon = 0.0;
  double lat = 0.0;
  int label = 0;
  Index cell = -1;
};

struct GroundTruth {
  std::vector<TruthPoint> points;  // points inside the extent
  Index skipped = 0;               // points outside the extent
};

/// Reads `lon,lat,class`. Each point maps to the cell containing it; on a shared edge the cell is
/// floor((x - x0) / cellsize), i.e. the cell to the east / north.
GroundTruth read_ground_truth(const std::filesystem::path& path, const GridHeader& header, int max_class);
void write_ground_truth(const std::vector<TruthPoint>& points, const std::filesystem::path& path);

/// PGA grid (in g) from a ShakeMap grid XML document.
Grid read_shakemap_xml(const std::filesystem::path& path);

/// Per node and state posterior grids, one argmax class grid per node (ties to the lowest state),
/// the ELBO trace and the fitted weights.
void write_outputs(const CausalNetwork& net, const Scene& scene, const FitResult& result,
                   const std::filesystem::path& outdir);

/// Reads the posterior grids of `net` back from `dir` as (M_i + 1) x cells matrices; NODATA
/// cells become NaN.
std::array<Matrix, kHazardCount> read_posterior_grids(const CausalNetwork& net, const std::filesystem::path& dir,
                                                      GridHeader* header = nullptr);

std::string posterior_grid_name(HazardKind h, int state);
std::string class_grid_name(HazardKind h);

void write_weights(const WeightSet& w, const std::filesystem::path& path);
WeightSet read_weights(const CausalNetwork& net, const std::filesystem::path& path);

void write_checkpoint(const FitCheckpoint& c, const std::filesystem::path& path);
FitCheckpoint read_checkpoint(const CausalNetwork& net, const std::filesystem::path& path);

}  // namespace qvcbi

#endif  // QVCBI_SCENE_IO_HPP
