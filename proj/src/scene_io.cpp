#include "qvcbi/scene_io.hpp"

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace qvcbi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::optional<double> parse_double(std::string_view tok) {
  double v = 0.0;
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) return std::nullopt;
  return v;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

[[noreturn]] void parse_fail(const fs::path& path, std::size_t line, const std::string& what) {
  throw DataError(path.string() + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Grids

bool GridHeader::same_geometry(const GridHeader& o, double tol) const {
  return ncols == o.ncols && nrows == o.nrows && cellsize == o.cellsize && std::abs(x0() - o.x0()) <= tol &&
         std::abs(y0() - o.y0()) <= tol;
}

std::pair<double, double> GridHeader::cell_center(Index cell) const {
  const Index r = cell / ncols, c = cell % ncols;
  return {x0() + (static_cast<double>(c) + 0.5) * cellsize,
          y0() + (static_cast<double>(nrows - 1 - r) + 0.5) * cellsize};
}

Grid Grid::filled(const GridHeader& header, double value) {
  return Grid{header, Matrix::Constant(header.nrows, header.ncols, value)};
}

Grid read_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open grid " + path.string());
  Grid g;
  std::map<std::string, double> keys;
  std::string line;
  std::size_t lineno = 0;
  std::streampos data_start = 0;
  std::size_t data_line = 0;
  while (true) {
    data_start = in.tellg();
    data_line = lineno;
    if (!std::getline(in, line)) break;
    ++lineno;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (std::isalpha(static_cast<unsigned char>(toks[0][0])) == 0) break;
    if (toks.size() != 2) parse_fail(path, lineno, "malformed header line '" + std::string(trim(line)) + "'");
    const std::string key = lower(std::string(toks[0]));
    static const char* known[] = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize",
                                  "nodata_value"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      parse_fail(path, lineno, "unknown header keyword '" + std::string(toks[0]) + "'");
    const auto v = parse_double(toks[1]);
    if (!v) parse_fail(path, lineno, "non-numeric header value '" + std::string(toks[1]) + "'");
    if (!keys.emplace(key, *v).second) parse_fail(path, lineno, "duplicate header keyword '" + key + "'");
  }
  for (const char* req : {"ncols", "nrows", "cellsize"})
    if (!keys.count(req)) parse_fail(path, lineno, std::string("missing header keyword ") + req);
  const bool corner = keys.count("xllcorner") && keys.count("yllcorner");
  const bool center = keys.count("xllcenter") && keys.count("yllcenter");
  if (corner == center) parse_fail(path, lineno, "header needs xllcorner/yllcorner or xllcenter/yllcenter");
  const double nc = keys["ncols"], nr = keys["nrows"];
  if (nc < 1 || nr < 1 || nc != std::floor(nc) || nr != std::floor(nr))
    parse_fail(path, lineno, "ncols and nrows must be positive integers");
  if (!(keys["cellsize"] > 0.0)) parse_fail(path, lineno, "cellsize must be positive");
  g.header.ncols = static_cast<Index>(nc);
  g.header.nrows = static_cast<Index>(nr);
  g.header.center = center;
  g.header.xllcorner = center ? keys["xllcenter"] : keys["xllcorner"];
  g.header.yllcorner = center ? keys["yllcenter"] : keys["yllcorner"];
  g.header.cellsize = keys["cellsize"];
  if (keys.count("nodata_value")) g.header.nodata = keys["nodata_value"];

  in.clear();
  in.seekg(data_start);
  lineno = data_line;
  g.values.resize(g.header.nrows, g.header.ncols);
  Index row = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (row >= g.header.nrows) parse_fail(path, lineno, "more than nrows = " + std::to_string(g.header.nrows) + " rows");
    if (static_cast<Index>(toks.size()) != g.header.ncols)
      parse_fail(path, lineno, "row has " + std::to_string(toks.size()) + " values, expected ncols = " +
                                   std::to_string(g.header.ncols));
    for (Index c = 0; c < g.header.ncols; ++c) {
      const auto v = parse_double(toks[static_cast<std::size_t>(c)]);
      if (!v || !std::isfinite(*v))
        parse_fail(path, lineno, "non-numeric value '" + std::string(toks[static_cast<std::size_t>(c)]) + "'");
      g.values(row, c) = *v;
    }
    ++row;
  }
  if (row != g.header.nrows)
    parse_fail(path, lineno, "found " + std::to_string(row) + " rows, expected nrows = " +
                                 std::to_string(g.header.nrows));
  return g;
}

void write_grid(const Grid& grid, const fs::path& path) {
  const GridHeader& h = grid.header;
  if (grid.values.rows() != h.nrows || grid.values.cols() != h.ncols)
    throw DataError("grid values do not match the header dimensions");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write grid " + path.string());
  out << "ncols " << h.ncols << '\n' << "nrows " << h.nrows << '\n';
  out << (h.center ? "xllcenter " : "xllcorner ") << format_double(h.xllcorner) << '\n';
  out << (h.center ? "yllcenter " : "yllcorner ") << format_double(h.yllcorner) << '\n';
  out << "cellsize " << format_double(h.cellsize) << '\n';
  out << "NODATA_value " << format_double(h.nodata) << '\n';
  std::string row;
  for (Index r = 0; r < h.nrows; ++r) {
    row.clear();
    for (Index c = 0; c < h.ncols; ++c) {
      if (c) row += ' ';
      row += format_double(grid.values(r, c));
    }
    out << row << '\n';
  }
  if (!out) throw DataError("failed writing grid " + path.string());
}

Grid resample_nearest(const Grid& src, const GridHeader& target) {
  Grid out = Grid::filled(target, src.header.nodata);
  out.header.nodata = src.header.nodata;
  const GridHeader& s = src.header;
  for (Index cell = 0; cell < target.cell_count(); ++cell) {
    const auto [x, y] = target.cell_center(cell);
    const double fc = std::floor((x - s.x0()) / s.cellsize);
    const double fr = std::floor((y - s.y0()) / s.cellsize);
    if (fc < 0 || fr < 0 || fc >= static_cast<double>(s.ncols) || fr >= static_cast<double>(s.nrows)) continue;
    out.values(cell / target.ncols, cell % target.ncols) =
        src.values(s.nrows - 1 - static_cast<Index>(fr), static_cast<Index>(fc));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Scene

namespace {

Grid aligned(const Grid& g, const GridHeader& ref, bool allow_resample, const char* name) {
  if (g.header.same_geometry(ref)) return g;
  const GridHeader& h = g.header;
  const double w1 = static_cast<double>(h.ncols) * h.cellsize, h1 = static_cast<double>(h.nrows) * h.cellsize;
  const double w2 = static_cast<double>(ref.ncols) * ref.cellsize, h2 = static_cast<double>(ref.nrows) * ref.cellsize;
  const bool same_extent = std::abs(h.x0() - ref.x0()) <= 1e-9 && std::abs(h.y0() - ref.y0()) <= 1e-9 &&
                           std::abs(w1 - w2) <= 1e-9 && std::abs(h1 - h2) <= 1e-9;
  if (allow_resample && same_extent) return resample_nearest(g, ref);
  throw DataError(std::string(name) + " grid geometry differs from the DPM grid" +
                  (allow_resample ? " (extents differ, cannot resample)" : ""));
}

}  // namespace

Scene assemble_scene(const SceneInputs& in, const SceneOptions& opts) {
  if (!(opts.y_floor > 0.0 && opts.y_floor < 1.0)) throw ConfigError("y_floor must lie in (0, 1)");
  const GridHeader& ref = in.dpm.header;
  Scene s;
  s.header = ref;
  std::optional<Grid> pga, ls, lf, fp;
  if (in.pga) pga = aligned(*in.pga, ref, opts.allow_nearest_resample, "PGA");
  if (in.prior_ls) ls = aligned(*in.prior_ls, ref, opts.allow_nearest_resample, "LS prior");
  if (in.prior_lf) lf = aligned(*in.prior_lf, ref, opts.allow_nearest_resample, "LF prior");
  if (in.footprint) fp = aligned(*in.footprint, ref, opts.allow_nearest_resample, "footprint");

  for (Index cell = 0; cell < ref.cell_count(); ++cell)
    if (in.dpm.at(cell) != ref.nodata) s.cells.push_back(cell);
  if (s.cells.empty()) throw DataError("DPM grid has no valid cells");
  const Index n = s.size();
  s.y.resize(n);
  s.pga = Vector::Zero(n);
  s.p_ls = Vector::Zero(n);
  s.p_lf = Vector::Zero(n);
  s.footprint = Vector::Ones(n);
  s.u = Vector::Zero(n);
  auto fetch = [&](const std::optional<Grid>& g, Index cell, const char* name) {
    const double v = g->at(cell);
    if (v == g->header.nodata)
      throw DataError(std::string(name) + " grid is NODATA at valid DPM cell " + std::to_string(cell));
    return v;
  };
  for (Index l = 0; l < n; ++l) {
    const Index cell = s.cells[static_cast<std::size_t>(l)];
    s.y(l) = std::clamp(in.dpm.at(cell), opts.y_floor, 1.0);
    if (pga) {
      s.pga(l) = fetch(pga, cell, "PGA");
      if (s.pga(l) < 0.0) throw DataError("negative PGA at cell " + std::to_string(cell));
    }
    if (ls) s.p_ls(l) = fetch(ls, cell, "LS prior");
    if (lf) s.p_lf(l) = fetch(lf, cell, "LF prior");
    if (fp) s.footprint(l) = fetch(fp, cell, "footprint") != 0.0 ? 1.0 : 0.0;
  }
  return s;
}

PruneMode prune_mode_from_string(std::string_view name) {
  if (name == "none") return PruneMode::none;
  if (name == "strict") return PruneMode::strict;
  if (name == "compensated") return PruneMode::compensated;
  throw ConfigError("unknown pruning mode '" + std::string(name) + "' (expected none, strict or compensated)");
}

std::string_view to_string(PruneMode mode) {
  switch (mode) {
    case PruneMode::none: return "none";
    case PruneMode::strict: return "strict";
    case PruneMode::compensated: return "compensated";
  }
  return "?";
}

std::vector<std::uint8_t> prune_by_footprint(const Scene& scene, const PruneOptions& opts, const Matrix* bd_prior) {
  const Index n = scene.size();
  std::vector<std::uint8_t> pruned(static_cast<std::size_t>(n), 0);
  if (opts.mode == PruneMode::none) return pruned;
  if (opts.mode == PruneMode::compensated) {
    if (!bd_prior || bd_prior->cols() != n) throw ConfigError("compensated pruning needs the BD prior field");
    if (!(opts.tau >= 0.0 && opts.tau <= 1.0)) throw ConfigError("pruning tau must lie in [0, 1]");
  }
  for (Index l = 0; l < n; ++l) {
    if (scene.footprint(l) != 0.0) continue;
    bool prune = true;
    if (opts.mode == PruneMode::compensated) prune = 1.0 - (*bd_prior)(0, l) < opts.tau;
    pruned[static_cast<std::size_t>(l)] = prune ? 1 : 0;
  }
  return pruned;
}

Evidence scene_evidence(const Scene& scene, std::array<Matrix, kHazardCount> prior_offset,
                        std::vector<std::uint8_t> pruned) {
  Evidence ev;
  ev.log_y = scene.y.array().log().matrix();
  ev.u = scene.u;
  ev.prior_offset = std::move(prior_offset);
  ev.bd_pruned = std::move(pruned);
  return ev;
}

void reintegrate_pruned(PosteriorField& post, const std::vector<std::uint8_t>& pruned) {
  Matrix& q = post.q[idx(HazardKind::BD)];
  if (q.size() == 0) return;
  for (std::size_t l = 0; l < pruned.size(); ++l) {
    if (!pruned[l]) continue;
    q.col(static_cast<Index>(l)).setZero();
    q(0, static_cast<Index>(l)) = 1.0;
  }
}

Grid location_grid(const Scene& scene, const Vector& values) {
  if (values.size() != scene.size()) throw DataError("location_grid: value count differs from the scene");
  Grid g = Grid::filled(scene.header, scene.header.nodata);
  for (Index l = 0; l < scene.size(); ++l) {
    const Index cell = scene.cells[static_cast<std::size_t>(l)];
    g.values(cell / scene.header.ncols, cell % scene.header.ncols) = values(l);
  }
  return g;
}

// ---------------------------------------------------------------------------------------------
// Ground truth

GroundTruth read_ground_truth(const fs::path& path, const GridHeader& header, int max_class) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ground truth " + path.string());
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) parse_fail(path, 1, "empty file");
  ++lineno;
  if (lower(std::string(trim(line))) != "lon,lat,class") parse_fail(path, lineno, "expected header 'lon,lat,class'");
  GroundTruth gt;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view t = trim(line);
    if (t.empty()) continue;
    std::vector<std::string_view> f;
    std::size_t start = 0;
    while (true) {
      const auto comma = t.find(',', start);
      f.push_back(trim(t.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (f.size() != 3) parse_fail(path, lineno, "expected 3 fields");
    const auto lon = parse_double(f[0]), lat = parse_double(f[1]);
    if (!lon || !lat) parse_fail(path, lineno, "non-numeric coordinate");
    int label = 0;
    const auto [ptr, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), label);
    if (ec != std::errc() || ptr != f[2].data() + f[2].size())
      parse_fail(path, lineno, "class '" + std::string(f[2]) + "' is not an integer");
    if (label < 0 || label > max_class)
      parse_fail(path, lineno, "class " + std::to_string(label) + " outside 0.." + std::to_string(max_class));
    const double fc = std::floor((*lon - header.x0()) / header.cellsize);
    const double fr = std::floor((*lat - header.y0()) / header.cellsize);
    if (fc < 0 || fr < 0 || fc >= static_cast<double>(header.ncols) || fr >= static_cast<double>(header.nrows)) {
      ++gt.skipped;
      continue;
    }
    const Index cell = (header.nrows - 1 - static_cast<Index>(fr)) * header.ncols + static_cast<Index>(fc);
    gt.points.push_back({*lon, *lat, label, cell});
  }
  return gt;
}

void write_ground_truth(const std::vector<TruthPoint>& points, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "lon,lat,class\n";
  for (const auto& p : points) out << format_double(p.lon) << ',' << format_double(p.lat) << ',' << p.label << '\n';
}

// ---------------------------------------------------------------------------------------------
// ShakeMap

Grid read_shakemap_xml(const fs::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree doc;
  try {
    pt::read_xml(path.string(), doc);
  } catch (const pt::xml_parser_error& e) {
    throw DataError("ShakeMap " + path.string() + ": " + e.what());
  }
  const auto root_it = doc.begin();
  if (root_it == doc.end()) throw DataError("ShakeMap " + path.string() + ": empty document");
  const pt::ptree& root = root_it->second;
  const auto spec = root.get_child_optional("grid_specification.<xmlattr>");
  if (!spec) throw DataError("ShakeMap " + path.string() + ": missing grid_specification");
  double lon_min = 0, lat_min = 0, dlon = 0, dlat = 0;
  Index nlon = 0, nlat = 0;
  try {
    lon_min = spec->get<double>("lon_min");
    lat_min = spec->get<double>("lat_min");
    dlon = spec->get<double>("nominal_lon_spacing");
    dlat = spec->get<double>("nominal_lat_spacing");
    nlon = spec->get<Index>("nlon");
    nlat = spec->get<Index>("nlat");
  } catch (const pt::ptree_error& e) {
    throw DataError("ShakeMap " + path.string() + ": bad grid_specification: " + e.what());
  }
  if (nlon < 1 || nlat < 1 || !(dlon > 0) || !(dlat > 0))
    throw DataError("ShakeMap " + path.string() + ": invalid grid dimensions");
  if (std::abs(dlon - dlat) > 1e-9 * std::max(dlon, dlat))
    throw DataError("ShakeMap " + path.string() + ": lon and lat spacing differ; square cells are required");

  std::map<int, std::pair<std::string, std::string>> fields;
  for (const auto& [name, child] : root) {
    if (name != "grid_field") continue;
    const auto& a = child.get_child("<xmlattr>");
    fields[a.get<int>("index")] = {a.get<std::string>("name"), a.get<std::string>("units", "")};
  }
  int lon_col = -1, lat_col = -1, pga_col = -1;
  std::string pga_units, available;
  int pos = 0;
  for (const auto& [index, f] : fields) {
    const std::string up = lower(f.first);
    if (up == "lon") lon_col = pos;
    if (up == "lat") lat_col = pos;
    if (up == "pga") pga_col = pos, pga_units = lower(f.second);
    available += (available.empty() ? "" : ", ") + f.first;
    ++pos;
  }
  if (pga_col < 0) throw DataError("ShakeMap " + path.string() + ": no PGA field (available: " + available + ")");
  if (lon_col < 0 || lat_col < 0) throw DataError("ShakeMap " + path.string() + ": LON/LAT fields missing");
  const double unit = (pga_units == "pctg" || pga_units == "%g" || pga_units == "percent-g") ? 0.01 : 1.0;

  GridHeader h;
  h.ncols = nlon;
  h.nrows = nlat;
  h.cellsize = dlon;
  h.center = true;
  h.xllcorner = lon_min;
  h.yllcorner = lat_min;
  Grid g = Grid::filled(h, h.nodata);
  std::istringstream data(root.get<std::string>("grid_data", ""));
  std::string line;
  Index rows = 0;
  while (std::getline(data, line)) {
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != fields.size())
      throw DataError("ShakeMap " + path.string() + ": grid_data row " + std::to_string(rows + 1) + " has " +
                      std::to_string(toks.size()) + " values, expected " + std::to_string(fields.size()));
    const auto lon = parse_double(toks[static_cast<std::size_t>(lon_col)]);
    const auto lat = parse_double(toks[static_cast<std::size_t>(lat_col)]);
    const auto v = parse_double(toks[static_cast<std::size_t>(pga_col)]);
    if (!lon || !lat || !v) throw DataError("ShakeMap " + path.string() + ": non-numeric grid_data value");
    const Index c = static_cast<Index>(std::lround((*lon - lon_min) / dlon));
    const Index r_up = static_cast<Index>(std::lround((*lat - lat_min) / dlat));
    if (c >= 0 && c < nlon && r_up >= 0 && r_up < nlat) g.values(nlat - 1 - r_up, c) = *v * unit;
    ++rows;
  }
  if (rows != nlon * nlat)
    throw DataError("ShakeMap " + path.string() + ": " + std::to_string(rows) + " grid_data rows, expected nlon*nlat = " +
                    std::to_string(nlon * nlat));
  return g;
}

// ---------------------------------------------------------------------------------------------
// Outputs and serialization

std::string posterior_grid_name(HazardKind h, int state) {
  return "posterior_" + std::string(to_string(h)) + "_" + std::to_string(state) + ".asc";
}

std::string class_grid_name(HazardKind h) { return "class_" + std::string(to_string(h)) + ".asc"; }

namespace {

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

json weights_json(const WeightSet& w) {
  json j;
  for (HazardKind h : kAllHazards) {
    const auto& nw = w.node[idx(h)];
    if (nw.leak.size() == 0) continue;
    json n{{"leak", vec_json(nw.leak)}, {"noise", vec_json(nw.noise)}, {"prior", nw.prior}};
    for (HazardKind k : kAllHazards)
      if (nw.parent[idx(k)].size()) n["parent"][std::string(to_string(k))] = vec_json(nw.parent[idx(k)]);
    j["node"][std::string(to_string(h))] = n;
  }
  for (HazardKind k : kAllHazards)
    if (w.obs[idx(k)].size()) j["obs"][std::string(to_string(k))] = vec_json(w.obs[idx(k)]);
  j["obs_leak"] = w.obs_leak;
  j["obs_noise"] = w.obs_noise;
  j["sigma_xor"] = w.sigma_xor;
  return j;
}

WeightSet json_weights(const CausalNetwork& net, const json& j) {
  WeightSet w = WeightSet::zeros(net);
  for (HazardKind h : net.latent_nodes()) {
    const json& n = j.at("node").at(std::string(to_string(h)));
    auto& nw = w.node[idx(h)];
    nw.leak = json_vec(n.at("leak"));
    nw.noise = json_vec(n.at("noise"));
    nw.prior = n.at("prior").get<double>();
    for (HazardKind k : net.parents(h)) nw.parent[idx(k)] = json_vec(n.at("parent").at(std::string(to_string(k))));
  }
  for (HazardKind k : net.observation_parents()) w.obs[idx(k)] = json_vec(j.at("obs").at(std::string(to_string(k))));
  w.obs_leak = j.at("obs_leak").get<double>();
  w.obs_noise = j.at("obs_noise").get<double>();
  w.sigma_xor = j.at("sigma_xor").get<double>();
  validate_weights(net, w);
  return w;
}

void write_json(const json& j, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw DataError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_outputs(const CausalNetwork& net, const Scene& scene, const FitResult& result, const fs::path& outdir) {
  std::error_code ec;
  fs::create_directories(outdir, ec);
  if (ec || !fs::is_directory(outdir)) throw DataError("cannot create output directory " + outdir.string());
  for (HazardKind h : net.latent_nodes()) {
    const Matrix& q = result.posterior.q[idx(h)];
    if (q.cols() != scene.size()) throw DataError("posterior size differs from the scene");
    for (int m = 0; m < net.num_states(h); ++m)
      write_grid(location_grid(scene, q.row(m).transpose()), outdir / posterior_grid_name(h, m));
    Vector cls(scene.size());
    for (Index l = 0; l < scene.size(); ++l) {
      Index best = 0;
      q.col(l).maxCoeff(&best);  // first maximum wins
      cls(l) = static_cast<double>(best);
    }
    write_grid(location_grid(scene, cls), outdir / class_grid_name(h));
  }
  std::ofstream trace(outdir / "elbo_trace.csv");
  if (!trace) throw DataError("cannot write ELBO trace");
  trace << "epoch,audit_elbo\n";
  for (std::size_t e = 0; e < result.trace.size(); ++e) trace << e << ',' << format_double(result.trace[e]) << '\n';
  write_weights(result.weights, outdir / "weights.json");
}

std::array<Matrix, kHazardCount> read_posterior_grids(const CausalNetwork& net, const fs::path& dir,
                                                      GridHeader* header) {
  std::array<Matrix, kHazardCount> out;
  std::optional<GridHeader> ref;
  for (HazardKind h : net.latent_nodes()) {
    for (int m = 0; m < net.num_states(h); ++m) {
      const Grid g = read_grid(dir / posterior_grid_name(h, m));
      if (!ref) ref = g.header;
      if (!g.header.same_geometry(*ref)) throw DataError("posterior grids disagree in geometry");
      if (out[idx(h)].size() == 0) out[idx(h)].resize(net.num_states(h), ref->cell_count());
      for (Index cell = 0; cell < ref->cell_count(); ++cell) {
        const double v = g.at(cell);
        out[idx(h)](m, cell) = v == g.header.nodata ? std::numeric_limits<double>::quiet_NaN() : v;
      }
    }
  }
  if (header && ref) *header = *ref;
  return out;
}

void write_weights(const WeightSet& w, const fs::path& path) { write_json(weights_json(w), path); }

WeightSet read_weights(const CausalNetwork& net, const fs::path& path) {
  try {
    return json_weights(net, read_json(path));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_checkpoint(const FitCheckpoint& c, const fs::path& path) {
  json j;
  j["epoch"] = c.epoch;
  j["stall"] = c.stall;
  j["weights"] = weights_json(c.weights);
  j["trace"] = c.trace;
  j["precond"] = vec_json(c.precond.mean_sq);
  for (HazardKind h : kAllHazards) {
    const std::string name(to_string(h));
    if (c.xi.xi[idx(h)].size()) j["xi"][name] = vec_json(c.xi.xi[idx(h)]);
    const Matrix& q = c.posterior.q[idx(h)];
    if (q.size() == 0) continue;
    json rows = json::array();
    for (Index m = 0; m < q.rows(); ++m) rows.push_back(vec_json(q.row(m).transpose()));
    j["posterior"][name] = rows;
  }
  write_json(j, path);
}

FitCheckpoint read_checkpoint(const CausalNetwork& net, const fs::path& path) {
  const json j = read_json(path);
  FitCheckpoint c;
  try {
    c.epoch = j.at("epoch").get<int>();
    c.stall = j.at("stall").get<int>();
    c.weights = json_weights(net, j.at("weights"));
    c.trace = j.at("trace").get<std::vector<double>>();
    c.precond.mean_sq = json_vec(j.at("precond"));
    for (HazardKind h : net.latent_nodes()) {
      const std::string name(to_string(h));
      c.xi.xi[idx(h)] = json_vec(j.at("xi").at(name));
      const json& rows = j.at("posterior").at(name);
      Matrix q;
      for (std::size_t m = 0; m < rows.size(); ++m) {
        const Vector r = json_vec(rows[m]);
        if (m == 0) q.resize(static_cast<Index>(rows.size()), r.size());
        q.row(static_cast<Index>(m)) = r.transpose();
      }
      c.posterior.q[idx(h)] = q;
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace qvcbi
