#include "qvcbi/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace qvcbi {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s;
}

std::string fmt_nodes(const std::vector<HazardKind>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::string(to_string(v[i]));
  return s;
}

/// One INI section with typed, key-checked accessors.
class Section {
 public:
  Section(std::string name, const pt::ptree* tree, fs::path base)
      : name_(std::move(name)), tree_(tree), base_(std::move(base)) {}

  void allow(std::initializer_list<const char*> keys) {
    if (!tree_) return;
    for (const auto& [key, child] : *tree_) {
      if (!child.empty()) fail(key, "nested values are not supported");
      if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) == keys.end())
        throw ConfigError("unknown key '" + key + "' in [" + name_ + "]");
    }
  }

  std::optional<std::string> raw(const char* key) const {
    if (!tree_) return std::nullopt;
    const auto v = tree_->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  void get(const char* key, double& out) const {
    if (const auto v = raw(key)) out = parse_double(key, *v);
  }
  void get(const char* key, std::optional<double>& out) const {
    if (const auto v = raw(key)) out = parse_double(key, *v);
  }
  void get(const char* key, int& out) const {
    if (const auto v = raw(key)) {
      const long long x = parse_integer(key, *v);
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(key, "out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, Index& out) const {
    if (const auto v = raw(key)) out = static_cast<Index>(parse_integer(key, *v));
  }
  void get(const char* key, std::uint64_t& out) const {
    if (const auto v = raw(key)) {
      std::uint64_t x = 0;
      const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
      if (ec != std::errc() || ptr != v->data() + v->size()) fail(key, "expected an unsigned integer, got '" + *v + "'");
      out = x;
    }
  }
  void get(const char* key, bool& out) const {
    if (const auto v = raw(key)) {
      const std::string s = lower(*v);
      if (s == "true" || s == "yes" || s == "1" || s == "on") out = true;
      else if (s == "false" || s == "no" || s == "0" || s == "off") out = false;
      else fail(key, "expected true or false, got '" + *v + "'");
    }
  }
  void get(const char* key, std::string& out) const {
    if (const auto v = raw(key)) out = *v;
  }
  void get_path(const char* key, fs::path& out) const {
    if (const auto v = raw(key)) {
      if (v->empty()) fail(key, "empty path");
      const fs::path p(*v);
      out = (p.is_absolute() || base_.empty()) ? p.lexically_normal() : (base_ / p).lexically_normal();
    }
  }
  void get(const char* key, std::vector<double>& out) const {
    if (const auto v = raw(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(parse_double(key, item));
    }
  }
  void get(const char* key, std::vector<HazardKind>& out) const {
    if (const auto v = raw(key)) {
      out.clear();
      if (lower(*v) == "none") return;
      for (const auto& item : split_list(*v)) {
        try {
          const HazardKind h = hazard_from_string(item);
          if (std::find(out.begin(), out.end(), h) != out.end()) fail(key, "'" + item + "' listed twice");
          out.push_back(h);
        } catch (const ConfigError&) {
          throw;
        } catch (const Error&) {
          fail(key, "unknown node '" + item + "'");
        }
      }
      std::sort(out.begin(), out.end());
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("[" + name_ + "] " + key + ": " + what);
  }

 private:
  double parse_double(const char* key, const std::string& v) const {
    double x = 0.0;
    const char* b = v.data();
    if (!v.empty() && v.front() == '+') ++b;
    const auto [ptr, ec] = std::from_chars(b, v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
      fail(key, "expected a number, got '" + v + "'");
    return x;
  }
  long long parse_integer(const char* key, const std::string& v) const {
    long long x = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size()) fail(key, "expected an integer, got '" + v + "'");
    return x;
  }

  std::string name_;
  const pt::ptree* tree_;
  fs::path base_;
};

XiMode xi_mode_from_string(const std::string& s) {
  if (s == "fixedpoint") return XiMode::fixedpoint;
  if (s == "gradient") return XiMode::gradient;
  throw ConfigError("[fit] xi_mode: expected fixedpoint or gradient, got '" + s + "'");
}

PreconditionerMode preconditioner_from_string(const std::string& s) {
  if (s == "identity") return PreconditionerMode::identity;
  if (s == "rmsprop") return PreconditionerMode::rmsprop;
  throw ConfigError("[fit] preconditioner: expected identity or rmsprop, got '" + s + "'");
}

template <typename F>
auto config_errors(const char* section, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("[") + section + "] " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Configuration

NetworkSpec NetworkSection::spec() const {
  NetworkSpec s;
  s.nodes = {std::string(kLeakNode), std::string(kObservationNode)};
  auto present = [&](HazardKind h) { return std::find(nodes.begin(), nodes.end(), h) != nodes.end(); };
  for (HazardKind h : nodes) {
    s.nodes.emplace_back(to_string(h));
    s.max_state[idx(h)] = max_state[idx(h)];
    s.edges.emplace_back(std::string(to_string(h)), std::string(kObservationNode));
  }
  if (present(HazardKind::BD)) {
    for (HazardKind h : {HazardKind::LS, HazardKind::LF})
      if (present(h)) s.edges.emplace_back(std::string(to_string(h)), "BD");
  }
  if (xor_node && present(HazardKind::LS) && present(HazardKind::LF)) {
    s.nodes.emplace_back(kXorNode);
    s.edges.emplace_back("LS", std::string(kXorNode));
    s.edges.emplace_back("LF", std::string(kXorNode));
  }
  for (HazardKind h : priors) {
    if (!present(h)) throw ConfigError("[network] priors: node " + std::string(to_string(h)) + " is not present");
    s.priors.push_back(h);
  }
  return s;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  static const std::set<std::string> sections{"network", "priors", "data", "synth", "pruning", "fit", "output"};
  for (const auto& [key, child] : tree) {
    if (child.empty()) throw ConfigError("key '" + key + "' outside of any section");
    if (!sections.count(key)) throw ConfigError("unknown section [" + key + "]");
  }
  auto section = [&](const char* name) {
    const auto it = tree.find(name);
    return Section(name, it == tree.not_found() ? nullptr : &it->second, base_dir);
  };

  RunConfig cfg;
  {
    Section s = section("network");
    s.allow({"nodes", "ls_max_state", "lf_max_state", "bd_max_state", "xor", "priors"});
    s.get("nodes", cfg.network.nodes);
    s.get("ls_max_state", cfg.network.max_state[idx(HazardKind::LS)]);
    s.get("lf_max_state", cfg.network.max_state[idx(HazardKind::LF)]);
    s.get("bd_max_state", cfg.network.max_state[idx(HazardKind::BD)]);
    s.get("xor", cfg.network.xor_node);
    s.get("priors", cfg.network.priors);
    config_errors("network", [&] { return build_network(cfg.network.spec()); });
  }
  {
    Section s = section("priors");
    s.allow({"mode", "gamma", "curve", "pager_intercept", "pager_slope", "prior_ls", "prior_lf"});
    std::string mode = std::string(to_string(cfg.priors.mode));
    s.get("mode", mode);
    cfg.priors.mode = config_errors("priors", [&] { return prior_mode_from_string(mode); });
    s.get("gamma", cfg.priors.gamma);
    if (!(cfg.priors.gamma >= 0.0 && cfg.priors.gamma <= 1.0)) s.fail("gamma", "must lie in [0, 1]");
    s.get_path("curve", cfg.priors.curve);
    s.get("pager_intercept", cfg.priors.pager_intercept);
    s.get("pager_slope", cfg.priors.pager_slope);
    if (cfg.priors.pager_intercept.size() != cfg.priors.pager_slope.size())
      s.fail("pager_slope", "must have as many entries as pager_intercept");
    if (!cfg.priors.pager_intercept.empty() &&
        static_cast<int>(cfg.priors.pager_intercept.size()) != cfg.network.max_state[idx(HazardKind::BD)])
      s.fail("pager_intercept", "needs one entry per damage state (bd_max_state)");
    s.get_path("prior_ls", cfg.priors.prior_ls);
    s.get_path("prior_lf", cfg.priors.prior_lf);
  }
  {
    Section s = section("data");
    s.allow({"dpm", "pga", "shakemap", "footprint", "truth_ls", "truth_lf", "truth_bd", "y_floor", "allow_resample"});
    s.get_path("dpm", cfg.data.dpm);
    s.get_path("pga", cfg.data.pga);
    s.get_path("shakemap", cfg.data.shakemap);
    s.get_path("footprint", cfg.data.footprint);
    s.get_path("truth_ls", cfg.data.truth[idx(HazardKind::LS)]);
    s.get_path("truth_lf", cfg.data.truth[idx(HazardKind::LF)]);
    s.get_path("truth_bd", cfg.data.truth[idx(HazardKind::BD)]);
    s.get("y_floor", cfg.data.y_floor);
    s.get("allow_resample", cfg.data.allow_resample);
    if (!(cfg.data.y_floor > 0.0 && cfg.data.y_floor < 1.0)) s.fail("y_floor", "must lie in (0, 1)");
    if (!cfg.data.pga.empty() && !cfg.data.shakemap.empty()) s.fail("shakemap", "pga and shakemap are exclusive");
  }
  if (tree.find("synth") != tree.not_found()) {
    Section s = section("synth");
    s.allow({"preset", "size", "footprint_coverage", "footprint_corruption", "corruption_pga_bias", "pga_noise"});
    SynthSection syn;
    s.get("preset", syn.preset);
    s.get("size", syn.size);
    s.get("footprint_coverage", syn.footprint_coverage);
    s.get("footprint_corruption", syn.footprint_corruption);
    s.get("corruption_pga_bias", syn.corruption_pga_bias);
    s.get("pga_noise", syn.pga_noise);
    if (syn.size < 2) s.fail("size", "must be at least 2");
    cfg.synth = syn;
    config_errors("synth", [&] {
      cfg.synth_config().validate();
      return 0;
    });
    const DataSection& d = cfg.data;
    if (!d.dpm.empty() || !d.pga.empty() || !d.shakemap.empty() || !d.footprint.empty() ||
        !cfg.priors.prior_ls.empty() || !cfg.priors.prior_lf.empty() ||
        std::any_of(d.truth.begin(), d.truth.end(), [](const fs::path& p) { return !p.empty(); }))
      throw ConfigError("[synth] generates the scene; remove the grid and truth paths from [data] and [priors]");
  }
  {
    Section s = section("pruning");
    s.allow({"mode", "tau"});
    std::string mode = std::string(to_string(cfg.pruning.mode));
    s.get("mode", mode);
    cfg.pruning.mode = config_errors("pruning", [&] { return prune_mode_from_string(mode); });
    s.get("tau", cfg.pruning.tau);
    if (!(cfg.pruning.tau >= 0.0 && cfg.pruning.tau <= 1.0)) s.fail("tau", "must lie in [0, 1]");
  }
  {
    Section s = section("fit");
    s.allow({"learning_rate", "batch_size", "max_epochs", "e_step_sweeps", "e_step_restarts", "lambda1", "lambda2", "sigma_xor", "seed",
             "tolerance", "patience", "xi_mode", "xi_learning_rate", "full_batch", "preconditioner",
             "update_weights", "warmup_epochs", "init_min_obs_weight", "init_max_obs_noise", "update_xi",
             "audit_size", "checkpoint_every"});
    FitConfig& f = cfg.fit;
    s.get("learning_rate", f.learning_rate);
    s.get("batch_size", f.batch_size);
    s.get("max_epochs", f.max_epochs);
    s.get("e_step_sweeps", f.e_step_sweeps);
    s.get("e_step_restarts", f.e_step_restarts);
    s.get("lambda1", f.lambda1);
    s.get("lambda2", f.lambda2);
    s.get("sigma_xor", f.sigma_xor);
    s.get("seed", f.seed);
    s.get("tolerance", f.tolerance);
    s.get("patience", f.patience);
    std::string xi = f.xi_mode == XiMode::fixedpoint ? "fixedpoint" : "gradient";
    s.get("xi_mode", xi);
    f.xi_mode = xi_mode_from_string(xi);
    s.get("xi_learning_rate", f.xi_learning_rate);
    s.get("full_batch", f.full_batch);
    std::string pre = f.preconditioner == PreconditionerMode::identity ? "identity" : "rmsprop";
    s.get("preconditioner", pre);
    f.preconditioner = preconditioner_from_string(pre);
    s.get("update_weights", f.update_weights);
    s.get("warmup_epochs", f.warmup_epochs);
    s.get("init_min_obs_weight", f.init_min_obs_weight);
    s.get("init_max_obs_noise", f.init_max_obs_noise);
    s.get("update_xi", f.update_xi);
    s.get("audit_size", f.audit_size);
    s.get("checkpoint_every", cfg.checkpoint_every);
    if (cfg.checkpoint_every < 0) s.fail("checkpoint_every", "must be nonnegative");
    // Size-independent checks; the batch size is checked against the scene later.
    config_errors("fit", [&] {
      f.validate(std::numeric_limits<Index>::max());
      return 0;
    });
  }
  {
    Section s = section("output");
    s.allow({"dir", "threshold", "roc"});
    cfg.output.dir = base_dir.empty() ? fs::path("out") : (base_dir / "out").lexically_normal();
    s.get_path("dir", cfg.output.dir);
    s.get("threshold", cfg.output.threshold);
    s.get("roc", cfg.output.roc);
    if (!(cfg.output.threshold >= 0.0 && cfg.output.threshold <= 1.0)) s.fail("threshold", "must lie in [0, 1]");
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path());
}

std::string RunConfig::canonical() const {
  std::ostringstream o;
  auto path = [](const fs::path& p) { return p.string(); };
  auto kv = [&](const char* k, const std::string& v) {
    if (!v.empty()) o << k << " = " << v << '\n';
  };
  o << "[network]\n";
  kv("nodes", fmt_nodes(network.nodes));
  kv("ls_max_state", std::to_string(network.max_state[idx(HazardKind::LS)]));
  kv("lf_max_state", std::to_string(network.max_state[idx(HazardKind::LF)]));
  kv("bd_max_state", std::to_string(network.max_state[idx(HazardKind::BD)]));
  kv("xor", fmt_bool(network.xor_node));
  kv("priors", fmt_nodes(network.priors));
  o << "\n[priors]\n";
  kv("mode", std::string(to_string(priors.mode)));
  kv("gamma", fmt(priors.gamma));
  kv("curve", path(priors.curve));
  kv("pager_intercept", fmt_list(priors.pager_intercept));
  kv("pager_slope", fmt_list(priors.pager_slope));
  kv("prior_ls", path(priors.prior_ls));
  kv("prior_lf", path(priors.prior_lf));
  o << "\n[data]\n";
  kv("dpm", path(data.dpm));
  kv("pga", path(data.pga));
  kv("shakemap", path(data.shakemap));
  kv("footprint", path(data.footprint));
  kv("truth_ls", path(data.truth[idx(HazardKind::LS)]));
  kv("truth_lf", path(data.truth[idx(HazardKind::LF)]));
  kv("truth_bd", path(data.truth[idx(HazardKind::BD)]));
  kv("y_floor", fmt(data.y_floor));
  kv("allow_resample", fmt_bool(data.allow_resample));
  if (synth) {
    o << "\n[synth]\n";
    kv("preset", synth->preset);
    kv("size", std::to_string(synth->size));
    if (synth->footprint_coverage) kv("footprint_coverage", fmt(*synth->footprint_coverage));
    if (synth->footprint_corruption) kv("footprint_corruption", fmt(*synth->footprint_corruption));
    if (synth->corruption_pga_bias) kv("corruption_pga_bias", fmt(*synth->corruption_pga_bias));
    if (synth->pga_noise) kv("pga_noise", fmt(*synth->pga_noise));
  }
  o << "\n[pruning]\n";
  kv("mode", std::string(to_string(pruning.mode)));
  kv("tau", fmt(pruning.tau));
  o << "\n[fit]\n";
  kv("learning_rate", fmt(fit.learning_rate));
  kv("batch_size", std::to_string(fit.batch_size));
  kv("max_epochs", std::to_string(fit.max_epochs));
  kv("e_step_sweeps", std::to_string(fit.e_step_sweeps));
  kv("e_step_restarts", fmt_bool(fit.e_step_restarts));
  kv("lambda1", fmt(fit.lambda1));
  kv("lambda2", fmt(fit.lambda2));
  kv("sigma_xor", fmt(fit.sigma_xor));
  kv("seed", std::to_string(fit.seed));
  kv("tolerance", fmt(fit.tolerance));
  kv("patience", std::to_string(fit.patience));
  kv("xi_mode", fit.xi_mode == XiMode::fixedpoint ? "fixedpoint" : "gradient");
  kv("xi_learning_rate", fmt(fit.xi_learning_rate));
  kv("full_batch", fmt_bool(fit.full_batch));
  kv("preconditioner", fit.preconditioner == PreconditionerMode::identity ? "identity" : "rmsprop");
  kv("update_weights", fmt_bool(fit.update_weights));
  kv("warmup_epochs", std::to_string(fit.warmup_epochs));
  kv("init_min_obs_weight", fmt(fit.init_min_obs_weight));
  kv("init_max_obs_noise", fmt(fit.init_max_obs_noise));
  kv("update_xi", fmt_bool(fit.update_xi));
  kv("audit_size", std::to_string(fit.audit_size));
  kv("checkpoint_every", std::to_string(checkpoint_every));
  o << "\n[output]\n";
  kv("dir", path(output.dir));
  kv("threshold", fmt(output.threshold));
  kv("roc", fmt_bool(output.roc));
  return o.str();
}

SynthConfig RunConfig::synth_config() const {
  if (!synth) throw ConfigError("no [synth] section");
  SynthConfig c = scenario_preset(synth->preset, fit.seed, synth->size);
  if (synth->footprint_coverage) c.footprint_coverage = *synth->footprint_coverage;
  if (synth->footprint_corruption) c.footprint_corruption = *synth->footprint_corruption;
  if (synth->corruption_pga_bias) c.corruption_pga_bias = *synth->corruption_pga_bias;
  if (synth->pga_noise) c.pga_noise = *synth->pga_noise;
  return c;
}

Command command_from_string(std::string_view name) {
  if (name == "synth") return Command::synth;
  if (name == "fit") return Command::fit;
  if (name == "eval") return Command::eval;
  if (name == "pipeline") return Command::pipeline;
  throw ConfigError("unknown command '" + std::string(name) + "'");
}

std::string_view to_string(Command c) {
  switch (c) {
    case Command::synth: return "synth";
    case Command::fit: return "fit";
    case Command::eval: return "eval";
    case Command::pipeline: return "pipeline";
  }
  return "?";
}

void validate_inputs(const RunConfig& cfg, Command cmd) {
  auto must_exist = [](const fs::path& p, const char* what) {
    if (!p.empty() && !fs::is_regular_file(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
  };
  must_exist(cfg.priors.curve, "[priors] curve");
  if (cmd == Command::synth) {
    if (!cfg.synth) throw ConfigError("synth needs a [synth] section");
    return;
  }
  const bool generated = cfg.synth.has_value();
  if (cmd == Command::pipeline && generated) return;
  if (generated) {
    // fit/eval on a scene written earlier by synth into the output directory.
    for (const char* f : {"dpm.asc", "pga.asc", "prior_ls.asc", "prior_lf.asc", "footprint.asc"})
      must_exist(cfg.output.dir / f, "synthetic scene file");
    return;
  }
  if (cfg.data.dpm.empty()) throw ConfigError("[data] dpm is required");
  must_exist(cfg.data.dpm, "[data] dpm");
  must_exist(cfg.data.pga, "[data] pga");
  must_exist(cfg.data.shakemap, "[data] shakemap");
  must_exist(cfg.data.footprint, "[data] footprint");
  must_exist(cfg.priors.prior_ls, "[priors] prior_ls");
  must_exist(cfg.priors.prior_lf, "[priors] prior_lf");
  const auto& p = cfg.network.priors;
  if (std::find(p.begin(), p.end(), HazardKind::LS) != p.end() && cfg.priors.prior_ls.empty())
    throw ConfigError("[priors] prior_ls is required when LS carries a prior");
  if (std::find(p.begin(), p.end(), HazardKind::LF) != p.end() && cfg.priors.prior_lf.empty())
    throw ConfigError("[priors] prior_lf is required when LF carries a prior");
  if (cfg.pruning.mode != PruneMode::none && cfg.data.footprint.empty())
    throw ConfigError("[pruning] needs [data] footprint");
  if (cmd == Command::eval || cmd == Command::pipeline) {
    bool any = false;
    for (HazardKind h : kAllHazards) {
      must_exist(cfg.data.truth[idx(h)], "[data] truth");
      any = any || !cfg.data.truth[idx(h)].empty();
    }
    if (!any) throw ConfigError("evaluation needs at least one [data] truth_* file");
  }
}

// ---------------------------------------------------------------------------------------------
// Pipeline helpers

PreparedScene prepare_scene(const NetworkSpec& spec, const SceneInputs& inputs, const SceneOptions& scene_opts,
                            const PriorOptions& prior_opts, const PruneOptions& prune_opts) {
  PreparedScene p{build_network(spec), assemble_scene(inputs, scene_opts), {}, {}, 0, 0};
  p.prior = build_prior_field(p.net, p.scene.pga, p.scene.p_ls, p.scene.p_lf, prior_opts, &p.clipped_priors);
  const Matrix* bd_prior = p.net.has_prior(HazardKind::BD) ? &p.prior.p[idx(HazardKind::BD)] : nullptr;
  if (prune_opts.mode == PruneMode::compensated && !bd_prior)
    throw ConfigError("compensated pruning needs a BD prior");
  std::vector<std::uint8_t> pruned = p.net.has(HazardKind::BD) ? prune_by_footprint(p.scene, prune_opts, bd_prior)
                                                               : std::vector<std::uint8_t>(p.scene.cells.size(), 0);
  p.pruned = std::count(pruned.begin(), pruned.end(), std::uint8_t{1});
  p.evidence = scene_evidence(p.scene, attach_priors(p.net, p.prior, p.scene.size()), std::move(pruned));
  return p;
}

SceneInputs read_scene_inputs(const RunConfig& cfg, const fs::path& scene_dir) {
  SceneInputs in;
  if (cfg.synth) {
    in.dpm = read_grid(scene_dir / "dpm.asc");
    in.pga = read_grid(scene_dir / "pga.asc");
    in.prior_ls = read_grid(scene_dir / "prior_ls.asc");
    in.prior_lf = read_grid(scene_dir / "prior_lf.asc");
    in.footprint = read_grid(scene_dir / "footprint.asc");
    return in;
  }
  in.dpm = read_grid(cfg.data.dpm);
  if (!cfg.data.pga.empty()) in.pga = read_grid(cfg.data.pga);
  if (!cfg.data.shakemap.empty()) in.pga = read_shakemap_xml(cfg.data.shakemap);
  if (!cfg.priors.prior_ls.empty()) in.prior_ls = read_grid(cfg.priors.prior_ls);
  if (!cfg.priors.prior_lf.empty()) in.prior_lf = read_grid(cfg.priors.prior_lf);
  if (!cfg.data.footprint.empty()) in.footprint = read_grid(cfg.data.footprint);
  return in;
}

PriorOptions prior_options(const RunConfig& cfg) {
  PriorOptions o;
  o.mode = cfg.priors.mode;
  o.gamma = cfg.priors.gamma;
  o.curve = cfg.priors.curve.empty() ? default_fragility_curve() : read_fragility_curve(cfg.priors.curve);
  const int m = cfg.network.max_state[idx(HazardKind::BD)];
  if (cfg.priors.pager_intercept.empty()) {
    o.pager = PagerStub::weak(m);
  } else {
    o.pager.intercept = cfg.priors.pager_intercept;
    o.pager.slope = cfg.priors.pager_slope;
  }
  return o;
}

Matrix to_cells(const Scene& scene, const Matrix& per_location) {
  if (per_location.cols() != scene.size()) throw DataError("to_cells: column count differs from the scene");
  Matrix out = Matrix::Constant(per_location.rows(), scene.header.cell_count(), std::numeric_limits<double>::quiet_NaN());
  for (Index l = 0; l < scene.size(); ++l) out.col(scene.cells[static_cast<std::size_t>(l)]) = per_location.col(l);
  return out;
}

MetricsReport evaluate(const CausalNetwork& net, const EvalInputs& in, std::vector<NamedRoc>* rocs) {
  MetricsReport report;
  for (HazardKind h : net.latent_nodes()) {
    const auto& points = in.truth[idx(h)];
    if (points.empty()) continue;
    const Matrix& q = in.posterior[idx(h)];
    const Matrix& prior = in.prior[idx(h)];
    const std::string node(to_string(h));

    std::vector<Index> cells;
    std::vector<int> labels;
    for (const auto& p : points) {
      if (p.label < 0 || p.label >= q.rows()) throw DataError("truth class out of range for " + node);
      cells.push_back(p.cell);
      labels.push_back(p.label);
    }

    NodeMetrics nm;
    nm.node = node;
    nm.threshold = in.threshold;
    // Points with a usable posterior.
    std::vector<Index> used_cells;
    std::vector<int> used_labels;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const Index c = cells[i];
      if (c < 0 || c >= q.cols() || !q.col(c).allFinite()) {
        ++nm.excluded;
        continue;
      }
      used_cells.push_back(c);
      used_labels.push_back(labels[i]);
    }
    nm.points = static_cast<Index>(used_cells.size());
    if (used_cells.empty()) throw DataError("no truth point of " + node + " falls on a valid posterior cell");

    Matrix probs(q.rows(), nm.points);
    std::vector<double> damaged(used_cells.size());
    for (std::size_t i = 0; i < used_cells.size(); ++i) {
      probs.col(static_cast<Index>(i)) = q.col(used_cells[i]);
      damaged[i] = 1.0 - q(0, used_cells[i]);
    }
    nm.cross_entropy = cross_entropy(probs, used_labels);
    std::vector<int> any_damage(used_labels.size());
    std::transform(used_labels.begin(), used_labels.end(), any_damage.begin(), [](int l) { return l > 0 ? 1 : 0; });
    nm.confusion = confusion_binary(damaged, any_damage, in.threshold);
    report.nodes.push_back(nm);

    for (int m = 0; m < q.rows(); ++m) {
      ClassMetrics cm;
      cm.node = node;
      cm.state = m;
      const ScoredLabels post = one_vs_rest(q, used_cells, used_labels, m);
      cm.positives = std::count(post.labels.begin(), post.labels.end(), 1);
      cm.negatives = static_cast<Index>(post.labels.size()) - cm.positives;
      cm.auc_posterior = cm.auc_prior = std::numeric_limits<double>::quiet_NaN();
      if (cm.positives > 0 && cm.negatives > 0) {
        const RocResult r = roc_auc(post.scores, post.labels);
        cm.auc_posterior = r.auc;
        if (rocs) rocs->push_back({node + "_" + std::to_string(m) + "_posterior", r});
        if (prior.size() > 0) {
          const ScoredLabels pr = one_vs_rest(prior, used_cells, used_labels, m);
          if (pr.excluded == 0) {
            const RocResult rp = roc_auc(pr.scores, pr.labels);
            cm.auc_prior = rp.auc;
            if (rocs) rocs->push_back({node + "_" + std::to_string(m) + "_prior", rp});
          }
        }
      }
      report.classes.push_back(cm);
    }
  }
  if (report.nodes.empty()) throw DataError("no ground truth to evaluate");
  return report;
}

// ---------------------------------------------------------------------------------------------
// Commands

LogLevel log_level_from_env() {
  const char* v = std::getenv("QVCBI_LOG");
  if (!v) return LogLevel::info;
  const std::string s = lower(v);
  if (s == "quiet" || s == "off" || s == "0") return LogLevel::quiet;
  if (s == "error" || s == "1") return LogLevel::error;
  if (s == "debug" || s == "3") return LogLevel::debug;
  return LogLevel::info;
}

namespace {

struct Io {
  std::ostream& out;
  std::ostream& err;
  LogLevel level;

  explicit Io(const CommandOptions& o)
      : out(o.out_stream ? *o.out_stream : std::cout), err(o.err_stream ? *o.err_stream : std::cerr), level(o.log) {}

  void log(LogLevel at, const std::string& msg) const {
    if (level >= at) err << "qvcbi: " << msg << '\n';
  }
};

json manifest_base(const RunConfig& cfg, Command cmd, int workers, bool deterministic) {
  return {{"command", std::string(to_string(cmd))},
          {"version", std::string(kVersion)},
          {"seed", cfg.fit.seed},
          {"workers", workers},
          {"deterministic", deterministic},
          {"config", cfg.canonical()}};
}

std::string finish_manifest(json& m, const fs::path& dir, double seconds, const Io& io) {
  m["wall_seconds"] = seconds;
  fs::create_directories(dir);
  const std::string text = m.dump(2);
  std::ofstream(dir / "manifest.json") << text << '\n';
  io.out << text << '\n';
  return text;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json synth_stage(const RunConfig& cfg, const Io& io) {
  const SynthConfig sc = cfg.synth_config();
  io.log(LogLevel::info, "sampling preset '" + sc.name + "' " + std::to_string(sc.ncols) + "x" +
                             std::to_string(sc.nrows));
  const SynthScene scene = sample_scene(sc);
  write_synth_scene(sc, scene, cfg.output.dir);
  json files = json::array({"dpm.asc", "pga.asc", "prior_ls.asc", "prior_lf.asc", "footprint.asc", "u_obs.asc"});
  const CausalNetwork net = build_network(sc.network);
  for (HazardKind h : net.latent_nodes()) files.push_back("truth_" + std::string(to_string(h)) + ".csv");
  return {{"preset", sc.name}, {"size", sc.ncols}, {"xor_forced", scene.truth.xor_forced}, {"files", files}};
}

json fit_stage(const RunConfig& cfg, int workers, const CommandOptions& opts, const Io& io) {
  const fs::path& dir = cfg.output.dir;
  const PreparedScene prep =
      prepare_scene(cfg.network.spec(), read_scene_inputs(cfg, dir), {cfg.data.y_floor, cfg.data.allow_resample},
                    prior_options(cfg), cfg.pruning);
  if (prep.clipped_priors > 0)
    io.log(LogLevel::info, std::to_string(prep.clipped_priors) + " locations needed prior clipping");
  io.log(LogLevel::info, std::to_string(prep.scene.size()) + " locations, " + std::to_string(prep.pruned) + " pruned");

  FitConfig fc = cfg.fit;
  fc.workers = workers;
  fc.validate(static_cast<Index>(active_locations(prep.evidence).size()));

  fs::create_directories(dir);
  const fs::path marker = dir / kPartialMarker;
  const fs::path ckpt_path = dir / kCheckpointFile;
  const std::string identity = cfg.canonical();
  std::optional<FitCheckpoint> resume;
  if (fs::exists(marker)) {
    std::ifstream in(marker);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() == identity && fs::exists(ckpt_path)) {
      resume = read_checkpoint(prep.net, ckpt_path);
      io.log(LogLevel::info, "resuming from checkpoint at epoch " + std::to_string(resume->epoch));
    }
  }
  if (!resume) {
    fs::remove(ckpt_path);
    std::ofstream(marker) << identity;
  }

  FitCallbacks cb;
  cb.checkpoint_every = cfg.checkpoint_every;
  cb.on_checkpoint = [&](const FitCheckpoint& c) { write_checkpoint(c, ckpt_path); };
  cb.on_epoch = [&](const EpochReport& r) {
    if (io.level >= LogLevel::info) {
      const json line = {{"epoch", r.epoch}, {"audit_elbo", r.audit_elbo}, {"grad_norm", r.grad_norm}};
      io.err << line.dump() << '\n';
    }
    if (opts.on_epoch) opts.on_epoch(r);
  };

  const WeightSet w0 =
      initial_weights(prep.net, prep.evidence, fc.seed, fc.sigma_xor, fc.init_min_obs_weight, fc.init_max_obs_noise);
  FitResult result = fit(prep.net, prep.evidence, w0, fc, cb, resume ? &*resume : nullptr);
  reintegrate_pruned(result.posterior, prep.evidence.bd_pruned);
  write_outputs(prep.net, prep.scene, result, dir);
  fs::remove(marker);
  fs::remove(ckpt_path);

  json files = json::array();
  for (HazardKind h : prep.net.latent_nodes()) {
    for (int m = 0; m < prep.net.num_states(h); ++m) files.push_back(posterior_grid_name(h, m));
    files.push_back(class_grid_name(h));
  }
  files.push_back("elbo_trace.csv");
  files.push_back("weights.json");
  return {{"locations", prep.scene.size()},
          {"pruned", prep.pruned},
          {"clipped_priors", prep.clipped_priors},
          {"epochs", result.epochs},
          {"converged", result.converged},
          {"resumed_from", resume ? resume->epoch : 0},
          {"final_audit_elbo", result.trace.empty() ? json(nullptr) : json(result.trace.back())},
          {"fit_seconds", result.wall_seconds},
          {"files", files}};
}

json eval_stage(const RunConfig& cfg, const Io& io) {
  const fs::path& dir = cfg.output.dir;
  const PreparedScene prep =
      prepare_scene(cfg.network.spec(), read_scene_inputs(cfg, dir), {cfg.data.y_floor, cfg.data.allow_resample},
                    prior_options(cfg), cfg.pruning);
  EvalInputs in;
  in.threshold = cfg.output.threshold;
  GridHeader header;
  in.posterior = read_posterior_grids(prep.net, dir, &header);
  if (!header.same_geometry(prep.scene.header)) throw DataError("posterior grids differ in geometry from the scene");
  json skipped = json::object();
  for (HazardKind h : prep.net.latent_nodes()) {
    if (prep.prior.p[idx(h)].size() > 0) in.prior[idx(h)] = to_cells(prep.scene, prep.prior.p[idx(h)]);
    fs::path truth = cfg.synth ? dir / ("truth_" + std::string(to_string(h)) + ".csv") : cfg.data.truth[idx(h)];
    if (truth.empty() || !fs::exists(truth)) continue;
    GroundTruth gt = read_ground_truth(truth, prep.scene.header, prep.net.max_state(h));
    if (gt.skipped > 0)
      io.log(LogLevel::info, std::to_string(gt.skipped) + " " + std::string(to_string(h)) +
                                 " truth points outside the extent were skipped");
    skipped[std::string(to_string(h))] = gt.skipped;
    if (gt.points.empty()) throw DataError("no truth point of " + truth.string() + " falls inside the extent");
    in.truth[idx(h)] = std::move(gt.points);
  }
  std::vector<NamedRoc> rocs;
  const MetricsReport report = evaluate(prep.net, in, cfg.output.roc ? &rocs : nullptr);
  write_metrics(report, dir);
  json files = json::array({"metrics.json", "class_metrics.csv", "confusion.csv"});
  if (cfg.output.roc) {
    fs::create_directories(dir / "roc");
    for (const auto& r : rocs) {
      write_roc_csv(r.roc, dir / "roc" / ("roc_" + r.name + ".csv"));
      files.push_back("roc/roc_" + r.name + ".csv");
    }
  }
  json classes = json::array();
  for (const auto& c : report.classes) {
    io.log(LogLevel::info, c.node + " state " + std::to_string(c.state) + ": AUC posterior " + fmt(c.auc_posterior) +
                               ", prior " + fmt(c.auc_prior));
    classes.push_back({{"node", c.node}, {"state", c.state}, {"auc_posterior", std::isfinite(c.auc_posterior) ? json(c.auc_posterior) : json(nullptr)}});
  }
  return {{"truth_skipped", skipped}, {"classes", classes}, {"files", files}};
}

}  // namespace

int apply_overrides(RunConfig& cfg, const CommandOptions& opts) {
  if (opts.out) cfg.output.dir = fs::absolute(*opts.out).lexically_normal();
  if (opts.seed) cfg.fit.seed = *opts.seed;
  if (opts.deterministic) return 1;
  if (opts.workers) {
    if (*opts.workers < 1) throw ConfigError("--workers must be at least 1");
    return *opts.workers;
  }
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

std::string cmd_synth(const RunConfig& cfg_in, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  const int workers = apply_overrides(cfg, opts);
  validate_inputs(cfg, Command::synth);
  const Io io(opts);
  json m = manifest_base(cfg, Command::synth, workers, opts.deterministic);
  m["synth"] = synth_stage(cfg, io);
  return finish_manifest(m, cfg.output.dir, seconds_since(t0), io);
}

std::string cmd_fit(const RunConfig& cfg_in, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  const int workers = apply_overrides(cfg, opts);
  validate_inputs(cfg, Command::fit);
  const Io io(opts);
  json m = manifest_base(cfg, Command::fit, workers, opts.deterministic);
  m["fit"] = fit_stage(cfg, workers, opts, io);
  return finish_manifest(m, cfg.output.dir, seconds_since(t0), io);
}

std::string cmd_eval(const RunConfig& cfg_in, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  const int workers = apply_overrides(cfg, opts);
  validate_inputs(cfg, Command::eval);
  const Io io(opts);
  json m = manifest_base(cfg, Command::eval, workers, opts.deterministic);
  m["eval"] = eval_stage(cfg, io);
  return finish_manifest(m, cfg.output.dir, seconds_since(t0), io);
}

std::string cmd_pipeline(const RunConfig& cfg_in, const CommandOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  const int workers = apply_overrides(cfg, opts);
  validate_inputs(cfg, Command::pipeline);
  const Io io(opts);
  json m = manifest_base(cfg, Command::pipeline, workers, opts.deterministic);
  if (cfg.synth) m["synth"] = synth_stage(cfg, io);
  m["fit"] = fit_stage(cfg, workers, opts, io);
  m["eval"] = eval_stage(cfg, io);
  return finish_manifest(m, cfg.output.dir, seconds_since(t0), io);
}

int run_command(Command cmd, const fs::path& config, const CommandOptions& opts) {
  std::ostream& err = opts.err_stream ? *opts.err_stream : std::cerr;
  try {
    const RunConfig cfg = load_config(config);
    switch (cmd) {
      case Command::synth: cmd_synth(cfg, opts); break;
      case Command::fit: cmd_fit(cfg, opts); break;
      case Command::eval: cmd_eval(cfg, opts); break;
      case Command::pipeline: cmd_pipeline(cfg, opts); break;
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "qvcbi: config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "qvcbi: data error: " << e.what() << '\n';
    return 3;
  } catch (const DivergenceError& e) {
    err << "qvcbi: divergence at epoch " << e.epoch() << ", batch " << e.batch() << ": " << e.what() << '\n';
    return 4;
  } catch (const fs::filesystem_error& e) {
    err << "qvcbi: data error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace qvcbi
