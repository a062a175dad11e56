#include "qvcbi/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace qvcbi;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("qvcbi_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "run.ini";
  std::ofstream(p) << text;
  return p;
}

std::string small_synth(const std::string& extra_fit = "", int epochs = 4) {
  return "[synth]\npreset = clean\nsize = 16\n\n[fit]\nseed = 3\nbatch_size = 64\nmax_epochs = " +
         std::to_string(epochs) + "\n" + extra_fit +
         "\n[output]\ndir = out\n";
}

struct Quiet {
  std::ostringstream out, err;
  CommandOptions opts(bool deterministic = true) {
    CommandOptions o;
    o.log = LogLevel::quiet;
    o.out_stream = &out;
    o.err_stream = &err;
    o.deterministic = deterministic;
    return o;
  }
};

}  // namespace

TEST(ParseConfig, RejectsUnknownSectionsAndKeys) {
  EXPECT_THROW(parse_config("[bogus]\nx = 1\n"), ConfigError);
  try {
    parse_config("[fit]\nlearning_rat = 0.1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[fit]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rat"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("x = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[pruning]\nmode = partial\n"), ConfigError);
  EXPECT_THROW(parse_config("[priors]\ngamma = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[fit]\nmax_epochs = many\n"), ConfigError);
  EXPECT_THROW(parse_config("[synth]\nsize = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[synth]\npreset = clean\n[data]\ndpm = a.asc\n"), ConfigError);
}

TEST(ParseConfig, DefaultsAndFitKeys) {
  const RunConfig d = parse_config("");
  EXPECT_EQ(d.network.nodes.size(), 3u);
  EXPECT_EQ(d.network.max_state[idx(HazardKind::BD)], 3);
  EXPECT_EQ(d.pruning.mode, PruneMode::none);
  EXPECT_FALSE(d.synth.has_value());
  const RunConfig c =
      parse_config("[fit]\nwarmup_epochs = 7\ninit_min_obs_weight = 0.5\ninit_max_obs_noise = 0.3\nupdate_xi = false\n");
  EXPECT_EQ(c.fit.warmup_epochs, 7);
  EXPECT_EQ(c.fit.init_min_obs_weight, 0.5);
  EXPECT_EQ(c.fit.init_max_obs_noise, 0.3);
  EXPECT_FALSE(c.fit.update_xi);
}

TEST(ParseConfig, CanonicalTextParsesBack) {
  const RunConfig c = parse_config(
      "[network]\nbd_max_state = 2\nxor = false\n[priors]\nmode = combined\ngamma = 0.25\n"
      "[synth]\npreset = weak-prior\nsize = 20\npga_noise = 3\n[pruning]\nmode = compensated\ntau = 0.3\n"
      "[fit]\nlearning_rate = 0.0125\nseed = 11\npreconditioner = identity\n[output]\ndir = /tmp/x\nroc = false\n");
  const std::string text = c.canonical();
  const RunConfig back = parse_config(text);
  EXPECT_EQ(back.canonical(), text);
  EXPECT_EQ(back.network.max_state[idx(HazardKind::BD)], 2);
  EXPECT_EQ(back.priors.mode, PriorMode::combined);
  EXPECT_EQ(back.synth->pga_noise, 3.0);
  EXPECT_EQ(back.fit.learning_rate, 0.0125);
  EXPECT_EQ(back.pruning.mode, PruneMode::compensated);
}

TEST(ParseConfig, RelativePathsResolveAgainstTheConfigDirectory) {
  const fs::path dir = fresh_dir("paths");
  const RunConfig c = load_config(write_config(dir, "[data]\ndpm = grids/dpm.asc\n[output]\ndir = res\n"));
  EXPECT_EQ(c.data.dpm, fs::absolute(dir / "grids" / "dpm.asc").lexically_normal());
  EXPECT_EQ(c.output.dir, fs::absolute(dir / "res").lexically_normal());
}

TEST(RunCommand, ExitCodes) {
  const fs::path dir = fresh_dir("exit");
  Quiet q;
  EXPECT_EQ(run_command(Command::fit, dir / "missing.ini", q.opts()), 2);
  EXPECT_EQ(run_command(Command::fit, write_config(dir, "[fit]\nnope = 1\n"), q.opts()), 2);
  // Missing input grids fail validation before any compute.
  EXPECT_EQ(run_command(Command::fit, write_config(dir, "[data]\ndpm = absent.asc\n"), q.opts()), 2);
  EXPECT_NE(q.err.str().find("absent.asc"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
  // fit on a synthetic scene that was never generated.
  EXPECT_EQ(run_command(Command::fit, write_config(dir, small_synth()), q.opts()), 2);
  CommandOptions bad = q.opts(false);
  bad.workers = 0;
  EXPECT_EQ(run_command(Command::synth, write_config(dir, small_synth()), bad), 2);

  // A malformed grid is a data error.
  std::ofstream(dir / "dpm.asc") << "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n0.1 0.2\n0.3\n";
  EXPECT_EQ(run_command(Command::fit,
                        write_config(dir, "[network]\npriors = none\n[data]\ndpm = dpm.asc\n[output]\ndir = o\n"),
                        q.opts()),
            3);
}

TEST(RunCommand, NoTruthInsideTheExtentIsADataError) {
  const fs::path dir = fresh_dir("truth");
  Quiet q;
  ASSERT_EQ(run_command(Command::synth, write_config(dir, small_synth()), q.opts()), 0);
  const fs::path out = dir / "out";
  ASSERT_EQ(run_command(Command::fit, dir / "run.ini", q.opts()), 0);
  std::ofstream(out / "truth_BD.csv") << "x,y,state\n-1000,-1000,1\n";
  EXPECT_EQ(run_command(Command::eval, dir / "run.ini", q.opts()), 3);
  EXPECT_NE(q.err.str().find("truth_BD.csv"), std::string::npos) << q.err.str();
}

TEST(Commands, SynthAndPipelineFileInventory) {
  const fs::path dir = fresh_dir("inventory");
  Quiet q;
  const RunConfig cfg = load_config(write_config(dir, small_synth()));
  cmd_synth(cfg, q.opts());
  const fs::path out = dir / "out";
  for (const char* f : {"dpm.asc", "pga.asc", "prior_ls.asc", "prior_lf.asc", "footprint.asc", "u_obs.asc",
                        "truth_LS.csv", "truth_LF.csv", "truth_BD.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  const std::string manifest = cmd_pipeline(cfg, q.opts());
  EXPECT_EQ(slurp(out / "manifest.json"), manifest + "\n");
  EXPECT_NE(manifest.find("\"command\": \"pipeline\""), std::string::npos);
  for (const char* f : {"posterior_BD_0.asc", "posterior_BD_3.asc", "class_BD.asc", "posterior_LS_1.asc",
                        "class_LF.asc", "elbo_trace.csv", "weights.json", "metrics.json", "class_metrics.csv",
                        "confusion.csv", "roc/roc_BD_1_posterior.csv", "roc/roc_BD_1_prior.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_FALSE(fs::exists(out / kPartialMarker));
  EXPECT_FALSE(fs::exists(out / kCheckpointFile));
}

TEST(Commands, DeterministicRunsAreByteIdentical) {
  const fs::path dir = fresh_dir("determinism");
  Quiet q;
  const RunConfig cfg = load_config(write_config(dir, small_synth()));
  CommandOptions a = q.opts(), b = q.opts();
  a.out = dir / "a";
  b.out = dir / "b";
  cmd_pipeline(cfg, a);
  cmd_pipeline(cfg, b);
  int compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    const fs::path rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 20);
  CommandOptions c = q.opts();
  c.out = dir / "c";
  c.seed = 99;
  cmd_pipeline(cfg, c);
  EXPECT_NE(slurp(dir / "a" / "dpm.asc"), slurp(dir / "c" / "dpm.asc"));
}

TEST(Commands, InterruptedFitResumesToTheSameTrace) {
  const fs::path dir = fresh_dir("resume");
  Quiet q;
  const RunConfig cfg = load_config(write_config(dir, small_synth("checkpoint_every = 1\n")));
  CommandOptions full = q.opts();
  full.out = dir / "full";
  cmd_pipeline(cfg, full);

  CommandOptions part = q.opts();
  part.out = dir / "part";
  cmd_synth(cfg, part);
  part.on_epoch = [](const EpochReport& r) {
    if (r.epoch == 2) throw std::runtime_error("interrupted");
  };
  EXPECT_THROW(cmd_fit(cfg, part), std::runtime_error);
  EXPECT_TRUE(fs::exists(dir / "part" / kPartialMarker));
  EXPECT_TRUE(fs::exists(dir / "part" / kCheckpointFile));

  part.on_epoch = nullptr;
  const std::string manifest = cmd_fit(cfg, part);
  EXPECT_NE(manifest.find("\"resumed_from\": 2"), std::string::npos) << manifest;
  EXPECT_FALSE(fs::exists(dir / "part" / kPartialMarker));
  EXPECT_EQ(slurp(dir / "part" / "elbo_trace.csv"), slurp(dir / "full" / "elbo_trace.csv"));
  EXPECT_EQ(slurp(dir / "part" / "posterior_BD_1.asc"), slurp(dir / "full" / "posterior_BD_1.asc"));
  EXPECT_EQ(slurp(dir / "part" / "weights.json"), slurp(dir / "full" / "weights.json"));
}

TEST(Commands, ZeroEpochsStillWritesPosteriors) {
  const fs::path dir = fresh_dir("zero_epochs");
  Quiet q;
  const RunConfig cfg = load_config(write_config(dir, small_synth("warmup_epochs = 0\n", 0)));
  EXPECT_EQ(cfg.fit.max_epochs, 0);
  const std::string manifest = cmd_pipeline(cfg, q.opts());
  EXPECT_NE(manifest.find("\"epochs\": 0"), std::string::npos) << manifest;
  EXPECT_TRUE(fs::exists(dir / "out" / "class_BD.asc"));
}
