#include "qvcbi/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Joint building damage, landslide and liquefaction estimation from damage proxy maps"};
  app.require_subcommand(1, 1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 0;
  bool deterministic = false;

  for (const char* name : {"synth", "fit", "eval", "pipeline"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "INI run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides [output] dir)");
    sub->add_option("--seed", seed, "seed (overrides [fit] seed)");
    sub->add_option("--workers", workers, "worker threads (default: all cores)")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", deterministic, "single worker, bit-exact output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  qvcbi::CommandOptions opts;
  opts.log = qvcbi::log_level_from_env();
  opts.deterministic = deterministic;
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--out")) opts.out = out;
  if (sub->count("--seed")) opts.seed = seed;
  if (sub->count("--workers")) opts.workers = workers;
  return qvcbi::run_command(qvcbi::command_from_string(sub->get_name()), config, opts);
}
