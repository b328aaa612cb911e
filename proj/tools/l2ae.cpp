#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "l2ae/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string checkpoint;
  bool quiet = false;
};

int run(const std::string& task, const Flags& f) {
  using namespace l2ae;
  Json j = read_json_file(f.config);
  if (!j.is_object()) throw ConfigError(f.config + ": expected a JSON object");
  if (j.contains("task") && j["task"].is_string() && parse_task(j["task"].get<std::string>()) != parse_task(task))
    throw UsageError("config task '" + j["task"].get<std::string>() + "' does not match subcommand '" + task + "'");
  j["task"] = task;
  if (!f.checkpoint.empty()) j["checkpoint"] = f.checkpoint;
  const auto cfg = parse_experiment_config(j, f.seed);
  RunContext ctx;
  ctx.jobs = std::max<std::size_t>(1, f.jobs);
  if (!f.quiet) ctx.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
  const auto out = run_experiment(cfg, f.out.empty() ? cfg.output_dir : f.out, ctx);
  std::printf("%s\n", out.dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"l2ae: unit-ball autoencoder toolkit"};
  app.set_version_flag("--version", l2ae::kToolkitVersion);
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed = 0;
  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"train", "train an autoencoder and save its checkpoint"},
      {"cluster", "train (or load) a model and cluster its latent codes"},
      {"anomaly", "run the one-class anomaly protocol"},
      {"compare-norm", "compare latent normalization modes by clustering accuracy"},
      {"export-embedding", "project a checkpoint's latent codes to 2-D"},
  };
  std::string chosen;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", f.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", f.out, "output root (overrides output_dir)");
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("-j,--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
    if (std::string(c.name) == "cluster" || std::string(c.name) == "export-embedding")
      sub->add_option("--checkpoint", f.checkpoint, "trained model (.l2ck)");
    sub->add_flag("-q,--quiet", f.quiet, "no progress output");
    sub->callback([&chosen, name = c.name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->get_option("--seed")->count()) f.seed = seed;
  try {
    return run(chosen, f);
  } catch (const l2ae::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const l2ae::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
