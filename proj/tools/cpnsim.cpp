// Command-line front end: run simulations, compare the predicted-delay
// controller against the worst-case baseline, and print delay forecasts.

#include <string>

#include "CLI11.hpp"
#include "cpn/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"co-simulation of predictive network scheduling and "
               "delay-aware distributed MPC"};
  app.require_subcommand(1);

  cpn::cli::RunManifest manifest;
  std::string mode;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("config", manifest.config_path, "scenario file")
        ->required();
    cmd->add_option("--out", manifest.out_dir, "output directory");
    cmd->add_option("--seed", seed, "seed override")
        ->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--mode", mode, "mode override: predicted|worstcase");
  };

  auto* run = app.add_subcommand("run", "simulate one scenario");
  add_common(run);
  auto* compare =
      app.add_subcommand("compare", "run both modes and tabulate the metrics");
  add_common(compare);
  auto* fc = app.add_subcommand("forecast",
                                "print the reliable delay forecast table");
  add_common(fc);

  CLI11_PARSE(app, argc, argv);

  if (seed_set) manifest.seed_override = seed;
  if (!mode.empty()) {
    if (mode == "predicted")
      manifest.mode_override = cpn::cosim::Mode::Predicted;
    else if (mode == "worstcase")
      manifest.mode_override = cpn::cosim::Mode::WorstCase;
    else {
      fprintf(stderr, "unknown mode: %s\n", mode.c_str());
      return 1;
    }
  }

  if (run->parsed()) return cpn::cli::cmd_run(manifest);
  if (compare->parsed()) return cpn::cli::cmd_compare(manifest);
  if (fc->parsed()) return cpn::cli::cmd_forecast(manifest);
  return 1;
}
