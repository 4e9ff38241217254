#include "swax/cli.hpp"

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "swax/experiment.hpp"

namespace swax {

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Sliding-window / gated linear attention hybrid laboratory", "swaxlab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kCodeVersion));

  std::string config, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> test_window;

  auto* train = app.add_subcommand("train", "Train one model into a run directory");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--seed", seed, "Override the master seed");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the NIAH grid");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--config", config, "Eval overrides (JSON); defaults to the checkpoint's snapshot");
  eval->add_option("--out", out, "Output directory")->required();
  eval->add_option("--seed", seed, "Override the evaluation seed");
  eval->add_option("--test-window", test_window, "Sliding window used at test time")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate every cell of a grid");
  sweep->add_option("--config", config, "Grid config (JSON)")->required();
  sweep->add_option("--out", out, "Sweep directory")->required();
  sweep->add_option("--seed", seed, "Override the grid seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  if (train->parsed()) return cmd_train(config, out, seed);
  if (eval->parsed()) {
    return cmd_eval(checkpoint, config.empty() ? std::nullopt : std::optional<std::filesystem::path>(config), out,
                    test_window, seed);
  }
  return cmd_sweep(config, out, seed);
}

}  // namespace swax
