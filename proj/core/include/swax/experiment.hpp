#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "swax/io.hpp"

namespace swax {

/// Exit codes of the command-line surface.
enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitFailure = 2 };

/// Validation loss at `window` on the held-out stream of the run's seed.
struct ValidationScore {
  std::size_t window = 0;
  double loss = 0.0;
  double perplexity = 0.0;
};

ValidationScore validation_score(const Model<float>& model, const ExperimentConfig& cfg, std::size_t window);

/// Trains `cfg` into `out`:
///   config.json        resolved config snapshot
///   metrics.jsonl      one record per step
///   checkpoints/step_N periodic and final checkpoints
///   summary.json       validation loss at the long training window
///   manifest.json      code version, master seed, status, artifacts
/// A diverged run keeps its partial log and rethrows TrainingDiverged.
Checkpoint run_training(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// NIAH sweep of cfg.eval at each test window (cfg.eval.test_windows, or the
/// long training window when empty).
std::vector<EvalResult> run_evaluation(const Model<float>& model, const ExperimentConfig& cfg);

/// Writes results.csv and results_depth.csv into `out`.
void write_results(const std::filesystem::path& out, const std::vector<EvalResult>& results);

/// One sweep cell: `base` with `overrides` merged in (JSON merge patch).
struct SweepCell {
  std::string name;
  ExperimentConfig config;
};

struct SweepGrid {
  std::uint64_t seed = 0;
  std::vector<SweepCell> cells;
};

/// Cell i gets seed derive_seed(master, cell, i).
SweepGrid parse_sweep(const nlohmann::json& doc, std::optional<std::uint64_t> seed_override = std::nullopt);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, std::size_t step);

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out,
              std::optional<std::uint64_t> seed = std::nullopt);

/// Evaluates a checkpoint. The eval grid and corpus come from `config_path`
/// when given, else from the snapshot stored with the checkpoint.
int cmd_eval(const std::filesystem::path& checkpoint, const std::optional<std::filesystem::path>& config_path,
             const std::filesystem::path& out, std::optional<std::size_t> test_window = std::nullopt,
             std::optional<std::uint64_t> seed = std::nullopt);

int cmd_sweep(const std::filesystem::path& grid_path, const std::filesystem::path& out,
              std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace swax
