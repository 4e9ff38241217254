#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swax/tasks.hpp"
#include "swax/train.hpp"

namespace swax {

inline constexpr std::string_view kCodeVersion = "0.1.0";
inline constexpr int kCheckpointFormat = 1;

/// Invalid or unreadable configuration; the message names the field or path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, truncated or incompatible checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalGrid {
  std::vector<NiahKind> kinds{NiahKind::single};
  std::vector<std::size_t> seq_lens{256};
  /// Empty: evaluate at the model's long training window.
  std::vector<std::size_t> test_windows;
  std::size_t n_samples = 64;
  std::size_t depth_bins = 8;
  std::uint64_t seed = 0;
  /// Held-out tokens for validation loss; 0 skips it.
  std::size_t val_tokens = 8192;

  friend bool operator==(const EvalGrid&, const EvalGrid&) = default;
};

struct ExperimentConfig {
  TrainConfig train;
  CorpusSpec corpus;
  EvalGrid eval;
  /// Save a checkpoint every n steps (0: final only).
  std::size_t checkpoint_every = 0;
  /// Label in results tables; derived from architecture and windows when empty.
  std::string tag;

  void validate() const;
  std::string train_tag() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses a config document. Every section and key is optional; unknown
/// keys and ill-typed values throw ConfigError naming the dotted path.
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Fully resolved form; parse_experiment(to_json(c)) == c.
nlohmann::json to_json(const ExperimentConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig parse_model(const nlohmann::json& doc, const std::string& where = "model");

/// Reads and parses a JSON file; a missing file or parse error throws ConfigError naming the path.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc);

struct Checkpoint {
  Model<float> model;
  OptimizerState optimizer;
  /// Experiment snapshot saved alongside, when any.
  std::optional<ExperimentConfig> experiment;
};

/// Writes `dir`/manifest.json and `dir`/tensors.bin (little-endian float32:
/// parameters, then first moments, then second moments).
void checkpoint_save(const std::filesystem::path& dir, const Model<float>& model, const OptimizerState& opt,
                     const std::optional<ExperimentConfig>& experiment = std::nullopt);

/// Loads a checkpoint. With `expect`, the stored model config must match it
/// and the first mismatched parameter shape is named in the error.
Checkpoint checkpoint_load(const std::filesystem::path& dir, const std::optional<ModelConfig>& expect = std::nullopt);

nlohmann::json to_json(const StepMetrics& m);

/// Newline-delimited metrics records, flushed per record so an aborted run keeps its log.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const StepMetrics& m);

 private:
  std::ofstream out_;
};

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path);

}  // namespace swax
