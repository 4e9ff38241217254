#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swax/model.hpp"

namespace swax {

/// Linear warmup to `peak`, then cosine decay to `min` at total_steps.
struct LrSchedule {
  double peak = 3e-4;
  double min = 3e-6;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  void validate() const;
  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

/// Learning rate at `step`. The warmup ramp starts at 0 but is floored at
/// `min`; steps past total_steps return `min`.
double lr_at(std::size_t step, const LrSchedule& sched);

/// Per-batch sliding-window size: w_short with probability p_short, else
/// w_long, until the anneal point; w_long afterwards. A fixed window is the
/// degenerate schedule w_short == w_long.
struct WindowSchedule {
  std::size_t w_short = 128;
  std::size_t w_long = 128;
  double p_short = 0.0;
  /// Fraction of training that samples; the rest uses w_long.
  double anneal_fraction = 1.0;

  static WindowSchedule fixed(std::size_t window) { return {window, window, 0.0, 1.0}; }
  bool is_fixed() const { return w_short == w_long || p_short == 0.0; }
  void validate() const;
  /// First step that always uses w_long: ceil(anneal_fraction * total_steps).
  std::size_t anneal_step(std::size_t total_steps) const;
  /// Short human-readable tag, e.g. "w128" or "s16/128p0.5a0.9".
  std::string tag() const;

  friend bool operator==(const WindowSchedule&, const WindowSchedule&) = default;
};

/// Window for `step`. Draws from `rng` only during the stochastic phase.
std::size_t sample_window(std::size_t step, std::size_t total_steps, const WindowSchedule& sched,
                          std::mt19937_64& rng);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainConfig {
  ModelConfig model;
  LrSchedule lr;
  WindowSchedule windows;
  std::size_t batch_tokens = 512;
  std::size_t seq_len = 256;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  /// When false, StepMetrics::wall_ms is recorded as 0 so metrics logs replay byte for byte.
  bool log_wall_time = true;

  void validate() const;
  std::size_t batch_size() const { return batch_tokens / seq_len; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct StepMetrics {
  /// Zero-based index of the step; lr and window are those of this index.
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t sampled_window = 0;
  std::size_t tokens_seen = 0;
  double wall_ms = 0.0;
};

/// AdamW moments, one pair per model parameter.
struct OptimizerState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  std::size_t step = 0;
  std::size_t tokens_seen = 0;

  static OptimizerState zeros_like(const Model<float>& model);
};

/// Independent random streams derived from the master seed.
enum class RngStream : std::uint32_t { init = 1, data = 2, window = 3, validation = 4, eval = 5, cell = 6 };
std::uint64_t derive_seed(std::uint64_t master, RngStream stream, std::uint64_t index = 0);

/// Source of training tokens. Must behave as an infinite generator; finite
/// sources throw CorpusExhausted.
class TokenSource {
 public:
  virtual ~TokenSource() = default;
  /// `rows` sequences of `length` tokens, back to back.
  virtual std::vector<std::int32_t> next_batch(std::size_t rows, std::size_t length) = 0;
};

class CorpusExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a step produces a non-finite loss or activation.
class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Endlessly repeats one token pattern.
class RepeatingSource final : public TokenSource {
 public:
  explicit RepeatingSource(std::vector<std::int32_t> pattern);
  std::vector<std::int32_t> next_batch(std::size_t rows, std::size_t length) override;

 private:
  std::vector<std::int32_t> pattern_;
  std::size_t pos_ = 0;
};

/// Serves a fixed token buffer once, then throws CorpusExhausted.
class BufferSource final : public TokenSource {
 public:
  explicit BufferSource(std::vector<std::int32_t> tokens) : tokens_(std::move(tokens)) {}
  std::vector<std::int32_t> next_batch(std::size_t rows, std::size_t length) override;

 private:
  std::vector<std::int32_t> tokens_;
  std::size_t pos_ = 0;
};

/// One optimisation step on `tokens` ([rows, seq_len+1]; inputs are the
/// first seq_len columns, targets the last seq_len): mean next-token
/// cross-entropy, global-norm clipping, AdamW update. Fills step,
/// tokens_seen and loss; throws TrainingDiverged on a non-finite loss.
StepMetrics train_step(Model<float>& model, std::span<const std::int32_t> tokens, std::size_t rows,
                       std::size_t window, OptimizerState& opt, const OptimizerConfig& opt_cfg, double lr);

/// Mean next-token cross-entropy of `tokens` ([rows, seq_len+1]) without updating anything.
double next_token_loss(const Model<float>& model, std::span<const std::int32_t> tokens, std::size_t rows,
                       const ForwardOptions& opts);

using MetricsSink = std::function<void(const StepMetrics&)>;
/// Called after every step with the updated model and optimizer state.
using StepHook = std::function<void(const Model<float>&, const OptimizerState&)>;

struct TrainResult {
  Model<float> model;
  OptimizerState optimizer;
  std::vector<StepMetrics> metrics;
};

/// Runs steps [start, total_steps) where start is resume->optimizer.step (0
/// when starting fresh). Data batches and window draws of skipped steps are
/// regenerated and discarded, so a chained run replays a single run exactly.
/// `source` must be freshly constructed for the run's data stream.
TrainResult train(const TrainConfig& cfg, TokenSource& source, const MetricsSink& sink = {},
                  std::optional<std::pair<Model<float>, OptimizerState>> resume = std::nullopt,
                  const StepHook& after_step = {});

}  // namespace swax
