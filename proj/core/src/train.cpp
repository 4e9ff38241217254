#include "swax/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "swax/ops.hpp"

namespace swax {

void LrSchedule::validate() const {
  if (!(peak > 0.0)) throw std::invalid_argument("lr.peak: must be positive");
  if (!(min > 0.0)) throw std::invalid_argument("lr.min: must be positive");
  if (min > peak) throw std::invalid_argument("lr.min: must not exceed lr.peak");
  if (total_steps == 0) throw std::invalid_argument("lr.total_steps: must be positive");
  if (warmup_steps >= total_steps) throw std::invalid_argument("lr.warmup_steps: must be below total_steps");
}

double lr_at(std::size_t step, const LrSchedule& s) {
  if (step >= s.total_steps) return s.min;
  if (step < s.warmup_steps) {
    return std::max(s.min, s.peak * double(step) / double(s.warmup_steps));
  }
  const double progress = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  const double lr = s.min + (s.peak - s.min) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  // min + (peak - min) can round one ulp past peak
  return std::clamp(lr, s.min, s.peak);
}

void WindowSchedule::validate() const {
  if (w_short == 0 || w_long == 0) throw std::invalid_argument("windows: window sizes must be positive");
  if (w_short > w_long) throw std::invalid_argument("windows.short: must not exceed windows.long");
  if (!(p_short >= 0.0 && p_short <= 1.0)) throw std::invalid_argument("windows.p_short: must lie in [0, 1]");
  if (!(anneal_fraction >= 0.0 && anneal_fraction <= 1.0)) {
    throw std::invalid_argument("windows.anneal_fraction: must lie in [0, 1]");
  }
}

std::size_t WindowSchedule::anneal_step(std::size_t total_steps) const {
  // tolerance absorbs representation error such as 0.9 * 1000 = 900.0000000000001
  return static_cast<std::size_t>(std::ceil(anneal_fraction * double(total_steps) - 1e-9));
}

std::string WindowSchedule::tag() const {
  if (is_fixed()) return "w" + std::to_string(w_long);
  std::ostringstream os;
  os << "s" << w_short << "/" << w_long << "p" << p_short;
  if (anneal_fraction < 1.0) os << "a" << anneal_fraction;
  return os.str();
}

std::size_t sample_window(std::size_t step, std::size_t total_steps, const WindowSchedule& sched,
                          std::mt19937_64& rng) {
  if (sched.is_fixed() || step >= sched.anneal_step(total_steps)) return sched.w_long;
  std::bernoulli_distribution short_draw(sched.p_short);
  return short_draw(rng) ? sched.w_short : sched.w_long;
}

void TrainConfig::validate() const {
  model.validate();
  lr.validate();
  windows.validate();
  if (seq_len == 0) throw std::invalid_argument("train.seq_len: must be positive");
  if (batch_tokens == 0 || batch_tokens % seq_len != 0) {
    throw std::invalid_argument("train.batch_tokens: must be a positive multiple of seq_len");
  }
  if (lr.total_steps != total_steps && total_steps != 0) {
    throw std::invalid_argument("train.total_steps: must equal lr.total_steps");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) throw std::invalid_argument("optimizer.beta1: must lie in [0, 1)");
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) throw std::invalid_argument("optimizer.beta2: must lie in [0, 1)");
  if (!(optimizer.eps > 0.0)) throw std::invalid_argument("optimizer.eps: must be positive");
  if (!(optimizer.weight_decay >= 0.0)) throw std::invalid_argument("optimizer.weight_decay: must be non-negative");
  if (!(optimizer.grad_clip > 0.0)) throw std::invalid_argument("optimizer.grad_clip: must be positive");
}

OptimizerState OptimizerState::zeros_like(const Model<float>& model) {
  OptimizerState s;
  for (const auto& p : model.parameters()) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t master, RngStream stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

RepeatingSource::RepeatingSource(std::vector<std::int32_t> pattern) : pattern_(std::move(pattern)) {
  if (pattern_.empty()) throw std::invalid_argument("RepeatingSource: empty pattern");
}

std::vector<std::int32_t> RepeatingSource::next_batch(std::size_t rows, std::size_t length) {
  std::vector<std::int32_t> out(rows * length);
  for (auto& t : out) {
    t = pattern_[pos_];
    pos_ = (pos_ + 1) % pattern_.size();
  }
  return out;
}

std::vector<std::int32_t> BufferSource::next_batch(std::size_t rows, std::size_t length) {
  const std::size_t n = rows * length;
  if (pos_ + n > tokens_.size()) {
    throw CorpusExhausted("token source exhausted: needed " + std::to_string(n) + " tokens, " +
                          std::to_string(tokens_.size() - pos_) + " left");
  }
  std::vector<std::int32_t> out(tokens_.begin() + pos_, tokens_.begin() + pos_ + n);
  pos_ += n;
  return out;
}

namespace {

struct SplitBatch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};

SplitBatch split_batch(std::span<const std::int32_t> tokens, std::size_t rows) {
  if (rows == 0 || tokens.size() % rows != 0 || tokens.size() / rows < 2) {
    throw std::invalid_argument("batch of " + std::to_string(tokens.size()) + " tokens does not split into " +
                                std::to_string(rows) + " rows of at least 2 tokens");
  }
  const std::size_t width = tokens.size() / rows;
  SplitBatch b;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = tokens.subspan(r * width, width);
    b.inputs.insert(b.inputs.end(), row.begin(), row.end() - 1);
    b.targets.insert(b.targets.end(), row.begin() + 1, row.end());
  }
  return b;
}

}  // namespace

double next_token_loss(const Model<float>& model, std::span<const std::int32_t> tokens, std::size_t rows,
                       const ForwardOptions& opts) {
  const SplitBatch b = split_batch(tokens, rows);
  Tape<float> tape;
  const auto params = bind_parameters(tape, model, false);
  const Var<float> logits = forward(model, params, b.inputs, rows, opts);
  return ops::cross_entropy(logits, std::span<const std::int32_t>(b.targets)).value()[0];
}

StepMetrics train_step(Model<float>& model, std::span<const std::int32_t> tokens, std::size_t rows,
                       std::size_t window, OptimizerState& opt, const OptimizerConfig& oc, double lr) {
  if (window == 0) throw std::invalid_argument("train_step: window must be >= 1");
  const SplitBatch b = split_batch(tokens, rows);
  auto& params = model.parameters();
  if (opt.m.size() != params.size()) opt = OptimizerState::zeros_like(model);

  Tape<float> tape;
  const auto vars = bind_parameters(tape, model, true);
  float loss = 0.0f;
  try {
    const Var<float> logits = forward(model, vars, b.inputs, rows, ForwardOptions{window});
    const Var<float> l = ops::cross_entropy(logits, std::span<const std::int32_t>(b.targets));
    loss = l.value()[0];
    tape.backward(l);
  } catch (const NumericError& e) {
    throw TrainingDiverged("non-finite value at step " + std::to_string(opt.step) + " (window " +
                           std::to_string(window) + ", lr " + std::to_string(lr) + "): " + e.what());
  }

  std::vector<Tensor<float>> grads;
  grads.reserve(vars.size());
  double sq = 0.0;
  for (const auto& v : vars) {
    grads.push_back(tape.grad(v));
    for (float g : grads.back().data()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw TrainingDiverged("non-finite gradient norm at step " + std::to_string(opt.step) + " (window " +
                           std::to_string(window) + ", lr " + std::to_string(lr) + ")");
  }
  const float clip = norm > oc.grad_clip ? float(oc.grad_clip / norm) : 1.0f;

  const std::size_t index = opt.step++;
  const double bc1 = 1.0 - std::pow(oc.beta1, double(opt.step));
  const double bc2 = 1.0 - std::pow(oc.beta2, double(opt.step));
  const float b1 = float(oc.beta1), b2 = float(oc.beta2);
  const float step_size = float(lr / bc1);
  const float inv_bc2 = float(1.0 / bc2);
  const float eps = float(oc.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].value.ptr();
    float* m = opt.m[i].ptr();
    float* v = opt.v[i].ptr();
    const float* g = grads[i].ptr();
    const float decay = params[i].decay ? float(lr * oc.weight_decay) : 0.0f;
    for (std::size_t j = 0; j < params[i].value.size(); ++j) {
      const float gj = g[j] * clip;
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      p[j] -= decay * p[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
  opt.tokens_seen += b.targets.size();

  StepMetrics out;
  out.step = index;
  out.loss = loss;
  out.lr = lr;
  out.sampled_window = window;
  out.tokens_seen = opt.tokens_seen;
  return out;
}

TrainResult train(const TrainConfig& cfg, TokenSource& source, const MetricsSink& sink,
                  std::optional<std::pair<Model<float>, OptimizerState>> resume, const StepHook& after_step) {
  cfg.validate();
  std::mt19937_64 window_rng(derive_seed(cfg.seed, RngStream::window));
  Model<float> model = resume ? std::move(resume->first) : build_model<float>(cfg.model, derive_seed(cfg.seed, RngStream::init));
  OptimizerState opt = resume ? std::move(resume->second) : OptimizerState::zeros_like(model);
  if (!(model.config() == cfg.model)) throw std::invalid_argument("train: resumed model config differs from run config");

  const std::size_t rows = cfg.batch_size();
  const std::size_t width = cfg.seq_len + 1;
  for (std::size_t s = 0; s < opt.step; ++s) {
    (void)source.next_batch(rows, width);
    (void)sample_window(s, cfg.total_steps, cfg.windows, window_rng);
  }

  TrainResult result{std::move(model), std::move(opt), {}};
  for (std::size_t s = result.optimizer.step; s < cfg.total_steps; ++s) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t window = sample_window(s, cfg.total_steps, cfg.windows, window_rng);
    const std::vector<std::int32_t> batch = source.next_batch(rows, width);
    const double lr = lr_at(s, cfg.lr);
    StepMetrics m = train_step(result.model, batch, rows, window, result.optimizer, cfg.optimizer, lr);
    if (cfg.log_wall_time) {
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    if (sink) sink(m);
    result.metrics.push_back(m);
    if (after_step) after_step(result.model, result.optimizer);
  }
  return result;
}

}  // namespace swax
