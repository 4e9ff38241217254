#include "swax/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "swax/ops.hpp"

namespace swax {

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::transformer:
      return "transformer";
    case Architecture::swa:
      return "swa";
    case Architecture::xlstm:
      return "xlstm";
    case Architecture::swax:
      return "swax";
  }
  return "?";
}

std::string to_string(MixerKind kind) {
  switch (kind) {
    case MixerKind::sa:
      return "sa";
    case MixerKind::swa:
      return "swa";
    case MixerKind::gla:
      return "gla";
  }
  return "?";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "transformer") return Architecture::transformer;
  if (name == "swa") return Architecture::swa;
  if (name == "xlstm") return Architecture::xlstm;
  if (name == "swax") return Architecture::swax;
  throw std::invalid_argument("unknown architecture '" + std::string(name) +
                              "' (expected transformer, swa, xlstm or swax)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("model." + field + ": " + msg);
  };
  if (n_blocks == 0) fail("n_blocks", "must be positive");
  if (model_dim == 0) fail("model_dim", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (model_dim % n_heads != 0) fail("model_dim", "must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("n_heads", "head dimension model_dim/n_heads must be even for RoPE");
  if (architecture == Architecture::swax && n_blocks % 2 != 0) fail("n_blocks", "swax needs an even block count");
  if (!(ffn_mult > 0.0)) fail("ffn_mult", "must be positive");
  if (vocab_size == 0) fail("vocab_size", "must be positive");
  if (!(rope_theta > 0.0)) fail("rope_theta", "must be positive");
  if (default_window == 0) fail("default_window", "must be positive");
  if (!(gla_qk_factor > 0.0 && gla_qk_factor <= 1.0)) fail("gla_qk_factor", "must lie in (0, 1]");
  if (gla_qk_dim() == 0) fail("gla_qk_factor", "GLA query/key width rounds to zero");
  if (!(init_std > 0.0)) fail("init_std", "must be positive");
  if (ffn_hidden() == 0) fail("ffn_mult", "hidden width rounds to zero");
}

std::size_t ModelConfig::gla_qk_dim() const {
  return static_cast<std::size_t>(std::lround(gla_qk_factor * double(head_dim())));
}

std::size_t ModelConfig::ffn_hidden() const {
  return static_cast<std::size_t>(std::lround(ffn_mult * double(model_dim)));
}

std::vector<MixerKind> block_layout(const ModelConfig& cfg) {
  std::vector<MixerKind> kinds(cfg.n_blocks);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    switch (cfg.architecture) {
      case Architecture::transformer:
        kinds[i] = MixerKind::sa;
        break;
      case Architecture::swa:
        kinds[i] = MixerKind::swa;
        break;
      case Architecture::xlstm:
        kinds[i] = MixerKind::gla;
        break;
      case Architecture::swax:
        kinds[i] = ((i % 2 == 0) == cfg.gla_first) ? MixerKind::gla : MixerKind::swa;
        break;
    }
  }
  return kinds;
}

namespace {

struct Counts {
  std::size_t total = 0;
  std::size_t matmul = 0;
};

Counts mixer_counts(const ModelConfig& cfg, MixerKind kind) {
  const std::size_t d = cfg.model_dim, h = cfg.n_heads;
  Counts c;
  c.total += d;  // pre-norm gain
  if (kind == MixerKind::gla) {
    const std::size_t qk = h * cfg.gla_qk_dim();
    c.matmul += 2 * d * qk + 2 * d * d;  // q, k, v, o
    c.matmul += d * qk + 2 * d * h;      // read gate (vector), write/decay gates (per head)
    c.total += qk + 2 * h;               // gate biases
    c.total += cfg.head_dim();           // per-head output norm gain
  } else {
    c.matmul += 4 * d * d;
  }
  c.total += c.matmul;
  return c;
}

Counts mlp_counts(const ModelConfig& cfg) {
  Counts c;
  c.matmul = 3 * cfg.model_dim * cfg.ffn_hidden();
  c.total = c.matmul + cfg.model_dim;
  return c;
}

}  // namespace

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  std::size_t total = 2 * cfg.vocab_size * cfg.model_dim + cfg.model_dim;  // embed, output, final norm
  for (MixerKind kind : block_layout(cfg)) total += mixer_counts(cfg, kind).total + mlp_counts(cfg).total;
  return total;
}

double count_flops_per_token(const ModelConfig& cfg, std::size_t seq_len, std::size_t window) {
  cfg.validate();
  if (seq_len == 0) throw std::invalid_argument("count_flops_per_token: seq_len must be >= 1");
  const double d = double(cfg.model_dim);
  double matmul = double(cfg.vocab_size) * d;  // output projection; the embedding is a lookup
  double mixing = 0;
  for (MixerKind kind : block_layout(cfg)) {
    matmul += double(mixer_counts(cfg, kind).matmul + mlp_counts(cfg).matmul);
    switch (kind) {
      case MixerKind::sa:
        mixing += 2.0 * double(seq_len) * d;
        break;
      case MixerKind::swa:
        mixing += 2.0 * double(std::min(window, seq_len)) * d;
        break;
      case MixerKind::gla:
        mixing += 2.0 * double(cfg.gla_qk_dim()) * double(cfg.head_dim()) * double(cfg.n_heads);
        break;
    }
  }
  return 2.0 * matmul + mixing;
}

template <typename T>
std::vector<MixerKind> Model<T>::layout() const {
  std::vector<MixerKind> kinds;
  for (const auto& b : blocks_) kinds.push_back(b.kind);
  return kinds;
}

template <typename T>
std::size_t Model<T>::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
const Parameter<T>& Model<T>::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Parameter<T>> params;

  auto add = [&](std::string name, Shape shape, double std_dev, bool decay) {
    Tensor<T> value(std::move(shape));
    for (auto& x : value.data()) x = T(std_dev * normal(rng));
    params.push_back(Parameter<T>{std::move(name), std::move(value), decay});
    return params.size() - 1;
  };
  auto add_const = [&](std::string name, Shape shape, double fill) {
    params.push_back(Parameter<T>{std::move(name), Tensor<T>::full(std::move(shape), T(fill)), false});
    return params.size() - 1;
  };

  const std::size_t d = cfg.model_dim, h = cfg.n_heads;
  const double sd = cfg.init_std;
  const double residual_sd = sd / std::sqrt(2.0 * double(cfg.n_blocks));

  const std::size_t embed = add("embed", {cfg.vocab_size, d}, sd, false);
  std::vector<BlockSlots> blocks;
  const auto kinds = block_layout(cfg);
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockSlots s;
    s.kind = kinds[i];
    s.mixer_norm = add_const(p + "mixer_norm", {d}, 1.0);
    if (s.kind == MixerKind::gla) {
      const std::size_t qk = h * cfg.gla_qk_dim();
      s.wq = add(p + "wq", {d, qk}, sd, true);
      s.wk = add(p + "wk", {d, qk}, sd, true);
      s.wv = add(p + "wv", {d, d}, sd, true);
      s.w_read = add(p + "w_read", {d, qk}, sd, true);
      s.b_read = add_const(p + "b_read", {qk}, 0.0);
      s.w_write = add(p + "w_write", {d, h}, sd, true);
      s.b_write = add_const(p + "b_write", {h}, 0.0);
      s.w_decay = add(p + "w_decay", {d, h}, sd, true);
      s.b_decay = add_const(p + "b_decay", {h}, cfg.decay_bias);
      s.head_norm = add_const(p + "head_norm", {cfg.head_dim()}, 1.0);
      s.wo = add(p + "wo", {d, d}, residual_sd, true);
    } else {
      s.wq = add(p + "wq", {d, d}, sd, true);
      s.wk = add(p + "wk", {d, d}, sd, true);
      s.wv = add(p + "wv", {d, d}, sd, true);
      s.wo = add(p + "wo", {d, d}, residual_sd, true);
    }
    s.mlp_norm = add_const(p + "mlp_norm", {d}, 1.0);
    s.w_gate = add(p + "w_gate", {d, cfg.ffn_hidden()}, sd, true);
    s.w_up = add(p + "w_up", {d, cfg.ffn_hidden()}, sd, true);
    s.w_down = add(p + "w_down", {cfg.ffn_hidden(), d}, residual_sd, true);
    blocks.push_back(s);
  }
  const std::size_t final_norm = add_const("final_norm", {d}, 1.0);
  const std::size_t w_out = add("w_out", {d, cfg.vocab_size}, sd, true);
  return Model<T>(cfg, std::move(params), std::move(blocks), embed, final_norm, w_out);
}

template <typename T>
std::vector<Var<T>> bind_parameters(Tape<T>& tape, const Model<T>& model, bool requires_grad) {
  std::vector<Var<T>> vars;
  vars.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) vars.push_back(tape.leaf(p.value, requires_grad));
  return vars;
}

template <typename T>
Var<T> gated_mlp(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down) {
  const Var<T> gate = ops::silu(ops::matmul(x, w_gate));
  const Var<T> up = ops::matmul(x, w_up);
  return ops::matmul(ops::mul(gate, up), w_down);
}

namespace {

template <typename T>
Var<T> attention_mixer(const Var<T>& x, const std::vector<Var<T>>& p, const BlockSlots& s, const ModelConfig& cfg,
                       const HeadLayout& layout, std::size_t window) {
  const RopeConfig rope{cfg.rope_theta, cfg.head_dim()};
  const Var<T> q = ops::rope(ops::matmul(x, p[s.wq]), layout, rope);
  const Var<T> k = ops::rope(ops::matmul(x, p[s.wk]), layout, rope);
  const Var<T> v = ops::matmul(x, p[s.wv]);
  return ops::matmul(ops::sliding_window_attention(q, k, v, layout, window), p[s.wo]);
}

template <typename T>
Var<T> gla_mixer(const Var<T>& x, const std::vector<Var<T>>& p, const BlockSlots& s, const ModelConfig& cfg,
                 const HeadLayout& layout) {
  const std::size_t qk = cfg.gla_qk_dim();
  const Var<T> q = ops::matmul(x, p[s.wq]);
  const Var<T> k = ops::scale(ops::matmul(x, p[s.wk]), T(1) / std::sqrt(T(qk)));
  const Var<T> v = ops::matmul(x, p[s.wv]);
  const Var<T> read = ops::sigmoid(ops::add_bias(ops::matmul(x, p[s.w_read]), p[s.b_read]));
  const Var<T> write = ops::repeat_columns(ops::sigmoid(ops::add_bias(ops::matmul(x, p[s.w_write]), p[s.b_write])), qk);
  const Var<T> decay = ops::repeat_columns(ops::sigmoid(ops::add_bias(ops::matmul(x, p[s.w_decay]), p[s.b_decay])), qk);
  HeadLayout gla = layout;
  gla.qk_dim = qk;
  const Var<T> y = ops::gated_linear_attention(q, k, v, write, read, decay, gla);
  return ops::matmul(ops::rmsnorm(y, p[s.head_norm], cfg.head_dim()), p[s.wo]);
}

}  // namespace

template <typename T>
Var<T> forward(const Model<T>& model, const std::vector<Var<T>>& params,
               std::span<const std::int32_t> tokens, std::size_t batch, const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (batch == 0 || tokens.empty() || tokens.size() % batch != 0) {
    throw std::invalid_argument("forward: " + std::to_string(tokens.size()) + " tokens do not split into " +
                                std::to_string(batch) + " non-empty sequences");
  }
  if (params.size() != model.parameters().size()) {
    throw std::invalid_argument("forward: parameter binding does not match model");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
  const std::size_t seq = tokens.size() / batch;
  const HeadLayout layout{batch, seq, cfg.n_heads, cfg.head_dim(), cfg.head_dim()};
  const std::size_t window = opts.window_override.value_or(cfg.default_window);
  if (window == 0) throw std::invalid_argument("forward: window must be >= 1");

  Var<T> x = ops::embedding(params[model.embed_slot()], tokens);
  for (const BlockSlots& s : model.blocks()) {
    const Var<T> h = ops::rmsnorm(x, params[s.mixer_norm]);
    Var<T> mixed;
    switch (s.kind) {
      case MixerKind::sa:
        mixed = attention_mixer(h, params, s, cfg, layout, seq);
        break;
      case MixerKind::swa:
        mixed = attention_mixer(h, params, s, cfg, layout, window);
        break;
      case MixerKind::gla:
        mixed = gla_mixer(h, params, s, cfg, layout);
        break;
    }
    x = ops::add(x, mixed);
    const Var<T> m = ops::rmsnorm(x, params[s.mlp_norm]);
    x = ops::add(x, gated_mlp(m, params[s.w_gate], params[s.w_up], params[s.w_down]));
  }
  x = ops::rmsnorm(x, params[model.final_norm_slot()]);
  return ops::matmul(x, params[model.output_slot()]);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, std::span<const std::int32_t> tokens, const ForwardOptions& opts) {
  Tape<T> tape;
  const auto params = bind_parameters(tape, model, false);
  return forward(model, params, tokens, 1, opts).value();
}

#define SWAX_INSTANTIATE_MODEL(T)                                                                         \
  template class Model<T>;                                                                                \
  template Model<T> build_model<T>(const ModelConfig&, std::uint64_t);                                    \
  template std::vector<Var<T>> bind_parameters(Tape<T>&, const Model<T>&, bool);                          \
  template Var<T> gated_mlp(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> forward(const Model<T>&, const std::vector<Var<T>>&,                          \
                          std::span<const std::int32_t>, std::size_t, const ForwardOptions&);             \
  template Tensor<T> forward(const Model<T>&, std::span<const std::int32_t>, const ForwardOptions&);

SWAX_INSTANTIATE_MODEL(float)
SWAX_INSTANTIATE_MODEL(double)

}  // namespace swax
