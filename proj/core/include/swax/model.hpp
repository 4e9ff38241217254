#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "swax/attention.hpp"
#include "swax/autodiff.hpp"

namespace swax {

enum class Architecture { transformer, swa, xlstm, swax };
enum class MixerKind { sa, swa, gla };

std::string to_string(Architecture arch);
std::string to_string(MixerKind kind);
Architecture parse_architecture(std::string_view name);

struct ModelConfig {
  Architecture architecture = Architecture::swax;
  std::size_t n_blocks = 4;
  std::size_t model_dim = 64;
  std::size_t n_heads = 2;
  double ffn_mult = 2.0;
  std::size_t vocab_size = 64;
  double rope_theta = 10000.0;
  std::size_t default_window = 128;
  /// swax only: the first block holds the GLA mixer.
  bool gla_first = true;
  /// GLA query/key width as a fraction of the head width.
  double gla_qk_factor = 0.5;
  double init_std = 0.02;
  /// Pre-sigmoid bias of the decay gate.
  double decay_bias = 4.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  std::size_t head_dim() const { return model_dim / n_heads; }
  std::size_t gla_qk_dim() const;
  std::size_t ffn_hidden() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Mixer of each block, bottom to top.
std::vector<MixerKind> block_layout(const ModelConfig& cfg);

/// Number of scalar parameters implied by the config.
std::size_t parameter_count(const ModelConfig& cfg);

/// Forward FLOPs per token: 2 x (parameters used in matmuls) plus the token
/// mixing term, 2*S*d per SA layer, 2*min(w,S)*d per SWA layer and
/// 2*d_qk*d_v*heads per GLA layer.
double count_flops_per_token(const ModelConfig& cfg, std::size_t seq_len, std::size_t window);

struct ForwardOptions {
  /// Test-time window for every SWA mixer; default_window when empty.
  std::optional<std::size_t> window_override;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  /// Subject to decoupled weight decay (matrices only).
  bool decay = false;
};

/// Indices into Model::parameters() for one block.
struct BlockSlots {
  MixerKind kind = MixerKind::swa;
  std::size_t mixer_norm = 0;
  std::size_t wq = 0, wk = 0, wv = 0, wo = 0;
  // GLA only
  std::size_t w_read = 0, b_read = 0, w_write = 0, b_write = 0, w_decay = 0, b_decay = 0, head_norm = 0;
  std::size_t mlp_norm = 0, w_gate = 0, w_up = 0, w_down = 0;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::vector<Parameter<T>> params, std::vector<BlockSlots> blocks, std::size_t embed,
        std::size_t final_norm, std::size_t w_out)
      : cfg_(std::move(cfg)),
        params_(std::move(params)),
        blocks_(std::move(blocks)),
        embed_(embed),
        final_norm_(final_norm),
        w_out_(w_out) {}

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  const std::vector<BlockSlots>& blocks() const noexcept { return blocks_; }
  std::vector<MixerKind> layout() const;
  std::size_t embed_slot() const noexcept { return embed_; }
  std::size_t final_norm_slot() const noexcept { return final_norm_; }
  std::size_t output_slot() const noexcept { return w_out_; }
  std::size_t numel() const;

  /// Parameter by name; throws std::out_of_range.
  const Parameter<T>& parameter(std::string_view name) const;

 private:
  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<BlockSlots> blocks_;
  std::size_t embed_, final_norm_, w_out_;
};

/// Deterministic initialisation from `seed`.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Places every parameter on `tape` as a leaf, in parameters() order.
template <typename T>
std::vector<Var<T>> bind_parameters(Tape<T>& tape, const Model<T>& model, bool requires_grad);

/// out = W_down (silu(x W_gate) * (x W_up))
template <typename T>
Var<T> gated_mlp(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down);

/// Logits [batch*seq, vocab] for `batch` sequences laid out back to back in `tokens`.
template <typename T>
Var<T> forward(const Model<T>& model, const std::vector<Var<T>>& params,
               std::span<const std::int32_t> tokens, std::size_t batch, const ForwardOptions& opts = {});

/// Inference convenience for one sequence: logits [S, vocab].
template <typename T>
Tensor<T> forward(const Model<T>& model, std::span<const std::int32_t> tokens, const ForwardOptions& opts = {});

}  // namespace swax
