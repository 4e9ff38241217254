#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "swax/autodiff.hpp"
#include "swax/tensor.hpp"

namespace swax {

/// Per-head query/key/value sequences: q,k are [S, d_qk], v is [S, d_v].
template <typename T>
struct AttentionBatch {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;

  std::size_t seq_len() const { return q.dim(0); }
  std::size_t qk_dim() const { return q.dim(1); }
  std::size_t v_dim() const { return v.dim(1); }

  /// Throws ShapeError when q/k/v do not conform.
  void validate() const;
};

/// Matrix memory H [d_qk, d_v] and normaliser z [d_qk] of linear attention.
template <typename T>
struct LinearAttentionState {
  Tensor<T> memory;
  Tensor<T> normalizer;

  static LinearAttentionState zeros(std::size_t qk_dim, std::size_t v_dim) {
    return {Tensor<T>({qk_dim, v_dim}), Tensor<T>({qk_dim})};
  }
};

/// Per-step write (alpha), read (beta) and decay (lambda) gates, each [S, d_qk].
template <typename T>
struct GateVector {
  Tensor<T> alpha;
  Tensor<T> beta;
  Tensor<T> lambda;
};

enum class FeatureMap { identity, elu_plus_one };

struct RopeConfig {
  double theta = 10000.0;
  std::size_t head_dim = 0;

  void validate() const;
};

/// Reads below this magnitude are rejected by the normalised linear-attention forms.
inline constexpr double kDegenerateReadThreshold = 1e-9;

template <typename T>
Tensor<T> apply_feature_map(const Tensor<T>& x, FeatureMap phi);

/// Rotates coordinate pairs (2i, 2i+1) of row t by positions[t] * theta^(-2i/d).
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeConfig& cfg);

template <typename T>
Tensor<T> causal_softmax_attention(const AttentionBatch<T>& batch);

/// Causal softmax attention restricted to positions [t-w+1, t].
template <typename T>
Tensor<T> sliding_window_attention(const AttentionBatch<T>& batch, std::size_t window);

/// Normalised linear attention via the full matrix of pairwise kernel scores.
template <typename T>
Tensor<T> linear_attention_parallel(const AttentionBatch<T>& batch, FeatureMap phi);

/// Normalised linear attention as a constant-memory scan continuing from `state`.
template <typename T>
std::pair<Tensor<T>, LinearAttentionState<T>> linear_attention_recurrent(const AttentionBatch<T>& batch,
                                                                         FeatureMap phi,
                                                                         LinearAttentionState<T> state);

/// Gated linear attention scan with unnormalised read, continuing from `memory`.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> gated_linear_attention_recurrent(const AttentionBatch<T>& batch, FeatureMap phi,
                                                                 const GateVector<T>& gates, Tensor<T> memory);

/// Row/column layout of batched multi-head activations: rows are
/// batch * seq (sequence-major), columns are heads * dim with head h in
/// columns [h*dim, (h+1)*dim).
struct HeadLayout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  std::size_t qk_dim = 1;
  std::size_t v_dim = 1;

  std::size_t rows() const { return batch * seq; }
};

namespace ops {

/// RoPE on every head of x [rows, heads*qk_dim]; row t of each sequence gets
/// position offset + t.
template <typename T>
Var<T> rope(const Var<T>& x, const HeadLayout& layout, const RopeConfig& cfg, std::size_t offset = 0);

template <typename T>
Var<T> sliding_window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const HeadLayout& layout,
                                std::size_t window);

/// Normalised linear attention on already feature-mapped queries and keys.
template <typename T>
Var<T> linear_attention(const Var<T>& phi_q, const Var<T>& phi_k, const Var<T>& v, const HeadLayout& layout);

/// Gated linear attention from zero memory; gates have the shape of q.
template <typename T>
Var<T> gated_linear_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& alpha,
                              const Var<T>& beta, const Var<T>& lambda, const HeadLayout& layout);

}  // namespace ops
}  // namespace swax
