#include "swax/attention.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace swax {
namespace {

// Strided row views over one head of a [rows, heads*dim] activation.
template <typename T>
struct Rows {
  const T* base;
  std::size_t stride;
  const T* operator()(std::size_t t) const { return base + t * stride; }
};

template <typename T>
struct MutRows {
  T* base;
  std::size_t stride;
  T* operator()(std::size_t t) const { return base + t * stride; }
};

template <typename T>
Rows<T> rows_of(const Tensor<T>& x) {
  return {x.ptr(), x.dim(1)};
}

template <typename T>
MutRows<T> rows_of(Tensor<T>& x) {
  return {x.ptr(), x.dim(1)};
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

std::size_t window_start(std::size_t t, std::size_t window) { return t + 1 > window ? t + 1 - window : 0; }

// Softmax attention over [t-w+1, t]. When `probs` is non-null, row t of the
// normalised weights is written at probs + t*cap (cap = min(w, S)).
template <typename T>
void swa_forward(Rows<T> q, Rows<T> k, Rows<T> v, MutRows<T> y, std::size_t seq, std::size_t qk_dim,
                 std::size_t v_dim, std::size_t window, T* probs) {
  const std::size_t cap = std::min(window, seq);
  const T scale = T(1) / std::sqrt(T(qk_dim));
  std::vector<T> scores(cap);
  for (std::size_t t = 0; t < seq; ++t) {
    const std::size_t lo = window_start(t, window);
    const std::size_t n = t - lo + 1;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = dot(q(t), k(lo + j), qk_dim) * scale;
      m = std::max(m, scores[j]);
    }
    T denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = std::exp(scores[j] - m);
      denom += scores[j];
    }
    T* out = y(t);
    std::fill_n(out, v_dim, T(0));
    for (std::size_t j = 0; j < n; ++j) {
      const T p = scores[j] / denom;
      if (probs) probs[t * cap + j] = p;
      const T* vr = v(lo + j);
      for (std::size_t c = 0; c < v_dim; ++c) out[c] += p * vr[c];
    }
  }
}

template <typename T>
void swa_backward(Rows<T> q, Rows<T> k, Rows<T> v, Rows<T> dy, MutRows<T> dq, MutRows<T> dk, MutRows<T> dv,
                  std::size_t seq, std::size_t qk_dim, std::size_t v_dim, std::size_t window, const T* probs) {
  const std::size_t cap = std::min(window, seq);
  const T scale = T(1) / std::sqrt(T(qk_dim));
  std::vector<T> dp(cap);
  for (std::size_t t = 0; t < seq; ++t) {
    const std::size_t lo = window_start(t, window);
    const std::size_t n = t - lo + 1;
    const T* p = probs + t * cap;
    T weighted = 0;
    for (std::size_t j = 0; j < n; ++j) {
      dp[j] = dot(dy(t), v(lo + j), v_dim);
      weighted += p[j] * dp[j];
    }
    T* dqt = dq(t);
    for (std::size_t j = 0; j < n; ++j) {
      const T ds = p[j] * (dp[j] - weighted) * scale;
      const T* kr = k(lo + j);
      T* dkr = dk(lo + j);
      const T* qt = q(t);
      for (std::size_t c = 0; c < qk_dim; ++c) {
        dqt[c] += ds * kr[c];
        dkr[c] += ds * qt[c];
      }
      T* dvr = dv(lo + j);
      const T* g = dy(t);
      for (std::size_t c = 0; c < v_dim; ++c) dvr[c] += p[j] * g[c];
    }
  }
}

// Normalised linear attention scan; memory/normalizer carry state in and out.
// `den` (nullable) receives the per-position read normaliser.
template <typename T>
void la_forward(Rows<T> phi_q, Rows<T> phi_k, Rows<T> v, MutRows<T> y, std::size_t seq, std::size_t qk_dim,
                std::size_t v_dim, T* memory, T* normalizer, T* den) {
  for (std::size_t t = 0; t < seq; ++t) {
    const T* kt = phi_k(t);
    const T* vt = v(t);
    for (std::size_t i = 0; i < qk_dim; ++i) {
      T* row = memory + i * v_dim;
      for (std::size_t c = 0; c < v_dim; ++c) row[c] += kt[i] * vt[c];
      normalizer[i] += kt[i];
    }
    const T* qt = phi_q(t);
    const T d = dot(qt, normalizer, qk_dim);
    if (!(std::abs(d) >= T(kDegenerateReadThreshold))) {
      throw NumericError("linear attention: degenerate read at position " + std::to_string(t) +
                         " (|denominator| < 1e-9)");
    }
    T* out = y(t);
    std::fill_n(out, v_dim, T(0));
    for (std::size_t i = 0; i < qk_dim; ++i) {
      const T* row = memory + i * v_dim;
      for (std::size_t c = 0; c < v_dim; ++c) out[c] += qt[i] * row[c];
    }
    for (std::size_t c = 0; c < v_dim; ++c) out[c] /= d;
    if (den) den[t] = d;
  }
}

template <typename T>
void la_backward(Rows<T> phi_q, Rows<T> phi_k, Rows<T> v, Rows<T> y, Rows<T> dy, const T* den, MutRows<T> dq,
                 MutRows<T> dk, MutRows<T> dv, std::size_t seq, std::size_t qk_dim, std::size_t v_dim) {
  std::vector<T> dnum(seq * v_dim), dden(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    const T* g = dy(t);
    dden[t] = -dot(g, y(t), v_dim) / den[t];
    for (std::size_t c = 0; c < v_dim; ++c) dnum[t * v_dim + c] = g[c] / den[t];
  }
  // queries: rescan the memory forward
  std::vector<T> memory(qk_dim * v_dim, T(0)), normalizer(qk_dim, T(0));
  for (std::size_t t = 0; t < seq; ++t) {
    const T* kt = phi_k(t);
    const T* vt = v(t);
    T* dqt = dq(t);
    for (std::size_t i = 0; i < qk_dim; ++i) {
      T* row = memory.data() + i * v_dim;
      for (std::size_t c = 0; c < v_dim; ++c) row[c] += kt[i] * vt[c];
      normalizer[i] += kt[i];
      dqt[i] += dot(row, dnum.data() + t * v_dim, v_dim) + normalizer[i] * dden[t];
    }
  }
  // keys and values: reverse accumulation of the memory/normaliser adjoints
  std::fill(memory.begin(), memory.end(), T(0));
  std::fill(normalizer.begin(), normalizer.end(), T(0));
  for (std::size_t t = seq; t-- > 0;) {
    const T* qt = phi_q(t);
    const T* dn = dnum.data() + t * v_dim;
    const T* kt = phi_k(t);
    const T* vt = v(t);
    T* dkt = dk(t);
    T* dvt = dv(t);
    for (std::size_t i = 0; i < qk_dim; ++i) {
      T* row = memory.data() + i * v_dim;
      for (std::size_t c = 0; c < v_dim; ++c) row[c] += qt[i] * dn[c];
      normalizer[i] += qt[i] * dden[t];
      dkt[i] += dot(row, vt, v_dim) + normalizer[i];
      for (std::size_t c = 0; c < v_dim; ++c) dvt[c] += row[c] * kt[i];
    }
  }
}

// H_t = diag(lambda_t) H_{t-1} + diag(alpha_t) k_t v_t^T ; y_t = H_t^T (beta_t * q_t).
// `history` (nullable) receives H_t for every t.
template <typename T>
void gla_forward(Rows<T> q, Rows<T> k, Rows<T> v, Rows<T> alpha, Rows<T> beta, Rows<T> lambda, MutRows<T> y,
                 std::size_t seq, std::size_t qk_dim, std::size_t v_dim, T* memory, T* history) {
  const std::size_t block = qk_dim * v_dim;
  for (std::size_t t = 0; t < seq; ++t) {
    const T* kt = k(t);
    const T* vt = v(t);
    const T* at = alpha(t);
    const T* lt = lambda(t);
    const T* qt = q(t);
    const T* bt = beta(t);
    T* out = y(t);
    std::fill_n(out, v_dim, T(0));
    for (std::size_t i = 0; i < qk_dim; ++i) {
      T* row = memory + i * v_dim;
      const T write = at[i] * kt[i];
      const T read = bt[i] * qt[i];
      for (std::size_t c = 0; c < v_dim; ++c) {
        row[c] = lt[i] * row[c] + write * vt[c];
        out[c] += read * row[c];
      }
    }
    if (history) std::copy_n(memory, block, history + t * block);
  }
}

template <typename T>
void gla_backward(Rows<T> q, Rows<T> k, Rows<T> v, Rows<T> alpha, Rows<T> beta, Rows<T> lambda, Rows<T> dy,
                  MutRows<T> dq, MutRows<T> dk, MutRows<T> dv, MutRows<T> dalpha, MutRows<T> dbeta,
                  MutRows<T> dlambda, std::size_t seq, std::size_t qk_dim, std::size_t v_dim, const T* history) {
  const std::size_t block = qk_dim * v_dim;
  std::vector<T> adj(block, T(0));
  for (std::size_t t = seq; t-- > 0;) {
    const T* h = history + t * block;
    const T* h_prev = t > 0 ? history + (t - 1) * block : nullptr;
    const T* qt = q(t);
    const T* kt = k(t);
    const T* vt = v(t);
    const T* at = alpha(t);
    const T* bt = beta(t);
    const T* lt = lambda(t);
    const T* g = dy(t);
    T* dvt = dv(t);
    for (std::size_t i = 0; i < qk_dim; ++i) {
      T* a = adj.data() + i * v_dim;
      const T* hr = h + i * v_dim;
      const T read = bt[i] * qt[i];
      const T write = at[i] * kt[i];
      T dread = 0, dwrite = 0, dl = 0;
      for (std::size_t c = 0; c < v_dim; ++c) {
        a[c] += read * g[c];
        dread += hr[c] * g[c];
        dwrite += a[c] * vt[c];
        dvt[c] += a[c] * write;
        if (h_prev) dl += a[c] * h_prev[i * v_dim + c];
      }
      dq(t)[i] += dread * bt[i];
      dbeta(t)[i] += dread * qt[i];
      dk(t)[i] += dwrite * at[i];
      dalpha(t)[i] += dwrite * kt[i];
      dlambda(t)[i] += dl;
      for (std::size_t c = 0; c < v_dim; ++c) a[c] *= lt[i];
    }
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void check_gates(const Tensor<T>& g, const char* name, std::size_t seq, std::size_t qk_dim) {
  require(g.rank() == 2 && g.dim(0) == seq && g.dim(1) == qk_dim,
          std::string("gated_linear_attention: gate ") + name + " has shape " + shape_to_string(g.shape()) +
              ", expected [" + std::to_string(seq) + "," + std::to_string(qk_dim) + "]");
  require(g.all_finite(), std::string("gated_linear_attention: gate ") + name + " is not finite");
}

}  // namespace

template <typename T>
void AttentionBatch<T>::validate() const {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
          "AttentionBatch: q, k, v must be rank 2, got " + shape_to_string(q.shape()) + ", " +
              shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  require(q.dim(1) == k.dim(1), "AttentionBatch: q and k disagree on d_qk: " + shape_to_string(q.shape()) +
                                    " vs " + shape_to_string(k.shape()));
  require(q.dim(0) == k.dim(0) && k.dim(0) == v.dim(0),
          "AttentionBatch: sequence lengths differ: " + shape_to_string(q.shape()) + ", " +
              shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  require(q.dim(1) >= 1 && v.dim(1) >= 1, "AttentionBatch: head dimensions must be positive");
}

void RopeConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ShapeError("rope: head dimension must be even and positive, got " + std::to_string(head_dim));
  }
  if (!(theta > 0.0)) throw std::invalid_argument("rope: theta must be positive");
}

template <typename T>
Tensor<T> apply_feature_map(const Tensor<T>& x, FeatureMap phi) {
  if (phi == FeatureMap::identity) return x;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] + T(1) : std::exp(x[i]);
  return out;
}

namespace {

// Rotation of one row; sign = -1 applies the inverse rotation.
template <typename T>
void rotate_row(T* row, std::size_t dim, double position, double theta, double sign) {
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(theta, -2.0 * double(i) / double(dim));
    const double angle = sign * position * freq;
    const T c = T(std::cos(angle));
    const T s = T(std::sin(angle));
    const T x0 = row[2 * i], x1 = row[2 * i + 1];
    row[2 * i] = x0 * c - x1 * s;
    row[2 * i + 1] = x0 * s + x1 * c;
  }
}

// cos/sin of rotate_row's angles for positions offset..offset+seq-1, laid
// out [seq, dim/2]; shared by every batch row and head.
template <typename T>
struct RopeTable {
  std::vector<T> c, s;
  std::size_t half;

  RopeTable(std::size_t seq, std::size_t dim, std::size_t offset, double theta, double sign)
      : c(seq * (dim / 2)), s(seq * (dim / 2)), half(dim / 2) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * double(i) / double(dim));
      for (std::size_t t = 0; t < seq; ++t) {
        const double angle = sign * double(offset + t) * freq;
        c[t * half + i] = T(std::cos(angle));
        s[t * half + i] = T(std::sin(angle));
      }
    }
  }

  void rotate(T* row, std::size_t t) const {
    const T* ct = c.data() + t * half;
    const T* st = s.data() + t * half;
    for (std::size_t i = 0; i < half; ++i) {
      const T x0 = row[2 * i], x1 = row[2 * i + 1];
      row[2 * i] = x0 * ct[i] - x1 * st[i];
      row[2 * i + 1] = x0 * st[i] + x1 * ct[i];
    }
  }
};

}  // namespace

template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeConfig& cfg) {
  cfg.validate();
  require(x.rank() == 2 && x.dim(1) == cfg.head_dim,
          "rope: input " + shape_to_string(x.shape()) + " does not match head_dim " + std::to_string(cfg.head_dim));
  require(positions.size() == x.dim(0), "rope: " + std::to_string(positions.size()) + " positions for " +
                                            std::to_string(x.dim(0)) + " rows");
  Tensor<T> out = x;
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    rotate_row(out.ptr() + t * cfg.head_dim, cfg.head_dim, double(positions[t]), cfg.theta, 1.0);
  }
  return out;
}

template <typename T>
Tensor<T> causal_softmax_attention(const AttentionBatch<T>& batch) {
  return sliding_window_attention(batch, batch.seq_len());
}

template <typename T>
Tensor<T> sliding_window_attention(const AttentionBatch<T>& batch, std::size_t window) {
  batch.validate();
  if (window == 0) throw std::invalid_argument("sliding_window_attention: window must be >= 1");
  const std::size_t seq = batch.seq_len();
  Tensor<T> y({seq, batch.v_dim()});
  if (seq == 0) return y;
  swa_forward(rows_of(batch.q), rows_of(batch.k), rows_of(batch.v), rows_of(y), seq, batch.qk_dim(),
              batch.v_dim(), window, static_cast<T*>(nullptr));
  return y;
}

template <typename T>
Tensor<T> linear_attention_parallel(const AttentionBatch<T>& batch, FeatureMap phi) {
  batch.validate();
  const std::size_t seq = batch.seq_len(), dqk = batch.qk_dim(), dv = batch.v_dim();
  const Tensor<T> fq = apply_feature_map(batch.q, phi);
  const Tensor<T> fk = apply_feature_map(batch.k, phi);
  // all pairwise kernel scores, causal part only
  Tensor<T> scores({seq, seq});
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t i = 0; i <= t; ++i) scores.at(t, i) = dot(fq.ptr() + t * dqk, fk.ptr() + i * dqk, dqk);
  Tensor<T> y({seq, dv});
  for (std::size_t t = 0; t < seq; ++t) {
    T den = 0;
    for (std::size_t i = 0; i <= t; ++i) den += scores.at(t, i);
    if (!(std::abs(den) >= T(kDegenerateReadThreshold))) {
      throw NumericError("linear attention: degenerate read at position " + std::to_string(t) +
                         " (|denominator| < 1e-9)");
    }
    for (std::size_t i = 0; i <= t; ++i) {
      const T w = scores.at(t, i);
      for (std::size_t c = 0; c < dv; ++c) y.at(t, c) += w * batch.v.at(i, c);
    }
    for (std::size_t c = 0; c < dv; ++c) y.at(t, c) /= den;
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, LinearAttentionState<T>> linear_attention_recurrent(const AttentionBatch<T>& batch,
                                                                         FeatureMap phi,
                                                                         LinearAttentionState<T> state) {
  const std::size_t seq = batch.q.rank() == 2 ? batch.q.dim(0) : 0;
  const std::size_t dv = state.memory.rank() == 2 ? state.memory.dim(1) : 0;
  if (seq == 0) return {Tensor<T>(Shape{0, dv}), std::move(state)};
  batch.validate();
  const std::size_t dqk = batch.qk_dim();
  require(state.memory.shape() == Shape({dqk, batch.v_dim()}) && state.normalizer.shape() == Shape({dqk}),
          "linear_attention_recurrent: state shapes " + shape_to_string(state.memory.shape()) + "/" +
              shape_to_string(state.normalizer.shape()) + " do not match batch dims");
  const Tensor<T> fq = apply_feature_map(batch.q, phi);
  const Tensor<T> fk = apply_feature_map(batch.k, phi);
  Tensor<T> y({seq, batch.v_dim()});
  la_forward(rows_of(fq), rows_of(fk), rows_of(batch.v), rows_of(y), seq, dqk, batch.v_dim(), state.memory.ptr(),
             state.normalizer.ptr(), static_cast<T*>(nullptr));
  return {std::move(y), std::move(state)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> gated_linear_attention_recurrent(const AttentionBatch<T>& batch, FeatureMap phi,
                                                                 const GateVector<T>& gates, Tensor<T> memory) {
  batch.validate();
  const std::size_t seq = batch.seq_len(), dqk = batch.qk_dim(), dv = batch.v_dim();
  require(memory.shape() == Shape({dqk, dv}), "gated_linear_attention_recurrent: memory shape " +
                                                  shape_to_string(memory.shape()) + " does not match batch dims");
  check_gates(gates.alpha, "alpha", seq, dqk);
  check_gates(gates.beta, "beta", seq, dqk);
  check_gates(gates.lambda, "lambda", seq, dqk);
  const Tensor<T> fq = apply_feature_map(batch.q, phi);
  const Tensor<T> fk = apply_feature_map(batch.k, phi);
  Tensor<T> y({seq, dv});
  gla_forward(rows_of(fq), rows_of(fk), rows_of(batch.v), rows_of(gates.alpha), rows_of(gates.beta),
              rows_of(gates.lambda), rows_of(y), seq, dqk, dv, memory.ptr(), static_cast<T*>(nullptr));
  if (!y.all_finite()) throw NumericError("gated_linear_attention_recurrent: non-finite output");
  return {std::move(y), std::move(memory)};
}

namespace ops {
namespace {

void check_layout(const char* op, const Shape& s, const HeadLayout& layout, std::size_t dim) {
  if (s.size() != 2 || s[0] != layout.rows() || s[1] != layout.heads * dim) {
    throw ShapeError(std::string(op) + ": operand " + shape_to_string(s) + " does not match layout [" +
                     std::to_string(layout.rows()) + "," + std::to_string(layout.heads * dim) + "]");
  }
}

// View of head h in sequence b.
template <typename T>
Rows<T> head_rows(const Tensor<T>& x, const HeadLayout& l, std::size_t b, std::size_t h, std::size_t dim) {
  return {x.ptr() + b * l.seq * x.dim(1) + h * dim, x.dim(1)};
}

template <typename T>
MutRows<T> head_rows(Tensor<T>& x, const HeadLayout& l, std::size_t b, std::size_t h, std::size_t dim) {
  return {x.ptr() + b * l.seq * x.dim(1) + h * dim, x.dim(1)};
}

}  // namespace

template <typename T>
Var<T> rope(const Var<T>& x, const HeadLayout& layout, const RopeConfig& cfg, std::size_t offset) {
  cfg.validate();
  check_layout("rope", x.shape(), layout, cfg.head_dim);
  Tensor<T> out = x.value();
  const std::size_t width = out.dim(1);
  auto rotate_all = [layout, width, hd = cfg.head_dim](Tensor<T>& m, const RopeTable<T>& table) {
    for (std::size_t b = 0; b < layout.batch; ++b)
      for (std::size_t t = 0; t < layout.seq; ++t)
        for (std::size_t h = 0; h < layout.heads; ++h) table.rotate(m.ptr() + (b * layout.seq + t) * width + h * hd, t);
  };
  rotate_all(out, RopeTable<T>(layout.seq, cfg.head_dim, offset, cfg.theta, 1.0));
  const std::size_t ix = x.id();
  return x.tape()->record("rope", std::move(out), {x},
                          [ix, layout, cfg, offset, rotate_all](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T> back = g;
                            rotate_all(back, RopeTable<T>(layout.seq, cfg.head_dim, offset, cfg.theta, -1.0));
                            tape.accumulate(ix, back.data());
                          });
}

template <typename T>
Var<T> sliding_window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const HeadLayout& layout,
                                std::size_t window) {
  if (window == 0) throw std::invalid_argument("sliding_window_attention: window must be >= 1");
  check_layout("sliding_window_attention", q.shape(), layout, layout.qk_dim);
  check_layout("sliding_window_attention", k.shape(), layout, layout.qk_dim);
  check_layout("sliding_window_attention", v.shape(), layout, layout.v_dim);
  Tape<T>& tape = *q.tape();
  const bool keep = tape.any_requires_grad({q, k, v});
  const std::size_t cap = std::min(window, layout.seq);
  const std::size_t per_head = layout.seq * cap;
  std::vector<T> probs(keep ? layout.batch * layout.heads * per_head : 0);
  Tensor<T> y({layout.rows(), layout.heads * layout.v_dim});
  for (std::size_t b = 0; b < layout.batch; ++b)
    for (std::size_t h = 0; h < layout.heads; ++h)
      swa_forward(head_rows(q.value(), layout, b, h, layout.qk_dim), head_rows(k.value(), layout, b, h, layout.qk_dim),
                  head_rows(v.value(), layout, b, h, layout.v_dim), head_rows(y, layout, b, h, layout.v_dim),
                  layout.seq, layout.qk_dim, layout.v_dim, window,
                  keep ? probs.data() + (b * layout.heads + h) * per_head : nullptr);
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(
      "sliding_window_attention", std::move(y), {q, k, v},
      [iq, ik, iv, layout, window, per_head, probs = std::move(probs)](Tape<T>& tape, const Tensor<T>& g) {
        // adjoints for all three are computed together; buffers of inputs
        // that do not track gradients are simply discarded
        Tensor<T> dq(tape.value(iq).shape()), dk(tape.value(ik).shape()), dv(tape.value(iv).shape());
        for (std::size_t b = 0; b < layout.batch; ++b)
          for (std::size_t h = 0; h < layout.heads; ++h)
            swa_backward(head_rows(tape.value(iq), layout, b, h, layout.qk_dim),
                         head_rows(tape.value(ik), layout, b, h, layout.qk_dim),
                         head_rows(tape.value(iv), layout, b, h, layout.v_dim),
                         head_rows(g, layout, b, h, layout.v_dim), head_rows(dq, layout, b, h, layout.qk_dim),
                         head_rows(dk, layout, b, h, layout.qk_dim), head_rows(dv, layout, b, h, layout.v_dim),
                         layout.seq, layout.qk_dim, layout.v_dim, window,
                         probs.data() + (b * layout.heads + h) * per_head);
        tape.accumulate(iq, dq.data());
        tape.accumulate(ik, dk.data());
        tape.accumulate(iv, dv.data());
      });
}

template <typename T>
Var<T> linear_attention(const Var<T>& phi_q, const Var<T>& phi_k, const Var<T>& v, const HeadLayout& layout) {
  check_layout("linear_attention", phi_q.shape(), layout, layout.qk_dim);
  check_layout("linear_attention", phi_k.shape(), layout, layout.qk_dim);
  check_layout("linear_attention", v.shape(), layout, layout.v_dim);
  Tape<T>& tape = *phi_q.tape();
  Tensor<T> y({layout.rows(), layout.heads * layout.v_dim});
  std::vector<T> den(layout.batch * layout.heads * layout.seq);
  std::vector<T> memory(layout.qk_dim * layout.v_dim), normalizer(layout.qk_dim);
  for (std::size_t b = 0; b < layout.batch; ++b)
    for (std::size_t h = 0; h < layout.heads; ++h) {
      std::fill(memory.begin(), memory.end(), T(0));
      std::fill(normalizer.begin(), normalizer.end(), T(0));
      la_forward(head_rows(phi_q.value(), layout, b, h, layout.qk_dim),
                 head_rows(phi_k.value(), layout, b, h, layout.qk_dim),
                 head_rows(v.value(), layout, b, h, layout.v_dim), head_rows(y, layout, b, h, layout.v_dim),
                 layout.seq, layout.qk_dim, layout.v_dim, memory.data(), normalizer.data(),
                 den.data() + (b * layout.heads + h) * layout.seq);
    }
  const std::size_t iq = phi_q.id(), ik = phi_k.id(), iv = v.id(), iy = tape.size();
  return tape.record("linear_attention", std::move(y), {phi_q, phi_k, v},
                     [iq, ik, iv, iy, layout, den = std::move(den)](Tape<T>& tape, const Tensor<T>& g) {
                       Tensor<T> dq(tape.value(iq).shape()), dk(tape.value(ik).shape()),
                           dv(tape.value(iv).shape());
                       for (std::size_t b = 0; b < layout.batch; ++b)
                         for (std::size_t h = 0; h < layout.heads; ++h)
                           la_backward(head_rows(tape.value(iq), layout, b, h, layout.qk_dim),
                                       head_rows(tape.value(ik), layout, b, h, layout.qk_dim),
                                       head_rows(tape.value(iv), layout, b, h, layout.v_dim),
                                       head_rows(tape.value(iy), layout, b, h, layout.v_dim),
                                       head_rows(g, layout, b, h, layout.v_dim),
                                       den.data() + (b * layout.heads + h) * layout.seq,
                                       head_rows(dq, layout, b, h, layout.qk_dim),
                                       head_rows(dk, layout, b, h, layout.qk_dim),
                                       head_rows(dv, layout, b, h, layout.v_dim), layout.seq, layout.qk_dim,
                                       layout.v_dim);
                       tape.accumulate(iq, dq.data());
                       tape.accumulate(ik, dk.data());
                       tape.accumulate(iv, dv.data());
                     });
}

template <typename T>
Var<T> gated_linear_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& alpha,
                              const Var<T>& beta, const Var<T>& lambda, const HeadLayout& layout) {
  const char* op = "gated_linear_attention";
  check_layout(op, q.shape(), layout, layout.qk_dim);
  check_layout(op, k.shape(), layout, layout.qk_dim);
  check_layout(op, v.shape(), layout, layout.v_dim);
  check_layout(op, alpha.shape(), layout, layout.qk_dim);
  check_layout(op, beta.shape(), layout, layout.qk_dim);
  check_layout(op, lambda.shape(), layout, layout.qk_dim);
  Tape<T>& tape = *q.tape();
  const bool keep = tape.any_requires_grad({q, k, v, alpha, beta, lambda});
  const std::size_t block = layout.qk_dim * layout.v_dim;
  const std::size_t per_head = layout.seq * block;
  std::vector<T> history(keep ? layout.batch * layout.heads * per_head : 0);
  std::vector<T> memory(block);
  Tensor<T> y({layout.rows(), layout.heads * layout.v_dim});
  const std::size_t dk_ = layout.qk_dim, dv_ = layout.v_dim;
  for (std::size_t b = 0; b < layout.batch; ++b)
    for (std::size_t h = 0; h < layout.heads; ++h) {
      std::fill(memory.begin(), memory.end(), T(0));
      gla_forward(head_rows(q.value(), layout, b, h, dk_), head_rows(k.value(), layout, b, h, dk_),
                  head_rows(v.value(), layout, b, h, dv_), head_rows(alpha.value(), layout, b, h, dk_),
                  head_rows(beta.value(), layout, b, h, dk_), head_rows(lambda.value(), layout, b, h, dk_),
                  head_rows(y, layout, b, h, dv_), layout.seq, dk_, dv_, memory.data(),
                  keep ? history.data() + (b * layout.heads + h) * per_head : nullptr);
    }
  const std::array<std::size_t, 6> in = {q.id(), k.id(), v.id(), alpha.id(), beta.id(), lambda.id()};
  return tape.record(
      op, std::move(y), {q, k, v, alpha, beta, lambda},
      [in, layout, per_head, history = std::move(history)](Tape<T>& tape, const Tensor<T>& g) {
        const std::size_t dk_ = layout.qk_dim, dv_ = layout.v_dim;
        std::vector<Tensor<T>> grads;
        for (std::size_t i : in) grads.emplace_back(tape.value(i).shape());
        for (std::size_t b = 0; b < layout.batch; ++b)
          for (std::size_t h = 0; h < layout.heads; ++h)
            gla_backward(head_rows(tape.value(in[0]), layout, b, h, dk_),
                         head_rows(tape.value(in[1]), layout, b, h, dk_),
                         head_rows(tape.value(in[2]), layout, b, h, dv_),
                         head_rows(tape.value(in[3]), layout, b, h, dk_),
                         head_rows(tape.value(in[4]), layout, b, h, dk_),
                         head_rows(tape.value(in[5]), layout, b, h, dk_), head_rows(g, layout, b, h, dv_),
                         head_rows(grads[0], layout, b, h, dk_), head_rows(grads[1], layout, b, h, dk_),
                         head_rows(grads[2], layout, b, h, dv_), head_rows(grads[3], layout, b, h, dk_),
                         head_rows(grads[4], layout, b, h, dk_), head_rows(grads[5], layout, b, h, dk_),
                         layout.seq, dk_, dv_, history.data() + (b * layout.heads + h) * per_head);
        for (std::size_t i = 0; i < 6; ++i) tape.accumulate(in[i], grads[i].data());
      });
}

}  // namespace ops

#define SWAX_INSTANTIATE_ATTENTION(T)                                                                          \
  template struct AttentionBatch<T>;                                                                           \
  template Tensor<T> apply_feature_map(const Tensor<T>&, FeatureMap);                                          \
  template Tensor<T> apply_rope(const Tensor<T>&, std::span<const std::size_t>, const RopeConfig&);            \
  template Tensor<T> causal_softmax_attention(const AttentionBatch<T>&);                                       \
  template Tensor<T> sliding_window_attention(const AttentionBatch<T>&, std::size_t);                          \
  template Tensor<T> linear_attention_parallel(const AttentionBatch<T>&, FeatureMap);                          \
  template std::pair<Tensor<T>, LinearAttentionState<T>> linear_attention_recurrent(                           \
      const AttentionBatch<T>&, FeatureMap, LinearAttentionState<T>);                                          \
  template std::pair<Tensor<T>, Tensor<T>> gated_linear_attention_recurrent(                                   \
      const AttentionBatch<T>&, FeatureMap, const GateVector<T>&, Tensor<T>);                                  \
  template Var<T> ops::rope(const Var<T>&, const HeadLayout&, const RopeConfig&, std::size_t);                 \
  template Var<T> ops::sliding_window_attention(const Var<T>&, const Var<T>&, const Var<T>&, const HeadLayout&, \
                                                std::size_t);                                                  \
  template Var<T> ops::linear_attention(const Var<T>&, const Var<T>&, const Var<T>&, const HeadLayout&);       \
  template Var<T> ops::gated_linear_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,      \
                                              const Var<T>&, const Var<T>&, const HeadLayout&);

SWAX_INSTANTIATE_ATTENTION(float)
SWAX_INSTANTIATE_ATTENTION(double)

}  // namespace swax
