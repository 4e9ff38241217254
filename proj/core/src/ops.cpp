#include "swax/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace swax {

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(s));
  }
}

template <typename T>
void require_same_tape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

template <typename T, typename F>
Tensor<T> map_values(const Var<T>& x, F f) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return out;
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail("matmul", sa, sb);
  const Eigen::Index m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out({sa[0], sb[1]});
  MatMap<T>(out.ptr(), m, n).noalias() =
      ConstMatMap<T>(a.value().ptr(), m, k) * ConstMatMap<T>(b.value().ptr(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", std::move(out), {a, b},
                          [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                            ConstMatMap<T> dc(g.ptr(), m, n);
                            if (tape.requires_grad(ia)) {
                              MatMap<T>(tape.grad_buffer(ia).ptr(), m, k).noalias() +=
                                  dc * ConstMatMap<T>(tape.value(ib).ptr(), k, n).transpose();
                            }
                            if (tape.requires_grad(ib)) {
                              MatMap<T>(tape.grad_buffer(ib).ptr(), k, n).noalias() +=
                                  ConstMatMap<T>(tape.value(ia).ptr(), m, k).transpose() * dc;
                            }
                          });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  require_same_tape("bmm", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) shape_fail("bmm", sa, sb);
  const std::size_t batch = sa[0];
  const Eigen::Index m = sa[1], k = sa[2], n = sb[2];
  Tensor<T> out({batch, sa[1], sb[2]});
  for (std::size_t i = 0; i < batch; ++i) {
    MatMap<T>(out.ptr() + i * m * n, m, n).noalias() =
        ConstMatMap<T>(a.value().ptr() + i * m * k, m, k) *
        ConstMatMap<T>(b.value().ptr() + i * k * n, k, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("bmm", std::move(out), {a, b},
                          [ia, ib, batch, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                            for (std::size_t i = 0; i < batch; ++i) {
                              ConstMatMap<T> dc(g.ptr() + i * m * n, m, n);
                              if (tape.requires_grad(ia)) {
                                MatMap<T>(tape.grad_buffer(ia).ptr() + i * m * k, m, k).noalias() +=
                                    dc * ConstMatMap<T>(tape.value(ib).ptr() + i * k * n, k, n).transpose();
                              }
                              if (tape.requires_grad(ib)) {
                                MatMap<T>(tape.grad_buffer(ib).ptr() + i * k * n, k, n).noalias() +=
                                    ConstMatMap<T>(tape.value(ia).ptr() + i * m * k, m, k).transpose() * dc;
                              }
                            }
                          });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank("transpose", a.shape(), 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out({n, m});
  const Tensor<T>& av = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id();
  return a.tape()->record("transpose", std::move(out), {a},
                          [ia, m, n](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T>& da = tape.grad_buffer(ia);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
                          });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape("add", a, b);
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("add", std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(ia, g.data());
    tape.accumulate(ib, g.data());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_tape("sub", a, b);
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("sub", std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(ia, g.data());
    if (tape.requires_grad(ib)) {
      Tensor<T>& db = tape.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape("mul", a, b);
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("mul", std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& av = tape.value(ia);
    const Tensor<T>& bv = tape.value(ib);
    if (tape.requires_grad(ia)) {
      Tensor<T>& da = tape.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(ib)) {
      Tensor<T>& db = tape.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x *= factor;
  const std::size_t ia = a.id();
  return a.tape()->record("scale", std::move(out), {a}, [ia, factor](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& da = tape.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  require_same_tape("add_bias", x, bias);
  const Shape& sx = x.shape();
  if (bias.shape().size() != 1 || sx.empty() || sx.back() != bias.shape()[0]) {
    shape_fail("add_bias", sx, bias.shape());
  }
  const std::size_t n = sx.back();
  const std::size_t rows = x.value().size() / n;
  Tensor<T> out = x.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape()->record("add_bias", std::move(out), {x, bias},
                          [ix, ib, rows, n](Tape<T>& tape, const Tensor<T>& g) {
                            tape.accumulate(ix, g.data());
                            if (tape.requires_grad(ib)) {
                              Tensor<T>& db = tape.grad_buffer(ib);
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
                            }
                          });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> out = map_values<T>(x, [](T v) { return std::exp(v); });
  const std::size_t ix = x.id(), io = x.tape()->size();
  return x.tape()->record("exp", std::move(out), {x}, [ix, io](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(io);
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = map_values<T>(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
  const std::size_t ix = x.id(), io = x.tape()->size();
  return x.tape()->record("sigmoid", std::move(out), {x}, [ix, io](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(io);
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = map_values<T>(x, [](T v) { return v / (T(1) + std::exp(-v)); });
  const std::size_t ix = x.id();
  return x.tape()->record("silu", std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(ix);
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv[i]));
      dx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> elu_plus_one(const Var<T>& x) {
  Tensor<T> out = map_values<T>(x, [](T v) { return v > T(0) ? v + T(1) : std::exp(v); });
  const std::size_t ix = x.id();
  return x.tape()->record("elu_plus_one", std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(ix);
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (xv[i] > T(0) ? T(1) : std::exp(xv[i]));
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::span<const std::uint8_t> keep) {
  const Shape& sx = x.shape();
  if (sx.empty()) throw ShapeError("softmax: empty shape");
  const Tensor<T>& xv = x.value();
  if (!keep.empty() && keep.size() != xv.size()) {
    throw ShapeError("softmax: mask has " + std::to_string(keep.size()) + " entries for input " +
                     shape_to_string(sx));
  }
  const std::size_t n = sx.back();
  const std::size_t rows = xv.size() / n;
  Tensor<T> out(sx);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * n;
    T* o = out.ptr() + r * n;
    const std::uint8_t* k = keep.empty() ? nullptr : keep.data() + r * n;
    T m = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (k && !k[j]) continue;
      m = std::max(m, in[j]);
      any = true;
    }
    if (!any) throw NumericError("softmax: row " + std::to_string(r) + " has every entry masked");
    T denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (k && !k[j]) continue;
      o[j] = std::exp(in[j] - m);
      denom += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] = (k && !k[j]) ? T(0) : o[j] / denom;
  }
  const std::size_t ix = x.id(), io = x.tape()->size();
  return x.tape()->record("softmax", std::move(out), {x}, [ix, io, rows, n](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(io);
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.ptr() + r * n;
      const T* gr = g.ptr() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      // masked entries have y == 0 and receive zero gradient
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, std::size_t group, T eps) {
  require_same_tape("rmsnorm", x, gain);
  const Shape& sx = x.shape();
  if (sx.empty()) throw ShapeError("rmsnorm: empty shape");
  if (group == 0) group = sx.back();
  if (sx.back() % group != 0 || gain.shape().size() != 1 || gain.shape()[0] != group) {
    shape_fail("rmsnorm", sx, gain.shape());
  }
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gain.value();
  const std::size_t groups = xv.size() / group;
  Tensor<T> out(sx);
  std::vector<T> inv_rms(groups);
  for (std::size_t r = 0; r < groups; ++r) {
    const T* in = xv.ptr() + r * group;
    T ms = 0;
    for (std::size_t j = 0; j < group; ++j) ms += in[j] * in[j];
    ms /= T(group);
    const T inv = T(1) / std::sqrt(ms + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < group; ++j) out[r * group + j] = gv[j] * in[j] * inv;
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return x.tape()->record(
      "rmsnorm", std::move(out), {x, gain},
      [ix, ig, groups, group, inv_rms = std::move(inv_rms)](Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& xv = tape.value(ix);
        const Tensor<T>& gv = tape.value(ig);
        const bool need_x = tape.requires_grad(ix);
        const bool need_g = tape.requires_grad(ig);
        for (std::size_t r = 0; r < groups; ++r) {
          const T* in = xv.ptr() + r * group;
          const T* gr = g.ptr() + r * group;
          const T inv = inv_rms[r];
          if (need_g) {
            Tensor<T>& dg = tape.grad_buffer(ig);
            for (std::size_t j = 0; j < group; ++j) dg[j] += gr[j] * in[j] * inv;
          }
          if (need_x) {
            T dot = 0;
            for (std::size_t j = 0; j < group; ++j) dot += gv[j] * gr[j] * in[j];
            const T c = dot * inv * inv * inv / T(group);
            Tensor<T>& dx = tape.grad_buffer(ix);
            for (std::size_t j = 0; j < group; ++j) dx[r * group + j] += gv[j] * gr[j] * inv - in[j] * c;
          }
        }
      });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  require_rank("embedding", table.shape(), 2);
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  Tensor<T> out({ids.size(), d});
  const Tensor<T>& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.ptr() + ids[i] * d, d, out.ptr() + i * d);
  }
  const std::size_t it = table.id();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape()->record("embedding", std::move(out), {table},
                              [it, d, saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
                                Tensor<T>& dt = tape.grad_buffer(it);
                                for (std::size_t i = 0; i < saved.size(); ++i) {
                                  T* row = dt.ptr() + saved[i] * d;
                                  for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                                }
                              });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t n = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_to_string(logits.shape()));
  }
  if (n == 0) throw ShapeError("cross_entropy: no rows");
  const Tensor<T>& lv = logits.value();
  std::vector<T> probs(n * vocab);
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    const T* row = lv.ptr() + r * vocab;
    const T m = *std::max_element(row, row + vocab);
    T denom = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - m);
      denom += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= denom;
    total += std::log(denom) + m - row[targets[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  const std::size_t il = logits.id();
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return logits.tape()->record(
      "cross_entropy", std::move(out), {logits},
      [il, n, vocab, probs = std::move(probs), saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>& dl = tape.grad_buffer(il);
        const T s = g[0] / T(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < vocab; ++j) dl[r * vocab + j] += s * probs[r * vocab + j];
          dl[r * vocab + saved[r]] -= s;
        }
      });
}

template <typename T>
Var<T> repeat_columns(const Var<T>& x, std::size_t repeats) {
  require_rank("repeat_columns", x.shape(), 2);
  if (repeats == 0) throw ShapeError("repeat_columns: repeats must be positive");
  const std::size_t rows = x.shape()[0], n = x.shape()[1];
  Tensor<T> out({rows, n * repeats});
  const Tensor<T>& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) std::fill_n(out.ptr() + (r * n + j) * repeats, repeats, xv[r * n + j]);
  const std::size_t ix = x.id();
  return x.tape()->record("repeat_columns", std::move(out), {x},
                          [ix, rows, n, repeats](Tape<T>& tape, const Tensor<T>& g) {
                            Tensor<T>& dx = tape.grad_buffer(ix);
                            for (std::size_t i = 0; i < rows * n; ++i) {
                              T acc = 0;
                              for (std::size_t c = 0; c < repeats; ++c) acc += g[i * repeats + c];
                              dx[i] += acc;
                            }
                          });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (const T& v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape()->record("sum", Tensor<T>::scalar(total), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& dx = tape.grad_buffer(ix);
    for (auto& v : dx.data()) v += g[0];
  });
}

#define SWAX_INSTANTIATE_OPS(T)                                                         \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                 \
  template Var<T> bmm(const Var<T>&, const Var<T>&);                                    \
  template Var<T> transpose(const Var<T>&);                                             \
  template Var<T> add(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                              \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                               \
  template Var<T> exp(const Var<T>&);                                                   \
  template Var<T> sigmoid(const Var<T>&);                                               \
  template Var<T> silu(const Var<T>&);                                                  \
  template Var<T> elu_plus_one(const Var<T>&);                                          \
  template Var<T> softmax(const Var<T>&, std::span<const std::uint8_t>);                \
  template Var<T> rmsnorm(const Var<T>&, const Var<T>&, std::size_t, T);                \
  template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>);              \
  template Var<T> cross_entropy(const Var<T>&, std::span<const std::int32_t>);          \
  template Var<T> repeat_columns(const Var<T>&, std::size_t);                           \
  template Var<T> sum(const Var<T>&);

SWAX_INSTANTIATE_OPS(float)
SWAX_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace swax
