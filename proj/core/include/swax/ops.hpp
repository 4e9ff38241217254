#pragma once

#include <cstdint>
#include <span>

#include "swax/autodiff.hpp"

/// Differentiable primitives. Every op records its adjoint on the tape of its
/// first operand; shape violations throw ShapeError naming the op and shapes.
namespace swax::ops {

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b);

/// [m,n] -> [n,m]
template <typename T>
Var<T> transpose(const Var<T>& a);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

/// Adds `bias` [n] to every row of `x` [..., n].
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> exp(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> silu(const Var<T>& x);

/// elu(x) + 1; strictly positive.
template <typename T>
Var<T> elu_plus_one(const Var<T>& x);

/// Softmax over the last axis. With a non-empty `keep` mask (same element
/// count as x, nonzero = keep) masked entries are excluded from the max and
/// the normaliser and produce exactly 0. A row with no kept entry is an error.
template <typename T>
Var<T> softmax(const Var<T>& x, std::span<const std::uint8_t> keep = {});

/// RMS normalisation over contiguous groups of `group` columns (0 = whole
/// last axis); `gain` has `group` entries shared by all groups.
template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, std::size_t group = 0, T eps = T(1e-6));

/// Rows of `table` [V,d] selected by `ids` -> [n,d].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

/// Mean next-token cross-entropy of `logits` [n,V] against `targets` [n] -> [1].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets);

/// Repeats each column of x [rows, n] `repeats` times consecutively -> [rows, n*repeats].
template <typename T>
Var<T> repeat_columns(const Var<T>& x, std::size_t repeats);

/// Sum of all elements -> [1].
template <typename T>
Var<T> sum(const Var<T>& x);

}  // namespace swax::ops
