#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "swax/tensor.hpp"

namespace swax::testing {

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = T(n(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = T(u(rng));
  return t;
}

inline std::vector<std::int32_t> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<std::int32_t> d(0, std::int32_t(vocab) - 1);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

inline std::size_t random_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace swax::testing
