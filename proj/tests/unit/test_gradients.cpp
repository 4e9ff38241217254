#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "swax/attention.hpp"
#include "swax/gradcheck.hpp"
#include "swax/model.hpp"
#include "swax/ops.hpp"

namespace swax {
namespace {

using testing::random_tensor;
using D = double;
using VarList = std::vector<Var<D>>;

constexpr double kTol = 1e-4;

// Contract the output against a fixed random tensor so every output
// coordinate contributes with a distinct weight.
Var<D> weighted_sum(const Var<D>& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tape<D>& tape = *out.tape();
  return ops::sum(ops::mul(out, tape.constant(random_tensor<D>(rng, out.shape()))));
}

template <typename F>
GradCheckReport check_unary(F&& f, std::vector<Tensor<D>> params) {
  return finite_difference_check(
      [&](Tape<D>&, const VarList& p) { return weighted_sum(f(p)); }, params);
}

TEST(Gradients, Elementwise) {
  std::mt19937_64 rng(1);
  auto a = random_tensor<D>(rng, {3, 4});
  auto b = random_tensor<D>(rng, {3, 4});
  EXPECT_LT(check_unary([](const VarList& p) { return ops::add(p[0], p[1]); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::sub(p[0], p[1]); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::mul(p[0], p[1]); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::scale(p[0], 1.7); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::exp(p[0]); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::sigmoid(p[0]); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::silu(p[0]); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::elu_plus_one(p[0]); }, {a}).max_rel_error, kTol);
}

TEST(Gradients, LinearAlgebra) {
  std::mt19937_64 rng(2);
  auto a = random_tensor<D>(rng, {3, 5});
  auto b = random_tensor<D>(rng, {5, 4});
  auto bias = random_tensor<D>(rng, {4});
  auto ba = random_tensor<D>(rng, {2, 3, 5});
  auto bb = random_tensor<D>(rng, {2, 5, 2});
  EXPECT_LT(check_unary([](const VarList& p) { return ops::matmul(p[0], p[1]); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::bmm(p[0], p[1]); }, {ba, bb}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::transpose(p[0]); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::add_bias(ops::matmul(p[0], p[1]), p[2]); }, {a, b, bias})
                .max_rel_error,
            kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::repeat_columns(p[0], 3); }, {a}).max_rel_error, kTol);
}

TEST(Gradients, SoftmaxWithMask) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<D>(rng, {4, 5});
  std::vector<std::uint8_t> keep(20, 1);
  keep[1] = keep[7] = keep[8] = keep[19] = 0;
  EXPECT_LT(check_unary([&](const VarList& p) { return ops::softmax(p[0], keep); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::softmax(p[0]); }, {x}).max_rel_error, kTol);
}

TEST(Gradients, RmsNormGrouped) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<D>(rng, {3, 8});
  auto g = random_tensor<D>(rng, {4});
  auto g8 = random_tensor<D>(rng, {8});
  EXPECT_LT(check_unary([](const VarList& p) { return ops::rmsnorm(p[0], p[1], 4); }, {x, g}).max_rel_error, kTol);
  EXPECT_LT(check_unary([](const VarList& p) { return ops::rmsnorm(p[0], p[1]); }, {x, g8}).max_rel_error, kTol);
}

TEST(Gradients, EmbeddingAndCrossEntropy) {
  std::mt19937_64 rng(5);
  auto table = random_tensor<D>(rng, {6, 3});
  const std::vector<std::int32_t> ids{0, 5, 2, 2, 4};
  EXPECT_LT(check_unary([&](const VarList& p) { return ops::embedding(p[0], ids); }, {table}).max_rel_error, kTol);
  auto logits = random_tensor<D>(rng, {5, 6});
  const auto r = finite_difference_check(
      [&](Tape<D>&, const VarList& p) { return ops::cross_entropy(p[0], std::span<const std::int32_t>(ids)); },
      {logits});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, Rope) {
  std::mt19937_64 rng(6);
  HeadLayout l{2, 5, 2, 4, 4};
  auto x = random_tensor<D>(rng, {10, 8});
  RopeConfig cfg{100.0, 4};
  EXPECT_LT(check_unary([&](const VarList& p) { return ops::rope(p[0], l, cfg, 3); }, {x}).max_rel_error, kTol);
}

TEST(Gradients, SlidingWindowAttention) {
  std::mt19937_64 rng(7);
  HeadLayout l{2, 7, 2, 3, 4};
  auto q = random_tensor<D>(rng, {14, 6});
  auto k = random_tensor<D>(rng, {14, 6});
  auto v = random_tensor<D>(rng, {14, 8});
  for (std::size_t w : {1u, 3u, 7u, 20u}) {
    const auto r = check_unary(
        [&](const VarList& p) { return ops::sliding_window_attention(p[0], p[1], p[2], l, w); }, {q, k, v});
    EXPECT_LT(r.max_rel_error, kTol) << "window " << w;
  }
}

TEST(Gradients, LinearAttention) {
  std::mt19937_64 rng(8);
  HeadLayout l{2, 6, 2, 3, 2};
  auto q = random_tensor<D>(rng, {12, 6});
  auto k = random_tensor<D>(rng, {12, 6});
  auto v = random_tensor<D>(rng, {12, 4});
  const auto r = check_unary(
      [&](const VarList& p) {
        return ops::linear_attention(ops::elu_plus_one(p[0]), ops::elu_plus_one(p[1]), p[2], l);
      },
      {q, k, v});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, GatedLinearAttention) {
  std::mt19937_64 rng(9);
  HeadLayout l{2, 6, 2, 3, 2};
  std::vector<Tensor<D>> params{random_tensor<D>(rng, {12, 6}), random_tensor<D>(rng, {12, 6}),
                                random_tensor<D>(rng, {12, 4}), random_tensor<D>(rng, {12, 6}),
                                random_tensor<D>(rng, {12, 6}), random_tensor<D>(rng, {12, 6})};
  const auto r = check_unary(
      [&](const VarList& p) {
        return ops::gated_linear_attention(p[0], p[1], p[2], ops::sigmoid(p[3]), ops::sigmoid(p[4]),
                                           ops::sigmoid(p[5]), l);
      },
      params);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, GatedMlp) {
  std::mt19937_64 rng(10);
  const auto r = check_unary([](const VarList& p) { return gated_mlp(p[0], p[1], p[2], p[3]); },
                             {random_tensor<D>(rng, {4, 6}), random_tensor<D>(rng, {6, 8}),
                              random_tensor<D>(rng, {6, 8}), random_tensor<D>(rng, {8, 6})});
  EXPECT_LT(r.max_rel_error, kTol);
}

GradCheckReport check_model(Architecture arch) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.n_blocks = 2;
  cfg.model_dim = 8;
  cfg.n_heads = 2;
  cfg.vocab_size = 11;
  cfg.default_window = 3;
  cfg.init_std = 0.3;
  cfg.decay_bias = 1.0;
  const Model<D> model = build_model<D>(cfg, 17);
  std::vector<Tensor<D>> params;
  for (const auto& p : model.parameters()) params.push_back(p.value);
  std::mt19937_64 rng(18);
  const auto tokens = testing::random_tokens(rng, 12, cfg.vocab_size);
  const std::vector<std::int32_t> inputs(tokens.begin(), tokens.end());
  std::vector<std::int32_t> targets(inputs.begin() + 1, inputs.end());
  targets.push_back(3);
  return finite_difference_check(
      [&](Tape<D>&, const VarList& p) {
        const Var<D> logits = forward(model, p, inputs, 2);
        return ops::cross_entropy(logits, std::span<const std::int32_t>(targets));
      },
      params);
}

TEST(Gradients, FullModelSwax) { EXPECT_LT(check_model(Architecture::swax).max_rel_error, kTol); }
TEST(Gradients, FullModelOtherArchitectures) {
  for (auto arch : {Architecture::transformer, Architecture::swa, Architecture::xlstm}) {
    EXPECT_LT(check_model(arch).max_rel_error, kTol) << to_string(arch);
  }
}

// An op whose recorded adjoint is twice the true one must be caught.
TEST(Gradients, NegativeControlDetectsWrongAdjoint) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<D>(rng, {3, 3});
  const auto r = finite_difference_check(
      [](Tape<D>& tape, const VarList& p) {
        const Tensor<D>& xv = p[0].value();
        Tensor<D> y(xv.shape());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * xv[i];
        const std::size_t id = p[0].id();
        const Var<D> sq = tape.record("bad_square", y, {p[0]}, [id](Tape<D>& t, const Tensor<D>& g) {
          const Tensor<D>& in = t.value(id);
          std::vector<D> dx(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) dx[i] = 4.0 * in[i] * g[i];
          t.accumulate(id, dx);
        });
        return ops::sum(sq);
      },
      {x});
  EXPECT_GT(r.max_rel_error, 1e-2);
}

}  // namespace
}  // namespace swax
