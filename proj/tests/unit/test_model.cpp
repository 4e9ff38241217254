#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "swax/model.hpp"

namespace swax {
namespace {

ModelConfig small(Architecture arch) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.n_blocks = 2;
  cfg.model_dim = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = 13;
  cfg.default_window = 4;
  cfg.init_std = 0.3;
  cfg.decay_bias = 1.0;
  return cfg;
}

// The reference config used for FLOP comparisons: 24 blocks of width 2048, 16 heads.
ModelConfig reference_1b4(Architecture arch, std::size_t window) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.n_blocks = 24;
  cfg.model_dim = 2048;
  cfg.n_heads = 16;
  cfg.ffn_mult = 8.0 / 3.0;
  cfg.vocab_size = 50304;
  cfg.default_window = window;
  return cfg;
}

// Counted layer by layer from the shapes a reader would write down for each block.
std::size_t count_by_hand(const ModelConfig& c) {
  const std::size_t d = c.model_dim, h = c.n_heads, hd = d / h, f = std::size_t(std::lround(c.ffn_mult * d));
  const std::size_t qk = h * std::size_t(std::lround(c.gla_qk_factor * hd));
  const std::size_t attention = d + d * d + d * d + d * d + d * d;
  const std::size_t gla = d + d * qk + d * qk + d * d + (d * qk + qk) + (d * h + h) + (d * h + h) + hd + d * d;
  const std::size_t mlp = d + d * f + d * f + f * d;
  std::size_t n = c.vocab_size * d + d + d * c.vocab_size;
  for (std::size_t i = 0; i < c.n_blocks; ++i) {
    bool is_gla = c.architecture == Architecture::xlstm ||
                  (c.architecture == Architecture::swax && (i % 2 == 0) == c.gla_first);
    n += (is_gla ? gla : attention) + mlp;
  }
  return n;
}

TEST(ModelConfig, ParameterCountMatchesConstructedModel) {
  std::mt19937_64 rng(1);
  const Architecture archs[] = {Architecture::transformer, Architecture::swa, Architecture::xlstm, Architecture::swax};
  for (int i = 0; i < 20; ++i) {
    ModelConfig cfg;
    cfg.architecture = archs[i % 4];
    cfg.n_heads = testing::random_size(rng, 1, 4);
    cfg.model_dim = cfg.n_heads * 2 * testing::random_size(rng, 1, 6);
    cfg.n_blocks = 2 * testing::random_size(rng, 1, 3);
    cfg.vocab_size = testing::random_size(rng, 2, 50);
    cfg.ffn_mult = 1.0 + 0.5 * double(testing::random_size(rng, 0, 4));
    cfg.gla_first = i % 3 != 0;
    const auto model = build_model<float>(cfg, std::uint64_t(i));
    EXPECT_EQ(parameter_count(cfg), model.numel()) << i;
    EXPECT_EQ(parameter_count(cfg), count_by_hand(cfg)) << i;
  }
}

TEST(ModelConfig, InvalidConfigsRejected) {
  ModelConfig cfg = small(Architecture::swax);
  cfg.n_blocks = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small(Architecture::swa);
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small(Architecture::swa);
  cfg.default_window = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small(Architecture::swa);
  cfg.vocab_size = 0;
  EXPECT_THROW(build_model<float>(cfg, 0), std::invalid_argument);
}

TEST(Model, BlockLayoutFollowsArchitecture) {
  auto cfg = small(Architecture::swax);
  cfg.n_blocks = 4;
  using K = MixerKind;
  EXPECT_EQ(build_model<float>(cfg, 0).layout(), (std::vector<K>{K::gla, K::swa, K::gla, K::swa}));
  cfg.gla_first = false;
  EXPECT_EQ(block_layout(cfg), (std::vector<K>{K::swa, K::gla, K::swa, K::gla}));
  EXPECT_EQ(block_layout(small(Architecture::transformer)), (std::vector<K>{K::sa, K::sa}));
  EXPECT_EQ(block_layout(small(Architecture::xlstm)), (std::vector<K>{K::gla, K::gla}));
}

TEST(Model, SameSeedSameParameters) {
  const auto a = build_model<float>(small(Architecture::swax), 5);
  const auto b = build_model<float>(small(Architecture::swax), 5);
  const auto c = build_model<float>(small(Architecture::swax), 6);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    differs |= a.parameters()[i].value != c.parameters()[i].value;
  }
  EXPECT_TRUE(differs);
}

TEST(Model, OnlyMatricesDecay) {
  for (const auto& p : build_model<float>(small(Architecture::swax), 0).parameters()) {
    EXPECT_EQ(p.decay, p.value.rank() == 2 && p.name != "embed") << p.name;
  }
}

TEST(Model, SingleTokenGivesFiniteLogits) {
  for (auto arch : {Architecture::transformer, Architecture::swa, Architecture::xlstm, Architecture::swax}) {
    const auto model = build_model<float>(small(arch), 1);
    const std::vector<std::int32_t> one{3};
    const auto logits = forward(model, one);
    EXPECT_EQ(logits.shape(), (Shape{1, 13}));
    for (float x : logits.data()) EXPECT_TRUE(std::isfinite(x));
  }
}

TEST(Model, OutOfRangeTokenRejected) {
  const auto model = build_model<float>(small(Architecture::swa), 1);
  const std::vector<std::int32_t> bad{1, 13};
  EXPECT_THROW(forward(model, bad), std::out_of_range);
  const std::vector<std::int32_t> negative{-1};
  EXPECT_THROW(forward(model, negative), std::out_of_range);
}

TEST(Model, EndToEndCausality) {
  std::mt19937_64 rng(2);
  for (auto arch : {Architecture::transformer, Architecture::swa, Architecture::xlstm, Architecture::swax}) {
    const auto model = build_model<double>(small(arch), 3);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t S = testing::random_size(rng, 2, 24);
      auto tokens = testing::random_tokens(rng, S, 13);
      const auto base = forward(model, std::span<const std::int32_t>(tokens));
      const std::size_t j = testing::random_size(rng, 0, S - 1);
      tokens[j] = (tokens[j] + 1) % 13;
      const auto moved = forward(model, std::span<const std::int32_t>(tokens));
      for (std::size_t t = 0; t < j; ++t)
        for (std::size_t c = 0; c < 13; ++c) ASSERT_EQ(base.at(t, c), moved.at(t, c)) << to_string(arch) << " t=" << t;
      bool changed = false;
      for (std::size_t c = 0; c < 13; ++c) changed |= base.at(j, c) != moved.at(j, c);
      EXPECT_TRUE(changed) << to_string(arch);
    }
  }
}

// Four SWA blocks of window 8: position t sees inputs no further back than 4 * 7.
TEST(Model, SlidingWindowReceptiveField) {
  auto cfg = small(Architecture::swa);
  cfg.n_blocks = 4;
  cfg.default_window = 8;
  const std::size_t reach = cfg.n_blocks * (cfg.default_window - 1);
  const auto model = build_model<double>(cfg, 4);
  std::mt19937_64 rng(5);
  auto tokens = testing::random_tokens(rng, 48, 13);
  const auto base = forward(model, std::span<const std::int32_t>(tokens));
  tokens[0] = (tokens[0] + 5) % 13;
  const auto moved = forward(model, std::span<const std::int32_t>(tokens));
  auto row_equal = [&](std::size_t t) {
    for (std::size_t c = 0; c < 13; ++c)
      if (base.at(t, c) != moved.at(t, c)) return false;
    return true;
  };
  for (std::size_t t = 0; t <= reach; ++t) EXPECT_FALSE(row_equal(t)) << "t=" << t;
  for (std::size_t t = reach + 1; t < 48; ++t) EXPECT_TRUE(row_equal(t)) << "t=" << t;
  for (std::size_t t = cfg.n_blocks * cfg.default_window; t < 48; ++t) EXPECT_TRUE(row_equal(t));
}

TEST(Model, RecurrentArchitecturesHaveUnboundedReach) {
  for (auto arch : {Architecture::xlstm, Architecture::swax}) {
    auto cfg = small(arch);
    cfg.default_window = 2;
    cfg.decay_bias = 8.0;  // keep the memory long at initialisation
    const auto model = build_model<double>(cfg, 6);
    std::mt19937_64 rng(7);
    auto tokens = testing::random_tokens(rng, 200, 13);
    const auto base = forward(model, std::span<const std::int32_t>(tokens));
    tokens[0] = (tokens[0] + 1) % 13;
    const auto moved = forward(model, std::span<const std::int32_t>(tokens));
    EXPECT_GT(std::abs(base.at(199, 0) - moved.at(199, 0)), 1e-9) << to_string(arch);
  }
}

TEST(Model, WindowOverrideCoveringSequenceEqualsFullAttention) {
  auto cfg = small(Architecture::swa);
  const auto swa = build_model<double>(cfg, 8);
  cfg.architecture = Architecture::transformer;
  const auto full = build_model<double>(cfg, 8);
  std::mt19937_64 rng(9);
  const auto tokens = testing::random_tokens(rng, 20, 13);
  const std::span<const std::int32_t> in(tokens);
  EXPECT_EQ(forward(swa, in, {20}), forward(full, in));
  EXPECT_EQ(forward(swa, in, {500}), forward(full, in));
  EXPECT_NE(forward(swa, in), forward(full, in));
}

TEST(Model, BatchedForwardMatchesPerSequence) {
  const auto model = build_model<double>(small(Architecture::swax), 10);
  std::mt19937_64 rng(11);
  const auto tokens = testing::random_tokens(rng, 30, 13);
  Tape<double> tape;
  const auto params = bind_parameters(tape, model, false);
  const auto both = forward(model, params, std::span<const std::int32_t>(tokens), 2).value();
  for (std::size_t b = 0; b < 2; ++b) {
    const auto one = forward(model, std::span<const std::int32_t>(tokens).subspan(b * 15, 15));
    for (std::size_t t = 0; t < 15; ++t)
      for (std::size_t c = 0; c < 13; ++c) EXPECT_NEAR(both.at(b * 15 + t, c), one.at(t, c), 1e-12);
  }
}

TEST(GatedMlp, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(12);
  Tape<double> tape;
  const auto y = gated_mlp(tape.constant(Tensor<double>({3, 4})), tape.constant(testing::random_tensor<double>(rng, {4, 6})),
                           tape.constant(testing::random_tensor<double>(rng, {4, 6})),
                           tape.constant(testing::random_tensor<double>(rng, {6, 4})));
  EXPECT_EQ(y.value(), Tensor<double>({3, 4}));
}

TEST(Flops, OrderingOnReferenceConfig) {
  const std::size_t S = 16384;
  const double transformer = count_flops_per_token(reference_1b4(Architecture::transformer, S), S, S);
  const double xlstm = count_flops_per_token(reference_1b4(Architecture::xlstm, S), S, S);
  double previous = transformer;
  for (std::size_t w : {2048u, 1024u, 512u, 256u, 128u}) {
    const double swax = count_flops_per_token(reference_1b4(Architecture::swax, w), S, w);
    EXPECT_LT(swax, previous) << "window " << w;
    previous = swax;
  }
  EXPECT_GT(previous, xlstm);
  // Same order of magnitude as the published transformer figure.
  EXPECT_GT(transformer, 6.174e9 / 3);
  EXPECT_LT(transformer, 6.174e9 * 3);
}

TEST(Flops, FullWindowSwaMatchesTransformer) {
  const auto swa = small(Architecture::swa);
  const auto tf = small(Architecture::transformer);
  EXPECT_EQ(count_flops_per_token(swa, 64, 64), count_flops_per_token(tf, 64, 1));
  EXPECT_EQ(count_flops_per_token(swa, 64, 1000), count_flops_per_token(tf, 64, 1));
  EXPECT_LT(count_flops_per_token(swa, 64, 8), count_flops_per_token(tf, 64, 1));
  EXPECT_THROW(count_flops_per_token(swa, 0, 8), std::invalid_argument);
}

TEST(Flops, SwaxWindowTermAddsTwoWdPerSwaLayer) {
  const auto cfg = reference_1b4(Architecture::swax, 128);
  const double d = 2048, swa_layers = 12;
  EXPECT_DOUBLE_EQ(count_flops_per_token(cfg, 16384, 2048) - count_flops_per_token(cfg, 16384, 128),
                   swa_layers * 2.0 * (2048 - 128) * d);
}

}  // namespace
}  // namespace swax
