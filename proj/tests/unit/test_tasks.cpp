#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"
#include "swax/tasks.hpp"

namespace swax {
namespace {

const NiahKind kAllKinds[] = {NiahKind::single, NiahKind::multikey, NiahKind::multiquery, NiahKind::multivalue};

TEST(VocabLayout, PartitionOf64) {
  const auto v = VocabLayout::for_vocab(64);
  EXPECT_EQ(v.haystack, 39u);
  EXPECT_EQ(v.key_begin, 39u);
  EXPECT_EQ(v.n_keys, 8u);
  EXPECT_EQ(v.value_begin, 47u);
  EXPECT_EQ(v.n_values, 16u);
  EXPECT_EQ(v.delimiter, 63);
  EXPECT_TRUE(v.is_key(39));
  EXPECT_FALSE(v.is_key(47));
  EXPECT_TRUE(v.is_value(62));
  EXPECT_FALSE(v.is_value(63));
}

TEST(CorpusSpec, InvalidRejected) {
  CorpusSpec c;
  c.vocab_size = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.copy_rate = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.copy_distance_min = 200;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Corpus, SameSeedSameStream) {
  CorpusSpec c;
  CorpusStream a(c, 1), b(c, 1), d(c, 2);
  const auto ta = a.take(100000);
  EXPECT_EQ(ta, b.take(100000));
  EXPECT_NE(ta, d.take(100000));
}

TEST(Corpus, TokensStayInsideVocabulary) {
  CorpusSpec c;
  c.vocab_size = 40;
  CorpusStream s(c, 3);
  for (auto t : s.take(20000)) {
    ASSERT_GE(t, 0);
    ASSERT_LT(t, 40);
  }
}

CorpusSpec pure_markov() {
  CorpusSpec c;
  c.copy_rate = 0.0;
  c.record_rate = 0.0;
  return c;
}

// A bigram model estimated on one stream and scored on another approaches the
// generator's entropy rate.
TEST(Corpus, BigramPerplexityApproachesEntropyRate) {
  const CorpusSpec c = pure_markov();
  CorpusStream train_stream(c, 4), test_stream(c, 5);
  const auto train = train_stream.take(200000), test = test_stream.take(50000);
  const std::size_t A = VocabLayout::for_vocab(c.vocab_size).haystack;
  std::vector<double> counts(A * A, 0.0), totals(A, 0.0);
  for (std::size_t i = 1; i < train.size(); ++i) {
    counts[std::size_t(train[i - 1]) * A + std::size_t(train[i])] += 1;
    totals[std::size_t(train[i - 1])] += 1;
  }
  double nll = 0;
  for (std::size_t i = 1; i < test.size(); ++i) {
    const double p = (counts[std::size_t(test[i - 1]) * A + std::size_t(test[i])] + 0.01) /
                     (totals[std::size_t(test[i - 1])] + 0.01 * double(A));
    nll -= std::log(p);
  }
  nll /= double(test.size() - 1);
  const double h = train_stream.table().entropy_rate();
  EXPECT_GT(h, 0.0);
  EXPECT_LE(h, std::log(double(c.branching)) + 1e-9);
  EXPECT_NEAR(nll, h, 0.03 * h);
}

TEST(Corpus, TransitionFrequenciesMatchTable) {
  const CorpusSpec c = pure_markov();
  CorpusStream s(c, 6);
  const auto toks = s.take(300000);
  const auto& table = s.table();
  std::map<std::int32_t, std::vector<double>> freq;
  for (std::size_t i = 1; i < toks.size(); ++i) {
    auto& row = freq[toks[i - 1]];
    row.resize(table.alphabet(), 0.0);
    row[std::size_t(toks[i])] += 1;
  }
  for (const auto& [prev, row] : freq) {
    double n = 0;
    for (double x : row) n += x;
    if (n < 2000) continue;
    const std::vector<std::int32_t> history{prev};
    const auto probs = table.probabilities(table.context_of(history));
    for (std::size_t j = 0; j < row.size(); ++j) {
      const double sigma = std::sqrt(probs[j] * (1 - probs[j]) / n);
      EXPECT_NEAR(row[j] / n, probs[j], 5 * sigma + 1e-12) << prev << "->" << j;
    }
  }
}

TEST(Corpus, BranchingLimitsSuccessors) {
  CorpusSpec c = pure_markov();
  c.branching = 3;
  NgramTable table(c);
  for (std::size_t ctx = 0; ctx < table.alphabet(); ++ctx) {
    const auto p = table.probabilities(ctx);
    std::size_t nonzero = 0;
    double sum = 0;
    for (double x : p) {
      nonzero += x > 0;
      sum += x;
    }
    EXPECT_EQ(nonzero, 3u);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

// With fixed-length segments every segment boundary is known, so a copied
// segment must equal the text some distance in range behind it.
std::size_t count_copied_segments(const CorpusSpec& c, const std::vector<std::int32_t>& toks, std::size_t seg) {
  std::size_t copied = 0;
  for (std::size_t start = c.copy_distance_max; start + seg <= toks.size(); start += seg) {
    bool any = false;
    for (std::size_t d = c.copy_distance_min; d <= c.copy_distance_max && !any; ++d) {
      bool all = true;
      for (std::size_t i = 0; i < seg && all; ++i) all = toks[start + i] == toks[start + i - d];
      any = all;
    }
    copied += any;
  }
  return copied;
}

TEST(Corpus, FullCopyRateIsWallToWallRepeats) {
  CorpusSpec c;
  c.copy_rate = 1.0;
  c.record_rate = 0.0;
  c.chunk_min = c.chunk_max = 10;
  c.copy_distance_min = 20;
  c.copy_distance_max = 90;
  CorpusStream s(c, 7);
  const auto toks = s.take(20090);
  EXPECT_EQ(count_copied_segments(c, toks, 10), 2000u);
}

TEST(Corpus, CopyRateSetsFractionOfRepeatedSegments) {
  CorpusSpec c;
  c.copy_rate = 0.3;
  c.record_rate = 0.0;
  c.chunk_min = c.chunk_max = 12;
  c.copy_distance_min = 24;
  c.copy_distance_max = 60;
  CorpusStream s(c, 8);
  const auto toks = s.take(60 + 12 * 5000);
  const double frac = double(count_copied_segments(c, toks, 12)) / 5000.0;
  EXPECT_NEAR(frac, 0.3, 3 * std::sqrt(0.3 * 0.7 / 5000.0) + 0.005);
}

TEST(Corpus, RecordsFollowNeedleGrammar) {
  CorpusSpec c;
  c.copy_rate = 0.0;
  c.record_rate = 0.4;
  CorpusStream s(c, 9);
  const auto toks = s.take(50000);
  const auto v = VocabLayout::for_vocab(c.vocab_size);
  std::size_t records = 0;
  for (std::size_t p = 0; p + c.record_len() <= toks.size(); ++p) {
    if (!v.is_key(toks[p]) || (p > 0 && v.is_key(toks[p - 1]))) continue;
    ++records;
    for (std::size_t j = 0; j < c.key_len; ++j) ASSERT_TRUE(v.is_key(toks[p + j]));
    ASSERT_EQ(toks[p + c.key_len], v.delimiter);
    std::set<std::int32_t> values;
    for (std::size_t j = 0; j < c.value_len; ++j) {
      ASSERT_TRUE(v.is_value(toks[p + c.key_len + 1 + j]));
      values.insert(toks[p + c.key_len + 1 + j]);
    }
    EXPECT_EQ(values.size(), c.value_len);
  }
  EXPECT_GT(records, 1000u);
}

// Every record occurrence as (start, tokens).
std::vector<std::pair<std::size_t, std::vector<std::int32_t>>> find_records(const CorpusSpec& c,
                                                                          const std::vector<std::int32_t>& toks) {
  const auto v = VocabLayout::for_vocab(c.vocab_size);
  std::vector<std::pair<std::size_t, std::vector<std::int32_t>>> out;
  for (std::size_t p = 0; p + c.record_len() <= toks.size(); ++p) {
    if (!v.is_key(toks[p]) || (p > 0 && v.is_key(toks[p - 1]))) continue;
    out.emplace_back(p, std::vector<std::int32_t>(toks.begin() + std::ptrdiff_t(p),
                                                  toks.begin() + std::ptrdiff_t(p + c.record_len())));
  }
  return out;
}

TEST(Corpus, RecallsRepeatARecordFromWithinRange) {
  CorpusSpec c;
  c.copy_rate = 0.0;
  c.record_rate = 0.3;
  c.recall_rate = 0.3;
  c.copy_distance_min = 20;
  c.copy_distance_max = 150;
  CorpusStream s(c, 10);
  const auto toks = s.take(60000);
  const auto recs = find_records(c, toks);
  std::size_t repeats = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    bool seen_before = false, in_range = false;
    for (std::size_t j = i; j-- > 0 && recs[i].first - recs[j].first <= 400;) {
      if (recs[j].second != recs[i].second) continue;
      seen_before = true;
      const std::size_t d = recs[i].first - recs[j].first;
      in_range = in_range || (d >= c.copy_distance_min && d <= c.copy_distance_max);
    }
    if (seen_before) {
      ++repeats;
      EXPECT_TRUE(in_range) << "record at " << recs[i].first;
    }
  }
  // About half of the record segments are recalls once the stream warms up.
  EXPECT_GT(double(repeats), 0.35 * double(recs.size()));
}

TEST(Corpus, RecallableKeysHaveOneValue) {
  CorpusSpec c;
  c.copy_rate = 0.0;
  c.record_rate = 0.3;
  c.recall_rate = 0.3;
  c.copy_distance_min = 16;
  c.copy_distance_max = 100;
  CorpusStream s(c, 11);
  const auto toks = s.take(60000);
  const auto recs = find_records(c, toks);
  std::size_t clashes = 0, pairs = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    for (std::size_t j = i; j-- > 0 && recs[i].first - recs[j].first <= c.copy_distance_max;) {
      ++pairs;
      const bool same_key = std::equal(recs[i].second.begin(), recs[i].second.begin() + c.key_len,
                                       recs[j].second.begin());
      clashes += same_key && recs[i].second != recs[j].second;
    }
  }
  // Redraws are bounded, so a clash is possible but rare.
  EXPECT_LT(double(clashes), 0.01 * double(pairs));
}

TEST(Corpus, HaystackExcludesReservedTokens) {
  CorpusStream s(CorpusSpec{}, 8);
  for (auto t : s.haystack(5000)) EXPECT_LT(std::size_t(t), s.vocab().haystack);
}

// Scans the prompt body for `key delimiter` and reads the value behind it.
std::vector<std::int32_t> scan_for(const std::vector<std::int32_t>& body, const std::vector<std::int32_t>& key,
                                   std::int32_t delim, std::size_t value_len) {
  std::vector<std::int32_t> out;
  for (std::size_t p = 0; p + key.size() + 1 + value_len <= body.size(); ++p) {
    bool hit = body[p + key.size()] == delim;
    for (std::size_t j = 0; hit && j < key.size(); ++j) hit = body[p + j] == key[j];
    if (hit) out.insert(out.end(), body.begin() + std::ptrdiff_t(p + key.size() + 1),
                        body.begin() + std::ptrdiff_t(p + key.size() + 1 + value_len));
  }
  return out;
}

TEST(Niah, GoldRecoverableByBruteForceScan) {
  const CorpusSpec c;
  const std::int32_t delim = VocabLayout::for_vocab(c.vocab_size).delimiter;
  for (NiahKind kind : kAllKinds) {
    for (std::size_t S : {64u, 256u, 1000u}) {
      NiahSpec spec;
      spec.kind = kind;
      spec.seq_len = S;
      spec.n_samples = 40;
      spec.seed = 3;
      for (const auto& s : gen_niah(spec, c)) {
        ASSERT_EQ(s.tokens.size(), S);
        const std::vector<std::int32_t> body(s.tokens.begin(), s.tokens.end() - std::ptrdiff_t(s.query.size()));
        std::vector<std::int32_t> expect;
        for (std::size_t k = 0; k + 1 < s.query.size(); k += c.key_len) {
          const std::vector<std::int32_t> key(s.query.begin() + std::ptrdiff_t(k),
                                              s.query.begin() + std::ptrdiff_t(k + c.key_len));
          const auto found = scan_for(body, key, delim, c.value_len);
          expect.insert(expect.end(), found.begin(), found.end());
        }
        EXPECT_EQ(expect, s.gold) << to_string(kind);
        EXPECT_EQ(lookup_answer(s, c), s.gold);
        EXPECT_EQ(s.query.back(), delim);
      }
    }
  }
}

TEST(Niah, NeedleCountsAndKeys) {
  const CorpusSpec c;
  NiahSpec spec;
  spec.n_samples = 20;
  spec.kind = NiahKind::multikey;
  for (const auto& s : gen_niah(spec, c)) {
    ASSERT_EQ(s.needles.size(), 4u);
    EXPECT_EQ(std::count_if(s.needles.begin(), s.needles.end(), [](const Needle& n) { return n.queried; }), 1);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) EXPECT_NE(s.needles[i].key, s.needles[j].key);
  }
  spec.kind = NiahKind::multivalue;
  for (const auto& s : gen_niah(spec, c)) {
    ASSERT_EQ(s.needles.size(), 2u);
    EXPECT_EQ(s.needles[0].key, s.needles[1].key);
    EXPECT_NE(s.needles[0].value, s.needles[1].value);
    EXPECT_EQ(s.gold.size(), 2 * c.value_len);
  }
  spec.kind = NiahKind::multiquery;
  for (const auto& s : gen_niah(spec, c)) {
    EXPECT_EQ(s.query.size(), 2 * c.key_len + 1);
    EXPECT_EQ(s.gold.size(), 2 * c.value_len);
  }
}

TEST(Niah, NeedlesInsideBodyAndDisjoint) {
  const CorpusSpec c;
  const std::size_t L = c.record_len();
  for (NiahKind kind : kAllKinds) {
    NiahSpec spec;
    spec.kind = kind;
    spec.seq_len = niah_min_length(kind, c);
    spec.n_samples = 50;
    for (const auto& s : gen_niah(spec, c)) {
      const std::size_t body = s.tokens.size() - s.query.size();
      for (std::size_t i = 0; i < s.needles.size(); ++i) {
        EXPECT_GE(s.needles[i].position, 1u);
        EXPECT_LT(s.needles[i].position + L, body);
        for (std::size_t j = i + 1; j < s.needles.size(); ++j) {
          const auto a = s.needles[i].position, b = s.needles[j].position;
          EXPECT_TRUE(a + L <= b || b + L <= a);
        }
      }
    }
  }
}

TEST(Niah, DepthBinsStratified) {
  const CorpusSpec c;
  for (std::size_t n : {64u, 61u, 5u}) {
    NiahSpec spec;
    spec.n_samples = n;
    spec.depth_bins = 8;
    spec.seq_len = 512;
    const auto samples = gen_niah(spec, c);
    std::vector<std::size_t> per_bin(8, 0);
    const std::size_t body = 512 - (c.key_len + 1);
    const double span = double(body - c.record_len() - 1);
    for (const auto& s : samples) {
      ++per_bin[s.depth_bin];
      const double depth = double(s.needles[0].position - 1) / span;
      // bin edges land on whole positions
      EXPECT_GE(depth, double(s.depth_bin) / 8.0 - 1.0 / span);
      EXPECT_LT(depth, double(s.depth_bin + 1) / 8.0);
    }
    for (std::size_t b : per_bin) {
      EXPECT_GE(b, n / 8);
      EXPECT_LE(b, (n + 7) / 8);
    }
  }
}

TEST(Niah, TooShortNamesMinimum) {
  const CorpusSpec c;
  NiahSpec spec;
  spec.kind = NiahKind::multikey;
  spec.seq_len = niah_min_length(spec.kind, c) - 1;
  try {
    gen_niah(spec, c);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(niah_min_length(spec.kind, c))), std::string::npos);
  }
  spec.seq_len += 1;
  EXPECT_NO_THROW(gen_niah(spec, c));
}

TEST(Niah, DeterministicFromSeed) {
  const CorpusSpec c;
  NiahSpec spec;
  spec.kind = NiahKind::multiquery;
  spec.n_samples = 10;
  const auto a = gen_niah(spec, c), b = gen_niah(spec, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
  spec.seed = 1;
  EXPECT_NE(gen_niah(spec, c)[0].tokens, a[0].tokens);
}

TEST(Niah, InductionPredictorSolvesEverySample) {
  const CorpusSpec c;
  const auto predict = induction_predictor(c.key_len + 1);
  for (NiahKind kind : {NiahKind::single, NiahKind::multikey}) {
    NiahSpec spec;
    spec.kind = kind;
    spec.n_samples = 32;
    spec.seq_len = 300;
    for (const auto& s : gen_niah(spec, c)) {
      EXPECT_TRUE(score_niah(predict, s));
      EXPECT_EQ(greedy_decode(predict, s.tokens, s.gold.size()), s.gold);
    }
  }
}

TEST(Niah, TeacherForcedScoreEqualsGreedyDecoding) {
  const CorpusSpec c;
  ModelConfig mc;
  mc.n_blocks = 2;
  mc.model_dim = 16;
  mc.default_window = 16;
  mc.init_std = 0.5;
  const auto model = build_model<float>(mc, 3);
  const auto model_pred = model_predictor(model, {});
  // A predictor that is right on the first gold token only.
  NiahSpec spec;
  spec.n_samples = 8;
  spec.seq_len = 64;
  for (const auto& s : gen_niah(spec, c)) {
    EXPECT_EQ(score_niah(model_pred, s), greedy_decode(model_pred, s.tokens, s.gold.size()) == s.gold);
    const auto half_right = [&](std::span<const std::int32_t> in) {
      std::vector<std::int32_t> out(in.size(), 0);
      out[s.tokens.size() - 1] = s.gold[0];
      return out;
    };
    EXPECT_FALSE(score_niah(half_right, s));
  }
}

TEST(Niah, UntrainedModelAtChance) {
  ModelConfig mc;
  mc.n_blocks = 2;
  mc.model_dim = 32;
  const auto model = build_model<float>(mc, 1);
  SweepSpec sweep;
  sweep.kinds = {NiahKind::single, NiahKind::multikey};
  sweep.n_samples = 64;
  for (const auto& r : eval_niah_sweep(model, CorpusSpec{}, sweep, 128, "untrained")) {
    EXPECT_LT(r.accuracy, 0.01) << r.task_kind;
  }
}

TEST(Sweep, DeterministicAndShaped) {
  ModelConfig mc;
  mc.n_blocks = 2;
  mc.model_dim = 16;
  const auto model = build_model<float>(mc, 2);
  SweepSpec sweep;
  sweep.kinds = {NiahKind::single, NiahKind::multivalue};
  sweep.seq_lens = {64, 128};
  sweep.n_samples = 6;
  sweep.depth_bins = 3;
  const auto a = eval_niah_sweep(model, CorpusSpec{}, sweep, 32, "t");
  const auto b = eval_niah_sweep(model, CorpusSpec{}, sweep, 32, "t");
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].accuracy, b[i].accuracy);
    EXPECT_EQ(a[i].test_window, 32u);
    EXPECT_EQ(a[i].total_by_depth, (std::vector<std::size_t>{2, 2, 2}));
  }
  sweep.n_samples = 0;
  for (const auto& r : eval_niah_sweep(model, CorpusSpec{}, sweep, 32, "t")) EXPECT_EQ(r.accuracy, 0.0);
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  ModelConfig mc;
  mc.n_blocks = 2;
  mc.model_dim = 16;
  auto model = build_model<float>(mc, 3);
  for (auto& x : model.parameters()[model.output_slot()].value.data()) x = 0.0f;
  CorpusStream stream(CorpusSpec{}, 1);
  EXPECT_NEAR(eval_perplexity(model, stream, 512, 128, {}), 64.0, 1e-3);
  EXPECT_THROW(eval_perplexity(model, stream, 100, 128, {}), std::invalid_argument);
}

TEST(ResultsCsv, RoundTrip) {
  std::vector<EvalResult> rows(3);
  rows[0] = {"single", 256, 16, "swax-w16", 0.75, 64, 1, {}, {}};
  rows[1] = {"multikey", 1024, 128, "swax-s16/128p0.5a0.9", 0.015625, 64, 2, {}, {}};
  rows[2] = {"multivalue", 512, 64, "transformer", 1.0 / 3.0, 3, 0, {}, {}};
  std::stringstream ss;
  write_results_csv(ss, rows);
  std::string header;
  std::getline(std::stringstream(ss.str()), header);
  EXPECT_EQ(header, kResultsHeader);
  const auto back = read_results_csv(ss);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].task_kind, rows[i].task_kind);
    EXPECT_EQ(back[i].seq_len, rows[i].seq_len);
    EXPECT_EQ(back[i].test_window, rows[i].test_window);
    EXPECT_EQ(back[i].train_tag, rows[i].train_tag);
    EXPECT_NEAR(back[i].accuracy, rows[i].accuracy, 1e-6);
    EXPECT_EQ(back[i].n_samples, rows[i].n_samples);
    EXPECT_EQ(back[i].seed, rows[i].seed);
  }
}

TEST(ResultsCsv, RejectsDelimiterInTag) {
  std::vector<EvalResult> rows{{"single", 256, 16, "a,b", 0.5, 2, 0, {}, {}}};
  std::stringstream ss;
  EXPECT_THROW(write_results_csv(ss, rows), std::invalid_argument);
}

}  // namespace
}  // namespace swax
