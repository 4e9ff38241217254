#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "swax/model.hpp"
#include "swax/train.hpp"

namespace swax {

/// Partition of the vocabulary. Haystack text uses [0, haystack); needles
/// use the reserved key and value alphabets; `delimiter` separates a key
/// from its value.
struct VocabLayout {
  std::size_t vocab_size = 0;
  std::size_t haystack = 0;
  std::size_t key_begin = 0, n_keys = 0;
  std::size_t value_begin = 0, n_values = 0;
  std::int32_t delimiter = 0;

  /// Keys take vocab/8 tokens, values vocab/4, one delimiter, haystack the rest.
  static VocabLayout for_vocab(std::size_t vocab_size);
  bool is_key(std::int32_t t) const { return t >= std::int32_t(key_begin) && t < std::int32_t(key_begin + n_keys); }
  bool is_value(std::int32_t t) const {
    return t >= std::int32_t(value_begin) && t < std::int32_t(value_begin + n_values);
  }
};

/// Synthetic pretraining text: an order-n Markov chain over the haystack
/// alphabet, interleaved with key/value records and verbatim copies of
/// earlier text. Each segment is a Markov chunk, a fresh record, or a copy
/// of chunk-length text from copy_distance tokens back.
struct CorpusSpec {
  std::size_t vocab_size = 64;
  /// Seed of the Markov transition table (not of the sampled text).
  std::uint64_t seed = 0;
  std::size_t local_order = 2;
  /// Successors with nonzero probability per context.
  std::size_t branching = 4;
  std::size_t chunk_min = 8, chunk_max = 32;
  /// Per-segment probability of a fresh key/value record.
  double record_rate = 0.25;
  /// Per-segment probability of repeating earlier text.
  double copy_rate = 0.25;
  /// Per-segment probability of repeating a whole earlier record that
  /// started within copy_distance range. Fresh records avoid keys that
  /// are still recallable, so a recalled key has one value.
  double recall_rate = 0.0;
  std::size_t copy_distance_min = 16, copy_distance_max = 128;
  std::size_t key_len = 2;
  std::size_t value_len = 4;

  void validate() const;
  std::size_t record_len() const { return key_len + 1 + value_len; }
  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

/// Transition table of the Markov chain; depends only on the spec.
class NgramTable {
 public:
  explicit NgramTable(const CorpusSpec& spec);

  std::size_t alphabet() const noexcept { return alphabet_; }
  std::size_t order() const noexcept { return order_; }
  /// Context index of the last order-1 tokens of `history` (all haystack tokens).
  std::size_t context_of(std::span<const std::int32_t> history) const;
  std::span<const double> probabilities(std::size_t context) const;
  std::int32_t sample(std::size_t context, std::mt19937_64& rng) const;
  /// Entropy rate of the chain in nats per token (stationary distribution by power iteration).
  double entropy_rate() const;

 private:
  std::size_t alphabet_, order_, contexts_;
  std::vector<double> probs_;  // [contexts, alphabet]
};

/// Infinite token stream drawn from a CorpusSpec with its own sampling seed.
class CorpusStream final : public TokenSource {
 public:
  CorpusStream(const CorpusSpec& spec, std::uint64_t stream_seed);

  std::int32_t next();
  std::vector<std::int32_t> take(std::size_t n);
  std::vector<std::int32_t> next_batch(std::size_t rows, std::size_t length) override;

  /// Pure Markov text of length n (no records), continuing this stream's chain.
  std::vector<std::int32_t> haystack(std::size_t n);
  const VocabLayout& vocab() const noexcept { return vocab_; }
  const NgramTable& table() const noexcept { return table_; }

 private:
  void refill();
  void push(std::int32_t t);
  std::int32_t markov_step();
  std::vector<std::int32_t> fresh_record();
  void place_record(const std::vector<std::int32_t>& rec);

  CorpusSpec spec_;
  VocabLayout vocab_;
  NgramTable table_;
  std::mt19937_64 rng_;
  std::deque<std::int32_t> pending_;
  std::vector<std::int32_t> context_;
  // The last copy_distance_max generated tokens; generated_ counts all of them.
  std::deque<std::int32_t> history_;
  std::size_t generated_ = 0;
  struct Placed {
    std::size_t start;
    std::vector<std::int32_t> tokens;
  };
  // Records that started at most copy_distance_max tokens ago, oldest first.
  std::deque<Placed> records_;
};

enum class NiahKind { single, multikey, multiquery, multivalue };
std::string to_string(NiahKind kind);
NiahKind parse_niah_kind(std::string_view name);

struct Needle {
  std::vector<std::int32_t> key;
  std::vector<std::int32_t> value;
  std::size_t position = 0;
  bool queried = false;
};

/// Prompt ending in a query (`key... delimiter`); `gold` is the expected continuation.
struct NiahSample {
  NiahKind kind = NiahKind::single;
  std::vector<std::int32_t> tokens;
  std::vector<Needle> needles;
  std::vector<std::int32_t> query;
  std::vector<std::int32_t> gold;
  std::size_t depth_bin = 0;
};

struct NiahSpec {
  NiahKind kind = NiahKind::single;
  /// Prompt length including the query.
  std::size_t seq_len = 256;
  std::size_t n_samples = 64;
  std::size_t depth_bins = 8;
  std::uint64_t seed = 0;
  /// Distractor needles for multikey.
  std::size_t distractors = 3;
};

/// Smallest prompt length that fits the needles of `kind`.
std::size_t niah_min_length(NiahKind kind, const CorpusSpec& corpus, std::size_t distractors = 3);

/// Samples with the queried needle's depth stratified round-robin over
/// `depth_bins` equal bins of the haystack body. Needles never overlap and
/// sit strictly inside the body.
std::vector<NiahSample> gen_niah(const NiahSpec& spec, const CorpusSpec& corpus);

/// Answer read off the prompt alone: for each key in the query, the values
/// following every `key delimiter` occurrence in the body, in order.
std::vector<std::int32_t> lookup_answer(const NiahSample& sample, const CorpusSpec& corpus);

/// Greedy next token at every position of `input`.
using Predictor = std::function<std::vector<std::int32_t>(std::span<const std::int32_t> input)>;

Predictor model_predictor(const Model<float>& model, const ForwardOptions& opts);

/// Predicts the token that followed the most recent earlier occurrence of
/// the trailing `match_len` tokens; 0 when there is none.
Predictor induction_predictor(std::size_t match_len);

/// Exact match of greedy decoding, computed in one teacher-forced pass: all
/// gold tokens are correct under greedy decoding iff each argmax at the gold
/// positions matches.
bool score_niah(const Predictor& predictor, const NiahSample& sample);

/// Autoregressive greedy continuation of `prompt` by `n` tokens.
std::vector<std::int32_t> greedy_decode(const Predictor& predictor, std::span<const std::int32_t> prompt,
                                        std::size_t n);

struct EvalResult {
  std::string task_kind;
  std::size_t seq_len = 0;
  std::size_t test_window = 0;
  std::string train_tag;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> correct_by_depth;
  std::vector<std::size_t> total_by_depth;
};

struct SweepSpec {
  std::vector<NiahKind> kinds{NiahKind::single};
  std::vector<std::size_t> seq_lens{256};
  std::size_t n_samples = 64;
  std::size_t depth_bins = 8;
  std::uint64_t seed = 0;
};

/// One EvalResult per (kind, seq_len) at test window `test_window`.
std::vector<EvalResult> eval_niah_sweep(const Model<float>& model, const CorpusSpec& corpus, const SweepSpec& sweep,
                                        std::size_t test_window, const std::string& train_tag);

/// exp(mean next-token cross-entropy) over n_tokens targets from `stream`,
/// in sequences of seq_len.
double eval_perplexity(const Model<float>& model, TokenSource& stream, std::size_t n_tokens, std::size_t seq_len,
                       const ForwardOptions& opts);

inline constexpr std::string_view kResultsHeader = "task_kind,seq_len,test_window,train_tag,accuracy,n_samples,seed";

void write_results_csv(std::ostream& out, std::span<const EvalResult> results, bool header = true);
std::vector<EvalResult> read_results_csv(std::istream& in);

}  // namespace swax
