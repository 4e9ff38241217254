#include "swax/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "swax/ops.hpp"

namespace swax {

VocabLayout VocabLayout::for_vocab(std::size_t vocab_size) {
  if (vocab_size < 8) throw std::invalid_argument("vocab_size: need at least 8 tokens, got " + std::to_string(vocab_size));
  VocabLayout v;
  v.vocab_size = vocab_size;
  v.n_keys = vocab_size / 8;
  v.n_values = vocab_size / 4;
  v.haystack = vocab_size - v.n_keys - v.n_values - 1;
  v.key_begin = v.haystack;
  v.value_begin = v.key_begin + v.n_keys;
  v.delimiter = std::int32_t(vocab_size - 1);
  return v;
}

void CorpusSpec::validate() const {
  const VocabLayout v = VocabLayout::for_vocab(vocab_size);
  if (local_order == 0) throw std::invalid_argument("corpus.local_order: must be >= 1");
  if (std::pow(double(v.haystack), double(local_order - 1)) > 1e6) {
    throw std::invalid_argument("corpus.local_order: context table too large");
  }
  if (branching == 0) throw std::invalid_argument("corpus.branching: must be >= 1");
  if (chunk_min == 0 || chunk_min > chunk_max) throw std::invalid_argument("corpus.chunk_min: need 1 <= chunk_min <= chunk_max");
  if (!(record_rate >= 0.0 && copy_rate >= 0.0 && recall_rate >= 0.0 && record_rate + copy_rate + recall_rate <= 1.0)) {
    throw std::invalid_argument("corpus.copy_rate: rates must be non-negative and sum to at most 1");
  }
  if (copy_distance_min == 0 || copy_distance_min > copy_distance_max) {
    throw std::invalid_argument("corpus.copy_distance_range: need 1 <= min <= max");
  }
  if (key_len == 0) throw std::invalid_argument("corpus.key_len: must be >= 1");
  if (value_len == 0 || value_len > v.n_values) {
    throw std::invalid_argument("corpus.value_len: must lie in [1, " + std::to_string(v.n_values) + "]");
  }
}

NgramTable::NgramTable(const CorpusSpec& spec) {
  spec.validate();
  alphabet_ = VocabLayout::for_vocab(spec.vocab_size).haystack;
  order_ = spec.local_order;
  contexts_ = 1;
  for (std::size_t i = 1; i < order_; ++i) contexts_ *= alphabet_;
  probs_.assign(contexts_ * alphabet_, 0.0);
  std::mt19937_64 rng(spec.seed);
  std::exponential_distribution<double> weight(1.0);
  const std::size_t k = std::min(spec.branching, alphabet_);
  std::vector<std::size_t> symbols(alphabet_);
  for (std::size_t c = 0; c < contexts_; ++c) {
    std::iota(symbols.begin(), symbols.end(), std::size_t{0});
    std::shuffle(symbols.begin(), symbols.end(), rng);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double w = weight(rng) + 1e-3;
      probs_[c * alphabet_ + symbols[j]] = w;
      total += w;
    }
    for (std::size_t j = 0; j < alphabet_; ++j) probs_[c * alphabet_ + j] /= total;
  }
}

std::size_t NgramTable::context_of(std::span<const std::int32_t> history) const {
  const std::size_t n = order_ - 1;
  if (history.size() < n) throw std::invalid_argument("NgramTable: history shorter than order - 1");
  std::size_t c = 0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) {
    if (history[i] < 0 || std::size_t(history[i]) >= alphabet_) throw std::out_of_range("NgramTable: token outside haystack alphabet");
    c = c * alphabet_ + std::size_t(history[i]);
  }
  return c;
}

std::span<const double> NgramTable::probabilities(std::size_t context) const {
  return std::span<const double>(probs_).subspan(context * alphabet_, alphabet_);
}

std::int32_t NgramTable::sample(std::size_t context, std::mt19937_64& rng) const {
  const auto p = probabilities(context);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) continue;
    acc += p[j];
    last = j;
    if (u < acc) return std::int32_t(j);
  }
  return std::int32_t(last);
}

double NgramTable::entropy_rate() const {
  std::vector<double> pi(contexts_, 1.0 / double(contexts_)), next(contexts_);
  if (contexts_ > 1) {
    for (int it = 0; it < 5000; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t c = 0; c < contexts_; ++c) {
        if (pi[c] == 0.0) continue;
        for (std::size_t x = 0; x < alphabet_; ++x) {
          const double p = probs_[c * alphabet_ + x];
          if (p > 0.0) next[(c * alphabet_ + x) % contexts_] += pi[c] * p;
        }
      }
      double delta = 0.0;
      for (std::size_t c = 0; c < contexts_; ++c) {
        const double lazy = 0.5 * pi[c] + 0.5 * next[c];
        delta += std::abs(lazy - pi[c]);
        pi[c] = lazy;
      }
      if (delta < 1e-13) break;
    }
  }
  double h = 0.0;
  for (std::size_t c = 0; c < contexts_; ++c) {
    for (std::size_t x = 0; x < alphabet_; ++x) {
      const double p = probs_[c * alphabet_ + x];
      if (p > 0.0) h -= pi[c] * p * std::log(p);
    }
  }
  return h;
}

CorpusStream::CorpusStream(const CorpusSpec& spec, std::uint64_t stream_seed)
    : spec_(spec), vocab_(VocabLayout::for_vocab(spec.vocab_size)), table_(spec), rng_(stream_seed) {
  std::uniform_int_distribution<std::int32_t> tok(0, std::int32_t(vocab_.haystack) - 1);
  for (std::size_t i = 1; i < spec_.local_order; ++i) context_.push_back(tok(rng_));
}

std::int32_t CorpusStream::markov_step() {
  const std::int32_t t = table_.sample(table_.context_of(context_), rng_);
  if (!context_.empty()) {
    context_.erase(context_.begin());
    context_.push_back(t);
  }
  return t;
}

std::vector<std::int32_t> CorpusStream::fresh_record() {
  std::vector<std::int32_t> rec;
  std::uniform_int_distribution<std::size_t> key(0, vocab_.n_keys - 1);
  auto taken = [&] {
    return std::any_of(records_.begin(), records_.end(), [&](const Placed& p) {
      return std::equal(rec.begin(), rec.end(), p.tokens.begin());
    });
  };
  // A few redraws; with a tiny key space a repeat is allowed rather than looping.
  for (int attempt = 0; attempt < 8 && (rec.empty() || (spec_.recall_rate > 0.0 && taken())); ++attempt) {
    rec.clear();
    for (std::size_t i = 0; i < spec_.key_len; ++i) rec.push_back(std::int32_t(vocab_.key_begin + key(rng_)));
  }
  rec.push_back(vocab_.delimiter);
  std::vector<std::int32_t> values(vocab_.n_values);
  std::iota(values.begin(), values.end(), std::int32_t(vocab_.value_begin));
  for (std::size_t i = 0; i < spec_.value_len; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, values.size() - 1);
    std::swap(values[i], values[pick(rng_)]);
    rec.push_back(values[i]);
  }
  return rec;
}

void CorpusStream::push(std::int32_t t) {
  pending_.push_back(t);
  history_.push_back(t);
  if (history_.size() > spec_.copy_distance_max) history_.pop_front();
  ++generated_;
}

void CorpusStream::place_record(const std::vector<std::int32_t>& rec) {
  records_.push_back({generated_, rec});
  for (std::int32_t t : rec) push(t);
}

void CorpusStream::refill() {
  while (!records_.empty() && generated_ - records_.front().start > spec_.copy_distance_max) records_.pop_front();
  std::uniform_int_distribution<std::size_t> len(spec_.chunk_min, spec_.chunk_max);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  if (u < spec_.copy_rate) {
    const std::size_t d = std::uniform_int_distribution<std::size_t>(spec_.copy_distance_min, spec_.copy_distance_max)(rng_);
    const std::size_t n = len(rng_);
    if (generated_ >= d) {
      // may overlap itself when n > d, which repeats with period d
      for (std::size_t i = 0; i < n; ++i) push(history_[history_.size() - d]);
      return;
    }
  } else if (u < spec_.copy_rate + spec_.record_rate) {
    place_record(fresh_record());
    return;
  } else if (u < spec_.copy_rate + spec_.record_rate + spec_.recall_rate) {
    std::vector<const Placed*> reachable;
    for (const auto& p : records_) {
      if (generated_ - p.start >= spec_.copy_distance_min) reachable.push_back(&p);
    }
    if (!reachable.empty()) {
      const Placed* p = reachable[std::uniform_int_distribution<std::size_t>(0, reachable.size() - 1)(rng_)];
      place_record(std::vector<std::int32_t>(p->tokens));
      return;
    }
  }
  for (std::size_t n = len(rng_); n > 0; --n) push(markov_step());
}

std::int32_t CorpusStream::next() {
  if (pending_.empty()) refill();
  const std::int32_t t = pending_.front();
  pending_.pop_front();
  return t;
}

std::vector<std::int32_t> CorpusStream::take(std::size_t n) {
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = next();
  return out;
}

std::vector<std::int32_t> CorpusStream::next_batch(std::size_t rows, std::size_t length) {
  return take(rows * length);
}

std::vector<std::int32_t> CorpusStream::haystack(std::size_t n) {
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = markov_step();
  return out;
}

std::string to_string(NiahKind kind) {
  switch (kind) {
    case NiahKind::single: return "single";
    case NiahKind::multikey: return "multikey";
    case NiahKind::multiquery: return "multiquery";
    case NiahKind::multivalue: return "multivalue";
  }
  return "?";
}

NiahKind parse_niah_kind(std::string_view name) {
  for (auto k : {NiahKind::single, NiahKind::multikey, NiahKind::multiquery, NiahKind::multivalue}) {
    if (name == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown task kind '" + std::string(name) +
                              "' (expected single, multikey, multiquery or multivalue)");
}

namespace {

std::size_t needle_count(NiahKind kind, std::size_t distractors) {
  return kind == NiahKind::multikey ? 1 + distractors : kind == NiahKind::single ? 1 : 2;
}

std::size_t query_length(NiahKind kind, const CorpusSpec& c) {
  return (kind == NiahKind::multiquery ? 2 * c.key_len : c.key_len) + 1;
}

bool overlaps(std::size_t a, std::size_t b, std::size_t len) { return a < b + len && b < a + len; }

}  // namespace

std::size_t niah_min_length(NiahKind kind, const CorpusSpec& corpus, std::size_t distractors) {
  return query_length(kind, corpus) + 2 * needle_count(kind, distractors) * corpus.record_len() + 2;
}

std::vector<NiahSample> gen_niah(const NiahSpec& spec, const CorpusSpec& corpus) {
  corpus.validate();
  if (spec.depth_bins == 0) throw std::invalid_argument("niah.depth_bins: must be >= 1");
  const std::size_t min_len = niah_min_length(spec.kind, corpus, spec.distractors);
  if (spec.seq_len < min_len) {
    throw std::invalid_argument("niah.seq_len: " + std::to_string(spec.seq_len) + " is below the minimum " +
                                std::to_string(min_len) + " for task " + to_string(spec.kind));
  }
  const VocabLayout vocab = VocabLayout::for_vocab(corpus.vocab_size);
  const std::size_t n_needles = needle_count(spec.kind, spec.distractors);
  const std::size_t distinct_keys = spec.kind == NiahKind::multivalue ? 1 : n_needles;
  if (std::pow(double(vocab.n_keys), double(corpus.key_len)) < double(distinct_keys)) {
    throw std::invalid_argument("niah: key alphabet too small for " + std::to_string(distinct_keys) + " distinct keys");
  }
  const std::size_t L = corpus.record_len();
  const std::size_t body = spec.seq_len - query_length(spec.kind, corpus);
  // needle starts in [1, body - L - 1] keep it strictly inside the body
  const std::size_t lo = 1, hi = body - L - 1;

  std::vector<NiahSample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, RngStream::eval, i));
    CorpusStream hay(corpus, rng());
    NiahSample s;
    s.kind = spec.kind;
    s.depth_bin = i % spec.depth_bins;
    s.tokens = hay.haystack(body);

    auto random_key = [&] {
      std::vector<std::int32_t> k(corpus.key_len);
      std::uniform_int_distribution<std::size_t> pick(0, vocab.n_keys - 1);
      for (auto& t : k) t = std::int32_t(vocab.key_begin + pick(rng));
      return k;
    };
    auto random_value = [&] {
      std::vector<std::int32_t> pool(vocab.n_values);
      std::iota(pool.begin(), pool.end(), std::int32_t(vocab.value_begin));
      std::shuffle(pool.begin(), pool.end(), rng);
      pool.resize(corpus.value_len);
      return pool;
    };

    std::vector<std::vector<std::int32_t>> keys;
    while (keys.size() < distinct_keys) {
      auto k = random_key();
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(std::move(k));
    }
    for (std::size_t n = 0; n < n_needles; ++n) {
      Needle nd;
      nd.key = keys[spec.kind == NiahKind::multivalue ? 0 : n];
      do {
        nd.value = random_value();
      } while (std::any_of(s.needles.begin(), s.needles.end(), [&](const Needle& o) { return o.value == nd.value; }));
      nd.queried = spec.kind != NiahKind::multikey || n == 0;
      s.needles.push_back(std::move(nd));
    }

    const std::size_t range = hi - lo + 1;
    const std::size_t b_lo = lo + s.depth_bin * range / spec.depth_bins;
    const std::size_t b_hi = std::max(b_lo, lo + (s.depth_bin + 1) * range / spec.depth_bins - 1);
    s.needles[0].position = std::uniform_int_distribution<std::size_t>(b_lo, std::min(b_hi, hi))(rng);
    std::uniform_int_distribution<std::size_t> anywhere(lo, hi);
    for (std::size_t n = 1; n < n_needles; ++n) {
      auto free_at = [&](std::size_t p) {
        for (std::size_t m = 0; m < n; ++m) {
          if (overlaps(p, s.needles[m].position, L)) return false;
        }
        return true;
      };
      std::size_t p = anywhere(rng);
      for (int tries = 0; tries < 1000 && !free_at(p); ++tries) p = anywhere(rng);
      if (!free_at(p)) {
        p = lo;
        while (p <= hi && !free_at(p)) ++p;
        if (p > hi) throw std::logic_error("gen_niah: no room for needle");
      }
      s.needles[n].position = p;
    }

    for (const auto& nd : s.needles) {
      std::copy(nd.key.begin(), nd.key.end(), s.tokens.begin() + nd.position);
      s.tokens[nd.position + corpus.key_len] = vocab.delimiter;
      std::copy(nd.value.begin(), nd.value.end(), s.tokens.begin() + nd.position + corpus.key_len + 1);
    }

    switch (spec.kind) {
      case NiahKind::single:
      case NiahKind::multikey:
        s.query = s.needles[0].key;
        s.gold = s.needles[0].value;
        break;
      case NiahKind::multiquery:
        s.query = s.needles[0].key;
        s.query.insert(s.query.end(), s.needles[1].key.begin(), s.needles[1].key.end());
        s.gold = s.needles[0].value;
        s.gold.insert(s.gold.end(), s.needles[1].value.begin(), s.needles[1].value.end());
        break;
      case NiahKind::multivalue: {
        const auto first = s.needles[0].position < s.needles[1].position ? 0 : 1;
        s.query = s.needles[0].key;
        s.gold = s.needles[first].value;
        s.gold.insert(s.gold.end(), s.needles[1 - first].value.begin(), s.needles[1 - first].value.end());
        break;
      }
    }
    s.query.push_back(vocab.delimiter);
    s.tokens.insert(s.tokens.end(), s.query.begin(), s.query.end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::int32_t> lookup_answer(const NiahSample& sample, const CorpusSpec& corpus) {
  const std::size_t q = sample.query.size();
  if (q < 1 + corpus.key_len || (q - 1) % corpus.key_len != 0 || sample.tokens.size() < q) {
    throw std::invalid_argument("lookup_answer: malformed query");
  }
  const std::size_t body = sample.tokens.size() - q;
  const std::int32_t delim = sample.query.back();
  const std::size_t L = corpus.record_len();
  std::vector<std::int32_t> answer;
  for (std::size_t k = 0; k + 1 < q; k += corpus.key_len) {
    const auto key = std::span(sample.query).subspan(k, corpus.key_len);
    for (std::size_t p = 0; p + L <= body; ++p) {
      if (!std::equal(key.begin(), key.end(), sample.tokens.begin() + p) ||
          sample.tokens[p + corpus.key_len] != delim) {
        continue;
      }
      const auto v = sample.tokens.begin() + p + corpus.key_len + 1;
      answer.insert(answer.end(), v, v + corpus.value_len);
    }
  }
  return answer;
}

Predictor model_predictor(const Model<float>& model, const ForwardOptions& opts) {
  return [&model, opts](std::span<const std::int32_t> input) {
    const Tensor<float> logits = forward(model, input, opts);
    const std::size_t V = logits.dim(1);
    std::vector<std::int32_t> out(input.size());
    for (std::size_t t = 0; t < input.size(); ++t) {
      const float* row = logits.ptr() + t * V;
      out[t] = std::int32_t(std::max_element(row, row + V) - row);
    }
    return out;
  };
}

Predictor induction_predictor(std::size_t match_len) {
  if (match_len == 0) throw std::invalid_argument("induction_predictor: match_len must be >= 1");
  return [match_len](std::span<const std::int32_t> input) {
    std::vector<std::int32_t> out(input.size(), 0);
    for (std::size_t t = match_len - 1; t < input.size(); ++t) {
      const auto suffix = input.subspan(t + 1 - match_len, match_len);
      for (std::size_t j = t; j-- > match_len - 1;) {
        if (std::equal(suffix.begin(), suffix.end(), input.begin() + (j + 1 - match_len))) {
          out[t] = input[j + 1];
          break;
        }
      }
    }
    return out;
  };
}

bool score_niah(const Predictor& predictor, const NiahSample& sample) {
  if (sample.gold.empty()) throw std::invalid_argument("score_niah: empty gold answer");
  std::vector<std::int32_t> input = sample.tokens;
  input.insert(input.end(), sample.gold.begin(), sample.gold.end() - 1);
  const auto pred = predictor(input);
  const std::size_t first = sample.tokens.size() - 1;
  for (std::size_t j = 0; j < sample.gold.size(); ++j) {
    if (pred[first + j] != sample.gold[j]) return false;
  }
  return true;
}

std::vector<std::int32_t> greedy_decode(const Predictor& predictor, std::span<const std::int32_t> prompt,
                                        std::size_t n) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  std::vector<std::int32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < n; ++i) seq.push_back(predictor(seq).back());
  return {seq.begin() + std::ptrdiff_t(prompt.size()), seq.end()};
}

std::vector<EvalResult> eval_niah_sweep(const Model<float>& model, const CorpusSpec& corpus, const SweepSpec& sweep,
                                        std::size_t test_window, const std::string& train_tag) {
  if (test_window == 0) throw std::invalid_argument("test_window: must be >= 1");
  const Predictor predict = model_predictor(model, ForwardOptions{test_window});
  std::vector<EvalResult> results;
  for (NiahKind kind : sweep.kinds) {
    for (std::size_t S : sweep.seq_lens) {
      NiahSpec ns;
      ns.kind = kind;
      ns.seq_len = S;
      ns.n_samples = sweep.n_samples;
      ns.depth_bins = sweep.depth_bins;
      ns.seed = sweep.seed;
      EvalResult r;
      r.task_kind = to_string(kind);
      r.seq_len = S;
      r.test_window = test_window;
      r.train_tag = train_tag;
      r.n_samples = sweep.n_samples;
      r.seed = sweep.seed;
      r.correct_by_depth.assign(sweep.depth_bins, 0);
      r.total_by_depth.assign(sweep.depth_bins, 0);
      std::size_t correct = 0;
      for (const auto& s : gen_niah(ns, corpus)) {
        const bool ok = score_niah(predict, s);
        correct += ok;
        r.correct_by_depth[s.depth_bin] += ok;
        ++r.total_by_depth[s.depth_bin];
      }
      r.accuracy = sweep.n_samples ? double(correct) / double(sweep.n_samples) : 0.0;
      results.push_back(std::move(r));
    }
  }
  return results;
}

double eval_perplexity(const Model<float>& model, TokenSource& stream, std::size_t n_tokens, std::size_t seq_len,
                       const ForwardOptions& opts) {
  if (seq_len == 0 || n_tokens < seq_len) throw std::invalid_argument("eval_perplexity: need n_tokens >= seq_len >= 1");
  const std::size_t chunks = n_tokens / seq_len;
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += next_token_loss(model, stream.next_batch(1, seq_len + 1), 1, opts);
  }
  return std::exp(total / double(chunks));
}

void write_results_csv(std::ostream& out, std::span<const EvalResult> results, bool header) {
  if (header) out << kResultsHeader << '\n';
  for (const auto& r : results) {
    if (r.train_tag.find_first_of(",\n\"") != std::string::npos) {
      throw std::invalid_argument("train_tag '" + r.train_tag + "' contains a CSV delimiter");
    }
    std::ostringstream acc;
    acc.precision(6);
    acc << r.accuracy;
    out << r.task_kind << ',' << r.seq_len << ',' << r.test_window << ',' << r.train_tag << ',' << acc.str() << ','
        << r.n_samples << ',' << r.seed << '\n';
  }
}

std::vector<EvalResult> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw std::invalid_argument("results csv: expected header '" + std::string(kResultsHeader) + "'");
  }
  std::vector<EvalResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw std::invalid_argument("results csv line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      EvalResult r;
      r.task_kind = f[0];
      r.seq_len = std::stoull(f[1]);
      r.test_window = std::stoull(f[2]);
      r.train_tag = f[3];
      r.accuracy = std::stod(f[4]);
      r.n_samples = std::stoull(f[5]);
      r.seed = std::stoull(f[6]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("results csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace swax
