#include "swax/io.hpp"

#include <bit>
#include <cmath>
#include <set>
#include <sstream>

namespace swax {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Literals built in code are signed even when non-negative.
bool is_count(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); }

/// Reads keys of one JSON object and rejects whatever was not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <std::unsigned_integral U>
  void get(const std::string& key, U& out) {
    if (const json* v = raw(key)) {
      if (!is_count(*v)) throw ConfigError(where(key) + ": expected a non-negative integer");
      out = v->get<U>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + ": expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!is_count(e)) throw ConfigError(where(key) + ": expected an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  std::optional<Section> sub(const std::string& key) {
    if (const json* v = raw(key)) return Section(*v, where(key));
    return std::nullopt;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.contains(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename F>
void rethrow_as_config(F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig parse_model_section(Section& s) {
  ModelConfig m;
  if (const json* a = s.raw("architecture")) {
    if (!a->is_string()) throw ConfigError(s.where("architecture") + ": expected a string");
    try {
      m.architecture = parse_architecture(a->get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.where("architecture") + ": " + e.what());
    }
  }
  s.get("n_blocks", m.n_blocks);
  s.get("model_dim", m.model_dim);
  s.get("n_heads", m.n_heads);
  s.get("ffn_mult", m.ffn_mult);
  s.get("vocab_size", m.vocab_size);
  s.get("rope_theta", m.rope_theta);
  s.get("default_window", m.default_window);
  s.get("gla_first", m.gla_first);
  s.get("gla_qk_factor", m.gla_qk_factor);
  s.get("init_std", m.init_std);
  s.get("decay_bias", m.decay_bias);
  s.finish();
  return m;
}

}  // namespace

ModelConfig parse_model(const json& doc, const std::string& where) {
  Section s(doc, where);
  ModelConfig m = parse_model_section(s);
  rethrow_as_config([&] { m.validate(); });
  return m;
}

json to_json(const ModelConfig& m) {
  return json{{"architecture", to_string(m.architecture)},
              {"n_blocks", m.n_blocks},
              {"model_dim", m.model_dim},
              {"n_heads", m.n_heads},
              {"ffn_mult", m.ffn_mult},
              {"vocab_size", m.vocab_size},
              {"rope_theta", m.rope_theta},
              {"default_window", m.default_window},
              {"gla_first", m.gla_first},
              {"gla_qk_factor", m.gla_qk_factor},
              {"init_std", m.init_std},
              {"decay_bias", m.decay_bias}};
}

void ExperimentConfig::validate() const {
  rethrow_as_config([&] {
    train.validate();
    corpus.validate();
  });
  if (corpus.vocab_size != train.model.vocab_size) throw ConfigError("corpus: vocab size differs from model.vocab_size");
  if (eval.depth_bins == 0) throw ConfigError("eval.depth_bins: must be >= 1");
  for (std::size_t w : eval.test_windows) {
    if (w == 0) throw ConfigError("eval.test_windows: windows must be >= 1");
  }
  if (eval.val_tokens != 0 && eval.val_tokens < train.seq_len) {
    throw ConfigError("eval.val_tokens: must be 0 or at least train.seq_len");
  }
  for (std::size_t S : eval.seq_lens) {
    for (NiahKind k : eval.kinds) {
      if (S < niah_min_length(k, corpus)) {
        throw ConfigError("eval.seq_lens: " + std::to_string(S) + " is below the minimum " +
                          std::to_string(niah_min_length(k, corpus)) + " for task " + to_string(k));
      }
    }
  }
  if (tag.find_first_of(",\n\"") != std::string::npos) throw ConfigError("tag: must not contain commas or quotes");
}

std::string ExperimentConfig::train_tag() const {
  if (!tag.empty()) return tag;
  const auto arch = train.model.architecture;
  if (arch == Architecture::transformer || arch == Architecture::xlstm) return to_string(arch);
  return to_string(arch) + "-" + train.windows.tag();
}

ExperimentConfig parse_experiment(const json& doc) {
  Section top(doc, "");
  ExperimentConfig c;
  top.get("seed", c.train.seed);
  top.get("tag", c.tag);
  if (auto s = top.sub("model")) c.train.model = parse_model_section(*s);

  std::optional<std::size_t> warmup_steps;
  std::optional<double> warmup_fraction;
  if (auto s = top.sub("train")) {
    s->get("seq_len", c.train.seq_len);
    s->get("batch_tokens", c.train.batch_tokens);
    s->get("total_steps", c.train.total_steps);
    s->get("log_wall_time", c.train.log_wall_time);
    s->get("checkpoint_every", c.checkpoint_every);
    s->finish();
  }
  if (auto s = top.sub("lr")) {
    s->get("peak", c.train.lr.peak);
    s->get("min", c.train.lr.min);
    if (s->has("warmup_steps") && s->has("warmup_fraction")) {
      throw ConfigError("lr: give warmup_steps or warmup_fraction, not both");
    }
    if (s->has("warmup_steps")) {
      std::size_t w = 0;
      s->get("warmup_steps", w);
      warmup_steps = w;
    }
    if (s->has("warmup_fraction")) {
      double f = 0.0;
      s->get("warmup_fraction", f);
      if (!(f >= 0.0 && f < 1.0)) throw ConfigError("lr.warmup_fraction: must lie in [0, 1)");
      warmup_fraction = f;
    }
    s->finish();
  }
  c.train.lr.total_steps = std::max<std::size_t>(1, c.train.total_steps);
  c.train.lr.warmup_steps =
      warmup_steps ? *warmup_steps
                   : static_cast<std::size_t>(std::floor(warmup_fraction.value_or(0.02) * double(c.train.total_steps)));

  if (auto s = top.sub("windows")) {
    if (s->has("fixed")) {
      for (const char* k : {"short", "long", "p_short", "anneal_fraction"}) {
        if (s->has(k)) throw ConfigError(s->where(k) + ": not allowed together with windows.fixed");
      }
      std::size_t w = 0;
      s->get("fixed", w);
      c.train.windows = WindowSchedule::fixed(w);
    } else {
      auto& w = c.train.windows;
      s->get("short", w.w_short);
      s->get("long", w.w_long);
      s->get("p_short", w.p_short);
      s->get("anneal_fraction", w.anneal_fraction);
    }
    s->finish();
  } else {
    c.train.windows = WindowSchedule::fixed(c.train.model.default_window);
  }

  if (auto s = top.sub("optimizer")) {
    auto& o = c.train.optimizer;
    s->get("beta1", o.beta1);
    s->get("beta2", o.beta2);
    s->get("eps", o.eps);
    s->get("weight_decay", o.weight_decay);
    s->get("grad_clip", o.grad_clip);
    s->finish();
  }

  c.corpus.vocab_size = c.train.model.vocab_size;
  if (auto s = top.sub("corpus")) {
    auto& k = c.corpus;
    s->get("seed", k.seed);
    s->get("local_order", k.local_order);
    s->get("branching", k.branching);
    s->get("chunk_min", k.chunk_min);
    s->get("chunk_max", k.chunk_max);
    s->get("record_rate", k.record_rate);
    s->get("recall_rate", k.recall_rate);
    s->get("copy_rate", k.copy_rate);
    std::vector<std::size_t> range;
    s->get("copy_distance_range", range);
    if (s->has("copy_distance_range")) {
      if (range.size() != 2) throw ConfigError("corpus.copy_distance_range: expected [min, max]");
      k.copy_distance_min = range[0];
      k.copy_distance_max = range[1];
    }
    s->get("key_len", k.key_len);
    s->get("value_len", k.value_len);
    s->finish();
  }

  if (auto s = top.sub("eval")) {
    auto& e = c.eval;
    if (const json* kinds = s->raw("kinds")) {
      if (!kinds->is_array()) throw ConfigError("eval.kinds: expected an array of task names");
      e.kinds.clear();
      for (const auto& k : *kinds) {
        if (!k.is_string()) throw ConfigError("eval.kinds: expected an array of task names");
        try {
          e.kinds.push_back(parse_niah_kind(k.get<std::string>()));
        } catch (const std::invalid_argument& err) {
          throw ConfigError(std::string("eval.kinds: ") + err.what());
        }
      }
    }
    s->get("seq_lens", e.seq_lens);
    s->get("test_windows", e.test_windows);
    s->get("n_samples", e.n_samples);
    s->get("depth_bins", e.depth_bins);
    s->get("seed", e.seed);
    s->get("val_tokens", e.val_tokens);
    s->finish();
  }
  top.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json windows = t.windows.is_fixed() ? json{{"fixed", t.windows.w_long}}
                                      : json{{"short", t.windows.w_short},
                                             {"long", t.windows.w_long},
                                             {"p_short", t.windows.p_short},
                                             {"anneal_fraction", t.windows.anneal_fraction}};
  json kinds = json::array();
  for (auto k : c.eval.kinds) kinds.push_back(to_string(k));
  return json{{"seed", t.seed},
              {"tag", c.tag},
              {"model", to_json(t.model)},
              {"train",
               {{"seq_len", t.seq_len},
                {"batch_tokens", t.batch_tokens},
                {"total_steps", t.total_steps},
                {"log_wall_time", t.log_wall_time},
                {"checkpoint_every", c.checkpoint_every}}},
              {"lr", {{"peak", t.lr.peak}, {"min", t.lr.min}, {"warmup_steps", t.lr.warmup_steps}}},
              {"windows", windows},
              {"optimizer",
               {{"beta1", t.optimizer.beta1},
                {"beta2", t.optimizer.beta2},
                {"eps", t.optimizer.eps},
                {"weight_decay", t.optimizer.weight_decay},
                {"grad_clip", t.optimizer.grad_clip}}},
              {"corpus",
               {{"seed", c.corpus.seed},
                {"local_order", c.corpus.local_order},
                {"branching", c.corpus.branching},
                {"chunk_min", c.corpus.chunk_min},
                {"chunk_max", c.corpus.chunk_max},
                {"record_rate", c.corpus.record_rate},
                {"recall_rate", c.corpus.recall_rate},
                {"copy_rate", c.corpus.copy_rate},
                {"copy_distance_range", {c.corpus.copy_distance_min, c.corpus.copy_distance_max}},
                {"key_len", c.corpus.key_len},
                {"value_len", c.corpus.value_len}}},
              {"eval",
               {{"kinds", kinds},
                {"seq_lens", c.eval.seq_lens},
                {"test_windows", c.eval.test_windows},
                {"n_samples", c.eval.n_samples},
                {"depth_bins", c.eval.depth_bins},
                {"seed", c.eval.seed},
                {"val_tokens", c.eval.val_tokens}}}};
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

ExperimentConfig load_experiment(const fs::path& path) { return parse_experiment(read_json_file(path)); }

namespace {

constexpr const char* kTensorFile = "tensors.bin";
constexpr const char* kManifestFile = "manifest.json";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  }
}

void write_floats(std::ostream& out, std::span<const float> xs) {
  std::vector<std::uint32_t> buf(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) buf[i] = to_little(std::bit_cast<std::uint32_t>(xs[i]));
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
}

void read_floats(std::istream& in, std::span<float> xs) {
  std::vector<std::uint32_t> buf(xs.size());
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = std::bit_cast<float>(to_little(buf[i]));
}

}  // namespace

void checkpoint_save(const fs::path& dir, const Model<float>& model, const OptimizerState& opt,
                     const std::optional<ExperimentConfig>& experiment) {
  const auto& params = model.parameters();
  if (opt.m.size() != params.size() || opt.v.size() != params.size()) {
    throw CheckpointError("checkpoint_save: optimizer state does not match the model");
  }
  fs::create_directories(dir);
  json tensors = json::array();
  std::size_t floats = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", floats * 4}});
    floats += p.value.size();
  }
  json manifest{{"format", kCheckpointFormat},
                {"code_version", std::string(kCodeVersion)},
                {"step", opt.step},
                {"tokens_seen", opt.tokens_seen},
                {"model", to_json(model.config())},
                {"tensors", tensors},
                {"bytes", floats * 3 * 4}};
  if (experiment) manifest["experiment"] = to_json(*experiment);

  std::ofstream out(dir / kTensorFile, std::ios::binary);
  if (!out) throw CheckpointError((dir / kTensorFile).string() + ": cannot open for writing");
  for (const auto& p : params) write_floats(out, p.value.data());
  for (const auto& m : opt.m) write_floats(out, m.data());
  for (const auto& v : opt.v) write_floats(out, v.data());
  out.close();
  if (!out) throw CheckpointError((dir / kTensorFile).string() + ": write failed");
  write_json_file(dir / kManifestFile, manifest);
}

Checkpoint checkpoint_load(const fs::path& dir, const std::optional<ModelConfig>& expect) {
  const fs::path manifest_path = dir / kManifestFile;
  if (!fs::exists(manifest_path)) throw CheckpointError(manifest_path.string() + ": manifest not found");
  json manifest;
  try {
    manifest = read_json_file(manifest_path);
  } catch (const ConfigError& e) {
    throw CheckpointError(e.what());
  }
  try {
    if (manifest.at("format").get<int>() != kCheckpointFormat) {
      throw CheckpointError(manifest_path.string() + ": unsupported checkpoint format " + manifest.at("format").dump());
    }
    if (manifest.at("code_version").get<std::string>() != kCodeVersion) {
      throw CheckpointError(manifest_path.string() + ": written by version " +
                            manifest.at("code_version").get<std::string>() + ", this build is " +
                            std::string(kCodeVersion));
    }
    ModelConfig stored;
    try {
      stored = parse_model(manifest.at("model"));
    } catch (const ConfigError& e) {
      throw CheckpointError(manifest_path.string() + ": " + e.what());
    }
    const ModelConfig target = expect.value_or(stored);
    Model<float> model = build_model<float>(target, 0);
    auto& params = model.parameters();
    const auto& tensors = manifest.at("tensors");
    for (std::size_t i = 0; i < std::max(params.size(), tensors.size()); ++i) {
      if (i >= tensors.size()) throw CheckpointError("parameter '" + params[i].name + "': missing from checkpoint");
      const std::string name = tensors[i].at("name").get<std::string>();
      if (i >= params.size()) throw CheckpointError("parameter '" + name + "': not present in the model");
      const Shape shape = tensors[i].at("shape").get<Shape>();
      if (name != params[i].name || shape != params[i].value.shape()) {
        throw CheckpointError("parameter '" + params[i].name + "': model expects shape " +
                              shape_to_string(params[i].value.shape()) + ", checkpoint has '" + name + "' " +
                              shape_to_string(shape));
      }
    }
    if (!(stored == target)) throw CheckpointError("checkpoint model config differs from the expected config");

    OptimizerState opt = OptimizerState::zeros_like(model);
    opt.step = manifest.at("step").get<std::size_t>();
    opt.tokens_seen = manifest.at("tokens_seen").get<std::size_t>();
    const fs::path bin = dir / kTensorFile;
    const std::size_t expected = 3 * 4 * model.numel();
    const std::size_t actual = fs::exists(bin) ? fs::file_size(bin) : 0;
    if (actual != expected) {
      throw CheckpointError(bin.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                            std::to_string(actual));
    }
    std::ifstream in(bin, std::ios::binary);
    for (auto& p : params) read_floats(in, p.value.storage());
    for (auto& m : opt.m) read_floats(in, m.storage());
    for (auto& v : opt.v) read_floats(in, v.storage());
    if (!in) throw CheckpointError(bin.string() + ": read failed");

    Checkpoint ck{std::move(model), std::move(opt), std::nullopt};
    if (manifest.contains("experiment")) ck.experiment = parse_experiment(manifest["experiment"]);
    return ck;
  } catch (const json::exception& e) {
    throw CheckpointError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
}

json to_json(const StepMetrics& m) {
  return json{{"step", m.step},
              {"loss", m.loss},
              {"lr", m.lr},
              {"sampled_window", m.sampled_window},
              {"tokens_seen", m.tokens_seen},
              {"wall_ms", m.wall_ms}};
}

MetricsWriter::MetricsWriter(const fs::path& path) : out_(path) {
  if (!out_) throw std::runtime_error(path.string() + ": cannot open for writing");
}

void MetricsWriter::write(const StepMetrics& m) {
  // field order is part of the log format, so build the line by hand
  const json j = to_json(m);
  out_ << "{\"step\":" << j["step"].dump() << ",\"loss\":" << j["loss"].dump() << ",\"lr\":" << j["lr"].dump()
       << ",\"sampled_window\":" << j["sampled_window"].dump() << ",\"tokens_seen\":" << j["tokens_seen"].dump()
       << ",\"wall_ms\":" << j["wall_ms"].dump() << "}\n";
  out_.flush();
}

std::vector<StepMetrics> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::vector<StepMetrics> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    StepMetrics m;
    m.step = j.at("step").get<std::size_t>();
    m.loss = j.at("loss").get<double>();
    m.lr = j.at("lr").get<double>();
    m.sampled_window = j.at("sampled_window").get<std::size_t>();
    m.tokens_seen = j.at("tokens_seen").get<std::size_t>();
    m.wall_ms = j.at("wall_ms").get<double>();
    out.push_back(m);
  }
  return out;
}

}  // namespace swax
