#include "swax/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <regex>
#include <set>

namespace swax {

using nlohmann::json;
namespace fs = std::filesystem;

ValidationScore validation_score(const Model<float>& model, const ExperimentConfig& cfg, std::size_t window) {
  ValidationScore s;
  s.window = window;
  if (cfg.eval.val_tokens == 0) return s;
  CorpusStream stream(cfg.corpus, derive_seed(cfg.train.seed, RngStream::validation));
  const std::size_t chunks = cfg.eval.val_tokens / cfg.train.seq_len;
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += next_token_loss(model, stream.next_batch(1, cfg.train.seq_len + 1), 1, ForwardOptions{window});
  }
  s.loss = total / double(chunks);
  s.perplexity = std::exp(s.loss);
  return s;
}

fs::path checkpoint_dir(const fs::path& run_dir, std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08zu", step);
  return run_dir / "checkpoints" / buf;
}

namespace {

json to_json(const ValidationScore& s) {
  return json{{"window", s.window}, {"val_loss", s.loss}, {"val_ppl", s.perplexity}};
}

void write_manifest(const fs::path& out, const ExperimentConfig& cfg, const std::string& status,
                    const std::vector<std::string>& artifacts) {
  write_json_file(out / "manifest.json", json{{"code_version", std::string(kCodeVersion)},
                                              {"master_seed", cfg.train.seed},
                                              {"status", status},
                                              {"artifacts", artifacts}});
}

std::string relative_name(const fs::path& p, const fs::path& base) { return fs::relative(p, base).generic_string(); }

}  // namespace

Checkpoint run_training(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  write_json_file(out / "config.json", to_json(cfg));
  std::vector<std::string> artifacts{"config.json", "metrics.jsonl"};
  MetricsWriter metrics(out / "metrics.jsonl");
  CorpusStream data(cfg.corpus, derive_seed(cfg.train.seed, RngStream::data));

  auto save = [&](const Model<float>& model, const OptimizerState& opt) {
    const fs::path dir = checkpoint_dir(out, opt.step);
    checkpoint_save(dir, model, opt, cfg);
    artifacts.push_back(relative_name(dir, out));
  };
  StepHook hook;
  if (cfg.checkpoint_every > 0) {
    hook = [&](const Model<float>& model, const OptimizerState& opt) {
      if (opt.step % cfg.checkpoint_every == 0 && opt.step != cfg.train.total_steps) save(model, opt);
    };
  }

  TrainResult result = [&] {
    try {
      return train(cfg.train, data, [&](const StepMetrics& m) { metrics.write(m); }, std::nullopt, hook);
    } catch (const std::exception&) {
      write_manifest(out, cfg, "failed", artifacts);
      throw;
    }
  }();
  save(result.model, result.optimizer);

  const ValidationScore val = validation_score(result.model, cfg, cfg.train.windows.w_long);
  write_json_file(out / "summary.json", json{{"final_step", result.optimizer.step},
                                             {"tokens_seen", result.optimizer.tokens_seen},
                                             {"train_tag", cfg.train_tag()},
                                             {"validation", to_json(val)}});
  artifacts.push_back("summary.json");
  write_manifest(out, cfg, "completed", artifacts);
  return Checkpoint{std::move(result.model), std::move(result.optimizer), cfg};
}

std::vector<EvalResult> run_evaluation(const Model<float>& model, const ExperimentConfig& cfg) {
  std::vector<std::size_t> windows = cfg.eval.test_windows;
  if (windows.empty()) windows.push_back(cfg.train.windows.w_long);
  SweepSpec sweep;
  sweep.kinds = cfg.eval.kinds;
  sweep.seq_lens = cfg.eval.seq_lens;
  sweep.n_samples = cfg.eval.n_samples;
  sweep.depth_bins = cfg.eval.depth_bins;
  sweep.seed = cfg.eval.seed;
  std::vector<EvalResult> results;
  if (cfg.eval.n_samples == 0) return results;
  for (std::size_t w : windows) {
    auto r = eval_niah_sweep(model, cfg.corpus, sweep, w, cfg.train_tag());
    results.insert(results.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  }
  return results;
}

void write_results(const fs::path& out, const std::vector<EvalResult>& results) {
  fs::create_directories(out);
  std::ofstream csv(out / "results.csv");
  write_results_csv(csv, results);
  std::ofstream depth(out / "results_depth.csv");
  depth << "task_kind,seq_len,test_window,train_tag,depth_bin,correct,total\n";
  for (const auto& r : results) {
    for (std::size_t b = 0; b < r.total_by_depth.size(); ++b) {
      depth << r.task_kind << ',' << r.seq_len << ',' << r.test_window << ',' << r.train_tag << ',' << b << ','
            << r.correct_by_depth[b] << ',' << r.total_by_depth[b] << '\n';
    }
  }
  if (!csv || !depth) throw std::runtime_error((out / "results.csv").string() + ": write failed");
}

SweepGrid parse_sweep(const json& doc, std::optional<std::uint64_t> seed_override) {
  if (!doc.is_object()) throw ConfigError("grid: expected an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.key() != "seed" && it.key() != "base" && it.key() != "cells") throw ConfigError(it.key() + ": unknown key");
  }
  SweepGrid grid;
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer() || doc["seed"].get<std::int64_t>() < 0) throw ConfigError("seed: expected a non-negative integer");
    grid.seed = doc["seed"].get<std::uint64_t>();
  }
  if (seed_override) grid.seed = *seed_override;
  const json base = doc.value("base", json::object());
  if (!base.is_object()) throw ConfigError("base: expected an object");
  if (base.contains("seed")) throw ConfigError("base.seed: cell seeds derive from the grid seed");
  if (!doc.contains("cells") || !doc["cells"].is_array()) throw ConfigError("cells: expected an array");

  static const std::regex name_re("[A-Za-z0-9_.-]+");
  std::set<std::string> names;
  const auto& cells = doc["cells"];
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const std::string where = "cells[" + std::to_string(i) + "]";
    const json& c = cells[i];
    if (!c.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = c.begin(); it != c.end(); ++it) {
      if (it.key() != "name" && it.key() != "overrides") throw ConfigError(where + "." + it.key() + ": unknown key");
    }
    if (!c.contains("name") || !c["name"].is_string()) throw ConfigError(where + ".name: expected a string");
    const std::string name = c["name"].get<std::string>();
    if (!std::regex_match(name, name_re)) throw ConfigError(where + ".name: use letters, digits, '_', '-' or '.'");
    if (!names.insert(name).second) throw ConfigError(where + ".name: duplicate cell name '" + name + "'");
    json merged = base;
    if (c.contains("overrides")) {
      if (!c["overrides"].is_object()) throw ConfigError(where + ".overrides: expected an object");
      if (c["overrides"].contains("seed")) throw ConfigError(where + ".overrides.seed: cell seeds derive from the grid seed");
      merged.merge_patch(c["overrides"]);
    }
    merged["seed"] = derive_seed(grid.seed, RngStream::cell, i);
    try {
      grid.cells.push_back({name, parse_experiment(merged)});
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return grid;
}

namespace {

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace

int cmd_train(const fs::path& config_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  return guarded([&] {
    json doc = read_json_file(config_path);
    if (seed) {
      if (!doc.is_object()) throw ConfigError(config_path.string() + ": expected an object");
      doc["seed"] = *seed;
    }
    const ExperimentConfig cfg = parse_experiment(doc);
    run_training(cfg, out);
    return int(kExitOk);
  });
}

int cmd_eval(const fs::path& checkpoint, const std::optional<fs::path>& config_path, const fs::path& out,
             std::optional<std::size_t> test_window, std::optional<std::uint64_t> seed) {
  return guarded([&] {
    Checkpoint stored = checkpoint_load(checkpoint);
    json doc = stored.experiment ? to_json(*stored.experiment) : json{{"model", to_json(stored.model.config())}};
    if (config_path) {
      const json overrides = read_json_file(*config_path);
      if (!overrides.is_object()) throw ConfigError(config_path->string() + ": expected an object");
      doc.merge_patch(overrides);
    }
    if (test_window) doc["eval"]["test_windows"] = {*test_window};
    if (seed) doc["eval"]["seed"] = *seed;
    const ExperimentConfig cfg = parse_experiment(doc);
    const Model<float>& model =
        cfg.train.model == stored.model.config() ? stored.model : checkpoint_load(checkpoint, cfg.train.model).model;

    const auto results = run_evaluation(model, cfg);
    write_results(out, results);
    std::vector<std::size_t> windows = cfg.eval.test_windows;
    if (windows.empty()) windows.push_back(cfg.train.windows.w_long);
    json validation = json::array();
    for (std::size_t w : windows) validation.push_back(to_json(validation_score(model, cfg, w)));
    write_json_file(out / "eval_summary.json", json{{"checkpoint", fs::absolute(checkpoint).generic_string()},
                                                   {"step", stored.optimizer.step},
                                                   {"config", to_json(cfg)},
                                                   {"validation", validation}});
    return int(kExitOk);
  });
}

int cmd_sweep(const fs::path& grid_path, const fs::path& out, std::optional<std::uint64_t> seed) {
  return guarded([&] {
    const SweepGrid grid = parse_sweep(read_json_file(grid_path), seed);
    fs::create_directories(out);
    std::vector<EvalResult> all;
    json cells = json::array();
    bool failed = false;
    for (const auto& cell : grid.cells) {
      const fs::path dir = out / "cells" / cell.name;
      json status{{"name", cell.name}, {"seed", cell.config.train.seed}};
      try {
        Checkpoint ck = run_training(cell.config, dir);
        auto results = run_evaluation(ck.model, cell.config);
        write_results(dir, results);
        all.insert(all.end(), results.begin(), results.end());
        status["status"] = "completed";
      } catch (const std::exception& e) {
        failed = true;
        status["status"] = "failed";
        status["error"] = e.what();
        std::cerr << "cell " << cell.name << " failed: " << e.what() << '\n';
      }
      cells.push_back(status);
      write_json_file(out / "sweep.json", json{{"seed", grid.seed}, {"cells", cells}});
    }
    write_results(out, all);
    return int(failed ? kExitFailure : kExitOk);
  });
}

}  // namespace swax
