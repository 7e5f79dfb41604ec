#pragma once

// The CLI verbs as library functions: train, eval, predict, attn-dump, bench, synth.

#include <sys/utsname.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "slu/checkpoint.hpp"
#include "slu/config.hpp"
#include "slu/data.hpp"
#include "slu/metrics.hpp"
#include "slu/training.hpp"

namespace slu {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointFile = "checkpoint.slu";
inline constexpr const char* kConfigSnapshotFile = "config.json";
inline constexpr const char* kTrainLogFile = "train_log.jsonl";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kLockFile = "run.lock";

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const EvalReport& r) {
  return {{"ic_accuracy", r.ic_accuracy},
          {"token_f1", r.token_f1},
          {"span_f1", r.span_f1},
          {"token_accuracy", r.token_accuracy},
          {"latency_ms_per_utterance", r.latency_ms_per_utterance},
          {"epochs_to_converge", r.epochs_to_converge},
          {"s_per_epoch", r.s_per_epoch},
          {"params", r.params},
          {"params_excluding_embeddings", r.params_excluding_embeddings},
          {"utterances", r.utterances}};
}

/// Human-readable table in the column order IC acc, SL F1, span F1, ms/utt, epochs, s/epoch, #.
inline std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "IC acc" << std::setw(9) << "SL F1" << std::setw(9) << "span F1" << std::setw(9)
     << "ms/utt" << std::setw(8) << "epochs" << std::setw(9) << "s/epoch" << "#\n";
  os << std::fixed << std::setprecision(2) << std::setw(8) << 100.0 * r.ic_accuracy << std::setw(9)
     << 100.0 * r.token_f1 << std::setw(9) << 100.0 * r.span_f1 << std::setprecision(3) << std::setw(9)
     << r.latency_ms_per_utterance << std::setw(8) << r.epochs_to_converge << std::setprecision(2) << std::setw(9)
     << r.s_per_epoch << r.params << '\n';
  return os.str();
}

inline json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"dev_ic_accuracy", r.dev_ic_accuracy},
          {"dev_token_f1", r.dev_token_f1},
          {"dev_span_f1", r.dev_span_f1},
          {"seconds", r.seconds}};
}

// ---------------------------------------------------------------------------
// Data resolution

struct Datasets {
  Corpus train, dev, test;
  std::size_t dev_carved = 0;  // > 0 when dev was split off train
};

/// Points train/dev/test at the standard subdirectories of `root` when it has
/// a train/ subdirectory; otherwise `root` is the training split itself.
inline void apply_data_root(DataConfig& d, const fs::path& root) {
  d.synthetic.reset();
  d.dev.clear();
  d.test.clear();
  if (!fs::is_directory(root / "train")) {
    d.train = root.string();
    return;
  }
  d.train = (root / "train").string();
  for (const char* name : {"valid", "dev"})
    if (fs::is_directory(root / name)) {
      d.dev = (root / name).string();
      break;
    }
  if (fs::is_directory(root / "test")) d.test = (root / "test").string();
}

inline Datasets load_datasets(const DataConfig& d) {
  Datasets ds;
  if (d.synthetic) {
    SynthOptions opts;
    opts.mean_span_length = d.synthetic->mean_span_length;
    auto [train, dev] = dev_split(synth_corpus(d.synthetic->utterances, d.synthetic->seed, opts), d.dev_fraction,
                                  d.split_seed);
    ds.train = std::move(train);
    ds.dev = std::move(dev);
    ds.dev_carved = ds.dev.size();
    return ds;
  }
  for (const auto* p : {&d.train, &d.dev, &d.test})
    if (!p->empty() && !fs::is_directory(*p)) throw DataError("data directory not found: " + *p);
  ds.train = load_three_file(d.train, d.lowercase);
  if (d.dev.empty()) {
    auto [train, dev] = dev_split(ds.train, d.dev_fraction, d.split_seed);
    ds.train = std::move(train);
    ds.dev = std::move(dev);
    ds.dev_carved = ds.dev.size();
  } else {
    ds.dev = load_three_file(d.dev, d.lowercase);
  }
  if (!d.test.empty()) ds.test = load_three_file(d.test, d.lowercase);
  return ds;
}

/// Reads whitespace-tokenized lines from a file, or from <dir>/seq.in when given a directory.
inline std::vector<std::vector<std::string>> read_token_lines(const fs::path& path, bool lowercase) {
  const fs::path file = fs::is_directory(path) ? path / kTokensFile : path;
  if (!fs::is_regular_file(file)) throw DataError("input file not found: " + file.string());
  std::vector<std::vector<std::string>> out;
  for (const auto& line : detail::read_lines(file)) out.push_back(split_ws(lowercase ? ascii_lower(line) : line));
  return out;
}

// ---------------------------------------------------------------------------
// train

/// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / kLockFile) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("run directory " + dir.string() + " is locked (remove " + path_.string() + " if stale)");
    std::fprintf(f, "locked\n");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

struct TrainOutcome {
  fs::path run_dir;
  TrainResult result;
  EvalReport dev;
  std::optional<EvalReport> test;
};

inline TrainOutcome cmd_train(ExperimentConfig cfg, std::ostream& log) {
  cfg.validate();
  const Datasets data = load_datasets(cfg.data);
  const Vocab vocab = Vocab::build(data.train);
  const fs::path dir = resolve_run_dir(cfg);
  fs::create_directories(dir);
  RunLock lock(dir);

  {
    std::ofstream snap(dir / kConfigSnapshotFile);
    snap << to_json(cfg).dump(2) << '\n';
  }
  log << "run " << dir.string() << ": " << data.train.size() << " train / " << data.dev.size() << " dev utterances"
      << (data.dev_carved ? " (dev carved from train)" : "") << ", vocab " << vocab.token_count() << " tokens, "
      << vocab.label_count() - 1 << " slot labels, " << vocab.intent_count() << " intents, hash " << vocab.hash_hex()
      << '\n';
  {
    const auto plan = make_batches(encode_corpus(data.train, vocab), 1, cfg.train.max_len, nullptr);
    if (plan.clipped) log << "warning: " << plan.clipped << " training utterances clipped to " << cfg.train.max_len << " tokens\n";
    if (plan.skipped) log << "warning: " << plan.skipped << " empty training utterances skipped\n";
  }

  JointModel model(cfg.model, vocab.token_count(), vocab.label_count(), vocab.intent_count(), cfg.train.seed);
  log << "model: " << to_string(cfg.model.encoder.kind) << " + " << to_string(cfg.model.decoder) << ", "
      << model.parameter_count() << " parameters\n";

  const fs::path ckpt = dir / kCheckpointFile;
  std::ofstream train_log(dir / kTrainLogFile);
  json stats = {{"lowercase", cfg.data.lowercase}, {"seed", cfg.train.seed}};
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    train_log << to_json(r).dump() << '\n';
    train_log.flush();
    log << "epoch " << r.epoch << " loss " << r.train_loss << " dev IC " << r.dev_ic_accuracy << " token F1 "
        << r.dev_token_f1 << " span F1 " << r.dev_span_f1 << " (" << r.seconds << " s)\n";
  };
  hooks.on_improvement = [&](int epoch) {
    stats["best_epoch"] = epoch;
    save_checkpoint(ckpt, model, cfg.train, vocab, stats);
  };

  TrainOutcome out;
  out.run_dir = dir;
  out.result = train(model, cfg.train, data.train, data.dev, vocab, hooks);
  stats["best_epoch"] = out.result.best_epoch;
  stats["epochs_run"] = out.result.epochs_run;
  stats["s_per_epoch"] = out.result.seconds_per_epoch;
  save_checkpoint(ckpt, model, cfg.train, vocab, stats);

  auto finish = [&](EvalReport r) {
    r.epochs_to_converge = out.result.best_epoch;
    r.s_per_epoch = out.result.seconds_per_epoch;
    return r;
  };
  out.dev = finish(evaluate(model, vocab, data.dev).report);
  json metrics = {{"dev", to_json(out.dev)}};
  if (!data.test.empty()) {
    out.test = finish(evaluate(model, vocab, data.test).report);
    metrics["test"] = to_json(*out.test);
  }
  std::ofstream(dir / kMetricsFile) << metrics.dump(2) << '\n';
  log << "best epoch " << out.result.best_epoch << " of " << out.result.epochs_run << "\n" << format_table(out.dev);
  return out;
}

// ---------------------------------------------------------------------------
// eval

/// Fails with the checkpoint's vocabulary hash when the data looks like a different task:
/// fewer than half of its distinct slot labels and intents are known to the checkpoint.
inline void check_vocab_compatible(const Vocab& vocab, const Corpus& data) {
  std::set<std::string> seen;
  std::size_t known = 0;
  auto visit = [&](const std::string& key, bool ok) {
    if (seen.insert(key).second) known += ok;
  };
  for (const auto& u : data) {
    for (const auto& s : u.slots) visit("L:" + s, vocab.label_id(s) >= 0);
    visit("I:" + u.intent, vocab.intent_id(u.intent) >= 0);
  }
  if (!seen.empty() && 2 * known < seen.size())
    throw DataError("data does not match checkpoint vocabulary " + vocab.hash_hex() + ": only " +
                    std::to_string(known) + " of " + std::to_string(seen.size()) +
                    " distinct slot labels and intents are known");
}

inline EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, bool lowercase) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const bool lower = lowercase || ck.stats.value("lowercase", false);
  const Corpus data = load_three_file(data_dir, lower);
  check_vocab_compatible(ck.vocab, data);
  EvalReport r = evaluate(*ck.model, ck.vocab, data).report;
  r.epochs_to_converge = ck.stats.value("best_epoch", 0);
  r.s_per_epoch = ck.stats.value("s_per_epoch", 0.0);
  return r;
}

// ---------------------------------------------------------------------------
// predict and attn-dump

struct PredictSummary {
  std::size_t lines = 0;
  std::size_t empty = 0;
  std::size_t clipped = 0;
};

/// Writes <out>/seq.out and <out>/label, line-aligned with the input.
inline PredictSummary cmd_predict(const fs::path& checkpoint, const fs::path& input, const fs::path& out_dir,
                                  bool lowercase, bool repair, std::ostream& log) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const bool lower = lowercase || ck.stats.value("lowercase", false);
  const auto lines = read_token_lines(input, lower);
  const auto max_len = std::size_t(ck.model_config.encoder.max_len);
  Corpus out;
  PredictSummary s;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      ++s.empty;
      log << "warning: line " << i + 1 << " is empty; emitting empty outputs\n";
    }
    if (lines[i].size() > max_len) ++s.clipped;
    Utterance u = predict_utterance(*ck.model, ck.vocab, lines[i]);
    if (repair) u.slots = repair_iob(u.slots);
    out.push_back(std::move(u));
  }
  s.lines = out.size();
  if (s.clipped) log << "warning: " << s.clipped << " lines longer than " << max_len << " tokens; the rest tagged O\n";
  fs::create_directories(out_dir);
  write_three_file(out_dir, out, false);
  return s;
}

/// One JSON object per input line: {"line", "intent", "tokens", "weights"}.
/// Weights cover the tokens the model saw (the first max_len).
inline std::size_t cmd_attn_dump(const fs::path& checkpoint, const fs::path& input, bool lowercase, std::ostream& out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const bool lower = lowercase || ck.stats.value("lowercase", false);
  const auto lines = read_token_lines(input, lower);
  const auto max_len = std::size_t(ck.model_config.encoder.max_len);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    Tensor beta;
    const Utterance u = predict_utterance(*ck.model, ck.vocab, lines[i], &beta);
    std::vector<std::string> seen(lines[i].begin(), lines[i].begin() + std::min(lines[i].size(), max_len));
    std::vector<double> weights;
    if (beta.defined()) weights.assign(beta.data().begin(), beta.data().end());
    out << json{{"line", i + 1}, {"intent", u.intent}, {"tokens", seen}, {"weights", weights}}.dump() << '\n';
  }
  return lines.size();
}

// ---------------------------------------------------------------------------
// bench

inline json machine_descriptor() {
  json m;
  std::string cpu = "unknown";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);)
    if (line.rfind("model name", 0) == 0) {
      cpu = detail::trim(line.substr(line.find(':') + 1));
      break;
    }
  m["cpu"] = cpu;
  m["hardware_threads"] = std::thread::hardware_concurrency();
  m["threads_used"] = 1;
  utsname un{};
  if (uname(&un) == 0) m["os"] = std::string(un.sysname) + " " + un.release + " " + un.machine;
#if defined(__clang__)
  m["compiler"] = "clang " __clang_version__;
#elif defined(__GNUC__)
  m["compiler"] = "gcc " __VERSION__;
#endif
  return m;
}

inline json cmd_bench(const fs::path& checkpoint, const fs::path& input, int repeats, bool lowercase) {
  if (repeats < 3) throw ConfigError("--repeats must be at least 3, got " + std::to_string(repeats));
  Checkpoint ck = load_checkpoint(checkpoint);
  const bool lower = lowercase || ck.stats.value("lowercase", false);
  std::vector<std::vector<int>> inputs;
  const auto max_len = std::size_t(ck.model_config.encoder.max_len);
  for (const auto& toks : read_token_lines(input, lower))
    if (!toks.empty()) inputs.push_back(token_ids(ck.vocab, toks, max_len));
  const LatencyStats st = bench_latency(*ck.model, inputs, repeats);
  return {{"checkpoint", checkpoint.string()},
          {"encoder", to_string(ck.model_config.encoder.kind)},
          {"decoder", to_string(ck.model_config.decoder)},
          {"mean_ms_per_utterance", st.mean_ms},
          {"stddev_ms_per_utterance", st.stddev_ms},
          {"runs_ms_per_utterance", st.runs_ms},
          {"repeats", repeats},
          {"utterances", st.utterances},
          {"params", ck.model->parameter_count()},
          {"params_excluding_embeddings", count_params_excluding_embeddings(*ck.model)},
          {"machine", machine_descriptor()}};
}

// ---------------------------------------------------------------------------
// synth

inline void cmd_synth(const fs::path& out_dir, std::size_t utterances, std::uint64_t seed, double mean_span_length) {
  SynthOptions opts;
  opts.mean_span_length = mean_span_length;
  const Corpus c = synth_corpus(utterances, seed, opts);
  fs::create_directories(out_dir);
  write_three_file(out_dir, c);
}

}  // namespace slu
