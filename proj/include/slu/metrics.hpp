#pragma once

// IC accuracy, token- and span-level slot F1, evaluation and latency timing.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "slu/data.hpp"
#include "slu/errors.hpp"
#include "slu/model.hpp"

namespace slu {

struct PrfCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  double precision() const { return tp + fp ? double(tp) / double(tp + fp) : (fn ? 0.0 : 1.0); }
  double recall() const { return tp + fn ? double(tp) / double(tp + fn) : (fp ? 0.0 : 1.0); }
  /// 2TP / (2TP + FP + FN); 1.0 when there is nothing to find and nothing was predicted.
  double f1() const { return tp + fp + fn ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 1.0; }

  PrfCounts& operator+=(const PrfCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

using LabelSequences = std::vector<std::vector<std::string>>;

inline double ic_accuracy(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.size() != gold.size())
    throw DimensionError("ic_accuracy: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(gold.size()) + " references");
  if (gold.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += pred[i] == gold[i];
  return double(hit) / double(gold.size());
}

namespace detail {

inline void check_aligned(const LabelSequences& pred, const LabelSequences& gold) {
  if (pred.size() != gold.size()) throw DimensionError("slot metrics: utterance counts differ");
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (pred[i].size() != gold[i].size())
      throw DimensionError("slot metrics: utterance " + std::to_string(i) + " has " + std::to_string(pred[i].size()) +
                           " predicted tags for " + std::to_string(gold[i].size()) + " tokens");
}

inline bool is_pad(const std::string& s) { return s == Vocab::kPadToken; }

}  // namespace detail

/// Micro counts over non-O tokens: a token is a hit when its full tag matches gold.
inline PrfCounts token_counts(const LabelSequences& pred, const LabelSequences& gold) {
  detail::check_aligned(pred, gold);
  PrfCounts c;
  for (std::size_t u = 0; u < gold.size(); ++u)
    for (std::size_t t = 0; t < gold[u].size(); ++t) {
      const auto& g = gold[u][t];
      const auto& p = pred[u][t];
      if (detail::is_pad(g)) continue;
      const bool g_slot = g != "O", p_slot = p != "O" && !detail::is_pad(p);
      if (g_slot && p == g) {
        ++c.tp;
        continue;
      }
      if (p_slot) ++c.fp;
      if (g_slot) ++c.fn;
    }
  return c;
}

inline double token_f1(const LabelSequences& pred, const LabelSequences& gold) { return token_counts(pred, gold).f1(); }

namespace detail {

inline std::vector<std::string> strip_pads(const std::vector<std::string>& tags, const std::vector<std::string>& gold) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (!is_pad(gold[i])) out.push_back(is_pad(tags[i]) ? "O" : tags[i]);
  return out;
}

}  // namespace detail

/// Micro counts over exact (type, start, end) span matches.
inline PrfCounts span_counts(const LabelSequences& pred, const LabelSequences& gold) {
  detail::check_aligned(pred, gold);
  PrfCounts c;
  for (std::size_t u = 0; u < gold.size(); ++u) {
    const auto ps = iob_spans(detail::strip_pads(pred[u], gold[u]));
    const auto gs = iob_spans(detail::strip_pads(gold[u], gold[u]));
    std::size_t hit = 0;
    for (const auto& s : ps)
      for (const auto& g : gs)
        if (s == g) {
          ++hit;
          break;
        }
    c.tp += hit;
    c.fp += ps.size() - hit;
    c.fn += gs.size() - hit;
  }
  return c;
}

inline double span_f1(const LabelSequences& pred, const LabelSequences& gold) { return span_counts(pred, gold).f1(); }

/// Fraction of real tokens whose predicted tag equals gold, O included.
inline double token_accuracy(const LabelSequences& pred, const LabelSequences& gold) {
  detail::check_aligned(pred, gold);
  std::size_t hit = 0, total = 0;
  for (std::size_t u = 0; u < gold.size(); ++u)
    for (std::size_t t = 0; t < gold[u].size(); ++t) {
      if (detail::is_pad(gold[u][t])) continue;
      ++total;
      hit += pred[u][t] == gold[u][t];
    }
  return total ? double(hit) / double(total) : 1.0;
}

inline std::size_t count_params(const JointModel& model) { return model.parameter_count(); }

/// Everything except the word embedding table; comparable across vocabularies.
inline std::size_t count_params_excluding_embeddings(const JointModel& model) {
  return model.parameter_count() - model.parameters().get("embeddings").size();
}

// ---------------------------------------------------------------------------

struct EvalReport {
  double ic_accuracy = 0.0;
  double token_f1 = 0.0;
  double span_f1 = 0.0;
  double token_accuracy = 0.0;
  double latency_ms_per_utterance = 0.0;
  std::size_t params = 0;
  std::size_t params_excluding_embeddings = 0;
  int epochs_to_converge = 0;
  double s_per_epoch = 0.0;
  std::size_t utterances = 0;
};

struct Evaluation {
  EvalReport report;
  Corpus predictions;  // tokens copied from the input, slots/intent predicted
  std::size_t clipped = 0;
};

/// Token ids for inference: unknown words map to <unk>, input clipped to max_len.
inline std::vector<int> token_ids(const Vocab& vocab, const std::vector<std::string>& tokens, std::size_t max_len) {
  std::vector<int> ids;
  const std::size_t n = std::min(tokens.size(), max_len);
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(vocab.token_id(tokens[i]));
  return ids;
}

/// Greedy predictions for one utterance as strings. Tokens past max_len are tagged O;
/// an empty utterance yields an empty tag list and an empty intent.
inline Utterance predict_utterance(const JointModel& model, const Vocab& vocab, const std::vector<std::string>& tokens,
                                   Tensor* pooling_weights = nullptr) {
  Utterance out;
  out.tokens = tokens;
  if (tokens.empty()) return out;
  const auto ids = token_ids(vocab, tokens, std::size_t(model.config().encoder.max_len));
  Prediction p = model.predict(ids);
  out.intent = vocab.intent(p.intent);
  for (int l : p.labels) out.slots.push_back(vocab.label(l));
  out.slots.resize(tokens.size(), "O");
  if (pooling_weights) *pooling_weights = p.pooling_weights;
  return out;
}

inline Evaluation evaluate(const JointModel& model, const Vocab& vocab, const Corpus& gold) {
  Evaluation ev;
  const auto max_len = std::size_t(model.config().encoder.max_len);
  LabelSequences pred_slots, gold_slots;
  std::vector<std::string> pred_intents, gold_intents;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& u : gold) {
    if (u.tokens.size() > max_len) ++ev.clipped;
    Utterance p = predict_utterance(model, vocab, u.tokens);
    pred_slots.push_back(p.slots);
    gold_slots.push_back(u.slots);
    pred_intents.push_back(p.intent);
    gold_intents.push_back(u.intent);
    ev.predictions.push_back(std::move(p));
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  ev.report.ic_accuracy = ic_accuracy(pred_intents, gold_intents);
  ev.report.token_f1 = token_f1(pred_slots, gold_slots);
  ev.report.span_f1 = span_f1(pred_slots, gold_slots);
  ev.report.token_accuracy = token_accuracy(pred_slots, gold_slots);
  ev.report.latency_ms_per_utterance = gold.empty() ? 0.0 : ms / double(gold.size());
  ev.report.params = count_params(model);
  ev.report.params_excluding_embeddings = count_params_excluding_embeddings(model);
  ev.report.utterances = gold.size();
  return ev;
}

// ---------------------------------------------------------------------------

struct LatencyStats {
  double mean_ms = 0.0;    // per utterance
  double stddev_ms = 0.0;  // across repeats
  std::vector<double> runs_ms;
  std::size_t utterances = 0;
};

/// Batch-size-1 greedy inference timing over `inputs`, repeated `repeats` times after one warmup pass.
inline LatencyStats bench_latency(const JointModel& model, const std::vector<std::vector<int>>& inputs, int repeats) {
  if (repeats < 3) throw ConfigError("bench needs at least 3 repeats, got " + std::to_string(repeats));
  if (inputs.empty()) throw DataError("bench needs at least one utterance");
  volatile int sink = 0;
  auto pass = [&] {
    for (const auto& ids : inputs)
      if (!ids.empty()) sink = model.predict(ids).labels.back();
  };
  pass();
  LatencyStats st;
  st.utterances = inputs.size();
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    pass();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    st.runs_ms.push_back(ms / double(inputs.size()));
  }
  double sum = 0.0;
  for (double v : st.runs_ms) sum += v;
  st.mean_ms = sum / repeats;
  double var = 0.0;
  for (double v : st.runs_ms) var += (v - st.mean_ms) * (v - st.mean_ms);
  st.stddev_ms = std::sqrt(var / (repeats - 1));
  return st;
}

}  // namespace slu
