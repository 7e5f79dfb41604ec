#pragma once

// Sentence pooling, intent prediction and the two slot-labeling decoders.
//
// Slot label id 0 is the reserved pad label: it is masked out of every slot
// softmax and can never be decoded.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slu/encoders.hpp"
#include "slu/errors.hpp"
#include "slu/ops.hpp"
#include "slu/parameters.hpp"

namespace slu {

enum class DecoderMode { independent, label_recurrent };

inline std::string to_string(DecoderMode m) {
  return m == DecoderMode::independent ? "independent" : "label_recurrent";
}

inline DecoderMode decoder_mode_from_string(const std::string& s) {
  if (s == "independent") return DecoderMode::independent;
  if (s == "label_recurrent") return DecoderMode::label_recurrent;
  throw ConfigError("unknown decoder '" + s + "' (expected independent or label_recurrent)");
}

/// Width of the label-history LSTM state.
inline constexpr std::size_t kTagStateSize = 10;

/// prev_label value for the first decoding step.
inline constexpr int kStartOfSequence = -1;

/// Index of the largest entry at or after `first`, lowest index on ties.
inline int argmax(std::span<const double> v, std::size_t first = 0) {
  std::size_t best = first;
  for (std::size_t j = first + 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = j;
  return static_cast<int>(best);
}

inline std::vector<std::uint8_t> label_class_mask(std::size_t labels) {
  std::vector<std::uint8_t> m(labels, 1);
  m[0] = 0;
  return m;
}

// ---------------------------------------------------------------------------

struct Pooled {
  Tensor sentence;  // [d_x]
  Tensor weights;   // [T], a distribution over real tokens
};

/// s = sum_i beta_i h_i with beta = softmax(v . h_i) over non-pad tokens.
class SentencePooling {
 public:
  SentencePooling(int d_x, ParameterStore& store, Rng& rng)
      : score_(store.add("pooling.score", {std::size_t(d_x)}, Init::table, rng)) {}

  Pooled pool(const Tensor& h, std::span<const std::uint8_t> mask = {}) const {
    if (!mask.empty() && mask.size() != h.dim(0)) throw DimensionError("pooling mask length mismatch");
    Tensor beta = softmax(matmul(h, score_), mask);
    return {matmul(beta, h), beta};
  }

  Tensor& score() { return score_; }

 private:
  Tensor score_;
};

/// Two-layer feed-forward block on the sentence vector.
class IntentHead {
 public:
  IntentHead(int d_x, std::size_t intents, ParameterStore& store, Rng& rng) {
    const auto d = std::size_t(d_x);
    w1_ = store.add("intent.hidden.weight", {d, d}, Init::glorot, rng);
    b1_ = store.add("intent.hidden.bias", {d}, Init::zeros, rng);
    w2_ = store.add("intent.output.weight", {d, intents}, Init::glorot, rng);
    b2_ = store.add("intent.output.bias", {intents}, Init::zeros, rng);
  }

  Tensor logits(const Tensor& s) const { return add(matmul(tanh(add(matmul(s, w1_), b1_)), w2_), b2_); }

 private:
  Tensor w1_, b1_, w2_, b2_;
};

/// Per-token labeling from h_i alone: softmax(W3 tanh(W4 h_i + b4) + b3).
class IndependentSlotHead {
 public:
  IndependentSlotHead(int d_x, std::size_t labels, ParameterStore& store, Rng& rng) : labels_(labels) {
    const auto d = std::size_t(d_x);
    hidden_w_ = store.add("slots.hidden.weight", {d, d}, Init::glorot, rng);
    hidden_b_ = store.add("slots.hidden.bias", {d}, Init::zeros, rng);
    out_w_ = store.add("slots.output.weight", {d, labels}, Init::glorot, rng);
    out_b_ = store.add("slots.output.bias", {labels}, Init::zeros, rng);
  }

  /// h: [T, d_x] -> [T, |L|], or [d_x] -> [|L|].
  Tensor logits(const Tensor& h, const ForwardContext& ctx = {}) const {
    Tensor p = ctx.drop(tanh(add(matmul(h, hidden_w_), hidden_b_)));
    return add(matmul(p, out_w_), out_b_);
  }

  std::vector<int> decode(const Tensor& h) const {
    Tensor z = logits(h);
    std::vector<int> out(h.dim(0));
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = argmax(z.data().subspan(t * labels_, labels_), 1);
    return out;
  }

  std::size_t labels() const { return labels_; }

 private:
  std::size_t labels_;
  Tensor hidden_w_, hidden_b_, out_w_, out_b_;
};

/// h_i^tag, the label-history state consulted at step i.
struct TagHistoryState {
  Tensor h;  // [10]
  Tensor c;  // [10]
};

struct SlotStep {
  Tensor logits;         // [|L|]
  TagHistoryState state;  // the state used for this step
};

/// Labeling conditioned on h_i and on the previously decided labels through a
/// small LSTM over label embeddings:
///   h_i^tag = LSTM(emb(l_{i-1}), h_{i-1}^tag), h_1^tag = learned h_0^tag
///   p_i = tanh(W5 [h_i; h_i^tag] + b5), logits = W3 p_i + b3
class LabelRecurrentSlotHead {
 public:
  LabelRecurrentSlotHead(int d_x, std::size_t labels, std::size_t label_dim, ParameterStore& store, Rng& rng)
      : d_(std::size_t(d_x)), labels_(labels) {
    const std::size_t h = kTagStateSize;
    label_embeddings_ = store.add("slots.label_embeddings", {labels, label_dim}, Init::table, rng);
    lstm_ = LstmWeights{store.add("slots.tag_lstm.input", {label_dim, 4 * h}, Init::glorot, rng),
                        store.add("slots.tag_lstm.recurrent", {h, 4 * h}, Init::glorot, rng),
                        store.add("slots.tag_lstm.bias", {4 * h}, Init::zeros, rng)};
    initial_ = store.add("slots.tag_initial", {h}, Init::table, rng);
    hidden_w_ = store.add("slots.hidden.weight", {d_ + h, d_}, Init::glorot, rng);
    hidden_b_ = store.add("slots.hidden.bias", {d_}, Init::zeros, rng);
    out_w_ = store.add("slots.output.weight", {d_, labels}, Init::glorot, rng);
    out_b_ = store.add("slots.output.bias", {labels}, Init::zeros, rng);
  }

  TagHistoryState initial_state() const { return {initial_, Tensor::zeros({kTagStateSize})}; }

  /// Feed the label decided at the previous step into the tag LSTM.
  TagHistoryState advance(const TagHistoryState& prev, int label) const {
    if (label <= 0 || static_cast<std::size_t>(label) >= labels_)
      throw IndexError("label id " + std::to_string(label) + " is not a slot label (1.." +
                       std::to_string(labels_ - 1) + ")");
    auto s = lstm_cell(row(label_embeddings_, static_cast<std::size_t>(label)), {prev.h, prev.c}, lstm_);
    return {s.h, s.c};
  }

  /// One decoding step. `prev_label` is kStartOfSequence at step 1, in which
  /// case `prev` (normally initial_state()) is used without an LSTM update.
  SlotStep step(const Tensor& h_i, const TagHistoryState& prev, int prev_label, const ForwardContext& ctx = {}) const {
    return step_projected(matmul(h_i, word_block()), prev, prev_label, ctx);
  }

  /// Teacher-forced logits [T, |L|]: step i conditions on the gold labels before it.
  Tensor logits_teacher_forced(const Tensor& h, std::span<const int> gold, const ForwardContext& ctx = {}) const {
    const std::size_t T = h.dim(0);
    if (gold.size() != T) throw DimensionError("gold labels do not align with the sequence");
    std::vector<Tensor> history;
    history.reserve(T);
    TagHistoryState state = initial_state();
    for (std::size_t t = 0; t < T; ++t) {
      if (t > 0) state = advance(state, gold[t - 1]);
      history.push_back(state.h);
    }
    Tensor pre = add(add(matmul(h, word_block()), matmul(concat_rows(history), tag_block())), hidden_b_);
    Tensor p = ctx.drop(tanh(pre));
    return add(matmul(p, out_w_), out_b_);
  }

  /// Greedy left-to-right decoding; each argmax is fed back into the tag LSTM.
  std::vector<int> decode(const Tensor& h, std::vector<Tensor>* step_logits = nullptr) const {
    const std::size_t T = h.dim(0);
    Tensor projected = matmul(h, word_block());
    std::vector<int> out(T);
    TagHistoryState state = initial_state();
    int prev = kStartOfSequence;
    for (std::size_t t = 0; t < T; ++t) {
      SlotStep s = step_projected(row(projected, t), state, prev, {});
      out[t] = argmax(s.logits.data(), 1);
      if (step_logits) step_logits->push_back(s.logits);
      state = s.state;
      prev = out[t];
    }
    return out;
  }

  std::size_t labels() const { return labels_; }

 private:
  Tensor word_block() const { return slice_rows(hidden_w_, 0, d_); }
  Tensor tag_block() const { return slice_rows(hidden_w_, d_, d_ + kTagStateSize); }

  SlotStep step_projected(const Tensor& projected_i, const TagHistoryState& prev, int prev_label,
                          const ForwardContext& ctx) const {
    TagHistoryState state = prev_label == kStartOfSequence ? prev : advance(prev, prev_label);
    Tensor pre = add(add(projected_i, matmul(state.h, tag_block())), hidden_b_);
    Tensor p = ctx.drop(tanh(pre));
    return {add(matmul(p, out_w_), out_b_), state};
  }

  std::size_t d_, labels_;
  Tensor label_embeddings_;
  LstmWeights lstm_;
  Tensor initial_;
  Tensor hidden_w_, hidden_b_, out_w_, out_b_;
};

}  // namespace slu
