#pragma once

// Joint model: embeddings -> encoder -> {pooling -> intent head, slot head}.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slu/data.hpp"
#include "slu/encoders.hpp"
#include "slu/heads.hpp"
#include "slu/ops.hpp"
#include "slu/parameters.hpp"

namespace slu {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderMode decoder = DecoderMode::label_recurrent;
  int d_l = 10;

  void validate() const {
    encoder.validate();
    if (d_l <= 0) throw ConfigError("d_l must be positive");
  }
};

/// Padded mini-batch. Row r holds length(r) real tokens followed by pads;
/// pad positions carry token id 0, label id 0 and mask 0.
struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<int> tokens;
  std::vector<int> labels;
  std::vector<int> intents;
  std::vector<std::uint8_t> mask;

  std::size_t length(std::size_t r) const {
    std::size_t n = 0;
    while (n < width && mask[r * width + n]) ++n;
    return n;
  }
  std::span<const int> row_tokens(std::size_t r) const { return {tokens.data() + r * width, length(r)}; }
  std::span<const int> row_labels(std::size_t r) const { return {labels.data() + r * width, length(r)}; }
};

struct Prediction {
  int intent = 0;
  std::vector<int> labels;
  Tensor pooling_weights;  // [T]
};

class JointModel {
 public:
  JointModel(const ModelConfig& cfg, std::size_t vocab_size, std::size_t label_count, std::size_t intent_count,
             std::uint64_t seed)
      : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    if (label_count < 2) throw ConfigError("need at least one slot label besides <pad>");
    if (intent_count < 1) throw ConfigError("need at least one intent");
    const auto d = std::size_t(cfg_.encoder.d_x);
    embeddings_ = params_.add("embeddings", {vocab_size, d}, Init::table, rng_);
    encoder_ = std::make_unique<Encoder>(cfg_.encoder, params_, rng_);
    pooling_ = std::make_unique<SentencePooling>(cfg_.encoder.d_x, params_, rng_);
    intent_ = std::make_unique<IntentHead>(cfg_.encoder.d_x, intent_count, params_, rng_);
    if (cfg_.decoder == DecoderMode::independent)
      independent_ = std::make_unique<IndependentSlotHead>(cfg_.encoder.d_x, label_count, params_, rng_);
    else
      recurrent_ = std::make_unique<LabelRecurrentSlotHead>(cfg_.encoder.d_x, label_count, std::size_t(cfg_.d_l),
                                                            params_, rng_);
    label_mask_ = label_class_mask(label_count);
  }

  JointModel(const JointModel&) = delete;
  JointModel& operator=(const JointModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  Encoder& encoder() { return *encoder_; }
  SentencePooling& pooling() { return *pooling_; }
  IndependentSlotHead* independent_head() { return independent_.get(); }
  LabelRecurrentSlotHead* recurrent_head() { return recurrent_.get(); }

  Tensor contextualize(std::span<const int> ids, const ForwardContext& ctx = {}) const {
    return encoder_->encode(embedding_lookup(embeddings_, ids), ctx);
  }

  /// Teacher-forced joint loss for one utterance:
  /// CE(intent) + mean over tokens of CE(slot label).
  Tensor utterance_loss(const Tensor& h, std::span<const int> gold_labels, int gold_intent,
                        const ForwardContext& ctx = {}) const {
    if (gold_labels.size() != h.dim(0))
      throw DataError("gold labels (" + std::to_string(gold_labels.size()) + ") do not align with " +
                      std::to_string(h.dim(0)) + " tokens");
    const int intent_target[] = {gold_intent};
    Tensor intent_loss = softmax_cross_entropy(intent_logits(h), intent_target);
    return add(intent_loss, softmax_cross_entropy(slot_logits(h, gold_labels, ctx), gold_labels, label_mask_));
  }

  /// Batch loss: mean intent CE over non-empty rows plus mean slot CE over all real tokens.
  Tensor loss(const Batch& batch, const ForwardContext& ctx = {}) const {
    std::vector<Tensor> intent_rows, slot_rows;
    std::vector<int> intent_targets, slot_targets;
    for (std::size_t r = 0; r < batch.rows; ++r) {
      auto ids = batch.row_tokens(r);
      if (ids.empty()) continue;
      auto gold = batch.row_labels(r);
      Tensor h = contextualize(ids, ctx);
      intent_rows.push_back(intent_logits(h));
      intent_targets.push_back(batch.intents[r]);
      slot_rows.push_back(slot_logits(h, gold, ctx));
      slot_targets.insert(slot_targets.end(), gold.begin(), gold.end());
    }
    if (intent_rows.empty()) return Tensor::scalar(0.0);
    return add(softmax_cross_entropy(concat_rows(intent_rows), intent_targets),
               softmax_cross_entropy(concat_rows(slot_rows), slot_targets, label_mask_));
  }

  /// Greedy inference on one (unpadded) utterance.
  Prediction predict(std::span<const int> ids) const {
    Tensor h = contextualize(ids);
    Pooled pooled = pooling_->pool(h);
    Tensor logits = intent_->logits(pooled.sentence);
    Prediction p;
    p.intent = argmax(logits.data());
    p.labels = independent_ ? independent_->decode(h) : recurrent_->decode(h);
    p.pooling_weights = pooled.weights;
    return p;
  }

  Tensor intent_logits(const Tensor& h) const { return intent_->logits(pooling_->pool(h).sentence); }

  Tensor slot_logits(const Tensor& h, std::span<const int> gold_labels, const ForwardContext& ctx = {}) const {
    return independent_ ? independent_->logits(h, ctx) : recurrent_->logits_teacher_forced(h, gold_labels, ctx);
  }

 private:
  ModelConfig cfg_;
  Rng rng_;
  ParameterStore params_;
  Tensor embeddings_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<SentencePooling> pooling_;
  std::unique_ptr<IntentHead> intent_;
  std::unique_ptr<IndependentSlotHead> independent_;
  std::unique_ptr<LabelRecurrentSlotHead> recurrent_;
  std::vector<std::uint8_t> label_mask_;
};

}  // namespace slu
