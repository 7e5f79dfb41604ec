#pragma once

// Adadelta, padded mini-batches, early stopping and the epoch loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "slu/data.hpp"
#include "slu/errors.hpp"
#include "slu/metrics.hpp"
#include "slu/model.hpp"
#include "slu/parameters.hpp"
#include "slu/rng.hpp"

namespace slu {

struct TrainConfig {
  double lr = 0.01;
  double rho = 0.95;
  double epsilon = 1e-6;
  double dropout = 0.3;
  int batch_size = 128;
  int max_len = 30;
  int patience = 30;
  int max_epochs = 300;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_len < 1) throw ConfigError("max_len must be at least 1");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  }
};

// ---------------------------------------------------------------------------

/// Adadelta (Zeiler 2012) with an extra global step scale `lr`:
///   E[g^2]  <- rho E[g^2] + (1 - rho) g^2
///   dx       = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
///   x       <- x + lr * dx
class Adadelta {
 public:
  struct Slot {
    std::vector<double> sq_grad;
    std::vector<double> sq_delta;
  };

  Adadelta(double lr, double rho, double epsilon) : lr_(lr), rho_(rho), eps_(epsilon) {}

  /// Applies one update from the accumulated gradients, then clears them.
  /// Missing gradients count as zero.
  void step(ParameterStore& params) {
    auto& entries = params.entries();
    if (slots_.size() != entries.size()) slots_.resize(entries.size());
    for (const auto& e : entries)
      for (double g : e.value.grad())
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + e.path + "'");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Tensor p = entries[i].value;
      auto& s = slots_[i];
      if (s.sq_grad.empty()) {
        s.sq_grad.assign(p.size(), 0.0);
        s.sq_delta.assign(p.size(), 0.0);
      }
      auto grad = p.grad();
      auto x = p.mutable_data();
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double g = grad.empty() ? 0.0 : grad[k];
        s.sq_grad[k] = rho_ * s.sq_grad[k] + (1.0 - rho_) * g * g;
        const double dx = -std::sqrt(s.sq_delta[k] + eps_) / std::sqrt(s.sq_grad[k] + eps_) * g;
        s.sq_delta[k] = rho_ * s.sq_delta[k] + (1.0 - rho_) * dx * dx;
        x[k] += lr_ * dx;
      }
    }
    params.zero_grad();
  }

  const std::vector<Slot>& slots() const { return slots_; }

 private:
  double lr_, rho_, eps_;
  std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------

struct EncodedUtterance {
  std::vector<int> tokens;
  std::vector<int> labels;
  int intent = 0;
};

/// Maps a training corpus onto vocab ids; labels and intents must be known.
inline std::vector<EncodedUtterance> encode_corpus(const Corpus& corpus, const Vocab& vocab) {
  std::vector<EncodedUtterance> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& u = corpus[i];
    validate(u);
    EncodedUtterance e;
    for (const auto& t : u.tokens) e.tokens.push_back(vocab.token_id(t));
    for (const auto& s : u.slots) {
      const int id = vocab.label_id(s);
      if (id < 0) throw DataError("utterance " + std::to_string(i + 1) + ": slot label '" + s + "' not in vocabulary");
      e.labels.push_back(id);
    }
    e.intent = vocab.intent_id(u.intent);
    if (e.intent < 0) throw DataError("utterance " + std::to_string(i + 1) + ": intent '" + u.intent + "' not in vocabulary");
    out.push_back(std::move(e));
  }
  return out;
}

struct BatchPlan {
  std::vector<Batch> batches;
  std::size_t clipped = 0;  // utterances longer than max_len
  std::size_t skipped = 0;  // empty utterances
};

/// Clip to max_len (labels in lockstep), drop empty utterances, optionally
/// shuffle, and pad each batch to its longest row.
inline BatchPlan make_batches(const std::vector<EncodedUtterance>& corpus, int batch_size, int max_len, Rng* shuffle) {
  if (corpus.empty()) throw DataError("cannot batch an empty corpus");
  if (batch_size < 1 || max_len < 1) throw ConfigError("batch_size and max_len must be positive");
  BatchPlan plan;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].tokens.empty()) {
      ++plan.skipped;
      continue;
    }
    if (corpus[i].tokens.size() > std::size_t(max_len)) ++plan.clipped;
    order.push_back(i);
  }
  if (shuffle) shuffle->shuffle(order);
  for (std::size_t b = 0; b < order.size(); b += std::size_t(batch_size)) {
    const std::size_t end = std::min(order.size(), b + std::size_t(batch_size));
    Batch batch;
    batch.rows = end - b;
    for (std::size_t k = b; k < end; ++k)
      batch.width = std::max(batch.width, std::min(corpus[order[k]].tokens.size(), std::size_t(max_len)));
    batch.tokens.assign(batch.rows * batch.width, Vocab::kPad);
    batch.labels.assign(batch.rows * batch.width, 0);
    batch.mask.assign(batch.rows * batch.width, 0);
    for (std::size_t k = b; k < end; ++k) {
      const auto& u = corpus[order[k]];
      const std::size_t r = k - b, n = std::min(u.tokens.size(), std::size_t(max_len));
      for (std::size_t t = 0; t < n; ++t) {
        batch.tokens[r * batch.width + t] = u.tokens[t];
        batch.labels[r * batch.width + t] = u.labels[t];
        batch.mask[r * batch.width + t] = 1;
      }
      batch.intents.push_back(u.intent);
    }
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

// ---------------------------------------------------------------------------

/// Stops after `patience` consecutive epochs without strict improvement.
class EarlyStopper {
 public:
  struct Decision {
    bool stop = false;
    int best_epoch = 0;
  };

  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be at least 1");
  }

  /// Feed the dev metric of the next epoch (epochs are 1-based).
  Decision observe(double metric) {
    ++epoch_;
    if (best_epoch_ == 0 || metric > best_) {
      best_ = metric;
      best_epoch_ = epoch_;
    }
    return {epoch_ - best_epoch_ >= patience_, best_epoch_};
  }

  int best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_; }
  bool improved_last() const { return best_epoch_ == epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_ = 0.0;
};

/// Average of dev IC accuracy and dev token-level slot F1.
inline double stopping_metric(const EvalReport& r) { return 0.5 * (r.ic_accuracy + r.token_f1); }

// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_ic_accuracy = 0.0;
  double dev_token_f1 = 0.0;
  double dev_span_f1 = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called right after an epoch that improved the dev metric (parameters are the new best).
  std::function<void(int epoch)> on_improvement;
};

struct TrainResult {
  int best_epoch = 0;
  int epochs_run = 0;
  double seconds_per_epoch = 0.0;  // mean training time, dev evaluation excluded
  std::vector<EpochRecord> history;
};

/// Runs epochs until early stopping or max_epochs and leaves the model at its
/// best-dev parameters. A non-finite loss aborts with NumericalError after
/// restoring the best parameters seen so far.
inline TrainResult train(JointModel& model, const TrainConfig& cfg, const Corpus& train_corpus, const Corpus& dev,
                         const Vocab& vocab, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (dev.empty()) throw DataError("training needs a non-empty dev set");
  const auto encoded = encode_corpus(train_corpus, vocab);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Adadelta opt(cfg.lr, cfg.rho, cfg.epsilon);
  EarlyStopper stopper(cfg.patience);
  auto& params = model.parameters();
  auto best = params.snapshot();
  TrainResult result;
  double train_seconds = 0.0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchPlan plan = make_batches(encoded, cfg.batch_size, cfg.max_len, &rng);
    double loss_sum = 0.0;
    for (const auto& batch : plan.batches) {
      GradientTape tape;
      Tensor loss;
      {
        auto rec = tape.record();
        loss = model.loss(batch, ForwardContext{true, cfg.dropout, &rng});
      }
      if (!std::isfinite(loss.item())) {
        params.restore(best);
        throw NumericalError("training loss became non-finite in epoch " + std::to_string(epoch) +
                             "; parameters restored to epoch " + std::to_string(stopper.best_epoch()));
      }
      tape.backward(loss);
      opt.step(params);
      loss_sum += loss.item();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    train_seconds += secs;

    const EvalReport dev_report = evaluate(model, vocab, dev).report;
    EpochRecord rec{epoch, loss_sum / double(plan.batches.size()), dev_report.ic_accuracy, dev_report.token_f1,
                    dev_report.span_f1, secs};
    result.history.push_back(rec);
    result.epochs_run = epoch;
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const auto decision = stopper.observe(stopping_metric(dev_report));
    if (stopper.improved_last()) {
      best = params.snapshot();
      if (hooks.on_improvement) hooks.on_improvement(epoch);
    }
    if (decision.stop) break;
  }
  params.restore(best);
  result.best_epoch = stopper.best_epoch();
  result.seconds_per_epoch = train_seconds / double(result.epochs_run);
  return result;
}

}  // namespace slu
