// Acceptance runner: one PASS / FAIL / SKIP line per criterion, exit 1 on any FAIL.
// Pass criterion numbers as arguments to run a subset. `--xfail N` keeps a known,
// documented failure of criterion N from setting the exit code; it is still printed as FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "slu/commands.hpp"
#include "slu/encoders.hpp"
#include "slu/heads.hpp"
#include "slu/metrics.hpp"
#include "slu/model.hpp"
#include "slu/training.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace slu;
using namespace slu::testing;

namespace {

// Tolerances and budgets.
constexpr double kGradSuiteSeconds = 120.0;
constexpr std::size_t kGradSamplesPerTensor = 0;  // 0 checks every coordinate
constexpr int kGradDx = 8;
constexpr double kOverfitSeconds = 60.0;
constexpr int kOverfitEpochs = 200;
constexpr double kPermutationTolerance = 1e-12;
constexpr double kSnipsSpanF1 = 92.30, kSnipsIc = 97.57, kSnipsSpanTol = 1.5, kSnipsIcTol = 1.0;
constexpr double kAtisSpanF1 = 95.27, kAtisIc = 97.37, kAtisSpanTol = 1.5, kAtisIcTol = 1.5;
constexpr int kReproSeeds = 5;
constexpr double kRecurrenceGapPoints = 5.0;
constexpr int kLatencyRounds = 7;

enum class Status { pass, fail, skip };

struct Outcome {
  Status status;
  std::string detail;
};

Outcome pass(std::string d) { return {Status::pass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::fail, std::move(d)}; }
Outcome skip(std::string d) { return {Status::skip, std::move(d)}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

TrainConfig small_corpus_training(const TrainConfig& base) {
  TrainConfig t = base;
  t.lr = 1.0;
  t.batch_size = 4;
  t.dropout = 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(17);
  std::vector<std::string> failures;
  std::size_t checks = 0;
  auto expect = [&](const std::string& name, const GradCheckResult& r) {
    ++checks;
    if (!r.ok()) failures.push_back(name + " (" + r.worst + ", kinks " + std::to_string(r.kinks) + ")");
  };
  auto op = [&](const std::string& name, std::vector<Tensor> inputs, std::function<Tensor()> f) {
    expect(name, gradcheck(f, std::move(inputs)));
  };

  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), c = random_tensor({3, 4}, rng);
  Tensor v4 = random_tensor({4}, rng), v3 = random_tensor({3}, rng);
  op("matmul", {a, b}, [&] { return weighted_sum(matmul(a, b)); });
  op("matmul (vector)", {v3, a}, [&] { return weighted_sum(matmul(v3, a)); });
  op("transpose", {a}, [&] { return weighted_sum(transpose(a)); });
  op("add", {a, c}, [&] { return weighted_sum(add(a, c)); });
  op("add (broadcast)", {a, v4}, [&] { return weighted_sum(add(a, v4)); });
  op("mul", {a, c}, [&] { return weighted_sum(mul(a, c)); });
  op("scale", {a}, [&] { return weighted_sum(scale(a, -1.7)); });
  op("tanh", {a}, [&] { return weighted_sum(tanh(a)); });
  op("sigmoid", {a}, [&] { return weighted_sum(sigmoid(a)); });
  Tensor away = random_tensor({3, 4}, rng);
  for (auto& x : away.mutable_data()) x += x < 0.0 ? -0.1 : 0.1;
  op("relu", {away}, [&] { return weighted_sum(relu(away)); });
  op("sum", {a}, [&] { return scale(sum(a), 0.5); });
  Tensor n2 = random_tensor({3, 2}, rng);
  op("concat", {a, n2}, [&] { return weighted_sum(concat({a, n2})); });
  Tensor r1 = random_tensor({1, 4}, rng);
  op("concat_rows", {a, r1, v4}, [&] { return weighted_sum(concat_rows({a, r1, v4})); });
  op("slice_rows", {a}, [&] { return weighted_sum(slice_rows(a, 1, 3)); });
  op("row", {a}, [&] { return weighted_sum(row(a, 1)); });
  op("slice_cols", {a}, [&] { return weighted_sum(slice_cols(a, 1, 3)); });
  Tensor table = random_tensor({5, 3}, rng);
  std::vector<int> ids = {1, 4, 1, 0};
  op("embedding_lookup", {table}, [&] { return weighted_sum(embedding_lookup(table, ids)); });
  std::vector<int> gather = {0, 5, 5, 11, 2, 7};
  op("take", {a}, [&] { return weighted_sum(take(a, gather, {2, 3})); });
  std::vector<int> buckets = {0, 1, 1, 2, 2, 2, 0, 1, 0, 0, 2, 1};
  op("bucket_sum", {a}, [&] { return weighted_sum(bucket_sum(a, buckets, 3)); });
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0};
  op("softmax", {a}, [&] { return weighted_sum(softmax(a)); });
  op("softmax (masked)", {a}, [&] { return weighted_sum(softmax(a, mask)); });
  Tensor probs = random_tensor({3, 4}, rng, 0.1, 1.0);
  std::vector<int> targets = {2, kIgnoreIndex, 0};
  op("cross_entropy", {probs}, [&] { return cross_entropy(probs, targets); });
  std::vector<int> targets2 = {3, 1, kIgnoreIndex};
  std::vector<std::uint8_t> class_mask = {0, 1, 1, 1};
  op("softmax_cross_entropy", {a}, [&] { return softmax_cross_entropy(a, targets2); });
  op("softmax_cross_entropy (class mask)", {a}, [&] { return softmax_cross_entropy(a, targets2, class_mask); });
  Tensor x = random_tensor({6, 3}, rng), k = random_tensor({3, 3, 2}, rng), kb = random_tensor({2}, rng);
  op("conv1d_dilated (1)", {x, k, kb}, [&] { return weighted_sum(conv1d_dilated(x, k, kb, 1)); });
  op("conv1d_dilated (2)", {x, k, kb}, [&] { return weighted_sum(conv1d_dilated(x, k, kb, 2)); });
  op("dropout", {a}, [&] {
    Rng r(5);
    return weighted_sum(dropout(a, 0.4, r));
  });

  // Every preset model's joint loss on a padded two-utterance batch.
  Batch batch;
  batch.rows = 2;
  batch.width = 5;
  batch.tokens = {2, 3, 4, 5, 6, 7, 8, 9, 0, 0};
  batch.labels = {1, 2, 3, 1, 4, 4, 3, 2, 0, 0};
  batch.intents = {2, 0};
  batch.mask = {1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  std::size_t models = 0;
  for (const auto& enc : table1_encoders())
    for (const char* dec : {"independent", "label-recurrent"}) {
      ModelConfig cfg = load_preset(enc, dec).model;
      cfg.encoder.d_x = kGradDx;
      JointModel model(cfg, 12, 5, 3, 3);
      Rng pr(41 + models);
      randomize(model.parameters(), pr);
      expect(enc + "-" + dec,
             gradcheck_store([&] { return model.loss(batch); }, model.parameters(), kGradSamplesPerTensor));
      ++models;
    }

  const double secs = seconds_since(t0);
  const std::string summary =
      std::to_string(checks) + " checks (" + std::to_string(models) + " preset models), " + fmt(secs, 1) + " s";
  if (!failures.empty()) return fail(summary + "; first failure: " + failures.front());
  if (secs >= kGradSuiteSeconds) return fail(summary + " exceeds the " + fmt(kGradSuiteSeconds, 0) + " s budget");
  return pass(summary);
}

// ---------------------------------------------------------------------------
// 2. Relative position buckets

Outcome bucket_exactness() {
  struct Case {
    long dist;
    int bucket;
  };
  const std::vector<Case> cases = {{1, 1}, {2, 2}, {3, 2}, {4, 3}, {7, 3}, {8, 4}, {15, 4}, {16, 5}};
  std::size_t n = 0;
  for (long i : {0L, 3L, 11L})
    for (const auto& c : cases) {
      const int fwd = relative_bucket(i, i + c.dist), back = relative_bucket(i + c.dist, i);
      if (fwd != c.bucket || back != -c.bucket)
        return fail("|j-i| = " + std::to_string(c.dist) + " from i = " + std::to_string(i) + " gave " +
                    std::to_string(fwd) + " / " + std::to_string(back) + ", expected +-" + std::to_string(c.bucket));
      n += 2;
    }
  for (long i = 0; i < 30; ++i)
    for (long j = 0; j < 30; ++j) {
      if (i == j) continue;
      if (relative_bucket(i, j) != -relative_bucket(j, i)) return fail("not odd at (" + std::to_string(i) + ", " +
                                                                       std::to_string(j) + ")");
      ++n;
    }
  try {
    relative_bucket(4, 4);
    return fail("i == j did not raise");
  } catch (const IndexError&) {
  }
  return pass(std::to_string(n) + " exact comparisons");
}

// ---------------------------------------------------------------------------
// 3. Degenerate reduction and decoding oracle

void overwrite(ParameterStore& s, const std::string& path, const std::vector<double>& v) {
  auto dst = s.get(path).mutable_data();
  std::copy(v.begin(), v.end(), dst.begin());
}

Outcome degenerate_reduction() {
  const std::size_t d = 6, L = 5;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    ParameterStore is, rs;
    IndependentSlotHead ind(int(d), L, is, rng);
    LabelRecurrentSlotHead rec(int(d), L, 10, rs, rng);
    auto w5 = values(rs.get("slots.hidden.weight"));
    auto w4 = values(is.get("slots.hidden.weight"));
    std::copy(w4.begin(), w4.end(), w5.begin());
    std::fill(w5.begin() + long(d * d), w5.end(), 0.0);
    overwrite(rs, "slots.hidden.weight", w5);
    for (const char* p : {"slots.hidden.bias", "slots.output.weight", "slots.output.bias"})
      overwrite(rs, p, values(is.get(p)));

    const std::size_t T = 1 + rng.index(10);
    Tensor h = random_tensor({T, d}, rng, -2.0, 2.0, false);
    std::vector<int> gold(T);
    for (auto& g : gold) g = 1 + int(rng.index(L - 1));
    const auto zi = values(ind.logits(h));
    if (values(rec.logits_teacher_forced(h, gold)) != zi)
      return fail("teacher-forced logits differ at seed " + std::to_string(seed));
    std::vector<Tensor> steps;
    if (rec.decode(h, &steps) != ind.decode(h)) return fail("decoded labels differ at seed " + std::to_string(seed));
    for (std::size_t t = 0; t < T; ++t)
      if (values(steps[t]) != row_values(ind.logits(h), t))
        return fail("greedy step logits differ at seed " + std::to_string(seed));
  }

  std::size_t cases = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    Rng rng(seed);
    const std::size_t dd = 1 + rng.index(3), LL = 2 + rng.index(2), T = 1 + rng.index(4);
    ParameterStore store;
    LabelRecurrentSlotHead rec(int(dd), LL, 10, store, rng);
    randomize(store, rng, -2.0, 2.0);
    Tensor h = random_tensor({T, dd}, rng, -1.0, 1.0, false);
    RecurrentOracle oracle(store, dd, LL, 10);
    auto paths = stepwise_argmax_paths(oracle, h);
    if (paths.size() != 1)
      return fail("enumeration found " + std::to_string(paths.size()) + " consistent paths at seed " +
                  std::to_string(seed));
    if (rec.decode(h) != paths[0]) return fail("greedy decode disagrees with enumeration at seed " + std::to_string(seed));
    ++cases;
  }
  return pass("20 bit-exact reductions, " + std::to_string(cases) + " enumerated toy decoders");
}

// ---------------------------------------------------------------------------
// 4. Overfit smoke test

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus corpus = synth_corpus(20, 11);
  const Vocab vocab = Vocab::build(corpus);
  std::string detail;
  for (const char* dec : {"independent", "label-recurrent"}) {
    ExperimentConfig cfg = load_preset("cnn-5kernel-1l", dec);
    TrainConfig tc = small_corpus_training(cfg.train);
    tc.max_epochs = kOverfitEpochs;
    JointModel model(cfg.model, vocab.token_count(), vocab.label_count(), vocab.intent_count(), tc.seed);
    auto result = train(model, tc, corpus, corpus, vocab);
    const auto r = evaluate(model, vocab, corpus).report;
    detail += std::string(dec) + ": token acc " + fmt(100 * r.token_accuracy) + ", IC " + fmt(100 * r.ic_accuracy) +
              " (best epoch " + std::to_string(result.best_epoch) + "); ";
    if (r.token_accuracy != 1.0 || r.ic_accuracy != 1.0) return fail(detail);
  }
  const double secs = seconds_since(t0);
  detail += fmt(secs, 1) + " s";
  if (secs >= kOverfitSeconds) return fail(detail + " exceeds " + fmt(kOverfitSeconds, 0) + " s");
  return pass(detail);
}

// ---------------------------------------------------------------------------
// 5. Encoder behavioural contracts

struct BuiltEncoder {
  ParameterStore store;
  std::unique_ptr<Encoder> enc;
  explicit BuiltEncoder(const EncoderConfig& cfg, std::uint64_t seed = 1) {
    Rng rng(seed);
    enc = std::make_unique<Encoder>(cfg, store, rng);
  }
};

Outcome encoder_contracts() {
  Rng rng(23);
  std::size_t n_pad = 0;
  for (const auto& name : table1_encoders()) {
    EncoderConfig cfg = load_preset(name, "independent").model.encoder;
    cfg.d_x = kGradDx;
    BuiltEncoder b(cfg, 3);
    for (std::size_t n : {1, 4, 9}) {
      const std::size_t T = 12;
      Tensor x = random_tensor({n, std::size_t(kGradDx)}, rng, -1, 1, false);
      Tensor junk = random_tensor({T - n, std::size_t(kGradDx)}, rng, -5, 5, false);
      std::vector<std::uint8_t> mask(T, 0);
      std::fill_n(mask.begin(), n, 1);
      Tensor h = b.enc->encode(x), hp = b.enc->encode(concat_rows({x, junk}), mask);
      for (std::size_t t = 0; t < n; ++t)
        if (row_values(hp, t) != row_values(h, t)) return fail(name + ": pad content changed a real position");
      ++n_pad;
    }
  }

  // Model-level: extra pad columns leave the batch loss bit-identical.
  {
    ModelConfig mc = load_preset("cnn-5kernel-3l", "label-recurrent").model;
    mc.encoder.d_x = kGradDx;
    JointModel model(mc, 12, 5, 3, 2);
    Batch narrow;
    narrow.rows = 2;
    narrow.width = 3;
    narrow.tokens = {2, 3, 4, 5, 6, 0};
    narrow.labels = {1, 2, 3, 4, 4, 0};
    narrow.intents = {1, 2};
    narrow.mask = {1, 1, 1, 1, 1, 0};
    Batch wide = narrow;
    wide.width = 6;
    wide.tokens = {2, 3, 4, 0, 0, 0, 5, 6, 0, 0, 0, 0};
    wide.labels = {1, 2, 3, 0, 0, 0, 4, 4, 0, 0, 0, 0};
    wide.mask = {1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0};
    if (model.loss(narrow).item() != model.loss(wide).item()) return fail("batch loss depends on padding width");
  }

  std::size_t n_local = 0;
  for (const char* name : {"cnn-5kernel-1l", "cnn-5kernel-3l", "cnn-3kernel-4l"}) {
    EncoderConfig cfg = load_preset(name, "independent").model.encoder;
    cfg.d_x = kGradDx;
    BuiltEncoder b(cfg, 4);
    const std::size_t radius = std::size_t(b.enc->get<CnnEncoder>()->receptive_radius());
    const std::size_t T = cfg.max_len;
    Tensor x = random_tensor({T, std::size_t(kGradDx)}, rng, -1, 1, false);
    const Tensor base = b.enc->encode(x);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const std::size_t dist = i > j ? i - j : j - i;
        if (dist <= radius) continue;
        Tensor y = x.clone();
        for (std::size_t c = 0; c < std::size_t(kGradDx); ++c) y.mutable_data()[j * kGradDx + c] += 0.75;
        if (row_values(b.enc->encode(y), i) != row_values(base, i))
          return fail(std::string(name) + ": position " + std::to_string(i) + " moved under a perturbation " +
                      std::to_string(dist) + " away (radius " + std::to_string(radius) + ")");
        ++n_local;
      }
  }

  double worst = 0.0;
  for (const char* name : {"attn-1head-1l-no-pos", "attn-2head-3l"}) {
    EncoderConfig cfg = load_preset(name, "independent").model.encoder;
    cfg.d_x = kGradDx;
    cfg.relative_positions = false;
    BuiltEncoder b(cfg, 6);
    for (auto& v : b.store.get("encoder.positions").mutable_data()) v = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t T = 2 + rng.index(10);
      Tensor x = random_tensor({T, std::size_t(kGradDx)}, rng, -1, 1, false);
      std::vector<std::size_t> perm(T);
      for (std::size_t i = 0; i < T; ++i) perm[i] = i;
      rng.shuffle(perm);
      std::vector<Tensor> rows;
      for (auto p : perm) rows.push_back(row(x, p));
      Tensor hx = b.enc->encode(x), hp = b.enc->encode(concat_rows(rows));
      for (std::size_t i = 0; i < T; ++i) {
        const auto got = row_values(hp, i), want = row_values(hx, perm[i]);
        for (std::size_t c = 0; c < got.size(); ++c) worst = std::max(worst, std::abs(got[c] - want[c]));
      }
    }
  }
  const std::string detail = std::to_string(n_pad) + " pad cases, " + std::to_string(n_local) +
                             " out-of-radius perturbations, permutation max deviation " + [&] {
                               std::ostringstream os;
                               os << worst;
                               return os.str();
                             }();
  if (worst > kPermutationTolerance) return fail(detail);
  return pass(detail);
}

// ---------------------------------------------------------------------------
// 6, 7. Public-corpus reproduction

struct SeedRun {
  EvalReport dev, test;
};

SeedRun train_preset(const std::string& encoder, const std::string& root, std::uint64_t seed, bool lowercase,
                     std::size_t* vocab_size = nullptr) {
  ExperimentConfig cfg = load_preset(encoder, "label-recurrent");
  apply_data_root(cfg.data, root);
  cfg.data.lowercase = lowercase;
  cfg.train.seed = seed;
  const Datasets data = load_datasets(cfg.data);
  if (data.test.empty()) throw DataError(root + " has no test/ split");
  const Vocab vocab = Vocab::build(data.train);
  if (vocab_size) *vocab_size = vocab.token_count();
  JointModel model(cfg.model, vocab.token_count(), vocab.label_count(), vocab.intent_count(), seed);
  train(model, cfg.train, data.train, data.dev, vocab);
  return {evaluate(model, vocab, data.dev).report, evaluate(model, vocab, data.test).report};
}

Outcome reproduce(const char* env, const char* label, double span_target, double span_tol, double ic_target,
                  double ic_tol, bool lowercase, bool check_ordering) {
  const char* root = std::getenv(env);
  if (!root || !*root) return skip(std::string("set ") + env + " to the " + label + " three-file corpus root");
  double span = 0.0, ic = 0.0;
  std::string ordering_failure;
  std::size_t vocab_size = 0;
  for (int s = 1; s <= kReproSeeds; ++s) {
    const SeedRun cnn = train_preset("cnn-5kernel-3l", root, std::uint64_t(s), lowercase, &vocab_size);
    span += 100.0 * cnn.test.span_f1 / kReproSeeds;
    ic += 100.0 * cnn.test.ic_accuracy / kReproSeeds;
    std::cout << "  " << label << " seed " << s << ": test span F1 " << fmt(100 * cnn.test.span_f1) << ", IC "
              << fmt(100 * cnn.test.ic_accuracy) << std::endl;
    if (!check_ordering) continue;
    const double ff = train_preset("feed-forward", root, std::uint64_t(s), lowercase).dev.span_f1;
    const double attn = train_preset("attn-2head-3l", root, std::uint64_t(s), lowercase).dev.span_f1;
    const double lstm = train_preset("lstm-1l", root, std::uint64_t(s), lowercase).dev.span_f1;
    std::cout << "  " << label << " seed " << s << " dev SL: ff " << fmt(100 * ff) << ", attn " << fmt(100 * attn)
              << ", cnn " << fmt(100 * cnn.dev.span_f1) << ", lstm " << fmt(100 * lstm) << std::endl;
    if (!(ff < attn && attn < std::min(cnn.dev.span_f1, lstm)) && ordering_failure.empty())
      ordering_failure = "dev ordering broken at seed " + std::to_string(s);
  }
  const std::string detail = "mean span F1 " + fmt(span) + " (target " + fmt(span_target) + " +- " + fmt(span_tol, 1) +
                             "), IC " + fmt(ic) + " (target " + fmt(ic_target) + " +- " + fmt(ic_tol, 1) +
                             "), vocab " + std::to_string(vocab_size - 2);
  if (!ordering_failure.empty()) return fail(detail + "; " + ordering_failure);
  if (std::abs(span - span_target) > span_tol || std::abs(ic - ic_target) > ic_tol) return fail(detail);
  return pass(detail);
}

// ---------------------------------------------------------------------------
// 8. Label recurrence on long synthetic spans

Outcome recurrence_effect() {
  SynthOptions opts;
  opts.mean_span_length = 1.8;
  const Corpus train_c = synth_corpus(800, 101, opts), dev = synth_corpus(200, 102, opts),
               test = synth_corpus(500, 103, opts);
  const Vocab vocab = Vocab::build(train_c);
  auto f1 = [&](const std::string& enc, const char* dec) {
    ExperimentConfig cfg = load_preset(enc, dec);
    TrainConfig tc = small_corpus_training(cfg.train);
    tc.batch_size = 16;
    tc.max_epochs = 40;
    tc.patience = 10;
    JointModel model(cfg.model, vocab.token_count(), vocab.label_count(), vocab.intent_count(), tc.seed);
    train(model, tc, train_c, dev, vocab);
    return 100.0 * evaluate(model, vocab, test).report.token_f1;
  };
  const double ff_i = f1("feed-forward", "independent"), ff_r = f1("feed-forward", "label-recurrent");
  const double cnn_i = f1("cnn-5kernel-3l", "independent"), cnn_r = f1("cnn-5kernel-3l", "label-recurrent");
  const std::string detail = "feed-forward " + fmt(ff_i) + " -> " + fmt(ff_r) + ", cnn-5kernel-3l " + fmt(cnn_i) +
                             " -> " + fmt(cnn_r) + " token F1";
  if (ff_r - ff_i < kRecurrenceGapPoints || cnn_r < cnn_i) return fail(detail);
  return pass(detail);
}

// ---------------------------------------------------------------------------
// 9. Latency ordering

bool clearly_faster(const LatencyStats& a, const LatencyStats& b) {
  return a.mean_ms + a.stddev_ms < b.mean_ms - b.stddev_ms;
}

std::string show(const LatencyStats& s) { return fmt(s.mean_ms, 3) + "+-" + fmt(s.stddev_ms, 3); }

/// Informational only: rounds in which `a` beat `b` within the same round.
std::string rounds_won(const LatencyStats& a, const LatencyStats& b) {
  int won = 0;
  for (std::size_t r = 0; r < a.runs_ms.size(); ++r) won += a.runs_ms[r] < b.runs_ms[r];
  return std::to_string(won) + "/" + std::to_string(a.runs_ms.size());
}

Outcome speed_ordering() {
  const Corpus corpus = synth_corpus(300, 9);
  const Vocab vocab = Vocab::build(corpus);
  std::vector<std::vector<int>> inputs;
  for (const auto& u : corpus) inputs.push_back(token_ids(vocab, u.tokens, 30));
  std::vector<std::string> keys;
  std::vector<std::unique_ptr<JointModel>> models;
  for (const auto& enc : table1_encoders())
    for (const char* dec : {"independent", "label-recurrent"}) {
      keys.push_back(enc + "/" + dec);
      models.push_back(std::make_unique<JointModel>(load_preset(enc, dec).model, vocab.token_count(),
                                                    vocab.label_count(), vocab.intent_count(), 1));
    }
  // Rounds visit every model, alternating direction, so host speed drift hits all of them alike.
  std::map<std::string, LatencyStats> stats;
  for (int round = 0; round < kLatencyRounds; ++round)
    for (std::size_t n = 0; n < models.size(); ++n) {
      const std::size_t m = round % 2 ? models.size() - 1 - n : n;
      stats[keys[m]].runs_ms.push_back(bench_latency(*models[m], inputs, 3).mean_ms);
    }
  for (auto& [key, st] : stats) {
    for (double v : st.runs_ms) st.mean_ms += v / kLatencyRounds;
    for (double v : st.runs_ms) st.stddev_ms += (v - st.mean_ms) * (v - st.mean_ms) / (kLatencyRounds - 1);
    st.stddev_ms = std::sqrt(st.stddev_ms);
  }
  std::vector<std::string> broken;
  std::string detail;
  for (const auto& enc : table1_encoders()) {
    const auto& i = stats[enc + "/independent"];
    const auto& r = stats[enc + "/label-recurrent"];
    std::cout << "  " << std::left << std::setw(22) << enc << " indep " << show(i) << " ms, label-recurrent "
              << show(r) << " ms, indep faster in " << rounds_won(i, r) << " rounds" << std::endl;
    if (!clearly_faster(i, r)) broken.push_back(enc + " indep vs label-recurrent");
  }
  for (const char* dec : {"independent", "label-recurrent"}) {
    const auto& cnn = stats[std::string("cnn-5kernel-3l/") + dec];
    const auto& lstm = stats[std::string("lstm-2l/") + dec];
    std::cout << "  cnn-5kernel-3l vs lstm-2l (" << dec << "): " << show(cnn) << " vs " << show(lstm)
              << " ms, cnn faster in " << rounds_won(cnn, lstm) << " rounds" << std::endl;
    if (!clearly_faster(stats[std::string("cnn-5kernel-3l/") + dec], stats[std::string("lstm-2l/") + dec]))
      broken.push_back(std::string("cnn-5kernel-3l vs lstm-2l (") + dec + ")");
  }
  detail = "cnn-5kernel-3l " + show(stats["cnn-5kernel-3l/label-recurrent"]) + " vs lstm-2l " +
           show(stats["lstm-2l/label-recurrent"]) + " ms (label-recurrent), " + std::to_string(kLatencyRounds) +
           " interleaved runs each";
  if (!broken.empty())
    return fail(detail + "; " + std::to_string(broken.size()) + " overlapping pairs, first: " + broken.front());
  return pass(detail);
}

// ---------------------------------------------------------------------------
// 10. Metric oracles

std::string random_tag(Rng& rng, const std::vector<std::string>& types) {
  switch (rng.index(4)) {
    case 0:
    case 1: return "O";
    case 2: return "B-" + rng.pick(types);
    default: return "I-" + rng.pick(types);
  }
}

Outcome metric_oracles() {
  Rng rng(31337);
  const std::vector<std::string> types = {"a", "b", "c"};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(15);
    std::vector<std::string> g, p;
    for (std::size_t i = 0; i < n; ++i) {
      g.push_back(random_tag(rng, types));
      p.push_back(rng.index(3) == 0 ? g.back() : random_tag(rng, types));
    }
    const LabelSequences pred = {p}, gold = {g};
    const auto tc = token_counts(pred, gold), sc = span_counts(pred, gold);
    const auto to = token_oracle(pred, gold), so = span_oracle(pred, gold);
    if (long(tc.tp) != to.tp || long(tc.fp) != to.fp || long(tc.fn) != to.fn || token_f1(pred, gold) != to.f1())
      return fail("token counts disagree at trial " + std::to_string(trial));
    if (long(sc.tp) != so.tp || long(sc.fp) != so.fp || long(sc.fn) != so.fn || span_f1(pred, gold) != so.f1())
      return fail("span counts disagree at trial " + std::to_string(trial));
  }
  return pass("1000 random IOB pairs, exact agreement");
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "relative bucket exactness", bucket_exactness},
      {3, "degenerate reduction and decoding oracle", degenerate_reduction},
      {4, "overfit smoke test", overfit},
      {5, "encoder contracts", encoder_contracts},
      {6, "Snips reproduction",
       [] { return reproduce("SLU_SNIPS_DIR", "Snips", kSnipsSpanF1, kSnipsSpanTol, kSnipsIc, kSnipsIcTol, false, false); }},
      {7, "ATIS reproduction",
       [] { return reproduce("SLU_ATIS_DIR", "ATIS", kAtisSpanF1, kAtisSpanTol, kAtisIc, kAtisIcTol, true, true); }},
      {8, "label recurrence on long spans", recurrence_effect},
      {9, "latency ordering", speed_ordering},
      {10, "metric oracles", metric_oracles},
  };
  std::set<int> only, xfail;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--xfail" && i + 1 < argc) xfail.insert(std::atoi(argv[++i]));
    else only.insert(std::atoi(arg.c_str()));
  }

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    const bool expected = xfail.count(c.id) > 0;
    if (o.status == Status::fail && !expected) ++failures;
    std::cout << tag << " [" << c.id << "] " << c.name << ": " << o.detail << " (" << fmt(seconds_since(t0), 1)
              << " s)" << (o.status == Status::fail && expected ? " [expected failure, see README]" : "")
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
