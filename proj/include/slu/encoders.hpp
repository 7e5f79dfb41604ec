#pragma once

// Word contextualizers: map embedded words x[T, d_x] to h[T, d_x].

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "slu/errors.hpp"
#include "slu/ops.hpp"
#include "slu/parameters.hpp"

namespace slu {

enum class EncoderKind { feed_forward, cnn, self_attention, bilstm };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::feed_forward: return "feed_forward";
    case EncoderKind::cnn: return "cnn";
    case EncoderKind::self_attention: return "self_attention";
    case EncoderKind::bilstm: return "bilstm";
  }
  return "?";
}

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "feed_forward") return EncoderKind::feed_forward;
  if (s == "cnn") return EncoderKind::cnn;
  if (s == "self_attention") return EncoderKind::self_attention;
  if (s == "bilstm") return EncoderKind::bilstm;
  throw ConfigError("unknown encoder kind '" + s + "' (expected feed_forward, cnn, self_attention or bilstm)");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::cnn;
  int layers = 1;
  int kernel_width = 5;
  int heads = 1;
  bool relative_positions = true;
  int d_x = 70;
  int max_len = 30;

  void validate() const {
    if (d_x <= 0) throw ConfigError("d_x must be positive");
    if (max_len <= 0) throw ConfigError("max_len must be positive");
    if (layers <= 0 && kind != EncoderKind::feed_forward) throw ConfigError("layers must be positive");
    if (kind == EncoderKind::cnn && (kernel_width <= 0 || kernel_width % 2 == 0))
      throw ConfigError("kernel_width must be an odd positive integer, got " + std::to_string(kernel_width));
    if (kind == EncoderKind::self_attention && (heads <= 0 || d_x % heads != 0))
      throw ConfigError("heads (" + std::to_string(heads) + ") must divide d_x (" + std::to_string(d_x) + ")");
    if (kind == EncoderKind::bilstm && d_x % 2 != 0)
      throw ConfigError("bilstm needs an even d_x to split directions, got " + std::to_string(d_x));
  }
};

/// Training-time switches shared by every forward pass.
struct ForwardContext {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!train || dropout == 0.0) return x;
    if (rng == nullptr) throw ConfigError("dropout requested without an rng");
    return slu::dropout(x, dropout, *rng);
  }
};

// ---------------------------------------------------------------------------
// Relative position buckets

/// Signed bucket of the offset j - i: sign(j-i) * (floor(log2|j-i|) + 1).
inline int relative_bucket(long i, long j) {
  if (i == j) throw IndexError("relative_bucket: identity position has no bucket (i == j == " + std::to_string(i) + ")");
  const unsigned long dist = static_cast<unsigned long>(j > i ? j - i : i - j);
  const int magnitude = std::bit_width(dist);  // floor(log2 dist) + 1
  return j > i ? magnitude : -magnitude;
}

/// Number of positive buckets B needed for offsets below max_len.
inline int positive_buckets(int max_len) {
  return max_len <= 1 ? 0 : std::bit_width(static_cast<unsigned long>(max_len - 1));
}

namespace detail {

// Offsets into a [2B+1] table for every (i, j); the diagonal points at the unused centre row.
inline std::vector<int> bucket_table(std::size_t T, int B) {
  std::vector<int> idx(T * T, B);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j)
      if (i != j) idx[i * T + j] = relative_bucket(static_cast<long>(i), static_cast<long>(j)) + B;
  return idx;
}

inline const double kSqrtHalf = std::sqrt(0.5);

inline Tensor residual_relu(const Tensor& update, const Tensor& input) {
  return relu(scale(add(update, input), kSqrtHalf));
}

inline void check_input(const Tensor& x, int d_x) {
  if (x.rank() != 2 || x.dim(1) != static_cast<std::size_t>(d_x))
    throw DimensionError("encoder input must be [T, " + std::to_string(d_x) + "], got " + shape_str(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// h = x + a[0:T], one learned vector per absolute position.
class FeedForwardEncoder {
 public:
  FeedForwardEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng)
      : cfg_(cfg),
        positions_(store.add("encoder.positions", {std::size_t(cfg.max_len), std::size_t(cfg.d_x)}, Init::table, rng)) {}

  Tensor encode(const Tensor& x, const ForwardContext& ctx) const {
    detail::check_input(x, cfg_.d_x);
    return add_positions(ctx.drop(x), positions_, cfg_.max_len);
  }

  static Tensor add_positions(const Tensor& x, const Tensor& table, int max_len) {
    const std::size_t T = x.dim(0);
    if (T > static_cast<std::size_t>(max_len))
      throw DimensionError("sequence of length " + std::to_string(T) + " exceeds max_len " + std::to_string(max_len));
    return add(x, slice_rows(table, 0, T));
  }

 private:
  EncoderConfig cfg_;
  Tensor positions_;
};

/// Stacked dilated convolutions; layer l (0-based) uses dilation 2^l and
/// h = relu(sqrt(.5) * (conv(x) + x)).
class CnnEncoder {
 public:
  CnnEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    const auto d = std::size_t(cfg.d_x), w = std::size_t(cfg.kernel_width);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      kernels_.push_back(store.add(p + "kernel", {w, d, d}, Init::glorot, rng));
      biases_.push_back(store.add(p + "bias", {d}, Init::zeros, rng));
    }
  }

  Tensor encode(const Tensor& x, const ForwardContext& ctx) const {
    detail::check_input(x, cfg_.d_x);
    Tensor h = x;
    for (std::size_t l = 0; l < kernels_.size(); ++l) {
      Tensor in = ctx.drop(h);
      h = detail::residual_relu(conv1d_dilated(in, kernels_[l], biases_[l], std::size_t{1} << l), in);
    }
    return h;
  }

  /// Farthest token offset that can influence an output position.
  int receptive_radius() const { return (cfg_.kernel_width - 1) / 2 * ((1 << cfg_.layers) - 1); }

 private:
  EncoderConfig cfg_;
  std::vector<Tensor> kernels_, biases_;
};

/// Bilinear self-attention with the identity masked out, optional bucketed
/// relative positions, and head outputs concatenated without a mixing matrix.
class SelfAttentionEncoder {
 public:
  SelfAttentionEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng)
      : cfg_(cfg), buckets_(positive_buckets(cfg.max_len)) {
    const auto d = std::size_t(cfg.d_x), k = std::size_t(cfg.heads), dk = d / k;
    positions_ = store.add("encoder.positions", {std::size_t(cfg.max_len), d}, Init::table, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      Layer layer;
      for (std::size_t h = 0; h < k; ++h) {
        const std::string hp = k == 1 ? p : p + "head" + std::to_string(h) + ".";
        if (k > 1) layer.projections.push_back(store.add(hp + "projection", {d, dk}, Init::glorot, rng));
        layer.bilinear.push_back(store.add(hp + "bilinear", {dk, dk}, Init::glorot, rng));
      }
      if (cfg.relative_positions) {
        const std::size_t rows = 2 * std::size_t(buckets_) + 1;
        layer.rel_vectors = store.add(p + "relative_vectors", {rows, d}, Init::table, rng);
        layer.rel_biases = store.add(p + "relative_biases", {rows}, Init::zeros, rng);
      }
      layers_.push_back(std::move(layer));
    }
  }

  /// `weights`, when given, receives one [T, T] attention matrix per layer and head.
  Tensor encode(const Tensor& x, const ForwardContext& ctx, std::vector<Tensor>* weights = nullptr) const {
    detail::check_input(x, cfg_.d_x);
    Tensor h = FeedForwardEncoder::add_positions(x, positions_, cfg_.max_len);
    const std::size_t T = h.dim(0);
    std::vector<std::uint8_t> mask(T * T, 1);
    for (std::size_t i = 0; i < T; ++i) mask[i * T + i] = 0;
    const std::vector<int> idx = cfg_.relative_positions ? detail::bucket_table(T, buckets_) : std::vector<int>{};
    for (const auto& layer : layers_) h = layer_forward(layer, ctx.drop(h), mask, idx, weights);
    return h;
  }

 private:
  struct Layer {
    std::vector<Tensor> projections;  // empty for a single head
    std::vector<Tensor> bilinear;
    Tensor rel_vectors, rel_biases;
  };

  Tensor layer_forward(const Layer& layer, const Tensor& x, std::span<const std::uint8_t> mask,
                       const std::vector<int>& idx, std::vector<Tensor>* weights) const {
    const std::size_t T = x.dim(0);
    if (T == 1) return relu(scale(x, detail::kSqrtHalf));  // nothing to attend to
    const std::size_t heads = layer.bilinear.size(), dk = x.dim(1) / heads;
    const std::size_t nb = 2 * std::size_t(buckets_) + 1;
    std::vector<Tensor> contexts;
    for (std::size_t k = 0; k < heads; ++k) {
      Tensor xk = heads == 1 ? x : matmul(x, layer.projections[k]);
      Tensor scores = matmul(matmul(xk, layer.bilinear[k]), transpose(xk));
      if (cfg_.relative_positions) scores = add(scores, take(layer.rel_biases, idx, {T, T}));
      Tensor alpha = softmax(scores, mask);
      if (weights) weights->push_back(alpha);
      Tensor c = matmul(alpha, xk);
      if (cfg_.relative_positions) {
        Tensor v = heads == 1 ? layer.rel_vectors : slice_cols(layer.rel_vectors, k * dk, (k + 1) * dk);
        c = add(c, matmul(bucket_sum(alpha, idx, nb), v));
      }
      contexts.push_back(std::move(c));
    }
    Tensor c = heads == 1 ? contexts.front() : concat(contexts);
    return detail::residual_relu(c, x);
  }

  EncoderConfig cfg_;
  int buckets_;
  Tensor positions_;
  std::vector<Layer> layers_;
};

/// Stacked bidirectional LSTM, d_x/2 units per direction.
class BiLstmEncoder {
 public:
  BiLstmEncoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg) {
    const auto d = std::size_t(cfg.d_x), h = d / 2;
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      auto make = [&](const std::string& dir) {
        return LstmWeights{store.add(p + dir + ".input", {d, 4 * h}, Init::glorot, rng),
                           store.add(p + dir + ".recurrent", {h, 4 * h}, Init::glorot, rng),
                           store.add(p + dir + ".bias", {4 * h}, Init::zeros, rng)};
      };
      forward_.push_back(make("forward"));
      backward_.push_back(make("backward"));
    }
  }

  Tensor encode(const Tensor& x, const ForwardContext& ctx) const {
    detail::check_input(x, cfg_.d_x);
    Tensor h = x;
    for (std::size_t l = 0; l < forward_.size(); ++l) {
      Tensor in = ctx.drop(h);
      h = concat({run(in, forward_[l], false), run(in, backward_[l], true)});
    }
    return h;
  }

  // Tests tie the two directions together through these.
  std::vector<LstmWeights>& forward_weights() { return forward_; }
  std::vector<LstmWeights>& backward_weights() { return backward_; }

 private:
  static Tensor run(const Tensor& x, const LstmWeights& w, bool reverse) {
    const std::size_t T = x.dim(0), hd = w.hidden();
    LstmState state{Tensor::zeros({hd}), Tensor::zeros({hd})};
    std::vector<Tensor> outputs(T);
    for (std::size_t s = 0; s < T; ++s) {
      const std::size_t t = reverse ? T - 1 - s : s;
      state = lstm_cell(row(x, t), state, w);
      outputs[t] = state.h;
    }
    return concat_rows(outputs);
  }

  EncoderConfig cfg_;
  std::vector<LstmWeights> forward_, backward_;
};

// ---------------------------------------------------------------------------

/// Type-erased encoder selected by EncoderConfig::kind.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, ParameterStore& store, Rng& rng) : cfg_(cfg), impl_(make(cfg, store, rng)) {}

  const EncoderConfig& config() const { return cfg_; }

  /// Encode an unpadded sequence.
  Tensor encode(const Tensor& x, const ForwardContext& ctx = {}) const {
    return std::visit([&](const auto& e) { return e.encode(x, ctx); }, impl_);
  }

  /// Encode a padded sequence. `mask` marks real tokens and must be a prefix;
  /// pad rows of the result are zero and real rows do not depend on pads.
  Tensor encode(const Tensor& x, std::span<const std::uint8_t> mask, const ForwardContext& ctx = {}) const {
    detail::check_input(x, cfg_.d_x);
    const std::size_t T = x.dim(0);
    if (mask.size() != T) throw DimensionError("mask length does not match sequence length");
    std::size_t n = 0;
    while (n < T && mask[n]) ++n;
    for (std::size_t t = n; t < T; ++t)
      if (mask[t]) throw DimensionError("mask must mark a prefix of real tokens");
    if (n == 0) return Tensor::zeros(x.shape());
    if (n == T) return encode(x, ctx);
    Tensor h = encode(slice_rows(x, 0, n), ctx);
    return concat_rows({h, Tensor::zeros({T - n, x.dim(1)})});
  }

  template <typename T>
  T* get() {
    return std::get_if<T>(&impl_);
  }

 private:
  using Impl = std::variant<FeedForwardEncoder, CnnEncoder, SelfAttentionEncoder, BiLstmEncoder>;

  static Impl make(const EncoderConfig& cfg, ParameterStore& store, Rng& rng) {
    cfg.validate();
    switch (cfg.kind) {
      case EncoderKind::feed_forward: return FeedForwardEncoder(cfg, store, rng);
      case EncoderKind::cnn: return CnnEncoder(cfg, store, rng);
      case EncoderKind::self_attention: return SelfAttentionEncoder(cfg, store, rng);
      case EncoderKind::bilstm: return BiLstmEncoder(cfg, store, rng);
    }
    throw ConfigError("unknown encoder kind");
  }

  EncoderConfig cfg_;
  Impl impl_;
};

}  // namespace slu
