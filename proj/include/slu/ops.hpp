#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is recording and some input requires a gradient, pushes a
// closure that accumulates into the inputs' gradient buffers.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "slu/errors.hpp"
#include "slu/rng.hpp"
#include "slu/tensor.hpp"

namespace slu {

/// Target value that excludes a row from a cross-entropy mean (pad positions).
inline constexpr int kIgnoreIndex = -1;

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (GradientTape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename F>
void record(F&& step) {
  GradientTape::active()->push(std::forward<F>(step));
}

inline bool wants(const NodePtr& n) { return n->requires_grad; }

// out[m,n] += a[m,k] * b[k,n]
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m,k] += g[m,n] * b[k,n]^T
inline void gemm_acc_bt(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      out[i * k + p] += acc;
    }
  }
}

// out[k,n] += a[m,k]^T * g[m,n]
inline void gemm_acc_at(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  const bool rg = any_requires_grad({&x});
  Tensor y(x.shape(), std::move(out), rg);
  if (rg) {
    record([xn = x.node(), yn = y.node(), deriv] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->value.size(); ++i)
        xn->grad[i] += yn->grad[i] * deriv(xn->value[i], yn->value[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k]·[k,n] -> [m,n]. A rank-1 left operand [k] yields [n]; a rank-1 right
/// operand [k] (matrix-vector product) yields [m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if ((b.rank() != 1 && b.rank() != 2) || (a.rank() != 1 && a.rank() != 2) ||
      (a.rank() == 1 && b.rank() == 1) || a.shape().back() != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t k = b.dim(0), n = b.rank() == 2 ? b.dim(1) : 1;
  const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  Shape shape = b.rank() == 1 ? Shape{m} : a.rank() == 2 ? Shape{m, n} : Shape{n};
  const bool rg = detail::any_requires_grad({&a, &b});
  Tensor y(std::move(shape), std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
      if (yn->grad.empty()) return;
      if (detail::wants(an)) {
        an->ensure_grad();
        detail::gemm_acc_bt(yn->grad.data(), bn->value.data(), an->grad.data(), m, k, n);
      }
      if (detail::wants(bn)) {
        bn->ensure_grad();
        detail::gemm_acc_at(an->value.data(), yn->grad.data(), bn->grad.data(), m, k, n);
      }
    });
  }
  return y;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const bool rg = detail::any_requires_grad({&a});
  Tensor y({n, m}, std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), yn = y.node(), m, n] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += yn->grad[j * m + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

/// Same-shape sum, or a rank-1 `b` broadcast over the rows of `a`.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bcast = !same && b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0);
  if (!same && !bcast)
    throw DimensionError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t n = b.size();
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  const bool rg = detail::any_requires_grad({&a, &b});
  Tensor y(a.shape(), std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), bn = b.node(), yn = y.node(), n] {
      if (yn->grad.empty()) return;
      if (detail::wants(an)) {
        an->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (detail::wants(bn)) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i % n] += yn->grad[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool rg = detail::any_requires_grad({&a, &b});
  Tensor y(a.shape(), std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      if (detail::wants(an)) {
        an->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * bn->value[i];
      }
      if (detail::wants(bn)) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] += yn->grad[i] * an->value[i];
      }
    });
  }
  return y;
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const bool rg = detail::any_requires_grad({&a});
  Tensor y = Tensor::scalar(s, rg);
  if (rg) {
    detail::record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (double& g : an->grad) g += yn->grad[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Concatenate along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape lead(first.begin(), first.end() - 1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw DimensionError("concat: leading dimensions differ: " + shape_str(first) + " vs " +
                           shape_str(p.shape()));
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    auto pv = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * w, w, out.data() + r * total + off);
    offsets.push_back(off);
    off += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  bool rg = false;
  for (const auto& p : parts) rg = rg || detail::any_requires_grad({&p});
  Tensor y(std::move(shape), std::move(out), rg);
  if (rg) {
    std::vector<detail::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::record([nodes, offsets, yn = y.node(), rows, total] {
      if (yn->grad.empty()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        auto& pn = nodes[k];
        if (!detail::wants(pn)) continue;
        pn->ensure_grad();
        const std::size_t w = pn->shape.back();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) pn->grad[r * w + c] += yn->grad[r * total + offsets[k] + c];
      }
    });
  }
  return y;
}

/// Concatenate matrices (or stack vectors) along axis 0. Rank-1 parts become rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.shape().back() != cols)
      throw DimensionError("concat_rows: incompatible part " + shape_str(p.shape()));
    rows += p.size() / cols;
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  bool rg = false;
  for (const auto& p : parts) rg = rg || detail::any_requires_grad({&p});
  Tensor y({rows, cols}, std::move(out), rg);
  if (rg) {
    std::vector<detail::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::record([nodes, yn = y.node()] {
      if (yn->grad.empty()) return;
      std::size_t off = 0;
      for (auto& pn : nodes) {
        const std::size_t n = pn->value.size();
        if (detail::wants(pn)) {
          pn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) pn->grad[i] += yn->grad[off + i];
        }
        off += n;
      }
    });
  }
  return y;
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.dim(0))
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + shape_str(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.data().begin() + begin * cols, a.data().begin() + end * cols);
  const bool rg = detail::any_requires_grad({&a});
  Tensor y({end - begin, cols}, std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), yn = y.node(), off = begin * cols] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[off + i] += yn->grad[i];
    });
  }
  return y;
}

/// Row `i` of a matrix as a vector.
inline Tensor row(const Tensor& a, std::size_t i) {
  if (a.rank() != 2 || i >= a.dim(0))
    throw IndexError("row " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<double> out(a.data().begin() + i * cols, a.data().begin() + (i + 1) * cols);
  const bool rg = detail::any_requires_grad({&a});
  Tensor y({cols}, std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), yn = y.node(), off = i * cols] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t c = 0; c < yn->grad.size(); ++c) an->grad[off + c] += yn->grad[c];
    });
  }
  return y;
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.dim(1))
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
  std::vector<double> out(rows * w);
  auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * cols + begin, w, out.data() + r * w);
  const bool rg = detail::any_requires_grad({&a});
  Tensor y({rows, w}, std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), yn = y.node(), rows, cols, w, begin] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) an->grad[r * cols + begin + c] += yn->grad[r * w + c];
    });
  }
  return y;
}

/// Rows of `table` selected by `ids` -> [ids.size(), d].
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be a matrix");
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id sequence");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto tv = table.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab)
      throw IndexError("embedding_lookup: id " + std::to_string(ids[t]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    std::copy_n(tv.data() + ids[t] * d, d, out.data() + t * d);
  }
  const bool rg = detail::any_requires_grad({&table});
  Tensor y({ids.size(), d}, std::move(out), rg);
  if (rg) {
    detail::record([tn = table.node(), yn = y.node(), idv = std::vector<int>(ids.begin(), ids.end()), d] {
      if (yn->grad.empty()) return;
      tn->ensure_grad();
      for (std::size_t t = 0; t < idv.size(); ++t)
        for (std::size_t c = 0; c < d; ++c) tn->grad[idv[t] * d + c] += yn->grad[t * d + c];
    });
  }
  return y;
}

/// Gather entries of a flat tensor: out.flat[k] = source.flat[index[k]].
inline Tensor take(const Tensor& source, std::span<const int> index, Shape shape) {
  if (shape_numel(shape) != index.size()) throw DimensionError("take: index count does not match shape");
  std::vector<double> out(index.size());
  auto sv = source.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || static_cast<std::size_t>(index[k]) >= sv.size())
      throw IndexError("take: index " + std::to_string(index[k]) + " out of range");
    out[k] = sv[index[k]];
  }
  const bool rg = detail::any_requires_grad({&source});
  Tensor y(std::move(shape), std::move(out), rg);
  if (rg) {
    detail::record([sn = source.node(), yn = y.node(), idx = std::vector<int>(index.begin(), index.end())] {
      if (yn->grad.empty()) return;
      sn->ensure_grad();
      for (std::size_t k = 0; k < idx.size(); ++k) sn->grad[idx[k]] += yn->grad[k];
    });
  }
  return y;
}

/// out[r, b] = sum of weights[r, c] over columns c with index[r, c] == b.
inline Tensor bucket_sum(const Tensor& weights, std::span<const int> index, std::size_t buckets) {
  if (weights.rank() != 2 || index.size() != weights.size())
    throw DimensionError("bucket_sum: index must match " + shape_str(weights.shape()));
  const std::size_t rows = weights.dim(0), cols = weights.dim(1);
  std::vector<double> out(rows * buckets, 0.0);
  auto wv = weights.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const int b = index[r * cols + c];
      if (b < 0 || static_cast<std::size_t>(b) >= buckets)
        throw IndexError("bucket_sum: bucket " + std::to_string(b) + " out of range");
      out[r * buckets + b] += wv[r * cols + c];
    }
  const bool rg = detail::any_requires_grad({&weights});
  Tensor y({rows, buckets}, std::move(out), rg);
  if (rg) {
    detail::record([wn = weights.node(), yn = y.node(), idx = std::vector<int>(index.begin(), index.end()),
                    rows, cols, buckets] {
      if (yn->grad.empty()) return;
      wn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) wn->grad[r * cols + c] += yn->grad[r * buckets + idx[r * cols + c]];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and losses

/// Softmax over the last axis. `mask` (same element count, nonzero = keep) is optional;
/// masked entries come out exactly 0.
inline Tensor softmax(const Tensor& x, std::span<const std::uint8_t> mask = {}) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  if (!mask.empty() && mask.size() != x.size())
    throw DimensionError("softmax: mask has " + std::to_string(mask.size()) + " entries for " +
                         shape_str(x.shape()));
  auto xv = x.data();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double* yr = out.data() + r * n;
    auto keep = [&](std::size_t j) { return mask.empty() || mask[r * n + j] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) {
        mx = std::max(mx, xr[j]);
        any = true;
      }
    if (!any) throw DegenerateMaskError("softmax: row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) {
        yr[j] = std::exp(xr[j] - mx);
        z += yr[j];
      }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  const bool rg = detail::any_requires_grad({&x});
  Tensor y(x.shape(), std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), yn = y.node(), rows, n] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = yn->value.data() + r * n;
        const double* gr = yn->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < n; ++j) xn->grad[r * n + j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return y;
}

/// Mean over rows with target != kIgnoreIndex of -log probs[row, target].
inline Tensor cross_entropy(const Tensor& probs, std::span<const int> targets) {
  const std::size_t n = probs.shape().back();
  const std::size_t rows = probs.size() / n;
  if (targets.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  auto pv = probs.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n)
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                       std::to_string(n) + " classes");
    total -= std::log(pv[r * n + targets[r]]);
    ++counted;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  const bool rg = counted > 0 && detail::any_requires_grad({&probs});
  Tensor y = Tensor::scalar(loss, rg);
  if (rg) {
    detail::record([pn = probs.node(), yn = y.node(), tv = std::vector<int>(targets.begin(), targets.end()),
                    n, counted] {
      if (yn->grad.empty()) return;
      pn->ensure_grad();
      for (std::size_t r = 0; r < tv.size(); ++r) {
        if (tv[r] == kIgnoreIndex) continue;
        const std::size_t k = r * n + tv[r];
        pn->grad[k] -= yn->grad[0] / (pn->value[k] * static_cast<double>(counted));
      }
    });
  }
  return y;
}

/// Fused log-softmax + cross-entropy on logits, numerically safe. `class_mask`
/// (length = classes, nonzero = allowed) excludes classes such as the pad label.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> class_mask = {}) {
  const std::size_t n = logits.shape().back();
  const std::size_t rows = logits.size() / n;
  if (targets.size() != rows)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  if (!class_mask.empty() && class_mask.size() != n)
    throw DimensionError("softmax_cross_entropy: class mask length mismatch");
  auto allowed = [&](std::size_t j) { return class_mask.empty() || class_mask[j] != 0; };
  auto lv = logits.data();
  std::vector<double> probs(logits.size(), 0.0);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= n || !allowed(targets[r]))
      throw IndexError("softmax_cross_entropy: invalid target " + std::to_string(targets[r]));
    const double* xr = lv.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(j)) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(j)) {
        probs[r * n + j] = std::exp(xr[j] - mx);
        z += probs[r * n + j];
      }
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= z;
    total -= (xr[targets[r]] - mx) - std::log(z);
    ++counted;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  const bool rg = counted > 0 && detail::any_requires_grad({&logits});
  Tensor y = Tensor::scalar(loss, rg);
  if (rg) {
    detail::record([ln = logits.node(), yn = y.node(), tv = std::vector<int>(targets.begin(), targets.end()),
                    probs = std::move(probs), n, counted] {
      if (yn->grad.empty()) return;
      ln->ensure_grad();
      const double g = yn->grad[0] / static_cast<double>(counted);
      for (std::size_t r = 0; r < tv.size(); ++r) {
        if (tv[r] == kIgnoreIndex) continue;
        for (std::size_t j = 0; j < n; ++j) ln->grad[r * n + j] += g * probs[r * n + j];
        ln->grad[r * n + tv[r]] -= g;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution

/// Same-length dilated 1-D convolution over time.
/// x: [T, d], kernel: [w, d, f] with odd w, bias: [f] -> [T, f].
/// out[t] = bias + sum_j kernel[j]^T x[t + (j - (w-1)/2) * dilation]; out-of-range taps read zeros.
inline Tensor conv1d_dilated(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t dilation) {
  if (kernel.rank() != 3) throw DimensionError("conv1d_dilated: kernel must be [w, d, f]");
  const std::size_t w = kernel.dim(0), d = kernel.dim(1), f = kernel.dim(2);
  if (w % 2 == 0) throw ConfigError("conv1d_dilated: kernel width must be odd, got " + std::to_string(w));
  if (dilation == 0) throw ConfigError("conv1d_dilated: dilation must be positive");
  if (x.rank() != 2 || x.dim(1) != d)
    throw DimensionError("conv1d_dilated: input " + shape_str(x.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
  if (bias.rank() != 1 || bias.dim(0) != f) throw DimensionError("conv1d_dilated: bias must be [f]");
  const std::size_t T = x.dim(0);
  const long half = static_cast<long>(w - 1) / 2;
  auto tap = [half, dilation](std::size_t t, std::size_t j) -> long {
    return static_cast<long>(t) + (static_cast<long>(j) - half) * static_cast<long>(dilation);
  };
  std::vector<double> out(T * f);
  auto xv = x.data();
  auto kv = kernel.data();
  auto bv = bias.data();
  for (std::size_t t = 0; t < T; ++t) std::copy_n(bv.data(), f, out.data() + t * f);
  for (std::size_t j = 0; j < w; ++j) {
    const double* kj = kv.data() + j * d * f;
    for (std::size_t t = 0; t < T; ++t) {
      const long s = tap(t, j);
      if (s < 0 || s >= static_cast<long>(T)) continue;
      detail::gemm_acc(xv.data() + s * d, kj, out.data() + t * f, 1, d, f);
    }
  }
  const bool rg = detail::any_requires_grad({&x, &kernel, &bias});
  Tensor y({T, f}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), kn = kernel.node(), bn = bias.node(), yn = y.node(), T, w, d, f, tap] {
      if (yn->grad.empty()) return;
      if (detail::wants(bn)) {
        bn->ensure_grad();
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < f; ++c) bn->grad[c] += yn->grad[t * f + c];
      }
      const bool gx = detail::wants(xn), gk = detail::wants(kn);
      if (gx) xn->ensure_grad();
      if (gk) kn->ensure_grad();
      for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t t = 0; t < T; ++t) {
          const long s = tap(t, j);
          if (s < 0 || s >= static_cast<long>(T)) continue;
          const double* g = yn->grad.data() + t * f;
          if (gx)
            detail::gemm_acc_bt(g, kn->value.data() + j * d * f, xn->grad.data() + s * d, 1, d, f);
          if (gk)
            detail::gemm_acc_at(xn->value.data() + s * d, g, kn->grad.data() + j * d * f, 1, d, f);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// LSTM

/// Gate blocks are laid out [input | forget | candidate | output] along the 4h axis.
struct LstmWeights {
  Tensor input;      // [d_in, 4h]
  Tensor recurrent;  // [h, 4h]
  Tensor bias;       // [4h]

  std::size_t hidden() const { return recurrent.dim(0); }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// One LSTM step on vectors: input [d_in], state ([h], [h]) -> next state.
inline LstmState lstm_cell(const Tensor& input, const LstmState& state, const LstmWeights& w) {
  const std::size_t hd = w.hidden();
  const std::size_t din = w.input.dim(0);
  if (input.rank() != 1 || input.dim(0) != din || w.input.dim(1) != 4 * hd || w.recurrent.dim(1) != 4 * hd ||
      w.bias.size() != 4 * hd || state.h.size() != hd || state.c.size() != hd)
    throw DimensionError("lstm_cell: inconsistent shapes (input " + shape_str(input.shape()) + ", W_x " +
                         shape_str(w.input.shape()) + ", W_h " + shape_str(w.recurrent.shape()) + ")");
  std::vector<double> pre(w.bias.data().begin(), w.bias.data().end());
  detail::gemm_acc(input.data().data(), w.input.data().data(), pre.data(), 1, din, 4 * hd);
  detail::gemm_acc(state.h.data().data(), w.recurrent.data().data(), pre.data(), 1, hd, 4 * hd);

  // act holds the activated gates: i, f, g, o
  std::vector<double> act(4 * hd);
  std::vector<double> c_next(hd), h_next(hd), tanh_c(hd);
  auto cv = state.c.data();
  for (std::size_t k = 0; k < hd; ++k) {
    const double i = 1.0 / (1.0 + std::exp(-pre[k]));
    const double f = 1.0 / (1.0 + std::exp(-pre[hd + k]));
    const double g = std::tanh(pre[2 * hd + k]);
    const double o = 1.0 / (1.0 + std::exp(-pre[3 * hd + k]));
    act[k] = i;
    act[hd + k] = f;
    act[2 * hd + k] = g;
    act[3 * hd + k] = o;
    c_next[k] = f * cv[k] + i * g;
    tanh_c[k] = std::tanh(c_next[k]);
    h_next[k] = o * tanh_c[k];
  }
  const bool rg = detail::any_requires_grad({&input, &state.h, &state.c, &w.input, &w.recurrent, &w.bias});
  LstmState next{Tensor({hd}, std::move(h_next), rg), Tensor({hd}, std::move(c_next), rg)};
  if (rg) {
    detail::record([xn = input.node(), hn = state.h.node(), cn = state.c.node(), wx = w.input.node(),
                    wh = w.recurrent.node(), bn = w.bias.node(), hout = next.h.node(), cout = next.c.node(),
                    act = std::move(act), tanh_c = std::move(tanh_c), hd, din] {
      if (hout->grad.empty() && cout->grad.empty()) return;
      std::vector<double> dpre(4 * hd);
      std::vector<double> dc(hd, 0.0);
      for (std::size_t k = 0; k < hd; ++k) {
        const double gh = hout->grad.empty() ? 0.0 : hout->grad[k];
        const double gc = cout->grad.empty() ? 0.0 : cout->grad[k];
        const double i = act[k], f = act[hd + k], g = act[2 * hd + k], o = act[3 * hd + k];
        dc[k] = gc + gh * o * (1.0 - tanh_c[k] * tanh_c[k]);
        dpre[k] = dc[k] * g * i * (1.0 - i);
        dpre[hd + k] = dc[k] * cn->value[k] * f * (1.0 - f);
        dpre[2 * hd + k] = dc[k] * i * (1.0 - g * g);
        dpre[3 * hd + k] = gh * tanh_c[k] * o * (1.0 - o);
      }
      if (detail::wants(cn)) {
        cn->ensure_grad();
        for (std::size_t k = 0; k < hd; ++k) cn->grad[k] += dc[k] * act[hd + k];
      }
      if (detail::wants(bn)) {
        bn->ensure_grad();
        for (std::size_t k = 0; k < 4 * hd; ++k) bn->grad[k] += dpre[k];
      }
      if (detail::wants(xn)) {
        xn->ensure_grad();
        detail::gemm_acc_bt(dpre.data(), wx->value.data(), xn->grad.data(), 1, din, 4 * hd);
      }
      if (detail::wants(hn)) {
        hn->ensure_grad();
        detail::gemm_acc_bt(dpre.data(), wh->value.data(), hn->grad.data(), 1, hd, 4 * hd);
      }
      if (detail::wants(wx)) {
        wx->ensure_grad();
        detail::gemm_acc_at(xn->value.data(), dpre.data(), wx->grad.data(), 1, din, 4 * hd);
      }
      if (detail::wants(wh)) {
        wh->ensure_grad();
        detail::gemm_acc_at(hn->value.data(), dpre.data(), wh->grad.data(), 1, hd, 4 * hd);
      }
    });
  }
  return next;
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout mask: each entry is 0 with probability p, else 1/(1-p).
inline Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  std::vector<double> m(shape_numel(shape));
  const double keep = 1.0 / (1.0 - p);
  for (double& v : m) v = rng.bernoulli(p) ? 0.0 : keep;
  return Tensor(shape, std::move(m));
}

/// Training-time dropout. p == 0 returns the input untouched.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return x;
  return mul(x, dropout_mask(x.shape(), p, rng));
}

}  // namespace slu
