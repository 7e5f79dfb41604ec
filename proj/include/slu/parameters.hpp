#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slu/errors.hpp"
#include "slu/rng.hpp"
#include "slu/tensor.hpp"

namespace slu {

enum class Init {
  glorot,  // uniform(-r, r), r = sqrt(6 / (fan_in + fan_out))
  zeros,   // biases
  table,   // uniform(-0.1, 0.1): embeddings, position tables, initial states
};

/// Named trainable tensors, kept in registration order (which is also checkpoint order).
class ParameterStore {
 public:
  struct Entry {
    std::string path;
    Tensor value;
  };

  Tensor add(const std::string& path, Shape shape, Init init, Rng& rng) {
    if (index_.contains(path)) throw ConfigError("duplicate parameter path '" + path + "'");
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    if (init == Init::glorot) {
      std::size_t fan_in = 0, fan_out = 0;
      if (shape.size() == 3) {
        fan_in = shape[0] * shape[1];
        fan_out = shape[0] * shape[2];
      } else if (shape.size() == 2) {
        fan_in = shape[0];
        fan_out = shape[1];
      } else {
        fan_in = fan_out = n;
      }
      const double r = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (double& v : values) v = rng.uniform(-r, r);
    } else if (init == Init::table) {
      for (double& v : values) v = rng.uniform(-0.1, 0.1);
    }
    Tensor t(std::move(shape), std::move(values), true);
    index_.emplace(path, entries_.size());
    entries_.push_back({path, t});
    return t;
  }

  bool contains(const std::string& path) const { return index_.contains(path); }

  Tensor get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw IndexError("no parameter named '" + path + "'");
    return entries_[it->second].value;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.emplace_back(e.value.data().begin(), e.value.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size()) throw DimensionError("snapshot does not match parameter store");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto dst = entries_[i].value.mutable_data();
      if (dst.size() != snap[i].size())
        throw DimensionError("snapshot size mismatch for '" + entries_[i].path + "'");
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace slu
