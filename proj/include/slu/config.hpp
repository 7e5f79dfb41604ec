#pragma once

// Experiment configuration files (JSON). Every object is read strictly:
// unknown keys and wrongly typed values are ConfigErrors naming the field.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "slu/errors.hpp"
#include "slu/model.hpp"
#include "slu/training.hpp"

namespace slu {

using json = nlohmann::json;

struct SyntheticData {
  std::size_t utterances = 200;
  std::uint64_t seed = 1;
  double mean_span_length = 1.8;
};

struct DataConfig {
  std::string train;  // three-file directories
  std::string dev;    // optional; carved out of train when empty
  std::string test;   // optional
  std::optional<SyntheticData> synthetic;  // used instead of train/dev when set
  bool lowercase = false;
  std::uint64_t split_seed = 1;
  double dev_fraction = 0.1;
};

struct ExperimentConfig {
  std::string name;
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string run_dir;

  void validate() const {
    model.validate();
    train.validate();
    if (train.max_len > model.encoder.max_len)
      throw ConfigError("train.max_len (" + std::to_string(train.max_len) + ") exceeds model.encoder.max_len (" +
                        std::to_string(model.encoder.max_len) + ")");
    if (!data.synthetic && data.train.empty()) throw ConfigError("data: need either 'train' or 'synthetic'");
    if (!(data.dev_fraction > 0.0 && data.dev_fraction < 1.0)) throw ConfigError("data.dev_fraction must lie in (0, 1)");
    if (data.synthetic) {
      if (data.synthetic->utterances < 10) throw ConfigError("data.synthetic.utterances must be at least 10");
      if (!(data.synthetic->mean_span_length >= 1.0 && data.synthetic->mean_span_length <= 4.0))
        throw ConfigError("data.synthetic.mean_span_length must lie in [1, 4]");
    }
  }
};

namespace detail {

/// Strict view of one JSON object; `finish()` rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + "expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    check_type<T>(*it, key);
    out = it->get<T>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string field(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError(label() + "unknown key '" + it.key() + "'");
  }

 private:
  std::string label() const { return where_.empty() ? "config: " : where_ + ": "; }

  template <class T>
  void check_type(const json& v, const char* key) const {
    bool ok;
    const char* want;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
      want = "a boolean";
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
      want = "a string";
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
      want = "a number";
    } else if constexpr (std::is_unsigned_v<T>) {
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
      want = "a non-negative integer";
    } else {
      ok = v.is_number_integer();
      want = "an integer";
    }
    if (!ok) throw ConfigError(field(key) + ": expected " + want + ", got " + v.dump());
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j, const std::string& where = "model") {
  ModelConfig m;
  detail::ObjectReader r(j, where);
  std::string decoder = to_string(m.decoder);
  r.read("decoder", decoder);
  m.decoder = decoder_mode_from_string(decoder);
  r.read("d_x", m.encoder.d_x);
  r.read("d_l", m.d_l);
  if (const json* e = r.child("encoder")) {
    detail::ObjectReader er(*e, r.field("encoder"));
    std::string kind = to_string(m.encoder.kind);
    er.read("kind", kind);
    m.encoder.kind = encoder_kind_from_string(kind);
    er.read("layers", m.encoder.layers);
    er.read("kernel_width", m.encoder.kernel_width);
    er.read("heads", m.encoder.heads);
    er.read("relative_positions", m.encoder.relative_positions);
    er.read("max_len", m.encoder.max_len);
    er.finish();
  }
  r.finish();
  return m;
}

inline json to_json(const ModelConfig& m) {
  return {{"encoder",
           {{"kind", to_string(m.encoder.kind)},
            {"layers", m.encoder.layers},
            {"kernel_width", m.encoder.kernel_width},
            {"heads", m.encoder.heads},
            {"relative_positions", m.encoder.relative_positions},
            {"max_len", m.encoder.max_len}}},
          {"decoder", to_string(m.decoder)},
          {"d_x", m.encoder.d_x},
          {"d_l", m.d_l}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& where = "train") {
  TrainConfig t;
  detail::ObjectReader r(j, where);
  r.read("lr", t.lr);
  r.read("rho", t.rho);
  r.read("epsilon", t.epsilon);
  r.read("dropout", t.dropout);
  r.read("batch_size", t.batch_size);
  r.read("max_len", t.max_len);
  r.read("patience", t.patience);
  r.read("max_epochs", t.max_epochs);
  r.read("seed", t.seed);
  r.finish();
  return t;
}

inline json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},           {"rho", t.rho},           {"epsilon", t.epsilon},
          {"dropout", t.dropout}, {"batch_size", t.batch_size}, {"max_len", t.max_len},
          {"patience", t.patience}, {"max_epochs", t.max_epochs}, {"seed", t.seed}};
}

inline DataConfig data_config_from_json(const json& j) {
  DataConfig d;
  detail::ObjectReader r(j, "data");
  r.read("train", d.train);
  r.read("dev", d.dev);
  r.read("test", d.test);
  r.read("lowercase", d.lowercase);
  r.read("split_seed", d.split_seed);
  r.read("dev_fraction", d.dev_fraction);
  if (const json* s = r.child("synthetic")) {
    SyntheticData syn;
    detail::ObjectReader sr(*s, "data.synthetic");
    sr.read("utterances", syn.utterances);
    sr.read("seed", syn.seed);
    sr.read("mean_span_length", syn.mean_span_length);
    sr.finish();
    d.synthetic = syn;
  }
  r.finish();
  return d;
}

inline json to_json(const DataConfig& d) {
  json j = {{"train", d.train},         {"dev", d.dev},
            {"test", d.test},           {"lowercase", d.lowercase},
            {"split_seed", d.split_seed}, {"dev_fraction", d.dev_fraction}};
  if (d.synthetic)
    j["synthetic"] = {{"utterances", d.synthetic->utterances},
                      {"seed", d.synthetic->seed},
                      {"mean_span_length", d.synthetic->mean_span_length}};
  else
    j["synthetic"] = nullptr;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  r.read("name", c.name);
  if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
  if (const json* t = r.child("train")) c.train = train_config_from_json(*t);
  if (const json* d = r.child("data")) c.data = data_config_from_json(*d);
  if (const json* o = r.child("output")) {
    detail::ObjectReader orr(*o, "output");
    orr.read("run_dir", c.run_dir);
    orr.finish();
  }
  r.finish();
  c.validate();
  return c;
}

/// Fully resolved form: every default written out.
inline json to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)},
          {"output", {{"run_dir", c.run_dir}}}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(read_json_file(path));
}

/// Environment variable that relocates relative run directories.
inline constexpr const char* kRunRootEnv = "SLU_RUN_ROOT";

/// Relative run directories are placed under $SLU_RUN_ROOT when it is set,
/// otherwise under the working directory. An empty run_dir becomes runs/<name>.
inline std::filesystem::path resolve_run_dir(const ExperimentConfig& c) {
  std::filesystem::path dir = c.run_dir.empty() ? std::filesystem::path("runs") / (c.name.empty() ? "run" : c.name)
                                                 : std::filesystem::path(c.run_dir);
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv(kRunRootEnv); root && *root) return std::filesystem::path(root) / dir;
  return dir;
}

}  // namespace slu
