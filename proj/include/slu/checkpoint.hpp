#pragma once

// Plain-text checkpoints: configuration, vocabulary and every parameter at
// full double precision. See docs/checkpoint-format.md.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "slu/config.hpp"
#include "slu/data.hpp"
#include "slu/errors.hpp"
#include "slu/model.hpp"

namespace slu {

inline constexpr const char* kCheckpointMagic = "slu-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  Vocab vocab;
  json stats = json::object();  // training summary, free-form
  std::unique_ptr<JointModel> model;
};

/// Writes atomically (temporary file + rename) so an interrupted save never
/// clobbers the previous checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const JointModel& model, const TrainConfig& train_cfg,
                            const Vocab& vocab, const json& stats = json::object()) {
  const json meta = {{"model", to_json(model.config())},
                     {"train", to_json(train_cfg)},
                     {"vocab", {{"tokens", vocab.tokens()}, {"labels", vocab.labels()}, {"intents", vocab.intents()}}},
                     {"vocab_hash", vocab.hash_hex()},
                     {"stats", stats}};
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    out << "meta " << meta.dump() << '\n';
    char buf[32];
    for (const auto& e : model.parameters().entries()) {
      out << "param " << e.path << ' ' << e.value.rank();
      for (auto d : e.value.shape()) out << ' ' << d;
      out << '\n';
      bool first = true;
      for (double v : e.value.data()) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << (first ? "" : " ") << buf;
        first = false;
      }
      out << '\n';
    }
    out << "end\n";
    if (!out) throw DataError("failed while writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  auto fail = [&](const std::string& what) -> DataError { return DataError(path.string() + ": " + what); };

  std::string line;
  std::getline(in, line);
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    hs >> magic >> version;
    if (magic != kCheckpointMagic) throw fail("not a checkpoint file");
    if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  }
  if (!std::getline(in, line) || line.rfind("meta ", 0) != 0) throw fail("missing meta line");
  json meta;
  try {
    meta = json::parse(line.substr(5));
  } catch (const json::parse_error& e) {
    throw fail(std::string("corrupt meta line: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model_config = model_config_from_json(meta.at("model"));
    ck.train_config = train_config_from_json(meta.at("train"));
    const auto& v = meta.at("vocab");
    ck.vocab = Vocab::from_lists(v.at("tokens").get<std::vector<std::string>>(),
                                 v.at("labels").get<std::vector<std::string>>(),
                                 v.at("intents").get<std::vector<std::string>>());
    if (meta.contains("stats")) ck.stats = meta.at("stats");
    if (meta.at("vocab_hash").get<std::string>() != ck.vocab.hash_hex())
      throw fail("vocabulary does not match its recorded hash " + meta.at("vocab_hash").get<std::string>());
  } catch (const json::exception& e) {
    throw fail(std::string("malformed meta: ") + e.what());
  }

  ck.model = std::make_unique<JointModel>(ck.model_config, ck.vocab.token_count(), ck.vocab.label_count(),
                                          ck.vocab.intent_count(), 0);
  for (auto& e : ck.model->parameters().entries()) {
    if (!std::getline(in, line)) throw fail("truncated before parameter '" + e.path + "'");
    std::istringstream ps(line);
    std::string tag, name;
    std::size_t rank = 0;
    ps >> tag >> name >> rank;
    if (tag != "param" || name != e.path) throw fail("expected parameter '" + e.path + "', found '" + line + "'");
    Shape shape(rank);
    for (auto& d : shape) ps >> d;
    if (!ps || shape != e.value.shape())
      throw fail("parameter '" + e.path + "' has shape " + shape_str(shape) + ", model expects " +
                 shape_str(e.value.shape()));
    if (!std::getline(in, line)) throw fail("truncated values for '" + e.path + "'");
    std::istringstream vs(line);
    Tensor target = e.value;
    auto data = target.mutable_data();
    for (auto& x : data) {
      std::string tok;
      if (!(vs >> tok)) throw fail("too few values for '" + e.path + "'");
      x = std::strtod(tok.c_str(), nullptr);
    }
    std::string extra;
    if (vs >> extra) throw fail("too many values for '" + e.path + "'");
  }
  if (!std::getline(in, line) || line != "end") throw fail("missing end marker (extra or truncated parameters)");
  return ck;
}

}  // namespace slu
