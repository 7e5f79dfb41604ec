#pragma once

// Corpus I/O (seq.in / seq.out / label), IOB spans, vocabularies, dev splits
// and a template-based synthetic corpus.

#include <algorithm>
#include <cctype>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slu/errors.hpp"
#include "slu/rng.hpp"

namespace slu {

struct Utterance {
  std::vector<std::string> tokens;
  std::vector<std::string> slots;  // IOB, one per token
  std::string intent;

  bool operator==(const Utterance&) const = default;
};

using Corpus = std::vector<Utterance>;

struct SlotSpan {
  std::string type;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive

  auto operator<=>(const SlotSpan&) const = default;
};

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

inline std::string join(const std::vector<std::string>& parts, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline std::string ascii_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// ---------------------------------------------------------------------------
// IOB

struct ParsedTag {
  char prefix;  // 'O', 'B' or 'I'
  std::string type;
};

inline ParsedTag parse_tag(const std::string& tag) {
  if (tag == "O") return {'O', {}};
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') return {tag[0], tag.substr(2)};
  throw DataError("malformed IOB tag '" + tag + "'");
}

inline bool is_valid_tag(const std::string& tag) {
  try {
    parse_tag(tag);
    return true;
  } catch (const DataError&) {
    return false;
  }
}

/// Maximal spans. An I-X that does not continue a span of type X opens a new one.
inline std::vector<SlotSpan> iob_spans(const std::vector<std::string>& slots) {
  std::vector<SlotSpan> spans;
  bool open = false;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const ParsedTag t = parse_tag(slots[i]);
    if (t.prefix == 'O') {
      open = false;
      continue;
    }
    if (t.prefix == 'I' && open && spans.back().type == t.type) {
      spans.back().end = i;
      continue;
    }
    spans.push_back({t.type, i, i});
    open = true;
  }
  return spans;
}

inline std::vector<std::string> spans_to_iob(const std::vector<SlotSpan>& spans, std::size_t length) {
  std::vector<std::string> out(length, "O");
  for (const auto& s : spans) {
    if (s.end >= length || s.start > s.end) throw DataError("span outside sequence");
    out[s.start] = "B-" + s.type;
    for (std::size_t i = s.start + 1; i <= s.end; ++i) out[i] = "I-" + s.type;
  }
  return out;
}

/// Rewrite tags so every span starts with B- (the lenient reading made explicit).
inline std::vector<std::string> repair_iob(const std::vector<std::string>& slots) {
  return spans_to_iob(iob_spans(slots), slots.size());
}

inline void validate(const Utterance& u) {
  if (u.tokens.size() != u.slots.size())
    throw DataError("utterance has " + std::to_string(u.tokens.size()) + " tokens but " +
                    std::to_string(u.slots.size()) + " slot tags");
  for (const auto& s : u.slots) parse_tag(s);
}

// ---------------------------------------------------------------------------
// Three-file corpora

inline constexpr const char* kTokensFile = "seq.in";
inline constexpr const char* kSlotsFile = "seq.out";
inline constexpr const char* kIntentFile = "label";

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace detail

inline Corpus load_three_file(const std::filesystem::path& dir, bool lowercase = false) {
  if (!std::filesystem::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  const auto tokens = detail::read_lines(dir / kTokensFile);
  const auto slots = detail::read_lines(dir / kSlotsFile);
  const auto intents = detail::read_lines(dir / kIntentFile);
  const std::size_t n = std::min({tokens.size(), slots.size(), intents.size()});
  if (tokens.size() != slots.size() || tokens.size() != intents.size())
    throw DataError(dir.string() + ": files are not line-aligned (" + std::to_string(tokens.size()) + " / " +
                    std::to_string(slots.size()) + " / " + std::to_string(intents.size()) +
                    " lines); first misaligned line is " + std::to_string(n + 1));
  Corpus corpus;
  corpus.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Utterance u{split_ws(tokens[i]), split_ws(slots[i]), detail::trim(intents[i])};
    if (u.tokens.size() != u.slots.size())
      throw DataError(dir.string() + " line " + std::to_string(i + 1) + ": " + std::to_string(u.tokens.size()) +
                      " tokens but " + std::to_string(u.slots.size()) + " slot tags");
    for (const auto& s : u.slots)
      if (!is_valid_tag(s)) throw DataError(dir.string() + " line " + std::to_string(i + 1) + ": malformed IOB tag '" + s + "'");
    if (lowercase)
      for (auto& t : u.tokens) t = ascii_lower(t);
    corpus.push_back(std::move(u));
  }
  return corpus;
}

/// Writes seq.out and label; seq.in too unless `with_tokens` is false.
inline void write_three_file(const std::filesystem::path& dir, const Corpus& corpus, bool with_tokens = true) {
  std::filesystem::create_directories(dir);
  std::ofstream tin, tout(dir / kSlotsFile), tlab(dir / kIntentFile);
  if (with_tokens) tin.open(dir / kTokensFile);
  if (!tout || !tlab || (with_tokens && !tin)) throw DataError("cannot write corpus to " + dir.string());
  for (const auto& u : corpus) {
    if (with_tokens) tin << join(u.tokens) << '\n';
    tout << join(u.slots) << '\n';
    tlab << u.intent << '\n';
  }
}

/// Seeded partition: round(fraction * n) utterances go to dev; both halves keep corpus order.
inline std::pair<Corpus, Corpus> dev_split(const Corpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("dev fraction must lie in (0, 1)");
  if (corpus.size() < 10) throw DataError("need at least 10 utterances to carve out a dev split, got " + std::to_string(corpus.size()));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_dev = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(corpus.size())));
  std::vector<bool> is_dev(corpus.size(), false);
  for (std::size_t i = 0; i < n_dev; ++i) is_dev[order[i]] = true;
  std::pair<Corpus, Corpus> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) (is_dev[i] ? out.second : out.first).push_back(corpus[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Dense id maps built from training data. Tokens: 0 = <pad>, 1 = <unk>.
/// Slot labels: 0 = <pad>. Intents carry no reserved ids.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocab() { reset(); }

  static Vocab build(const Corpus& train) {
    Vocab v;
    for (const auto& u : train) {
      for (const auto& t : u.tokens) intern(v.tokens_, v.token_ids_, t);
      for (const auto& s : u.slots) intern(v.labels_, v.label_ids_, s);
      intern(v.intents_, v.intent_ids_, u.intent);
    }
    return v;
  }

  static Vocab from_lists(const std::vector<std::string>& tokens, const std::vector<std::string>& labels,
                          const std::vector<std::string>& intents) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken || labels.empty() || labels[0] != kPadToken)
      throw DataError("vocabulary lists are missing their reserved entries");
    Vocab v;
    v.tokens_.clear();
    v.token_ids_.clear();
    v.labels_.clear();
    v.label_ids_.clear();
    for (const auto& t : tokens) intern(v.tokens_, v.token_ids_, t);
    for (const auto& l : labels) intern(v.labels_, v.label_ids_, l);
    for (const auto& i : intents) intern(v.intents_, v.intent_ids_, i);
    return v;
  }

  int token_id(const std::string& t) const {
    auto it = token_ids_.find(t);
    return it == token_ids_.end() ? kUnk : it->second;
  }
  /// -1 when the label was never seen in training.
  int label_id(const std::string& l) const { return lookup(label_ids_, l); }
  int intent_id(const std::string& i) const { return lookup(intent_ids_, i); }

  const std::string& token(int id) const { return tokens_.at(id); }
  const std::string& label(int id) const { return labels_.at(id); }
  const std::string& intent(int id) const { return intents_.at(id); }

  std::size_t token_count() const { return tokens_.size(); }
  std::size_t label_count() const { return labels_.size(); }
  std::size_t intent_count() const { return intents_.size(); }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::string>& intents() const { return intents_; }

  /// FNV-1a over all three lists; identifies a vocabulary in checkpoints and errors.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const std::vector<std::string>& list) {
      for (const auto& s : list) {
        for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
        h = (h ^ 0xffu) * 1099511628211ull;
      }
      h = (h ^ 0xfeu) * 1099511628211ull;
    };
    mix(tokens_);
    mix(labels_);
    mix(intents_);
    return h;
  }

  std::string hash_hex() const {
    std::ostringstream os;
    os << std::hex << hash();
    return os.str();
  }

 private:
  using IdMap = std::unordered_map<std::string, int>;

  void reset() {
    tokens_ = {kPadToken, kUnkToken};
    token_ids_ = {{kPadToken, kPad}, {kUnkToken, kUnk}};
    labels_ = {kPadToken};
    label_ids_ = {{kPadToken, kPad}};
  }

  static void intern(std::vector<std::string>& list, IdMap& ids, const std::string& s) {
    if (ids.emplace(s, static_cast<int>(list.size())).second) list.push_back(s);
  }

  static int lookup(const IdMap& ids, const std::string& s) {
    auto it = ids.find(s);
    return it == ids.end() ? -1 : it->second;
  }

  std::vector<std::string> tokens_, labels_, intents_;
  IdMap token_ids_, label_ids_, intent_ids_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthOptions {
  /// Expected tokens per slot span; spans are 1 + Binomial(3, (m - 1) / 3) long, so m must lie in [1, 4].
  double mean_span_length = 1.8;
};

namespace detail {

struct SynthTemplate {
  std::string intent;
  std::vector<std::string> pieces;  // carrier words, or "{slot_type}"
};

inline const std::map<std::string, std::vector<std::string>>& synth_lexicons() {
  // Several slot types share a lexicon, so a token alone does not tell its type
  // and never tells whether it begins or continues a span.
  static const std::vector<std::string> names = {"blue", "river", "night", "golden", "echo", "silver",
                                                 "wild", "fire", "summer", "moon", "stone", "heart"};
  static const std::vector<std::string> places = {"san", "new", "port", "saint", "north", "lake",
                                                  "fort", "spring", "green", "bay"};
  static const std::vector<std::string> dates = {"next", "friday", "monday", "morning", "week",
                                                 "tonight", "tomorrow", "evening"};
  static const std::vector<std::string> styles = {"indian", "jazz", "thai", "soul", "french",
                                                  "rock", "italian", "blues", "latin", "folk"};
  static const std::vector<std::string> counts = {"two", "three", "four", "five", "six", "people", "guests"};
  static const std::map<std::string, std::vector<std::string>> lex = {
      {"artist", names},  {"track", names}, {"playlist", names}, {"city", places},
      {"date", dates},    {"cuisine", styles}, {"genre", styles}, {"party_size", counts}};
  return lex;
}

inline std::vector<SynthTemplate> synth_templates() {
  auto t = [](std::string intent, std::string text) { return SynthTemplate{std::move(intent), split_ws(text)}; };
  return {
      t("PlayMusic", "play {track} by {artist}"),
      t("PlayMusic", "please play some {genre} music"),
      t("PlayMusic", "i want to hear {artist} now"),
      t("PlayMusic", "put on the song {track} please"),
      t("GetWeather", "what is the weather in {city} {date}"),
      t("GetWeather", "forecast for {city} on {date}"),
      t("GetWeather", "is it cold in {city}"),
      t("BookRestaurant", "book a {cuisine} restaurant for {party_size} in {city}"),
      t("BookRestaurant", "reserve a table for {party_size} {date}"),
      t("BookRestaurant", "find me a {cuisine} place near {city}"),
      t("AddToPlaylist", "add {track} to my {playlist} playlist"),
      t("AddToPlaylist", "put {artist} onto {playlist}"),
      t("AddToPlaylist", "add this tune by {artist} to {playlist} list"),
      t("SearchMusic", "find songs by {artist}"),
      t("SearchMusic", "search for the album {track}"),
      t("SearchMusic", "look up {genre} records like {playlist}"),
  };
}

}  // namespace detail

inline Corpus synth_corpus(std::size_t n, std::uint64_t seed, const SynthOptions& opts = {}) {
  if (n == 0) throw ConfigError("synthetic corpus size must be at least 1");
  if (!(opts.mean_span_length >= 1.0 && opts.mean_span_length <= 4.0))
    throw ConfigError("mean_span_length must lie in [1, 4]");
  const double p_extra = (opts.mean_span_length - 1.0) / 3.0;
  const auto& lex = detail::synth_lexicons();
  const auto templates = detail::synth_templates();
  Rng rng(seed);
  Corpus corpus;
  corpus.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& tpl = templates[rng.index(templates.size())];
    Utterance u;
    u.intent = tpl.intent;
    for (const auto& piece : tpl.pieces) {
      if (piece.size() > 2 && piece.front() == '{') {
        const std::string type = piece.substr(1, piece.size() - 2);
        const auto& words = lex.at(type);
        const int len = 1 + rng.binomial(3, p_extra);
        for (int i = 0; i < len; ++i) {
          u.tokens.push_back(rng.pick(words));
          u.slots.push_back((i == 0 ? "B-" : "I-") + type);
        }
      } else {
        u.tokens.push_back(piece);
        u.slots.push_back("O");
      }
    }
    corpus.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace slu
