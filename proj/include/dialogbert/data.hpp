// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dialogbert/error.hpp"
#include "dialogbert/rng.hpp"

namespace dialogbert {

using TokenId = std::int32_t;
/// Token ids of one utterance, wrapped as [CLS] ... [SEP].
using Utterance = std::vector<TokenId>;
/// Ordered utterances preceding a response.
using Context = std::vector<Utterance>;

inline constexpr std::size_t kMaxUttLen = 30;
inline constexpr std::size_t kMaxCtxUtts = 7;

struct Dialogue {
  std::vector<std::string> utterances;
  std::string id;
};

// ---------------------------------------------------------------------------
// Tokenization.

/// Lowercases ASCII letters, splits on whitespace and emits every ASCII
/// punctuation character as its own token. Other bytes (including UTF-8
/// sequences) stay inside word tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary.

/// Token/id bijection. Ids 0..4 are reserved for the special tokens.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kMask = 4;
  static constexpr std::size_t kNumReserved = 5;
  static constexpr std::size_t kNoMinFreq = std::numeric_limits<std::size_t>::max();

  Vocab() {
    for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(t);
  }

  /// Tokens with frequency >= min_freq, by descending frequency then
  /// lexicographically.
  static Vocab build(std::span<const Dialogue> dialogues, std::size_t min_freq = 1) {
    if (dialogues.empty()) throw ValueError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& d : dialogues)
      for (const auto& u : d.utterances)
        for (auto& tok : tokenize(u)) ++freq[tok];
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, n] : items) {
      if (n >= min_freq && !v.contains(tok)) v.push(tok);
    }
    return v;
  }

  /// One token per line; the line number is the id.
  static Vocab parse(std::string_view text) {
    Vocab v;
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
      const std::size_t end = text.find('\n', start);
      const std::size_t stop = end == std::string_view::npos ? text.size() : end;
      lines.emplace_back(text.substr(start, stop - start));
      start = stop + 1;
    }
    if (lines.size() < kNumReserved) throw FormatError("vocab: fewer lines than reserved tokens");
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (lines[i] != v.tokens_[i]) {
        throw FormatError("vocab: line " + std::to_string(i + 1) + " must be " + v.tokens_[i]);
      }
    }
    for (std::size_t i = kNumReserved; i < lines.size(); ++i) {
      if (lines[i].empty()) throw FormatError("vocab: empty token on line " + std::to_string(i + 1));
      if (v.contains(lines[i])) throw FormatError("vocab: duplicate token '" + lines[i] + "'");
      v.push(lines[i]);
    }
    return v;
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocab file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out.push_back('\n');
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write vocab file " + path.string());
    out << serialize();
  }

  /// FNV-1a over the serialized form.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char c : serialize()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& tok) const { return ids_.contains(tok); }

  TokenId id(const std::string& tok) const {
    const auto it = ids_.find(tok);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ValueError("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// [CLS] + first (max_len - 2) tokens + [SEP].
  Utterance wrap(std::span<const std::string> tokens, std::size_t max_len = kMaxUttLen) const {
    if (max_len < 3) throw ValueError("wrap: max_len must be at least 3");
    Utterance u{kCls};
    const std::size_t n = std::min(tokens.size(), max_len - 2);
    for (std::size_t i = 0; i < n; ++i) u.push_back(id(tokens[i]));
    u.push_back(kSep);
    return u;
  }

  Utterance encode_text(std::string_view text, std::size_t max_len = kMaxUttLen) const {
    const auto toks = tokenize(text);
    return wrap(toks, max_len);
  }

  /// Tokens for ids; [CLS], [SEP] and [PAD] are dropped.
  std::vector<std::string> decode(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    for (const TokenId i : ids) {
      if (i == kCls || i == kSep || i == kPad) continue;
      out.push_back(token(i));
    }
    return out;
  }

  std::string decode_text(std::span<const TokenId> ids) const {
    const auto toks = decode(ids);
    return detokenize(toks);
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(const std::string& tok) {
    ids_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// ---------------------------------------------------------------------------
// Samples.

struct ContextSample {
  Context context;
  Utterance response;
  std::string dialogue_id;
  std::size_t turn = 0;  // 1-based index of the response utterance

  friend bool operator==(const ContextSample&, const ContextSample&) = default;
};

/// One sample per turn t in [2, T]: the response is utterance t and the
/// context is the up to `max_ctx` utterances before it.
inline std::vector<ContextSample> make_samples(const Dialogue& d, const Vocab& vocab,
                                               std::size_t max_ctx = kMaxCtxUtts, std::size_t max_len = kMaxUttLen) {
  std::vector<ContextSample> out;
  if (d.utterances.size() < 2) return out;
  std::vector<Utterance> wrapped;
  wrapped.reserve(d.utterances.size());
  for (const auto& u : d.utterances) wrapped.push_back(vocab.encode_text(u, max_len));
  for (std::size_t t = 2; t <= wrapped.size(); ++t) {
    ContextSample s;
    const std::size_t first = t > max_ctx ? t - max_ctx : 1;  // 1-based
    for (std::size_t i = first; i <= t - 1; ++i) s.context.push_back(wrapped[i - 1]);
    s.response = wrapped[t - 1];
    s.dialogue_id = d.id;
    s.turn = t;
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<ContextSample> make_samples(std::span<const Dialogue> corpus, const Vocab& vocab,
                                               std::size_t max_ctx = kMaxCtxUtts, std::size_t max_len = kMaxUttLen) {
  std::vector<ContextSample> out;
  for (const auto& d : corpus) {
    auto s = make_samples(d, vocab, max_ctx, max_len);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

/// Every wrapped utterance of the corpus; the replacement pool for corruption.
inline std::vector<Utterance> utterance_pool(std::span<const Dialogue> corpus, const Vocab& vocab,
                                             std::size_t max_len = kMaxUttLen) {
  std::vector<Utterance> pool;
  for (const auto& d : corpus)
    for (const auto& u : d.utterances) pool.push_back(vocab.encode_text(u, max_len));
  return pool;
}

/// Keeps the most recent `max_ctx` utterances.
inline Context truncate_context(Context ctx, std::size_t max_ctx = kMaxCtxUtts) {
  if (ctx.size() > max_ctx) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(max_ctx));
  return ctx;
}

// ---------------------------------------------------------------------------
// Batching.

/// Padded id arrays for a group of samples. Padding id is 0 ([PAD]).
struct Batch {
  std::size_t size = 0;
  std::size_t ctx_width = 0;  // utterance slots per context
  std::size_t utt_len = 0;    // ids per utterance slot
  std::size_t resp_len = 0;   // ids per response
  std::vector<TokenId> context;             // [size, ctx_width, utt_len]
  std::vector<std::uint8_t> context_mask;   // [size, ctx_width]
  std::vector<TokenId> response;            // [size, resp_len]
  std::vector<std::uint8_t> response_mask;  // [size, resp_len]
  std::vector<std::string> dialogue_ids;
  std::vector<std::size_t> turns;

  std::size_t num_utterances(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < ctx_width; ++c) n += context_mask[b * ctx_width + c];
    return n;
  }
  std::span<const TokenId> utterance(std::size_t b, std::size_t c) const {
    return {context.data() + (b * ctx_width + c) * utt_len, utt_len};
  }
  std::span<const TokenId> response_row(std::size_t b) const { return {response.data() + b * resp_len, resp_len}; }
};

/// Pads samples to fixed widths. A width of 0 means "widest in the group".
/// Rows longer than the requested widths are an error.
inline Batch make_batch(std::span<const ContextSample> samples, std::size_t ctx_width = 0, std::size_t utt_len = 0,
                        std::size_t resp_len = 0) {
  if (samples.empty()) throw ValueError("make_batch: no samples");
  std::size_t need_ctx = 0, need_utt = 0, need_resp = 0;
  for (const auto& s : samples) {
    if (s.context.empty()) throw ValueError("make_batch: sample with empty context");
    need_ctx = std::max(need_ctx, s.context.size());
    for (const auto& u : s.context) {
      if (u.empty()) throw ValueError("make_batch: empty utterance row");
      need_utt = std::max(need_utt, u.size());
    }
    need_resp = std::max(need_resp, s.response.size());
  }
  Batch b;
  b.size = samples.size();
  b.ctx_width = ctx_width ? ctx_width : need_ctx;
  b.utt_len = utt_len ? utt_len : need_utt;
  b.resp_len = resp_len ? resp_len : need_resp;
  if (need_ctx > b.ctx_width || need_utt > b.utt_len || need_resp > b.resp_len) {
    throw ValueError("make_batch: sample exceeds requested padding widths");
  }
  b.context.assign(b.size * b.ctx_width * b.utt_len, 0);
  b.context_mask.assign(b.size * b.ctx_width, 0);
  b.response.assign(b.size * b.resp_len, 0);
  b.response_mask.assign(b.size * b.resp_len, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    for (std::size_t c = 0; c < s.context.size(); ++c) {
      b.context_mask[i * b.ctx_width + c] = 1;
      std::copy(s.context[c].begin(), s.context[c].end(), b.context.begin() + (i * b.ctx_width + c) * b.utt_len);
    }
    std::copy(s.response.begin(), s.response.end(), b.response.begin() + i * b.resp_len);
    std::fill_n(b.response_mask.begin() + i * b.resp_len, s.response.size(), 1);
    b.dialogue_ids.push_back(s.dialogue_id);
    b.turns.push_back(s.turn);
  }
  return b;
}

inline std::vector<ContextSample> unbatch(const Batch& b) {
  std::vector<ContextSample> out(b.size);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t c = 0; c < b.ctx_width; ++c) {
      if (!b.context_mask[i * b.ctx_width + c]) continue;
      Utterance u;
      for (const TokenId t : b.utterance(i, c)) {
        if (t != Vocab::kPad) u.push_back(t);
      }
      out[i].context.push_back(std::move(u));
    }
    for (std::size_t j = 0; j < b.resp_len; ++j) {
      if (b.response_mask[i * b.resp_len + j]) out[i].response.push_back(b.response[i * b.resp_len + j]);
    }
    out[i].dialogue_id = b.dialogue_ids[i];
    out[i].turn = b.turns[i];
  }
  return out;
}

/// One pass over a sample list in fixed-size groups; the last group may be
/// smaller. With `shuffle`, the order is a seeded permutation.
class Batcher {
 public:
  Batcher(std::span<const ContextSample> samples, std::size_t batch_size, Rng rng, bool shuffle)
      : samples_(samples), batch_size_(batch_size), order_(samples.size()) {
    if (batch_size < 1) throw ValueError("batch: batch_size must be at least 1");
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle) rng.shuffle(std::span<std::size_t>(order_));
  }

  /// Next group of samples in visiting order; the last group may be short.
  std::optional<std::vector<ContextSample>> next_samples() {
    if (pos_ >= order_.size()) return std::nullopt;
    std::vector<ContextSample> group;
    for (; group.size() < batch_size_ && pos_ < order_.size(); ++pos_) group.push_back(samples_[order_[pos_]]);
    return group;
  }

  std::optional<Batch> next() {
    auto group = next_samples();
    if (!group) return std::nullopt;
    return make_batch(*group);
  }

  bool done() const { return pos_ >= order_.size(); }

  std::span<const std::size_t> order() const { return order_; }

 private:
  std::span<const ContextSample> samples_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Corpus files: one dialogue per line, utterances separated by tabs.

inline std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

/// Parses tab-separated lines. `min_utts` is 2 for dialogues and 1 for
/// generation contexts. Blank lines are skipped.
inline std::vector<Dialogue> parse_dialogues(std::istream& in, std::size_t min_utts = 2) {
  std::vector<Dialogue> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Dialogue d;
    d.id = "line" + std::to_string(lineno);
    for (auto& u : split_tabs(line)) {
      if (tokenize(u).empty()) {
        throw FormatError("line " + std::to_string(lineno) + ": empty utterance");
      }
      d.utterances.push_back(std::move(u));
    }
    if (d.utterances.size() < min_utts) {
      throw FormatError("line " + std::to_string(lineno) + ": expected at least " + std::to_string(min_utts) +
                        " utterances");
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<Dialogue> load_corpus(const std::filesystem::path& path, std::size_t min_utts = 2) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  return parse_dialogues(in, min_utts);
}

inline void save_corpus(const std::filesystem::path& path, std::span<const Dialogue> corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file " + path.string());
  for (const auto& d : corpus) {
    for (std::size_t i = 0; i < d.utterances.size(); ++i) out << (i ? "\t" : "") << d.utterances[i];
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpora.

enum class SynthPreset {
  /// Each dialogue stays on one noun and cycles color question, color answer,
  /// place question, place answer from the first turn, so the response is a
  /// pure function of the context.
  kDeterministicQa,
  /// Utterance k of a dialogue starts with the k-th ordinal word.
  kOrderedMarkers,
};

inline SynthPreset parse_synth_preset(std::string_view name) {
  if (name == "deterministic-qa") return SynthPreset::kDeterministicQa;
  if (name == "ordered-markers") return SynthPreset::kOrderedMarkers;
  throw ValueError("unknown synthetic corpus preset '" + std::string(name) + "'");
}

namespace synth {

inline constexpr std::string_view kNouns[] = {"apple", "sky", "grass", "snow", "coal", "lemon", "rose", "ocean"};
inline constexpr std::string_view kColors[] = {"red", "blue", "green", "white", "black", "yellow", "pink", "teal"};
inline constexpr std::string_view kPlaces[] = {"orchard", "heavens", "meadow", "mountains",
                                              "mine",    "grove",   "garden", "coast"};
inline constexpr std::string_view kOrdinals[] = {"first", "second", "third", "fourth",
                                                "fifth", "sixth",  "seventh", "eighth"};
inline constexpr std::string_view kFiller[] = {"we", "talk", "about", "plans", "for", "the", "week", "and",
                                              "maybe", "lunch", "soon", "okay", "sure", "then", "later", "today",
                                              "really", "nice", "good", "idea", "yes", "no", "well", "so"};

/// The four utterances about noun k, in dialogue order: color question, color
/// answer, place question, place answer.
inline std::string qa_utterance(std::size_t k, std::size_t phase) {
  const std::string noun(kNouns[k]);
  switch (phase % 4) {
    case 0: return "what color is the " + noun + " ?";
    case 1: return "the " + noun + " is " + std::string(kColors[k]) + " .";
    case 2: return "where is the " + noun + " found ?";
    default: return "it grows in the " + std::string(kPlaces[k]) + " .";
  }
}

}  // namespace synth

/// Seeded synthetic dialogues with 3..8 turns each.
inline std::vector<Dialogue> synth_corpus(std::uint64_t seed, std::size_t n_dialogues, SynthPreset preset) {
  Rng rng(seed, 0x5e);
  std::vector<Dialogue> out;
  if (preset == SynthPreset::kDeterministicQa) {
    for (std::size_t d = 0; d < n_dialogues; ++d) {
      Dialogue dlg;
      dlg.id = "qa" + std::to_string(d);
      const std::size_t turns = 3 + rng.below(6);
      const std::size_t noun = rng.below(std::size(synth::kNouns));
      for (std::size_t t = 0; t < turns; ++t) dlg.utterances.push_back(synth::qa_utterance(noun, t));
      out.push_back(std::move(dlg));
    }
  } else {
    for (std::size_t d = 0; d < n_dialogues; ++d) {
      Dialogue dlg;
      dlg.id = "ord" + std::to_string(d);
      const std::size_t turns = 3 + rng.below(6);
      for (std::size_t t = 0; t < turns; ++t) {
        std::string u(synth::kOrdinals[t]);
        const std::size_t words = 2 + rng.below(4);
        for (std::size_t w = 0; w < words; ++w) {
          u += ' ';
          u += synth::kFiller[rng.below(std::size(synth::kFiller))];
        }
        dlg.utterances.push_back(std::move(u));
      }
      out.push_back(std::move(dlg));
    }
  }
  return out;
}

inline std::vector<Dialogue> synth_corpus(std::uint64_t seed, std::size_t n_dialogues, std::string_view preset) {
  return synth_corpus(seed, n_dialogues, parse_synth_preset(preset));
}

}  // namespace dialogbert
