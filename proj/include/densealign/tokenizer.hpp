#pragma once

// Byte-level BPE tokenizer compatible with the CLIP vocabulary layout:
// 256 byte symbols, the same 256 symbols with an end-of-word marker, one
// token per merge rule, then <|startoftext|> and <|endoftext|>.
//
// Every emitted token remembers the byte range of the caption it came from,
// which is what align() uses to attach tokens to caption words.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "densealign/error.hpp"
#include "densealign/unicode.hpp"

namespace densealign {

inline constexpr std::int32_t kSpecialToken = -1;
inline constexpr std::int32_t kTemplateToken = -2;
inline constexpr std::int32_t kUnalignedToken = -3;

struct ByteRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

/// A caption word: whitespace-delimited unit, with a trailing punctuation
/// run split off into its own span.
struct WordSpan {
  std::string text;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  bool is_punctuation = false;
  friend bool operator==(const WordSpan&, const WordSpan&) = default;
};

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t z = 0;  // position of the end-of-text token
  // Per position: caption word index, kSpecialToken, kTemplateToken, or
  // kUnalignedToken until align() has run.
  std::vector<std::int32_t> word_map;
  std::string raw_text;
  std::size_t template_prefix_len = 0;
  // Caption byte range for caption tokens; empty for specials and template.
  std::vector<std::optional<ByteRange>> sources;
  // Caption tokens dropped by truncation.
  std::size_t truncated_tokens = 0;
  // Filled by align().
  std::vector<WordSpan> words;

  std::size_t context_length() const { return ids.size(); }
};

namespace detail {

// GPT-2 style reversible byte -> printable code point table.
inline const std::array<char32_t, 256>& byte_to_codepoint() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

// Order in which byte symbols appear in the vocabulary.
inline const std::array<unsigned char, 256>& byte_vocab_order() {
  static const std::array<unsigned char, 256> order = [] {
    std::array<unsigned char, 256> o{};
    std::size_t k = 0;
    for (int b = '!'; b <= '~'; ++b) o[k++] = static_cast<unsigned char>(b);
    for (int b = 0xA1; b <= 0xAC; ++b) o[k++] = static_cast<unsigned char>(b);
    for (int b = 0xAE; b <= 0xFF; ++b) o[k++] = static_cast<unsigned char>(b);
    for (int b = 0; b < 256; ++b) {
      const bool direct = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || b >= 0xAE;
      if (!direct) o[k++] = static_cast<unsigned char>(b);
    }
    return o;
  }();
  return order;
}

inline std::string map_bytes(std::string_view bytes) {
  std::string out;
  for (unsigned char b : bytes) unicode::append_utf8(out, byte_to_codepoint()[b]);
  return out;
}

struct CleanText {
  std::string text;
  std::vector<std::size_t> origin;  // origin[i] = raw byte offset of text[i]
};

// Lower-case, collapse whitespace runs to one space, strip both ends.
inline CleanText clean_text(std::string_view raw) {
  CleanText out;
  const auto cps = unicode::decode(raw);
  bool pending_space = false;
  std::size_t space_origin = 0;
  for (const auto& cp : cps) {
    if (unicode::is_space(cp.value)) {
      if (!pending_space) space_origin = cp.offset;
      pending_space = true;
      continue;
    }
    if (pending_space && !out.text.empty()) {
      out.text.push_back(' ');
      out.origin.push_back(space_origin);
    }
    pending_space = false;
    std::string enc;
    unicode::append_utf8(enc, unicode::to_lower(cp.value));
    for (std::size_t k = 0; k < enc.size(); ++k) {
      out.text.push_back(enc[k]);
      out.origin.push_back(cp.offset + std::min(k, cp.length - 1));
    }
  }
  return out;
}

// Splits cleaned text into pre-tokens the way CLIP's regex does:
// contractions | letter runs | single digits | runs of anything else
// that is not whitespace. Special-token strings in text stay plain text.
inline std::vector<ByteRange> pretokenize(std::string_view text) {
  static constexpr std::string_view kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<ByteRange> out;
  const auto cps = unicode::decode(text);
  const std::size_t n = cps.size();
  auto end_of = [&](std::size_t idx) { return idx < n ? cps[idx].offset : text.size(); };
  std::size_t i = 0;
  while (i < n) {
    const char32_t c = cps[i].value;
    const std::string_view rest = text.substr(cps[i].offset);
    bool matched = false;
    if (c == '\'') {
      for (auto s : kContractions) {
        if (rest.starts_with(s)) {
          out.push_back({cps[i].offset, cps[i].offset + s.size()});
          i += s.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (unicode::is_space(c)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (unicode::is_letter(c)) {
      while (j < n && unicode::is_letter(cps[j].value)) ++j;
    } else if (!unicode::is_number(c)) {
      while (j < n && !unicode::is_space(cps[j].value) && !unicode::is_letter(cps[j].value) &&
             !unicode::is_number(cps[j].value)) {
        ++j;
      }
    }
    out.push_back({cps[i].offset, end_of(j)});
    i = j;
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw ConfigError("cannot open vocabulary file " + path.string());
  std::string content;
  std::array<char, 1 << 16> buf{};
  int got = 0;
  while ((got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    content.append(buf.data(), static_cast<std::size_t>(got));
  }
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw ConfigError("cannot read vocabulary file " + path.string());
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t nl = content.find('\n', start);
    if (nl == std::string::npos) nl = content.size();
    std::string line = content.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = nl + 1;
  }
  return lines;
}

}  // namespace detail

class Tokenizer {
 public:
  /// `merge_lines` excludes the header line. At most `max_merges` rules are
  /// used (CLIP keeps the first 48894).
  static Tokenizer from_merges(std::span<const std::string> merge_lines,
                               std::size_t max_merges = std::numeric_limits<std::size_t>::max()) {
    Tokenizer t;
    const auto& order = detail::byte_vocab_order();
    for (unsigned char b : order) t.add_token(detail::map_bytes(std::string_view(reinterpret_cast<const char*>(&b), 1)));
    for (unsigned char b : order) {
      t.add_token(detail::map_bytes(std::string_view(reinterpret_cast<const char*>(&b), 1)) + "</w>");
    }
    std::size_t rank = 0;
    for (const auto& line : merge_lines) {
      if (rank >= max_merges) break;
      if (line.empty()) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
          line.find(' ', sp + 1) != std::string::npos) {
        throw ConfigError("malformed merge rule: '" + line + "'");
      }
      const std::string left = line.substr(0, sp);
      const std::string right = line.substr(sp + 1);
      t.merge_ranks_.emplace(left + " " + right, static_cast<std::int32_t>(rank));
      t.add_token(left + right);
      ++rank;
    }
    t.sot_ = t.add_token("<|startoftext|>");
    t.eot_ = t.add_token("<|endoftext|>");
    return t;
  }

  /// Reads a merges file (optionally gzip-compressed). The first line is a
  /// header. `vocab_size` caps the number of merges at vocab_size - 514.
  static Tokenizer from_file(const std::filesystem::path& path, std::size_t vocab_size = 0) {
    auto lines = detail::read_lines(path);
    if (lines.empty() || (lines.size() == 1 && lines[0].empty())) {
      throw ConfigError("empty vocabulary file " + path.string());
    }
    std::size_t max_merges = std::numeric_limits<std::size_t>::max();
    if (vocab_size != 0) {
      if (vocab_size < 514) throw ConfigError("vocab_size must be at least 514");
      max_merges = vocab_size - 514;
    }
    return from_merges(std::span<const std::string>(lines).subspan(1), max_merges);
  }

  std::size_t vocab_size() const { return tokens_.size(); }
  std::int32_t sot_id() const { return sot_; }
  std::int32_t eot_id() const { return eot_; }
  std::int32_t pad_id() const { return 0; }

  const std::string& token_text(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<std::int32_t> token_id(std::string_view text) const {
    auto it = encoder_.find(std::string(text));
    if (it == encoder_.end()) return std::nullopt;
    return it->second;
  }

  /// Tokenizes `tmpl + text` into exactly `context_length` ids:
  /// [SOT, template..., caption..., EOT, PAD...]. On overflow the sequence
  /// is cut and the last slot becomes EOT.
  TokenSequence encode(std::string_view text, std::string_view tmpl, std::size_t context_length) const {
    if (context_length < 3) throw ConfigError("context_length must be at least 3");
    if (tokens_.empty()) throw ConfigError("tokenizer has an empty vocabulary");
    std::string raw(tmpl);
    raw += text;
    const auto cleaned = detail::clean_text(raw);

    struct Piece {
      std::int32_t id;
      ByteRange raw_range;
    };
    std::vector<Piece> pieces;
    for (const auto& pre : detail::pretokenize(cleaned.text)) {
      const std::string_view word = std::string_view(cleaned.text).substr(pre.begin, pre.end - pre.begin);
      for (const auto& sym : bpe_ranges(word)) {
        const std::size_t b = pre.begin + sym.range.begin;
        const std::size_t e = pre.begin + sym.range.end;
        pieces.push_back({sym.id, {cleaned.origin[b], cleaned.origin[e - 1] + 1}});
      }
    }

    TokenSequence seq;
    seq.raw_text = std::string(text);
    seq.ids.assign(context_length, pad_id());
    seq.word_map.assign(context_length, kSpecialToken);
    seq.sources.assign(context_length, std::nullopt);
    seq.ids[0] = sot_;
    const std::size_t room = context_length - 2;
    const std::size_t kept = std::min(room, pieces.size());
    seq.truncated_tokens = pieces.size() - kept;
    const std::size_t tl = tmpl.size();
    for (std::size_t k = 0; k < kept; ++k) {
      const std::size_t pos = k + 1;
      seq.ids[pos] = pieces[k].id;
      if (pieces[k].raw_range.begin < tl) {
        seq.word_map[pos] = kTemplateToken;
        ++seq.template_prefix_len;
      } else {
        seq.word_map[pos] = kUnalignedToken;
        seq.sources[pos] = ByteRange{pieces[k].raw_range.begin - tl, pieces[k].raw_range.end - tl};
      }
    }
    seq.z = kept + 1;
    seq.ids[seq.z] = eot_;
    return seq;
  }

  /// Joins token strings, turning end-of-word markers into spaces.
  std::string decode(std::span<const std::int32_t> ids) const {
    std::string joined;
    for (auto id : ids) joined += token_text(id);
    std::string out;
    const auto cps = unicode::decode(joined);
    const auto& fwd = detail::byte_to_codepoint();
    std::array<int, 512> inverse{};
    inverse.fill(-1);
    for (int b = 0; b < 256; ++b) inverse[fwd[b]] = b;
    for (std::size_t i = 0; i < cps.size(); ++i) {
      if (joined.compare(cps[i].offset, 4, "</w>") == 0) {
        out.push_back(' ');
        i += 3;
        continue;
      }
      const char32_t c = cps[i].value;
      if (c < inverse.size() && inverse[c] >= 0) {
        out.push_back(static_cast<char>(inverse[c]));
      } else {
        unicode::append_utf8(out, c);
      }
    }
    return out;
  }

  /// BPE of one pre-token (raw bytes); returns token ids.
  std::vector<std::int32_t> bpe(std::string_view word) const {
    std::vector<std::int32_t> ids;
    for (const auto& s : bpe_ranges(word)) ids.push_back(s.id);
    return ids;
  }

 private:
  struct Symbol {
    std::int32_t id;
    ByteRange range;
  };

  std::int32_t add_token(std::string text) {
    const auto id = static_cast<std::int32_t>(tokens_.size());
    encoder_.emplace(text, id);
    tokens_.push_back(std::move(text));
    return id;
  }

  std::vector<Symbol> bpe_ranges(std::string_view word) const {
    std::vector<ByteRange> parts;
    for (std::size_t i = 0; i < word.size(); ++i) parts.push_back({i, i + 1});
    auto symbol_text = [&](const ByteRange& r) {
      std::string s = detail::map_bytes(word.substr(r.begin, r.end - r.begin));
      if (r.end == word.size()) s += "</w>";
      return s;
    };
    while (parts.size() > 1) {
      std::int32_t best_rank = std::numeric_limits<std::int32_t>::max();
      std::string best_left;
      std::string best_right;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        std::string left = symbol_text(parts[i]);
        std::string right = symbol_text(parts[i + 1]);
        auto it = merge_ranks_.find(left + " " + right);
        if (it != merge_ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_left = std::move(left);
          best_right = std::move(right);
        }
      }
      if (best_rank == std::numeric_limits<std::int32_t>::max()) break;
      std::vector<ByteRange> merged;
      std::size_t i = 0;
      while (i < parts.size()) {
        if (i + 1 < parts.size() && symbol_text(parts[i]) == best_left &&
            symbol_text(parts[i + 1]) == best_right) {
          merged.push_back({parts[i].begin, parts[i + 1].end});
          i += 2;
        } else {
          merged.push_back(parts[i]);
          ++i;
        }
      }
      parts = std::move(merged);
    }
    std::vector<Symbol> out;
    out.reserve(parts.size());
    for (const auto& r : parts) {
      const std::string s = symbol_text(r);
      auto it = encoder_.find(s);
      if (it == encoder_.end()) throw InternalError("BPE produced out-of-vocabulary symbol '" + s + "'");
      out.push_back({it->second, r});
    }
    return out;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> encoder_;
  std::unordered_map<std::string, std::int32_t> merge_ranks_;
  std::int32_t sot_ = -1;
  std::int32_t eot_ = -1;
};

/// Whitespace-delimited caption units; a trailing run of punctuation inside
/// a unit becomes its own span with is_punctuation set.
inline std::vector<WordSpan> word_spans(std::string_view caption) {
  std::vector<WordSpan> spans;
  const auto cps = unicode::decode(caption);
  auto is_punct = [](char32_t c) { return !unicode::is_letter(c) && !unicode::is_number(c); };
  std::size_t i = 0;
  while (i < cps.size()) {
    if (unicode::is_space(cps[i].value)) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && !unicode::is_space(cps[j].value)) ++j;
    std::size_t split = j;
    while (split > i && is_punct(cps[split - 1].value)) --split;
    auto make = [&](std::size_t a, std::size_t b, bool punct) {
      const std::size_t s = cps[a].offset;
      const std::size_t e = cps[b - 1].offset + cps[b - 1].length;
      spans.push_back({std::string(caption.substr(s, e - s)), s, e, punct});
    };
    if (split == i) {
      make(i, j, true);
    } else {
      make(i, split, false);
      if (split < j) make(split, j, true);
    }
    i = j;
  }
  return spans;
}

/// Attaches every caption token to the word span containing its first byte.
inline TokenSequence align(TokenSequence tokens, const std::vector<WordSpan>& spans) {
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto& s = spans[k];
    if (s.char_end > tokens.raw_text.size() || s.char_start >= s.char_end ||
        tokens.raw_text.compare(s.char_start, s.char_end - s.char_start, s.text) != 0 ||
        (k > 0 && spans[k - 1].char_end > s.char_start)) {
      throw InternalError("word span " + std::to_string(k) + " does not match the encoded caption");
    }
  }
  for (std::size_t pos = 0; pos < tokens.ids.size(); ++pos) {
    if (!tokens.sources[pos]) continue;
    const std::size_t begin = tokens.sources[pos]->begin;
    auto it = std::upper_bound(spans.begin(), spans.end(), begin,
                               [](std::size_t b, const WordSpan& s) { return b < s.char_start; });
    if (it == spans.begin() || begin >= std::prev(it)->char_end) {
      throw InternalError("token at position " + std::to_string(pos) + " (caption byte " +
                          std::to_string(begin) + ") lies outside every word span");
    }
    tokens.word_map[pos] = static_cast<std::int32_t>(std::distance(spans.begin(), std::prev(it)));
  }
  tokens.words = spans;
  return tokens;
}

/// encode() followed by word_spans() and align().
inline TokenSequence tokenize_caption(const Tokenizer& tok, std::string_view caption, std::string_view tmpl,
                                      std::size_t context_length) {
  return align(tok.encode(caption, tmpl, context_length), word_spans(caption));
}

}  // namespace densealign
