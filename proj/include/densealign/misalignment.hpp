#pragma once

// Word-level misalignment decisions on top of token attributions, and the
// F-CLIPScore aggregate (1 - score) * sum_j mis(w_j) * w_j.

#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densealign/error.hpp"
#include "densealign/tokenizer.hpp"

namespace densealign {

struct WordAttribution {
  std::size_t word_index = 0;
  std::string text;
  double w = 0.0;
  bool misaligned = false;
  bool unscored = false;  // every token of the word fell outside the context window
  bool is_punctuation = false;
};

struct Phrase {
  std::size_t start = 0;  // first word index
  std::size_t end = 0;    // last word index, inclusive
  double score = 0.0;
};

struct AlignmentReport {
  double clipscore = 0.0;
  double f_clipscore = 0.0;
  double epsilon = 0.0;
  std::size_t l_start = 0;
  std::vector<WordAttribution> words;
  std::vector<Phrase> phrases;
  std::optional<std::size_t> predicted_word;
  std::optional<std::size_t> predicted_phrase;  // index into phrases
  std::vector<std::string> warnings;
};

/// Mean token attribution per caption word. Template, special and padded
/// positions never contribute.
inline std::vector<WordAttribution> word_attributions(const TokenSequence& tokens,
                                                      const std::vector<std::optional<double>>& token_attr) {
  if (token_attr.size() != tokens.ids.size()) throw InputError("token attribution length does not match sequence");
  const std::size_t count = tokens.words.size();
  std::vector<double> sum(count, 0.0);
  std::vector<std::size_t> hits(count, 0);
  for (std::size_t pos = 0; pos < tokens.ids.size(); ++pos) {
    const auto word = tokens.word_map[pos];
    if (word < 0 || !token_attr[pos]) continue;
    const auto k = static_cast<std::size_t>(word);
    if (k >= count) throw InternalError("word map references word " + std::to_string(k) + " of " + std::to_string(count));
    sum[k] += static_cast<double>(*token_attr[pos]);
    ++hits[k];
  }
  std::vector<WordAttribution> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    out[k].word_index = k;
    out[k].text = tokens.words[k].text;
    out[k].is_punctuation = tokens.words[k].is_punctuation;
    out[k].unscored = hits[k] == 0;
    out[k].w = hits[k] ? sum[k] / static_cast<double>(hits[k]) : 0.0;
  }
  return out;
}

/// Flags words with w < epsilon (strict). Unscored words are never flagged.
inline std::vector<WordAttribution> detect(std::vector<WordAttribution> words, double epsilon) {
  if (!(epsilon < 0.0)) throw ConfigError("epsilon must be negative");
  for (auto& w : words) w.misaligned = !w.unscored && w.w < epsilon;
  return words;
}

/// Forced single-word prediction: lowest scored attribution, first on ties.
inline const WordAttribution& predict_single_word(const std::vector<WordAttribution>& words) {
  const WordAttribution* best = nullptr;
  for (const auto& w : words) {
    if (w.unscored) continue;
    if (best == nullptr || w.w < best->w) best = &w;
  }
  if (best == nullptr) throw InputError("caption has no scored words");
  return *best;
}

/// Maximal runs of consecutive flagged, non-punctuation words.
inline std::vector<Phrase> merge_phrases(const std::vector<WordAttribution>& words) {
  std::vector<Phrase> phrases;
  std::size_t i = 0;
  while (i < words.size()) {
    if (!words[i].misaligned || words[i].is_punctuation) {
      ++i;
      continue;
    }
    std::size_t j = i;
    double total = 0.0;
    while (j < words.size() && words[j].misaligned && !words[j].is_punctuation) total += words[j++].w;
    phrases.push_back({i, j - 1, total / static_cast<double>(j - i)});
    i = j;
  }
  return phrases;
}

/// Index of the lowest-scoring phrase (first on ties).
inline std::optional<std::size_t> predict_phrase(const std::vector<Phrase>& phrases) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < phrases.size(); ++k) {
    if (!best || phrases[k].score < phrases[*best].score) best = k;
  }
  return best;
}

/// Sum of flagged word attributions.
inline double misaligned_sum(const std::vector<WordAttribution>& words) {
  double total = 0.0;
  for (const auto& w : words) {
    if (w.misaligned) total += w.w;
  }
  return total;
}

inline double f_clipscore(double score, const std::vector<WordAttribution>& words) {
  return (1.0 - score) * misaligned_sum(words);
}

inline AlignmentReport make_report(double clipscore, std::vector<WordAttribution> words, double epsilon,
                                   std::size_t l_start) {
  AlignmentReport r;
  r.clipscore = clipscore;
  r.epsilon = epsilon;
  r.l_start = l_start;
  r.words = detect(std::move(words), epsilon);
  r.f_clipscore = f_clipscore(clipscore, r.words);
  r.phrases = merge_phrases(r.words);
  r.predicted_phrase = predict_phrase(r.phrases);
  bool any_scored = false;
  for (const auto& w : r.words) any_scored = any_scored || !w.unscored;
  if (any_scored) r.predicted_word = predict_single_word(r.words).word_index;
  if (clipscore < 0.0) {
    r.warnings.push_back("clipscore is negative; F-CLIPScore weight (1 - score) exceeds 1");
  }
  return r;
}

inline nlohmann::json to_json(const AlignmentReport& r) {
  nlohmann::json words = nlohmann::json::array();
  for (const auto& w : r.words) {
    words.push_back({{"text", w.text},
                     {"w", w.unscored ? nlohmann::json(nullptr) : nlohmann::json(w.w)},
                     {"misaligned", w.misaligned},
                     {"unscored", w.unscored}});
  }
  nlohmann::json phrases = nlohmann::json::array();
  for (const auto& p : r.phrases) phrases.push_back({{"start", p.start}, {"end", p.end}, {"score", p.score}});
  nlohmann::json j = {{"clipscore", r.clipscore}, {"f_clipscore", r.f_clipscore}, {"epsilon", r.epsilon},
                      {"l_start", r.l_start},     {"words", words},               {"phrases", phrases}};
  j["predicted_word"] = r.predicted_word ? nlohmann::json(*r.predicted_word) : nlohmann::json(nullptr);
  return j;
}

}  // namespace densealign
