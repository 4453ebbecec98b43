#pragma once

// Evaluation records, the word-occlusion baseline and ranking / detection
// metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "densealign/error.hpp"
#include "densealign/tokenizer.hpp"

namespace densealign {

struct EvalRecord {
  std::filesystem::path image;
  std::string caption;
  std::set<std::size_t> gold_words;  // indices into word_spans(caption)
  int label = 0;                     // 1 = caption misaligned
  std::optional<double> human_score;
};

/// Reads line-delimited JSON records. Relative image paths resolve against
/// the dataset's directory. Blank lines are skipped.
inline std::vector<EvalRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path.string());
  std::vector<EvalRecord> records;
  std::string line;
  std::size_t line_no = 0;
  const auto base = path.parent_path();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) fail("record is not a JSON object");
    EvalRecord r;
    try {
      const std::filesystem::path img = j.at("image").get<std::string>();
      r.image = img.is_relative() ? base / img : img;
      r.caption = j.at("caption").get<std::string>();
      r.label = j.at("label").get<int>();
      if (j.contains("gold_words") && !j["gold_words"].is_null()) {
        for (const auto& g : j["gold_words"]) {
          if (!g.is_number_integer() || g.get<long long>() < 0) fail("gold_words must be non-negative integers");
          r.gold_words.insert(g.get<std::size_t>());
        }
      }
      if (j.contains("human_score") && !j["human_score"].is_null()) r.human_score = j["human_score"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("bad field: ") + e.what());
    }
    if (r.label != 0 && r.label != 1) fail("label must be 0 or 1");
    if (r.label == 0 && !r.gold_words.empty()) fail("aligned record (label 0) lists gold words");
    if (r.human_score && !(*r.human_score >= 0.0 && *r.human_score <= 1.0)) fail("human_score must lie in [0, 1]");
    std::size_t words = 0;
    try {
      words = word_spans(r.caption).size();
    } catch (const InputError& e) {
      fail(e.what());
    }
    for (auto g : r.gold_words) {
      if (g >= words) {
        fail("gold word " + std::to_string(g) + " out of range for a caption with " + std::to_string(words) + " words");
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Occlusion baseline

struct OcclusionResult {
  double base_score = 0.0;
  std::vector<double> deltas;  // score without word k minus base score
  std::size_t predicted = 0;   // argmax delta, first on ties
};

/// Caption with word `skip` removed, remaining words joined by single spaces.
inline std::string caption_without(const std::vector<WordSpan>& spans, std::optional<std::size_t> skip) {
  std::string out;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    if (skip && k == *skip) continue;
    if (!out.empty()) out.push_back(' ');
    out += spans[k].text;
  }
  return out;
}

/// Scores the full caption once and each single-word deletion once:
/// exactly 1 + #words calls to `score`.
inline OcclusionResult occlusion_attribution(const std::function<double(std::string_view)>& score,
                                             std::string_view caption) {
  const auto spans = word_spans(caption);
  if (spans.empty()) throw InputError("occlusion needs a caption with at least one word");
  OcclusionResult r;
  r.base_score = score(caption);
  r.deltas.reserve(spans.size());
  for (std::size_t k = 0; k < spans.size(); ++k) {
    r.deltas.push_back(score(caption_without(spans, k)) - r.base_score);
    if (r.deltas[k] > r.deltas[r.predicted]) r.predicted = k;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

/// A prediction is correct iff it shares a word with the gold set. Only
/// misaligned records (label 1) are scored; `preds` is aligned with `records`.
inline double localization_accuracy(const std::vector<std::vector<std::size_t>>& preds,
                                    const std::vector<std::set<std::size_t>>& golds, const std::vector<int>& labels) {
  if (preds.size() != golds.size() || preds.size() != labels.size()) {
    throw InputError("prediction and record counts differ");
  }
  std::size_t total = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] != 1) continue;
    ++total;
    const bool hit = std::any_of(preds[i].begin(), preds[i].end(), [&](std::size_t p) { return golds[i].contains(p); });
    correct += hit ? 1 : 0;
  }
  if (total == 0) throw InputError("localization accuracy is undefined without misaligned records");
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline double localization_accuracy(const std::vector<std::size_t>& preds, const std::vector<EvalRecord>& records) {
  if (preds.size() != records.size()) throw InputError("prediction and record counts differ");
  std::vector<std::vector<std::size_t>> p;
  std::vector<std::set<std::size_t>> g;
  std::vector<int> l;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    p.push_back({preds[i]});
    g.push_back(records[i].gold_words);
    l.push_back(records[i].label);
  }
  return localization_accuracy(p, g, l);
}

/// Mean precision at the rank of each positive, ranking by descending score;
/// equal scores keep input order.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t positives = 0;
  double total = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++positives;
      total += static_cast<double>(positives) / static_cast<double>(rank + 1);
    }
  }
  if (positives == 0) throw InputError("average precision is undefined without positive labels");
  return total / static_cast<double>(positives);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_undefined = false;  // nothing predicted
  bool recall_undefined = false;     // nothing to find
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline double harmonic_f1(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Word-level precision / recall / F1. Micro-averaged over all words by
/// default; `macro` averages per-sample values over samples where each is
/// defined.
inline PrecisionRecall word_prf(const std::vector<std::set<std::size_t>>& pred_sets,
                                const std::vector<std::set<std::size_t>>& gold_sets, bool macro = false) {
  if (pred_sets.size() != gold_sets.size()) throw InputError("prediction and gold counts differ");
  PrecisionRecall r;
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
  std::size_t p_n = 0, r_n = 0, f_n = 0;
  for (std::size_t i = 0; i < pred_sets.size(); ++i) {
    std::size_t tp = 0;
    for (auto w : pred_sets[i]) tp += gold_sets[i].contains(w) ? 1 : 0;
    const std::size_t fp = pred_sets[i].size() - tp;
    const std::size_t fn = gold_sets[i].size() - tp;
    r.tp += tp;
    r.fp += fp;
    r.fn += fn;
    const double sp = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double sr = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    if (tp + fp) {
      p_sum += sp;
      ++p_n;
    }
    if (tp + fn) {
      r_sum += sr;
      ++r_n;
    }
    if (tp + fp + fn) {
      f_sum += harmonic_f1(sp, sr);
      ++f_n;
    }
  }
  if (macro) {
    r.precision_undefined = p_n == 0;
    r.recall_undefined = r_n == 0;
    r.precision = p_n ? p_sum / static_cast<double>(p_n) : 0.0;
    r.recall = r_n ? r_sum / static_cast<double>(r_n) : 0.0;
    r.f1 = f_n ? f_sum / static_cast<double>(f_n) : 0.0;
    return r;
  }
  r.precision_undefined = r.tp + r.fp == 0;
  r.recall_undefined = r.tp + r.fn == 0;
  r.precision = r.precision_undefined ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  r.recall = r.recall_undefined ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  r.f1 = harmonic_f1(r.precision, r.recall);
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InputError("correlation inputs differ in length");
  if (x.size() < 2) throw InputError("correlation needs at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw InputError("correlation is undefined for a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

struct Correlations {
  double pearson = 0.0;
  double spearman = 0.0;
};

inline Correlations correlations(const std::vector<double>& x, const std::vector<double>& y) {
  return {pearson(x, y), spearman(x, y)};
}

/// Fraction of pairs where the aligned caption strictly outscores its hard
/// negative; ties count as failures.
inline double pairwise_accuracy(const std::vector<double>& scores_pos, const std::vector<double>& scores_neg) {
  if (scores_pos.size() != scores_neg.size()) throw InputError("pair lists differ in length");
  if (scores_pos.empty()) throw InputError("pairwise accuracy needs at least one pair");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < scores_pos.size(); ++i) wins += scores_pos[i] > scores_neg[i] ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(scores_pos.size());
}

struct MetricReport {
  std::optional<double> la, ap, precision, recall, f1, pearson, spearman, pairwise_accuracy;
  // CLIPScore-only baselines for the same samples.
  std::optional<double> ap_clipscore, pearson_clipscore, spearman_clipscore, pairwise_accuracy_clipscore;
  std::size_t n_samples = 0;
};

inline nlohmann::json to_json(const MetricReport& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"la", opt(m.la)},
          {"ap", opt(m.ap)},
          {"precision", opt(m.precision)},
          {"recall", opt(m.recall)},
          {"f1", opt(m.f1)},
          {"pearson", opt(m.pearson)},
          {"spearman", opt(m.spearman)},
          {"pairwise_accuracy", opt(m.pairwise_accuracy)},
          {"ap_clipscore", opt(m.ap_clipscore)},
          {"pearson_clipscore", opt(m.pearson_clipscore)},
          {"spearman_clipscore", opt(m.spearman_clipscore)},
          {"pairwise_accuracy_clipscore", opt(m.pairwise_accuracy_clipscore)},
          {"n_samples", m.n_samples}};
}

}  // namespace densealign
