#pragma once

// Protocol runners: score every record of a dataset (optionally on several
// worker threads) and reduce to a MetricReport. Per-record work is pure;
// results are collected by record index so the reduction does not depend on
// scheduling.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "densealign/error.hpp"
#include "densealign/evalkit.hpp"
#include "densealign/image.hpp"
#include "densealign/pipeline.hpp"

namespace densealign {

enum class Protocol { single_word, phrase, word_set, pairwise };
enum class Baseline { gradient, occlusion };

inline Protocol parse_protocol(const std::string& s) {
  if (s == "single-word") return Protocol::single_word;
  if (s == "phrase") return Protocol::phrase;
  if (s == "word-set") return Protocol::word_set;
  if (s == "pairwise") return Protocol::pairwise;
  throw ConfigError("unknown protocol '" + s + "'");
}

inline Baseline parse_baseline(const std::string& s) {
  if (s == "gradient") return Baseline::gradient;
  if (s == "occlusion") return Baseline::occlusion;
  throw ConfigError("unknown baseline '" + s + "'");
}

struct EvalOptions {
  Protocol protocol = Protocol::single_word;
  Baseline baseline = Baseline::gradient;
  std::size_t workers = 1;
  bool macro_prf = false;
};

/// Per-record outcome under one option set.
struct SampleOutcome {
  double clipscore = 0.0;
  double f_clipscore = 0.0;
  double misalign_score = 0.0;       // higher = more misaligned
  std::vector<std::size_t> located;  // predicted word(s) for LA
  std::set<std::size_t> flagged;     // misaligned words
};

/// Runs fn(i) for i in [0, count) on up to `workers` threads. The exception
/// of the lowest failing index is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace detail {

inline SampleOutcome outcome_from_report(const AlignmentReport& r, Protocol protocol) {
  SampleOutcome o;
  o.clipscore = r.clipscore;
  o.f_clipscore = r.f_clipscore;
  o.misalign_score = -r.f_clipscore;
  for (const auto& w : r.words) {
    if (w.misaligned) o.flagged.insert(w.word_index);
  }
  if (protocol == Protocol::phrase) {
    if (r.predicted_phrase) {
      const auto& p = r.phrases[*r.predicted_phrase];
      for (std::size_t k = p.start; k <= p.end; ++k) o.located.push_back(k);
    }
  } else if (r.predicted_word) {
    o.located.push_back(*r.predicted_word);
  }
  return o;
}

inline void pearson_into(const std::vector<double>& x, const std::vector<double>& y, std::optional<double>& p,
                         std::optional<double>& s) {
  try {
    p = pearson(x, y);
    s = spearman(x, y);
  } catch (const InputError&) {
    p.reset();
    s.reset();
  }
}

}  // namespace detail

/// Reduces per-record outcomes to the metrics of `protocol`. Metrics that are
/// undefined for the data (e.g. no misaligned records) stay empty.
inline MetricReport reduce_outcomes(const std::vector<EvalRecord>& records, const std::vector<SampleOutcome>& out,
                                    Protocol protocol, bool macro_prf = false) {
  MetricReport m;
  m.n_samples = records.size();
  std::vector<int> labels;
  std::vector<double> mis, mis_clip;
  for (std::size_t i = 0; i < records.size(); ++i) {
    labels.push_back(records[i].label);
    mis.push_back(out[i].misalign_score);
    mis_clip.push_back(-out[i].clipscore);
  }
  const bool any_positive = std::find(labels.begin(), labels.end(), 1) != labels.end();
  switch (protocol) {
    case Protocol::single_word:
    case Protocol::phrase: {
      if (!any_positive) break;
      std::vector<std::vector<std::size_t>> preds;
      std::vector<std::set<std::size_t>> golds;
      for (std::size_t i = 0; i < records.size(); ++i) {
        preds.push_back(out[i].located);
        golds.push_back(records[i].gold_words);
      }
      m.la = localization_accuracy(preds, golds, labels);
      m.ap = average_precision(mis, labels);
      m.ap_clipscore = average_precision(mis_clip, labels);
      break;
    }
    case Protocol::word_set: {
      std::vector<std::set<std::size_t>> preds, golds;
      std::vector<double> f, clip, human;
      for (std::size_t i = 0; i < records.size(); ++i) {
        preds.push_back(out[i].flagged);
        golds.push_back(records[i].gold_words);
        if (records[i].human_score) {
          f.push_back(out[i].f_clipscore);
          clip.push_back(out[i].clipscore);
          human.push_back(*records[i].human_score);
        }
      }
      const auto prf = word_prf(preds, golds, macro_prf);
      m.precision = prf.precision;
      m.recall = prf.recall;
      m.f1 = prf.f1;
      detail::pearson_into(f, human, m.pearson, m.spearman);
      detail::pearson_into(clip, human, m.pearson_clipscore, m.spearman_clipscore);
      break;
    }
    case Protocol::pairwise: {
      // Each misaligned record is paired with the aligned record of the same image.
      std::map<std::string, std::size_t> positive_of;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].label == 0) positive_of.try_emplace(records[i].image.string(), i);
      }
      std::vector<double> pos_f, neg_f, pos_c, neg_c;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].label != 1) continue;
        auto it = positive_of.find(records[i].image.string());
        if (it == positive_of.end()) continue;
        pos_f.push_back(out[it->second].f_clipscore);
        neg_f.push_back(out[i].f_clipscore);
        pos_c.push_back(out[it->second].clipscore);
        neg_c.push_back(out[i].clipscore);
      }
      if (pos_f.empty()) throw InputError("pairwise protocol found no (aligned, misaligned) pairs sharing an image");
      m.pairwise_accuracy = pairwise_accuracy(pos_f, neg_f);
      m.pairwise_accuracy_clipscore = pairwise_accuracy(pos_c, neg_c);
      break;
    }
  }
  return m;
}

/// Evaluates every option set in `sweep` with one forward/adjoint pass per
/// record. Returns one report per sweep point.
inline std::vector<MetricReport> evaluate_sweep(const Pipeline& pipe, const std::vector<EvalRecord>& records,
                                                const EvalOptions& opt, const std::vector<ScoreOptions>& sweep) {
  if (records.empty()) throw InputError("dataset is empty");
  if (opt.baseline == Baseline::occlusion && opt.protocol != Protocol::single_word) {
    throw ConfigError("the occlusion baseline supports the single-word protocol only");
  }
  std::vector<std::vector<SampleOutcome>> outcomes(sweep.size(), std::vector<SampleOutcome>(records.size()));
  parallel_for(records.size(), opt.workers, [&](std::size_t i) {
    const auto& rec = records[i];
    const auto image = pipe.embed_image(load_image(rec.image, pipe.config()));
    if (opt.baseline == Baseline::occlusion) {
      for (std::size_t s = 0; s < sweep.size(); ++s) {
        const auto occ = occlusion_attribution(
            [&](std::string_view c) { return pipe.clipscore(image, c, sweep[s].tmpl); }, rec.caption);
        SampleOutcome o;
        o.clipscore = occ.base_score;
        o.f_clipscore = 0.0;
        o.misalign_score = occ.deltas[occ.predicted];
        o.located = {occ.predicted};
        outcomes[s][i] = std::move(o);
      }
      return;
    }
    std::map<std::string, CaptionAnalysis> by_template;
    for (std::size_t s = 0; s < sweep.size(); ++s) {
      auto it = by_template.find(sweep[s].tmpl);
      if (it == by_template.end()) {
        it = by_template.emplace(sweep[s].tmpl, pipe.analyze(image, rec.caption, sweep[s].tmpl)).first;
      }
      outcomes[s][i] = detail::outcome_from_report(pipe.report(it->second, sweep[s]), opt.protocol);
    }
  });
  std::vector<MetricReport> reports;
  for (std::size_t s = 0; s < sweep.size(); ++s) {
    reports.push_back(reduce_outcomes(records, outcomes[s], opt.protocol, opt.macro_prf));
  }
  return reports;
}

inline MetricReport evaluate(const Pipeline& pipe, const std::vector<EvalRecord>& records, const EvalOptions& opt,
                             const ScoreOptions& score) {
  return evaluate_sweep(pipe, records, opt, {score}).front();
}

}  // namespace densealign
