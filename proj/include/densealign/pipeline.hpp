#pragma once

// End-to-end scoring: tokenizer + model + attribution + misalignment.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>

#include "densealign/attribution.hpp"
#include "densealign/config.hpp"
#include "densealign/image.hpp"
#include "densealign/misalignment.hpp"
#include "densealign/model.hpp"
#include "densealign/safetensors.hpp"
#include "densealign/tokenizer.hpp"

namespace densealign {

struct ScoreOptions {
  double epsilon = -0.00005;
  std::size_t l_start = 0;  // 0: config default
  AttributionVariant variant = AttributionVariant::signed_product;
  std::string tmpl = "A photo depicts ";

  static ScoreOptions from_config(const ModelConfig& c) {
    ScoreOptions o;
    o.epsilon = c.epsilon;
    o.l_start = c.effective_l_start();
    o.tmpl = c.tmpl;
    return o;
  }
};

/// Tokens and attention gradients for one caption; relevance and the report
/// can be derived from it for any option set without another pass.
struct CaptionAnalysis {
  TokenSequence tokens;
  AttributionPass pass;
};

class Pipeline {
 public:
  Pipeline(Model model, Tokenizer tokenizer) : model_(std::move(model)), tokenizer_(std::move(tokenizer)) {
    if (tokenizer_.vocab_size() != model_.config().vocab_size) {
      throw ConfigError("tokenizer vocabulary has " + std::to_string(tokenizer_.vocab_size()) +
                        " tokens but the model expects " + std::to_string(model_.config().vocab_size));
    }
  }

  static Pipeline load(const ModelConfig& config, const std::filesystem::path& weights) {
    if (config.vocab.empty()) throw ConfigError("model config does not name a vocabulary file");
    auto tok = Tokenizer::from_file(config.vocab, config.vocab_size);
    return Pipeline(Model::load(config, read_safetensors(weights)), std::move(tok));
  }

  const Model& model() const { return model_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const ModelConfig& config() const { return model_.config(); }

  TokenSequence tokenize(std::string_view caption, std::string_view tmpl) const {
    return tokenize_caption(tokenizer_, caption, tmpl, config().context_length);
  }

  Embedding embed_image(const ImageInput& image) const { return model_.encode_image(image); }

  /// Plain cosine score of `caption` (with template) against `image`.
  double clipscore(const Embedding& image, std::string_view caption, std::string_view tmpl) const {
    const auto tokens = tokenizer_.encode(caption, tmpl, config().context_length);
    return similarity(image, model_.encode_text(tokens).embedding);
  }

  CaptionAnalysis analyze(const Embedding& image, std::string_view caption, std::string_view tmpl) const {
    CaptionAnalysis a;
    a.tokens = tokenize(caption, tmpl);
    a.pass = attribute(model_, a.tokens, image);
    return a;
  }

  static std::vector<WordAttribution> words_for(const CaptionAnalysis& a, std::size_t l_start,
                                                AttributionVariant variant) {
    const auto rel = relevance(a.pass.trace, a.pass.grads, l_start, variant);
    return word_attributions(a.tokens, token_attributions(rel, a.tokens.z));
  }

  AlignmentReport report(const CaptionAnalysis& a, const ScoreOptions& opt) const {
    const std::size_t l_start = opt.l_start ? opt.l_start : config().effective_l_start();
    return make_report(a.pass.score, words_for(a, l_start, opt.variant), opt.epsilon, l_start);
  }

  AlignmentReport score(const ImageInput& image, std::string_view caption, const ScoreOptions& opt) const {
    return report(analyze(embed_image(image), caption, opt.tmpl), opt);
  }

 private:
  Model model_;
  Tokenizer tokenizer_;
};

}  // namespace densealign
