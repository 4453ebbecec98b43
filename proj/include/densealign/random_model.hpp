#pragma once

// Small randomly initialized models and vocabularies for tests, demos and CI
// runs that have no pretrained checkpoint.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "densealign/config.hpp"
#include "densealign/model.hpp"
#include "densealign/safetensors.hpp"

namespace densealign {

inline ModelConfig tiny_config(std::size_t layers, std::size_t heads, std::size_t width, std::size_t context,
                               std::size_t merges) {
  ModelConfig c;
  c.text_layers = layers;
  c.text_heads = heads;
  c.text_width = width;
  c.context_length = context;
  c.vocab_size = 514 + merges;
  c.vision_layers = 1;
  c.vision_heads = 2;
  c.vision_width = 16;
  c.patch_size = 4;
  c.image_resolution = 8;
  c.embed_dim = 8;
  c.activation = Activation::gelu;
  c.tmpl = "";
  return c;
}

/// Gaussian weights; layer norm gains near 1. `spread` scales every
/// matrix, larger values give sharper attention.
inline TensorMap random_weights(const ModelConfig& c, std::uint32_t seed, float spread = 1.0f) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  TensorMap out;
  for (const auto& spec : expected_tensors(c)) {
    Tensor t(spec.shape);
    const auto& name = spec.name;
    const bool is_gain = name.ends_with("ln1.weight") || name.ends_with("ln2.weight") ||
                         name.ends_with("ln_final.weight") || name.ends_with("ln_pre.weight") ||
                         name.ends_with("ln_post.weight");
    float std = 0.02f;
    if (is_gain) {
      for (auto& v : t.data) v = 1.0f + 0.1f * normal(rng);
      out.emplace(name, std::move(t));
      continue;
    }
    if (spec.shape.size() >= 2) {
      const auto fan_in = static_cast<float>(Tensor::element_count(spec.shape) / static_cast<std::size_t>(spec.shape[0]));
      std = spread / std::sqrt(fan_in);
      if (name == "text.token_embedding" || name.ends_with("positional_embedding")) std = spread * 0.5f;
      if (name == "text.projection" || name == "vision.projection") {
        std = spread / std::sqrt(static_cast<float>(spec.shape[0]));
      }
    } else {
      std = 0.1f * spread;
    }
    for (auto& v : t.data) v = std * normal(rng);
    out.emplace(name, std::move(t));
  }
  return out;
}

/// Merge rules that assemble each word left to right (a word's last merge
/// produces "word</w>"). Rules shared between words are emitted once.
inline std::vector<std::string> merges_for_words(const std::vector<std::string>& words) {
  std::vector<std::string> merges;
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (w.size() < 2) continue;
    std::string prefix(1, w[0]);
    for (std::size_t k = 1; k < w.size(); ++k) {
      std::string next(1, w[k]);
      if (k + 1 == w.size()) next += "</w>";
      const std::string rule = prefix + " " + next;
      if (seen.insert(rule).second) merges.push_back(rule);
      prefix += w[k];
    }
  }
  return merges;
}

inline void write_merges_file(const std::filesystem::path& path, const std::vector<std::string>& merges) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write merges file " + path.string());
  out << "#version: 0.2\n";
  for (const auto& m : merges) out << m << "\n";
}

inline const std::vector<std::string>& demo_words() {
  static const std::vector<std::string> words = {
      "a",      "two",  "cat",   "cats",   "dog",    "dogs",  "run",     "man",   "woman",   "photo",
      "depicts", "the", "on",    "red",    "blue",   "car",   "bicycle", "table", "riding",  "horse",
      "sitting", "in",  "of",    "with",   "street", "green", "black",   "white", "grass",   "small",
      "big",     "next", "to",   "bird",   "tree",   "plate", "pizza",   "dogs",  "playing", "ball"};
  return words;
}

}  // namespace densealign
