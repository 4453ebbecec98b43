#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "densealign/error.hpp"

namespace densealign {

enum class Activation { quick_gelu, gelu };

struct ModelConfig {
  std::size_t text_layers = 12;
  std::size_t text_heads = 8;
  std::size_t text_width = 512;
  std::size_t context_length = 77;
  std::size_t vocab_size = 49408;
  std::size_t vision_layers = 12;
  std::size_t vision_heads = 12;
  std::size_t vision_width = 768;
  std::size_t patch_size = 32;
  std::size_t image_resolution = 224;
  std::size_t embed_dim = 512;
  std::size_t mlp_ratio = 4;
  Activation activation = Activation::quick_gelu;
  // 1-based first text layer of the relevance average; 0 selects the last
  // three layers (or all of them for shallower models).
  std::size_t l_start = 0;
  double epsilon = -0.00005;
  std::string tmpl = "A photo depicts ";
  std::array<float, 3> image_mean = {0.48145466f, 0.4578275f, 0.40821073f};
  std::array<float, 3> image_std = {0.26862954f, 0.26130258f, 0.27577711f};
  // Merges file; relative paths resolve against the config file directory.
  std::filesystem::path vocab;

  std::size_t text_head_dim() const { return text_width / text_heads; }
  std::size_t vision_head_dim() const { return vision_width / vision_heads; }
  std::size_t grid() const { return image_resolution / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }

  std::size_t effective_l_start() const {
    if (l_start != 0) return l_start;
    return text_layers >= 3 ? text_layers - 2 : 1;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(text_layers, "text_layers");
    positive(text_heads, "text_heads");
    positive(text_width, "text_width");
    positive(vision_layers, "vision_layers");
    positive(vision_heads, "vision_heads");
    positive(vision_width, "vision_width");
    positive(patch_size, "patch_size");
    positive(image_resolution, "image_resolution");
    positive(embed_dim, "embed_dim");
    positive(mlp_ratio, "mlp_ratio");
    if (context_length < 3) throw ConfigError("context_length must be at least 3");
    if (vocab_size < 514) throw ConfigError("vocab_size must be at least 514");
    if (text_width % text_heads != 0) throw ConfigError("text_width must be divisible by text_heads");
    if (vision_width % vision_heads != 0) throw ConfigError("vision_width must be divisible by vision_heads");
    if (image_resolution % patch_size != 0) throw ConfigError("image_resolution must be divisible by patch_size");
    if (l_start > text_layers) throw ConfigError("l_start must be within 1..text_layers");
    if (!(epsilon < 0.0)) throw ConfigError("epsilon must be negative");
    for (float s : image_std) {
      if (!(s > 0.0f)) throw ConfigError("image_std entries must be positive");
    }
  }
};

inline ModelConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  static const std::set<std::string> kKnown = {
      "text_layers", "text_heads",   "text_width", "context_length", "vocab_size", "vision_layers",
      "vision_heads", "vision_width", "patch_size", "image_resolution", "embed_dim", "mlp_ratio",
      "activation",  "l_start",      "epsilon",    "template",         "image_mean", "image_std",
      "vocab"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kKnown.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  ModelConfig c;
  try {
    auto get_count = [&](const char* key, std::size_t& out) {
      if (!j.contains(key)) return;
      const auto& v = j.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError(std::string("config field '") + key + "' must be a non-negative integer");
      }
      out = v.get<std::size_t>();
    };
    get_count("text_layers", c.text_layers);
    get_count("text_heads", c.text_heads);
    get_count("text_width", c.text_width);
    get_count("context_length", c.context_length);
    get_count("vocab_size", c.vocab_size);
    get_count("vision_layers", c.vision_layers);
    get_count("vision_heads", c.vision_heads);
    get_count("vision_width", c.vision_width);
    get_count("patch_size", c.patch_size);
    get_count("image_resolution", c.image_resolution);
    get_count("embed_dim", c.embed_dim);
    get_count("mlp_ratio", c.mlp_ratio);
    get_count("l_start", c.l_start);
    if (j.contains("activation")) {
      const auto a = j.at("activation").get<std::string>();
      if (a == "quick-gelu" || a == "quick_gelu") {
        c.activation = Activation::quick_gelu;
      } else if (a == "gelu") {
        c.activation = Activation::gelu;
      } else {
        throw ConfigError("activation must be 'quick-gelu' or 'gelu', got '" + a + "'");
      }
    }
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("template")) c.tmpl = j.at("template").get<std::string>();
    if (j.contains("image_mean")) c.image_mean = j.at("image_mean").get<std::array<float, 3>>();
    if (j.contains("image_std")) c.image_std = j.at("image_std").get<std::array<float, 3>>();
    if (j.contains("vocab")) {
      std::filesystem::path p = j.at("vocab").get<std::string>();
      c.vocab = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"text_layers", c.text_layers},
          {"text_heads", c.text_heads},
          {"text_width", c.text_width},
          {"context_length", c.context_length},
          {"vocab_size", c.vocab_size},
          {"vision_layers", c.vision_layers},
          {"vision_heads", c.vision_heads},
          {"vision_width", c.vision_width},
          {"patch_size", c.patch_size},
          {"image_resolution", c.image_resolution},
          {"embed_dim", c.embed_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"activation", c.activation == Activation::gelu ? "gelu" : "quick-gelu"},
          {"l_start", c.l_start},
          {"epsilon", c.epsilon},
          {"template", c.tmpl},
          {"image_mean", c.image_mean},
          {"image_std", c.image_std},
          {"vocab", c.vocab.string()}};
}

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed model config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

}  // namespace densealign
