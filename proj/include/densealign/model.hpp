#pragma once

// CLIP dual encoder: a ViT image tower and a causal text transformer, each
// pooled ([CLS] row / [EOS] row) and projected into a shared space, scored
// by cosine similarity.
//
// The text forward records every post-softmax attention map and accepts
// per-(layer, head) replacement maps. Layer and head indices in this API are
// zero-based; only `l_start` in the config follows the 1-based convention.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "densealign/config.hpp"
#include "densealign/error.hpp"
#include "densealign/ops.hpp"
#include "densealign/safetensors.hpp"
#include "densealign/tokenizer.hpp"

namespace densealign {

/// Preprocessed image: channel-normalized CHW floats at the model resolution.
struct ImageInput {
  std::size_t resolution = 0;
  std::vector<float> chw;
};

struct Embedding {
  std::vector<double> values;
};

/// Post-softmax attention maps, n x n per (layer, head), row-major.
struct AttentionTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t n = 0;
  std::vector<double> maps;

  AttentionTrace() = default;
  AttentionTrace(std::size_t l, std::size_t h, std::size_t n_)
      : layers(l), heads(h), n(n_), maps(l * h * n_ * n_, 0.0) {}

  std::span<double> map(std::size_t l, std::size_t h) { return {maps.data() + (l * heads + h) * n * n, n * n}; }
  std::span<const double> map(std::size_t l, std::size_t h) const {
    return {maps.data() + (l * heads + h) * n * n, n * n};
  }
  double at(std::size_t l, std::size_t h, std::size_t i, std::size_t j) const { return map(l, h)[i * n + j]; }
};

/// Replacement attention maps; a set slot is used verbatim in place of the
/// computed softmax and the forward continues from it.
class AttentionOverrides {
 public:
  void set(std::size_t layer, std::size_t head, std::vector<double> matrix) {
    slots_[{layer, head}] = std::move(matrix);
  }
  void clear() { slots_.clear(); }
  bool empty() const { return slots_.empty(); }
  const std::vector<double>* find(std::size_t layer, std::size_t head) const {
    auto it = slots_.find({layer, head});
    return it == slots_.end() ? nullptr : &it->second;
  }

 private:
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> slots_;
};

struct BlockWeights {
  Tensor ln1_w, ln1_b;
  Tensor qkv_w, qkv_b;  // [3W, W], [3W]
  Tensor out_w, out_b;  // [W, W], [W]
  Tensor ln2_w, ln2_b;
  Tensor fc_w, fc_b;      // [rW, W], [rW]
  Tensor proj_w, proj_b;  // [W, rW], [W]
};

struct TextWeights {
  Tensor token_embedding;       // [V, W]
  Tensor positional_embedding;  // [n, W]
  std::vector<BlockWeights> layers;
  Tensor ln_final_w, ln_final_b;
  Tensor projection;  // [W, E]
};

struct VisionWeights {
  Tensor patch_embed;           // [Wv, 3, p, p]
  Tensor class_embedding;       // [Wv]
  Tensor positional_embedding;  // [m + 1, Wv]
  Tensor ln_pre_w, ln_pre_b;
  std::vector<BlockWeights> layers;
  Tensor ln_post_w, ln_post_b;
  Tensor projection;  // [Wv, E]
};

/// Activations of one text block kept for the adjoint pass.
struct TextBlockTape {
  std::vector<double> x_in;        // n x W
  std::vector<double> ln1_xhat;    // n x W
  std::vector<double> ln1_rstd;    // n
  std::vector<double> ln1_out;     // n x W
  std::vector<double> qkv;         // n x 3W
  std::vector<double> attn_concat; // n x W (head outputs before out-proj)
  std::vector<double> h;           // n x W (after attention residual)
  std::vector<double> ln2_xhat;
  std::vector<double> ln2_rstd;
  std::vector<double> ln2_out;
  std::vector<double> fc_pre;  // n x rW
  std::vector<double> fc_act;  // n x rW
};

struct TextTape {
  std::vector<TextBlockTape> blocks;
  std::vector<double> final_x;     // n x W, input to ln_final
  std::vector<double> pooled_xhat; // W, normalized row z
  double pooled_rstd = 0.0;
  std::vector<double> pooled;      // W, ln_final output at row z
};

struct TextForward {
  Embedding embedding;
  AttentionTrace trace;
};

// ---------------------------------------------------------------------------
// Weight naming

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;
};

namespace detail {

inline std::vector<TensorSpec> block_specs(const std::string& prefix, std::size_t width, std::size_t hidden) {
  const auto w = static_cast<std::int64_t>(width);
  const auto r = static_cast<std::int64_t>(hidden);
  return {{prefix + "ln1.weight", {w}},         {prefix + "ln1.bias", {w}},
          {prefix + "attn.qkv.weight", {3 * w, w}}, {prefix + "attn.qkv.bias", {3 * w}},
          {prefix + "attn.out.weight", {w, w}}, {prefix + "attn.out.bias", {w}},
          {prefix + "ln2.weight", {w}},         {prefix + "ln2.bias", {w}},
          {prefix + "mlp.fc.weight", {r, w}},   {prefix + "mlp.fc.bias", {r}},
          {prefix + "mlp.proj.weight", {w, r}}, {prefix + "mlp.proj.bias", {w}}};
}

inline bool replace_prefix(std::string& s, const std::string& from, const std::string& to) {
  if (!s.starts_with(from)) return false;
  s = to + s.substr(from.size());
  return true;
}

inline void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace detail

/// Canonical tensor names and shapes required by `c`.
inline std::vector<TensorSpec> expected_tensors(const ModelConfig& c) {
  const auto tw = static_cast<std::int64_t>(c.text_width);
  const auto vw = static_cast<std::int64_t>(c.vision_width);
  const auto e = static_cast<std::int64_t>(c.embed_dim);
  const auto p = static_cast<std::int64_t>(c.patch_size);
  std::vector<TensorSpec> specs = {
      {"text.token_embedding", {static_cast<std::int64_t>(c.vocab_size), tw}},
      {"text.positional_embedding", {static_cast<std::int64_t>(c.context_length), tw}},
  };
  for (std::size_t l = 0; l < c.text_layers; ++l) {
    auto b = detail::block_specs("text.layers." + std::to_string(l) + ".", c.text_width, c.mlp_ratio * c.text_width);
    specs.insert(specs.end(), b.begin(), b.end());
  }
  specs.push_back({"text.ln_final.weight", {tw}});
  specs.push_back({"text.ln_final.bias", {tw}});
  specs.push_back({"text.projection", {tw, e}});
  specs.push_back({"vision.patch_embed.weight", {vw, 3, p, p}});
  specs.push_back({"vision.class_embedding", {vw}});
  specs.push_back({"vision.positional_embedding", {static_cast<std::int64_t>(c.num_patches() + 1), vw}});
  specs.push_back({"vision.ln_pre.weight", {vw}});
  specs.push_back({"vision.ln_pre.bias", {vw}});
  for (std::size_t l = 0; l < c.vision_layers; ++l) {
    auto b = detail::block_specs("vision.layers." + std::to_string(l) + ".", c.vision_width,
                                 c.mlp_ratio * c.vision_width);
    specs.insert(specs.end(), b.begin(), b.end());
  }
  specs.push_back({"vision.ln_post.weight", {vw}});
  specs.push_back({"vision.ln_post.bias", {vw}});
  specs.push_back({"vision.projection", {vw, e}});
  return specs;
}

/// OpenAI / open_clip checkpoint name for a canonical name (used in
/// diagnostics and by the exporter).
inline std::string openai_name(const std::string& canonical) {
  static const std::map<std::string, std::string> kFixed = {
      {"text.token_embedding", "token_embedding.weight"},
      {"text.positional_embedding", "positional_embedding"},
      {"text.ln_final.weight", "ln_final.weight"},
      {"text.ln_final.bias", "ln_final.bias"},
      {"text.projection", "text_projection"},
      {"vision.patch_embed.weight", "visual.conv1.weight"},
      {"vision.class_embedding", "visual.class_embedding"},
      {"vision.positional_embedding", "visual.positional_embedding"},
      {"vision.ln_pre.weight", "visual.ln_pre.weight"},
      {"vision.ln_pre.bias", "visual.ln_pre.bias"},
      {"vision.ln_post.weight", "visual.ln_post.weight"},
      {"vision.ln_post.bias", "visual.ln_post.bias"},
      {"vision.projection", "visual.proj"},
  };
  if (auto it = kFixed.find(canonical); it != kFixed.end()) return it->second;
  std::string s = canonical;
  if (!detail::replace_prefix(s, "text.layers.", "transformer.resblocks.")) {
    detail::replace_prefix(s, "vision.layers.", "visual.transformer.resblocks.");
  }
  detail::replace_all(s, ".ln1.", ".ln_1.");
  detail::replace_all(s, ".ln2.", ".ln_2.");
  detail::replace_all(s, ".attn.qkv.weight", ".attn.in_proj_weight");
  detail::replace_all(s, ".attn.qkv.bias", ".attn.in_proj_bias");
  detail::replace_all(s, ".attn.out.", ".attn.out_proj.");
  detail::replace_all(s, ".mlp.fc.", ".mlp.c_fc.");
  detail::replace_all(s, ".mlp.proj.", ".mlp.c_proj.");
  return s;
}

/// Translates a checkpoint into canonical names. Accepts canonical names,
/// OpenAI / open_clip names and Hugging Face `CLIPModel` names (whose split
/// q/k/v projections are concatenated and whose projection matrices are
/// transposed). Unrecognized tensors are dropped.
inline TensorMap canonicalize(const TensorMap& in) {
  TensorMap out;
  auto from_openai = [](std::string s) -> std::optional<std::string> {
    static const std::map<std::string, std::string> kFixed = {
        {"token_embedding.weight", "text.token_embedding"},
        {"positional_embedding", "text.positional_embedding"},
        {"ln_final.weight", "text.ln_final.weight"},
        {"ln_final.bias", "text.ln_final.bias"},
        {"text_projection", "text.projection"},
        {"visual.conv1.weight", "vision.patch_embed.weight"},
        {"visual.class_embedding", "vision.class_embedding"},
        {"visual.positional_embedding", "vision.positional_embedding"},
        {"visual.ln_pre.weight", "vision.ln_pre.weight"},
        {"visual.ln_pre.bias", "vision.ln_pre.bias"},
        {"visual.ln_post.weight", "vision.ln_post.weight"},
        {"visual.ln_post.bias", "vision.ln_post.bias"},
        {"visual.proj", "vision.projection"},
    };
    if (auto it = kFixed.find(s); it != kFixed.end()) return it->second;
    if (!detail::replace_prefix(s, "transformer.resblocks.", "text.layers.") &&
        !detail::replace_prefix(s, "visual.transformer.resblocks.", "vision.layers.")) {
      return std::nullopt;
    }
    detail::replace_all(s, ".ln_1.", ".ln1.");
    detail::replace_all(s, ".ln_2.", ".ln2.");
    detail::replace_all(s, ".attn.in_proj_weight", ".attn.qkv.weight");
    detail::replace_all(s, ".attn.in_proj_bias", ".attn.qkv.bias");
    detail::replace_all(s, ".attn.out_proj.", ".attn.out.");
    detail::replace_all(s, ".mlp.c_fc.", ".mlp.fc.");
    detail::replace_all(s, ".mlp.c_proj.", ".mlp.proj.");
    return s;
  };

  auto transpose2d = [](const Tensor& t) {
    if (t.shape.size() != 2) return t;
    const auto r = static_cast<std::size_t>(t.shape[0]);
    const auto c = static_cast<std::size_t>(t.shape[1]);
    Tensor o({t.shape[1], t.shape[0]});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o.data[j * r + i] = t.data[i * c + j];
    return o;
  };

  // Hugging Face layout: per-layer q/k/v parts gathered here, concatenated below.
  std::map<std::string, std::map<char, const Tensor*>> qkv_parts;
  for (const auto& [name, t] : in) {
    if (name.starts_with("text.") || name.starts_with("vision.")) {
      out[name] = t;
      continue;
    }
    if (auto c = from_openai(name)) {
      out[*c] = t;
      continue;
    }
    std::string s = name;
    if (s == "text_projection.weight") {
      out["text.projection"] = transpose2d(t);
      continue;
    }
    if (s == "visual_projection.weight") {
      out["vision.projection"] = transpose2d(t);
      continue;
    }
    static const std::map<std::string, std::string> kHfFixed = {
        {"text_model.embeddings.token_embedding.weight", "text.token_embedding"},
        {"text_model.embeddings.position_embedding.weight", "text.positional_embedding"},
        {"text_model.final_layer_norm.weight", "text.ln_final.weight"},
        {"text_model.final_layer_norm.bias", "text.ln_final.bias"},
        {"vision_model.embeddings.class_embedding", "vision.class_embedding"},
        {"vision_model.embeddings.patch_embedding.weight", "vision.patch_embed.weight"},
        {"vision_model.embeddings.position_embedding.weight", "vision.positional_embedding"},
        {"vision_model.pre_layrnorm.weight", "vision.ln_pre.weight"},
        {"vision_model.pre_layrnorm.bias", "vision.ln_pre.bias"},
        {"vision_model.post_layernorm.weight", "vision.ln_post.weight"},
        {"vision_model.post_layernorm.bias", "vision.ln_post.bias"},
    };
    if (auto it = kHfFixed.find(s); it != kHfFixed.end()) {
      out[it->second] = t;
      continue;
    }
    if (!detail::replace_prefix(s, "text_model.encoder.layers.", "text.layers.") &&
        !detail::replace_prefix(s, "vision_model.encoder.layers.", "vision.layers.")) {
      continue;
    }
    bool is_qkv = false;
    for (char part : {'q', 'k', 'v'}) {
      for (const char* suffix : {"weight", "bias"}) {
        const std::string key = std::string(".self_attn.") + part + "_proj." + suffix;
        if (s.ends_with(key)) {
          const std::string base = s.substr(0, s.size() - key.size()) + ".attn.qkv." + suffix;
          qkv_parts[base][part] = &t;
          is_qkv = true;
        }
      }
    }
    if (is_qkv) continue;
    detail::replace_all(s, ".layer_norm1.", ".ln1.");
    detail::replace_all(s, ".layer_norm2.", ".ln2.");
    detail::replace_all(s, ".self_attn.out_proj.", ".attn.out.");
    detail::replace_all(s, ".mlp.fc1.", ".mlp.fc.");
    detail::replace_all(s, ".mlp.fc2.", ".mlp.proj.");
    out[s] = t;
  }
  for (const auto& [base, parts] : qkv_parts) {
    if (parts.size() != 3) throw LoadError("incomplete q/k/v projections for '" + base + "'");
    const Tensor& q = *parts.at('q');
    std::vector<std::int64_t> shape = q.shape;
    if (shape.empty()) throw LoadError("scalar q projection for '" + base + "'");
    Tensor cat;
    for (char part : {'q', 'k', 'v'}) {
      const Tensor& t = *parts.at(part);
      if (t.shape != q.shape) throw LoadError("mismatched q/k/v shapes for '" + base + "'");
      cat.data.insert(cat.data.end(), t.data.begin(), t.data.end());
    }
    shape[0] *= 3;
    cat.shape = shape;
    out[base] = std::move(cat);
  }
  return out;
}

// ---------------------------------------------------------------------------

class Model {
 public:
  /// Validates `weights` (any supported naming) against `config` and takes
  /// ownership of the tensors. Missing or mis-shaped tensors raise LoadError.
  static Model load(const ModelConfig& config, const TensorMap& weights) {
    config.validate();
    TensorMap canon = canonicalize(weights);
    for (const auto& spec : expected_tensors(config)) {
      auto it = canon.find(spec.name);
      if (it == canon.end()) {
        throw LoadError("missing tensor '" + spec.name + "' (checkpoint name '" + openai_name(spec.name) + "')");
      }
      if (it->second.shape != spec.shape) {
        throw LoadError("tensor '" + spec.name + "' has shape " + shape_string(it->second.shape) + ", expected " +
                        shape_string(spec.shape));
      }
    }
    Model m;
    m.config_ = config;
    auto take = [&](const std::string& name) { return std::move(canon.at(name)); };
    auto take_block = [&](const std::string& p) {
      BlockWeights b;
      b.ln1_w = take(p + "ln1.weight");
      b.ln1_b = take(p + "ln1.bias");
      b.qkv_w = take(p + "attn.qkv.weight");
      b.qkv_b = take(p + "attn.qkv.bias");
      b.out_w = take(p + "attn.out.weight");
      b.out_b = take(p + "attn.out.bias");
      b.ln2_w = take(p + "ln2.weight");
      b.ln2_b = take(p + "ln2.bias");
      b.fc_w = take(p + "mlp.fc.weight");
      b.fc_b = take(p + "mlp.fc.bias");
      b.proj_w = take(p + "mlp.proj.weight");
      b.proj_b = take(p + "mlp.proj.bias");
      return b;
    };
    m.text_.token_embedding = take("text.token_embedding");
    m.text_.positional_embedding = take("text.positional_embedding");
    for (std::size_t l = 0; l < config.text_layers; ++l) {
      m.text_.layers.push_back(take_block("text.layers." + std::to_string(l) + "."));
    }
    m.text_.ln_final_w = take("text.ln_final.weight");
    m.text_.ln_final_b = take("text.ln_final.bias");
    m.text_.projection = take("text.projection");
    m.vision_.patch_embed = take("vision.patch_embed.weight");
    m.vision_.class_embedding = take("vision.class_embedding");
    m.vision_.positional_embedding = take("vision.positional_embedding");
    m.vision_.ln_pre_w = take("vision.ln_pre.weight");
    m.vision_.ln_pre_b = take("vision.ln_pre.bias");
    for (std::size_t l = 0; l < config.vision_layers; ++l) {
      m.vision_.layers.push_back(take_block("vision.layers." + std::to_string(l) + "."));
    }
    m.vision_.ln_post_w = take("vision.ln_post.weight");
    m.vision_.ln_post_b = take("vision.ln_post.bias");
    m.vision_.projection = take("vision.projection");
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const TextWeights& text_weights() const { return text_; }
  const VisionWeights& vision_weights() const { return vision_; }

  Embedding encode_image(const ImageInput& image) const {
    const auto& c = config_;
    const std::size_t res = c.image_resolution;
    if (image.resolution != res || image.chw.size() != 3 * res * res) {
      throw InputError("image must be preprocessed to " + std::to_string(res) + "x" + std::to_string(res));
    }
    const std::size_t p = c.patch_size;
    const std::size_t g = c.grid();
    const std::size_t m = g * g;
    const std::size_t w = c.vision_width;
    const std::size_t rows = m + 1;
    const std::size_t patch_len = 3 * p * p;

    std::vector<double> patches(m * patch_len);
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* dst = patches.data() + (gy * g + gx) * patch_len;
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t ky = 0; ky < p; ++ky)
            for (std::size_t kx = 0; kx < p; ++kx)
              *dst++ = image.chw[(ch * res + gy * p + ky) * res + gx * p + kx];
      }
    }
    std::vector<double> x(rows * w);
    ops::linear(patches, m, patch_len, vision_.patch_embed.data, {}, w, std::span<double>(x).subspan(w));
    for (std::size_t k = 0; k < w; ++k) x[k] = vision_.class_embedding.data[k];
    for (std::size_t i = 0; i < rows * w; ++i) x[i] += vision_.positional_embedding.data[i];
    std::vector<double> y(rows * w);
    ops::layer_norm(x, rows, w, vision_.ln_pre_w.data, vision_.ln_pre_b.data, y);
    x.swap(y);
    for (const auto& block : vision_.layers) {
      run_block(block, x, rows, w, c.vision_heads, /*causal=*/false, nullptr, nullptr, nullptr, 0);
    }
    std::vector<double> cls(w);
    ops::layer_norm(std::span<const double>(x).first(w), 1, w, vision_.ln_post_w.data, vision_.ln_post_b.data, cls);
    Embedding e;
    e.values.resize(c.embed_dim);
    ops::matmul(cls, 1, w, vision_.projection.data, c.embed_dim, e.values);
    return e;
  }

  /// Runs the text tower. `overrides` replaces selected attention maps;
  /// `tape`, when given, receives the activations needed for the adjoint.
  TextForward encode_text(const TokenSequence& tokens, const AttentionOverrides* overrides = nullptr,
                          TextTape* tape = nullptr) const {
    const auto& c = config_;
    const std::size_t n = c.context_length;
    const std::size_t w = c.text_width;
    if (tokens.ids.size() != n) {
      throw InputError("token sequence length " + std::to_string(tokens.ids.size()) + " != context length " +
                       std::to_string(n));
    }
    if (tokens.z < 1 || tokens.z >= n) throw InputError("EOS index " + std::to_string(tokens.z) + " out of range");
    std::vector<double> x(n * w);
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = tokens.ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
        throw InputError("token id " + std::to_string(id) + " outside the vocabulary");
      }
      const float* emb = text_.token_embedding.data.data() + static_cast<std::size_t>(id) * w;
      const float* pos = text_.positional_embedding.data.data() + i * w;
      for (std::size_t k = 0; k < w; ++k) x[i * w + k] = emb[k] + pos[k];
    }
    TextForward out;
    out.trace = AttentionTrace(c.text_layers, c.text_heads, n);
    if (tape) tape->blocks.assign(c.text_layers, {});
    for (std::size_t l = 0; l < c.text_layers; ++l) {
      run_block(text_.layers[l], x, n, w, c.text_heads, /*causal=*/true, &out.trace, overrides,
                tape ? &tape->blocks[l] : nullptr, l);
    }
    const std::size_t z = tokens.z;
    std::vector<double> pooled(w);
    std::vector<double> xhat(w);
    double rstd = 0.0;
    ops::layer_norm(std::span<const double>(x).subspan(z * w, w), 1, w, text_.ln_final_w.data, text_.ln_final_b.data,
                    pooled, xhat, std::span<double>(&rstd, 1));
    out.embedding.values.resize(c.embed_dim);
    ops::matmul(pooled, 1, w, text_.projection.data, c.embed_dim, out.embedding.values);
    if (tape) {
      tape->final_x = x;
      tape->pooled_xhat = std::move(xhat);
      tape->pooled_rstd = rstd;
      tape->pooled = std::move(pooled);
    }
    return out;
  }

 private:
  // Pre-norm residual block: x += attn(ln1(x)); x += mlp(ln2(x)).
  void run_block(const BlockWeights& b, std::vector<double>& x, std::size_t n, std::size_t w, std::size_t heads,
                 bool causal, AttentionTrace* trace, const AttentionOverrides* overrides, TextBlockTape* tape,
                 std::size_t layer) const {
    const std::size_t d = w / heads;
    const std::size_t hidden = config_.mlp_ratio * w;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> y(n * w), xhat, rstd;
    if (tape) {
      tape->x_in = x;
      xhat.resize(n * w);
      rstd.resize(n);
    }
    ops::layer_norm(x, n, w, b.ln1_w.data, b.ln1_b.data, y, xhat, rstd);
    std::vector<double> qkv(n * 3 * w);
    ops::linear(y, n, w, b.qkv_w.data, b.qkv_b.data, 3 * w, qkv);

    std::vector<double> concat(n * w, 0.0);
    std::vector<double> attn(n * n);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::vector<double>* replacement = overrides ? overrides->find(layer, hd) : nullptr;
      if (replacement) {
        if (replacement->size() != n * n) throw InputError("attention override has wrong size");
        attn = *replacement;
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          const double* q = qkv.data() + i * 3 * w + hd * d;
          const std::size_t valid = causal ? i + 1 : n;
          for (std::size_t j = 0; j < valid; ++j) {
            const double* k = qkv.data() + j * 3 * w + w + hd * d;
            double acc = 0.0;
            for (std::size_t t = 0; t < d; ++t) acc += q[t] * k[t];
            attn[i * n + j] = acc * scale;
          }
          ops::masked_softmax(std::span<double>(attn).subspan(i * n, n), valid);
        }
      }
      if (trace) std::copy(attn.begin(), attn.end(), trace->map(layer, hd).begin());
      for (std::size_t i = 0; i < n; ++i) {
        double* o = concat.data() + i * w + hd * d;
        for (std::size_t j = 0; j < n; ++j) {
          const double a = attn[i * n + j];
          if (a == 0.0) continue;
          const double* v = qkv.data() + j * 3 * w + 2 * w + hd * d;
          for (std::size_t t = 0; t < d; ++t) o[t] += a * v[t];
        }
      }
    }
    std::vector<double> proj(n * w);
    ops::linear(concat, n, w, b.out_w.data, b.out_b.data, w, proj);
    for (std::size_t i = 0; i < n * w; ++i) x[i] += proj[i];
    if (tape) {
      tape->ln1_xhat = std::move(xhat);
      tape->ln1_rstd = std::move(rstd);
      tape->ln1_out = y;
      tape->qkv = qkv;
      tape->attn_concat = concat;
      tape->h = x;
      xhat.assign(n * w, 0.0);
      rstd.assign(n, 0.0);
    }

    ops::layer_norm(x, n, w, b.ln2_w.data, b.ln2_b.data, y, xhat, rstd);
    std::vector<double> pre(n * hidden), act(n * hidden);
    ops::linear(y, n, w, b.fc_w.data, b.fc_b.data, hidden, pre);
    for (std::size_t i = 0; i < n * hidden; ++i) act[i] = ops::activate(config_.activation, pre[i]);
    ops::linear(act, n, hidden, b.proj_w.data, b.proj_b.data, w, proj);
    for (std::size_t i = 0; i < n * w; ++i) x[i] += proj[i];
    if (tape) {
      tape->ln2_xhat = std::move(xhat);
      tape->ln2_rstd = std::move(rstd);
      tape->ln2_out = std::move(y);
      tape->fc_pre = std::move(pre);
      tape->fc_act = std::move(act);
    }
  }

  ModelConfig config_;
  TextWeights text_;
  VisionWeights vision_;
};

/// Cosine similarity of two embeddings; zero or non-finite norms raise
/// NumericalError.
inline double similarity(const Embedding& a, const Embedding& b) {
  if (a.values.size() != b.values.size()) throw InputError("embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double x = a.values[i], y = b.values[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (!(na > 0.0) || !(nb > 0.0) || !std::isfinite(na) || !std::isfinite(nb) || !std::isfinite(dot)) {
    throw NumericalError("cosine similarity needs finite, non-zero embeddings");
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace densealign
