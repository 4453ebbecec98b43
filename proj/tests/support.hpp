#pragma once

// Shared helpers for the test suites: fixture paths, a straight-line
// double-precision CLIP forward used as an oracle, and finite differences
// through the attention-override hook.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densealign/config.hpp"
#include "densealign/model.hpp"
#include "densealign/random_model.hpp"
#include "densealign/safetensors.hpp"
#include "densealign/tokenizer.hpp"

namespace testing_support {

using namespace densealign;

inline std::filesystem::path data_dir() { return DENSEALIGN_TEST_DATA; }
inline std::filesystem::path oracle_dir() { return data_dir() / "oracle"; }
inline std::filesystem::path real_vocab() { return std::filesystem::path(DENSEALIGN_SOURCE_DIR) / "data" / "bpe_simple_vocab_16e6.txt.gz"; }

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open fixture " + p.string());
  return nlohmann::json::parse(in);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("densealign_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline const Tokenizer& tiny_tokenizer() {
  static const Tokenizer tok = Tokenizer::from_file(data_dir() / "tiny_merges.txt");
  return tok;
}

inline ImageInput random_image(std::size_t res, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ImageInput img{res, std::vector<float>(3 * res * res)};
  for (auto& v : img.chw) v = normal(rng);
  return img;
}

/// A tiny random model wired to the test vocabulary.
struct TinyModel {
  ModelConfig config;
  TensorMap weights;
  Model model;
};

inline TinyModel make_tiny(std::size_t layers, std::size_t heads, std::size_t width, std::size_t n,
                           std::uint32_t seed, float spread = 1.0f, Activation act = Activation::gelu) {
  auto c = tiny_config(layers, heads, width, n, tiny_tokenizer().vocab_size() - 514);
  c.activation = act;
  auto w = random_weights(c, seed, spread);
  auto m = Model::load(c, w);
  return {c, std::move(w), std::move(m)};
}

// --- naive double-precision forward ----------------------------------------

class NaiveClip {
 public:
  using Mat = std::vector<std::vector<double>>;

  NaiveClip(const ModelConfig& c, const TensorMap& w) : c_(c), w_(canonicalize(w)) {}

  std::vector<double> image_embedding(const ImageInput& img) const {
    const std::size_t p = c_.patch_size, res = c_.image_resolution, g = res / p, vw = c_.vision_width;
    const auto& conv = w_.at("vision.patch_embed.weight").data;
    Mat x(1 + g * g, std::vector<double>(vw));
    for (std::size_t k = 0; k < vw; ++k) x[0][k] = w_.at("vision.class_embedding").data[k];
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px)
        for (std::size_t o = 0; o < vw; ++o) {
          double acc = 0.0;
          for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx) {
                acc += conv[((o * 3 + ch) * p + dy) * p + dx] *
                       img.chw[(ch * res + py * p + dy) * res + px * p + dx];
              }
          x[1 + py * g + px][o] = acc;
        }
    const auto& pos = w_.at("vision.positional_embedding").data;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t k = 0; k < vw; ++k) x[i][k] += pos[i * vw + k];
    x = norm(x, "vision.ln_pre");
    for (std::size_t l = 0; l < c_.vision_layers; ++l) {
      x = block(x, "vision.layers." + std::to_string(l) + ".", c_.vision_heads, false, nullptr);
    }
    Mat pooled = norm({x[0]}, "vision.ln_post");
    return project(pooled[0], "vision.projection", c_.embed_dim);
  }

  /// Replacement text attention maps keyed by (layer, head), used verbatim.
  using Overrides = std::map<std::pair<std::size_t, std::size_t>, Mat>;

  /// `maps`, if given, receives [layer][head] attention matrices.
  std::vector<double> text_embedding(const TokenSequence& tokens, std::vector<std::vector<Mat>>* maps = nullptr,
                                     const Overrides* overrides = nullptr) const {
    const std::size_t n = c_.context_length, tw = c_.text_width;
    const auto& emb = w_.at("text.token_embedding").data;
    const auto& pos = w_.at("text.positional_embedding").data;
    Mat x(n, std::vector<double>(tw));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < tw; ++k) {
        x[i][k] = emb[static_cast<std::size_t>(tokens.ids[i]) * tw + k] + pos[i * tw + k];
      }
    if (maps) maps->assign(c_.text_layers, {});
    for (std::size_t l = 0; l < c_.text_layers; ++l) {
      x = block(x, "text.layers." + std::to_string(l) + ".", c_.text_heads, true, maps ? &(*maps)[l] : nullptr,
                overrides, l);
    }
    Mat pooled = norm({x[tokens.z]}, "text.ln_final");
    return project(pooled[0], "text.projection", c_.embed_dim);
  }

  static double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
  }

 private:
  const std::vector<float>& t(const std::string& name) const { return w_.at(name).data; }

  Mat norm(const Mat& x, const std::string& prefix) const {
    const auto& g = t(prefix + ".weight");
    const auto& b = t(prefix + ".bias");
    Mat out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t width = x[i].size();
      double mean = 0.0;
      for (double v : x[i]) mean += v;
      mean /= static_cast<double>(width);
      double var = 0.0;
      for (double v : x[i]) var += (v - mean) * (v - mean);
      var /= static_cast<double>(width);
      for (std::size_t k = 0; k < width; ++k) out[i][k] = (x[i][k] - mean) / std::sqrt(var + 1e-5) * g[k] + b[k];
    }
    return out;
  }

  // y = x W^T + b with W stored [out, in]
  static Mat dense(const Mat& x, const std::vector<float>& wt, const std::vector<float>& b, std::size_t out) {
    Mat y(x.size(), std::vector<double>(out));
    const std::size_t in = x.empty() ? 0 : x[0].size();
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        for (std::size_t k = 0; k < in; ++k) acc += wt[o * in + k] * x[i][k];
        y[i][o] = acc;
      }
    return y;
  }

  double act(double v) const {
    if (c_.activation == Activation::quick_gelu) return v / (1.0 + std::exp(-1.702 * v));
    return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  }

  Mat block(const Mat& x, const std::string& p, std::size_t heads, bool causal, std::vector<Mat>* maps,
            const Overrides* overrides = nullptr, std::size_t layer = 0) const {
    const std::size_t n = x.size(), w = x[0].size(), d = w / heads;
    Mat h = norm(x, p + "ln1");
    Mat qkv = dense(h, t(p + "attn.qkv.weight"), t(p + "attn.qkv.bias"), 3 * w);
    Mat concat(n, std::vector<double>(w, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Mat a(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logits(n);
        double mx = -INFINITY;
        const std::size_t limit = causal ? i + 1 : n;
        for (std::size_t j = 0; j < limit; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) dot += qkv[i][hd * d + k] * qkv[j][w + hd * d + k];
          logits[j] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, logits[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < limit; ++j) total += (a[i][j] = std::exp(logits[j] - mx));
        for (std::size_t j = 0; j < limit; ++j) a[i][j] /= total;
      }
      if (overrides) {
        if (auto it = overrides->find({layer, hd}); it != overrides->end()) a = it->second;
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += a[i][j] * qkv[j][2 * w + hd * d + k];
          concat[i][hd * d + k] = acc;
        }
      if (maps) maps->push_back(a);
    }
    Mat attn_out = dense(concat, t(p + "attn.out.weight"), t(p + "attn.out.bias"), w);
    Mat mid = x;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < w; ++k) mid[i][k] += attn_out[i][k];
    Mat hidden = dense(norm(mid, p + "ln2"), t(p + "mlp.fc.weight"), t(p + "mlp.fc.bias"), c_.mlp_ratio * w);
    for (auto& row : hidden)
      for (auto& v : row) v = act(v);
    Mat mlp = dense(hidden, t(p + "mlp.proj.weight"), t(p + "mlp.proj.bias"), w);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < w; ++k) mid[i][k] += mlp[i][k];
    return mid;
  }

  // Projection stored [in, out].
  std::vector<double> project(const std::vector<double>& v, const std::string& name, std::size_t out) const {
    const auto& pw = t(name);
    std::vector<double> r(out, 0.0);
    for (std::size_t k = 0; k < v.size(); ++k)
      for (std::size_t e = 0; e < out; ++e) r[e] += v[k] * pw[k * out + e];
    return r;
  }

  ModelConfig c_;
  TensorMap w_;
};

// --- finite differences ----------------------------------------------------

/// Central difference of the score with respect to A[l][h][i][j], evaluated
/// in double precision by overriding that map in the reference forward.
inline double fd_attention_reference(const NaiveClip& ref, const TokenSequence& tokens,
                                     const std::vector<double>& image, std::size_t l, std::size_t h, std::size_t i,
                                     std::size_t j, double step) {
  std::vector<std::vector<NaiveClip::Mat>> maps;
  ref.text_embedding(tokens, &maps);
  NaiveClip::Overrides ov;
  auto plus = maps[l][h];
  plus[i][j] += step;
  ov[{l, h}] = plus;
  const double sp = NaiveClip::cosine(image, ref.text_embedding(tokens, nullptr, &ov));
  auto minus = maps[l][h];
  minus[i][j] -= step;
  ov[{l, h}] = minus;
  const double sm = NaiveClip::cosine(image, ref.text_embedding(tokens, nullptr, &ov));
  return (sp - sm) / (2.0 * step);
}

/// Central difference of the score with respect to A[l][h][i][j], computed
/// by overriding that one map and re-running the forward.
inline double fd_attention(const Model& model, const TokenSequence& tokens, const Embedding& image,
                           const AttentionTrace& trace, std::size_t l, std::size_t h, std::size_t i, std::size_t j,
                           double step) {
  const std::size_t n = trace.n;
  auto base = std::vector<double>(trace.map(l, h).begin(), trace.map(l, h).end());
  AttentionOverrides ov;
  auto plus = base;
  plus[i * n + j] += step;
  ov.set(l, h, plus);
  const double sp = similarity(image, model.encode_text(tokens, &ov).embedding);
  auto minus = base;
  minus[i * n + j] -= step;
  ov.set(l, h, minus);
  const double sm = similarity(image, model.encode_text(tokens, &ov).embedding);
  return (sp - sm) / (2.0 * step);
}

}  // namespace testing_support
