#pragma once

// Signed attention attributions for the text tower.
//
// attention_gradients() differentiates the image-text cosine score with
// respect to every post-softmax attention map A[l][h] of the text encoder by a
// hand-written adjoint of Model::encode_text. The image embedding is a
// constant. A[l][h] is treated as a free input: its own softmax is not
// chained, but the adjoint does pass through the softmax of every later
// layer, so the result equals the derivative of the score under attention
// overrides.
//
// relevance() multiplies gradients and maps elementwise, averages over
// heads, then averages layers l_start..L. No rectification is applied in
// signed mode, so negative entries survive and mark misaligned tokens.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "densealign/error.hpp"
#include "densealign/model.hpp"
#include "densealign/ops.hpp"
#include "densealign/tokenizer.hpp"

namespace densealign {

/// d score / d A[l][h], same layout as AttentionTrace.
struct GradientTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t n = 0;
  std::vector<double> grads;

  GradientTrace() = default;
  GradientTrace(std::size_t l, std::size_t h, std::size_t n_)
      : layers(l), heads(h), n(n_), grads(l * h * n_ * n_, 0.0) {}

  std::span<double> map(std::size_t l, std::size_t h) { return {grads.data() + (l * heads + h) * n * n, n * n}; }
  std::span<const double> map(std::size_t l, std::size_t h) const {
    return {grads.data() + (l * heads + h) * n * n, n * n};
  }
  double at(std::size_t l, std::size_t h, std::size_t i, std::size_t j) const { return map(l, h)[i * n + j]; }
};

enum class AttributionVariant {
  signed_product,          // mean_h (dA * A), no rectification
  relu_before_head_mean,   // keep only negative dA * A, then head mean
  relu_before_layer_mean,  // signed head mean, keep only negative entries, then layer mean
  grad_only,               // mean_h dA (causally masked entries zeroed)
};

inline std::string to_string(AttributionVariant v) {
  switch (v) {
    case AttributionVariant::signed_product: return "signed";
    case AttributionVariant::relu_before_head_mean: return "relu-head";
    case AttributionVariant::relu_before_layer_mean: return "relu-layer";
    case AttributionVariant::grad_only: return "grad-only";
  }
  return "signed";
}

inline AttributionVariant parse_variant(const std::string& s) {
  if (s == "signed") return AttributionVariant::signed_product;
  if (s == "relu-head" || s == "relu_before_head_mean") return AttributionVariant::relu_before_head_mean;
  if (s == "relu-layer" || s == "relu_before_layer_mean") return AttributionVariant::relu_before_layer_mean;
  if (s == "grad-only" || s == "grad_only") return AttributionVariant::grad_only;
  throw ConfigError("unknown attribution variant '" + s + "'");
}

inline constexpr AttributionVariant kAllVariants[] = {
    AttributionVariant::signed_product, AttributionVariant::relu_before_head_mean,
    AttributionVariant::relu_before_layer_mean, AttributionVariant::grad_only};

/// Everything one forward + adjoint produces for a caption.
struct AttributionPass {
  double score = 0.0;
  Embedding text_embedding;
  AttentionTrace trace;
  GradientTrace grads;
};

namespace detail {

// dx[r, k] = sum_o dy[r, o] * w[o, k]   (w is [out, in])
inline void linear_backward_input(std::span<const double> dy, std::size_t rows, std::size_t out,
                                  std::span<const float> w, std::size_t in, std::span<double> dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* dxr = dx.data() + r * in;
    for (std::size_t k = 0; k < in; ++k) dxr[k] = 0.0;
    const double* dyr = dy.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      const float* wo = w.data() + o * in;
      for (std::size_t k = 0; k < in; ++k) dxr[k] += g * wo[k];
    }
  }
}

// Accumulates the layer-norm input gradient of one row into `dx`.
inline void layer_norm_backward_row(const double* dy, const float* gamma, const double* xhat, double rstd,
                                    std::size_t width, double* dx) {
  double mean_g = 0.0;
  double mean_gx = 0.0;
  for (std::size_t k = 0; k < width; ++k) {
    const double g = dy[k] * gamma[k];
    mean_g += g;
    mean_gx += g * xhat[k];
  }
  mean_g /= static_cast<double>(width);
  mean_gx /= static_cast<double>(width);
  for (std::size_t k = 0; k < width; ++k) {
    const double g = dy[k] * gamma[k];
    dx[k] += rstd * (g - mean_g - xhat[k] * mean_gx);
  }
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace detail

/// Forward pass plus exact reverse-mode gradients of the cosine score with
/// respect to every text attention map, holding `image` fixed.
inline AttributionPass attribute(const Model& model, const TokenSequence& tokens, const Embedding& image) {
  const auto& c = model.config();
  const auto& tw = model.text_weights();
  const std::size_t n = c.context_length;
  const std::size_t w = c.text_width;
  const std::size_t heads = c.text_heads;
  const std::size_t d = c.text_head_dim();
  const std::size_t hidden = c.mlp_ratio * w;
  const std::size_t e_dim = c.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  TextTape tape;
  TextForward fwd = model.encode_text(tokens, nullptr, &tape);
  AttributionPass out;
  out.score = similarity(image, fwd.embedding);

  // Cosine: d s / d e_t = e_v / (|e_v||e_t|) - s * e_t / |e_t|^2
  const auto& ev = image.values;
  const auto& et = fwd.embedding.values;
  double nv2 = 0.0, nt2 = 0.0;
  for (std::size_t k = 0; k < e_dim; ++k) {
    nv2 += ev[k] * ev[k];
    nt2 += et[k] * et[k];
  }
  const double nv = std::sqrt(nv2);
  const double nt = std::sqrt(nt2);
  const double s = out.score;
  std::vector<double> d_et(e_dim);
  for (std::size_t k = 0; k < e_dim; ++k) d_et[k] = ev[k] / (nv * nt) - s * et[k] / nt2;

  // e_t = pooled @ P, P is [W, E]
  std::vector<double> d_pooled(w, 0.0);
  for (std::size_t k = 0; k < w; ++k) {
    const float* pk = tw.projection.data.data() + k * e_dim;
    double acc = 0.0;
    for (std::size_t e = 0; e < e_dim; ++e) acc += pk[e] * d_et[e];
    d_pooled[k] = acc;
  }
  std::vector<double> dx(n * w, 0.0);
  detail::layer_norm_backward_row(d_pooled.data(), tw.ln_final_w.data.data(), tape.pooled_xhat.data(),
                                  tape.pooled_rstd, w, dx.data() + tokens.z * w);

  out.grads = GradientTrace(c.text_layers, heads, n);
  std::vector<double> d_act(n * hidden), d_y(n * w), d_concat(n * w), d_qkv(n * 3 * w);
  for (std::size_t li = c.text_layers; li-- > 0;) {
    const auto& b = tw.layers[li];
    const auto& t = tape.blocks[li];

    // x_out = h + proj(act(fc(ln2(h))))
    std::vector<double> dh = dx;
    detail::linear_backward_input(dx, n, w, b.proj_w.data, hidden, d_act);
    for (std::size_t i = 0; i < n * hidden; ++i) d_act[i] *= ops::activate_grad(c.activation, t.fc_pre[i]);
    detail::linear_backward_input(d_act, n, hidden, b.fc_w.data, w, d_y);
    for (std::size_t i = 0; i < n; ++i) {
      detail::layer_norm_backward_row(d_y.data() + i * w, b.ln2_w.data.data(), t.ln2_xhat.data() + i * w,
                                      t.ln2_rstd[i], w, dh.data() + i * w);
    }

    // h = x_in + out(concat), concat_h = A_h V_h
    detail::linear_backward_input(dh, n, w, b.out_w.data, w, d_concat);
    std::fill(d_qkv.begin(), d_qkv.end(), 0.0);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const auto attn = fwd.trace.map(li, hd);
      auto g_attn = out.grads.map(li, hd);
      for (std::size_t i = 0; i < n; ++i) {
        const double* go = d_concat.data() + i * w + hd * d;
        for (std::size_t j = 0; j < n; ++j) {
          const double* v = t.qkv.data() + j * 3 * w + 2 * w + hd * d;
          double acc = 0.0;
          for (std::size_t k = 0; k < d; ++k) acc += go[k] * v[k];
          g_attn[i * n + j] = acc;
        }
      }
      // dV[j] = sum_i A[i, j] dO[i]
      for (std::size_t i = 0; i < n; ++i) {
        const double* go = d_concat.data() + i * w + hd * d;
        for (std::size_t j = 0; j <= i; ++j) {
          const double a = attn[i * n + j];
          if (a == 0.0) continue;
          double* dv = d_qkv.data() + j * 3 * w + 2 * w + hd * d;
          for (std::size_t k = 0; k < d; ++k) dv[k] += a * go[k];
        }
      }
      // softmax adjoint over the causal prefix, then logits = scale * q.k
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += attn[i * n + j] * g_attn[i * n + j];
        const double* q = t.qkv.data() + i * 3 * w + hd * d;
        double* dq = d_qkv.data() + i * 3 * w + hd * d;
        for (std::size_t j = 0; j <= i; ++j) {
          const double dl = attn[i * n + j] * (g_attn[i * n + j] - dot) * scale;
          if (dl == 0.0) continue;
          const double* k = t.qkv.data() + j * 3 * w + w + hd * d;
          double* dk = d_qkv.data() + j * 3 * w + w + hd * d;
          for (std::size_t m = 0; m < d; ++m) {
            dq[m] += dl * k[m];
            dk[m] += dl * q[m];
          }
        }
      }
      if (!detail::all_finite(g_attn)) {
        throw NumericalError("non-finite attention gradient at text layer " + std::to_string(li + 1) + ", head " +
                             std::to_string(hd + 1));
      }
    }
    detail::linear_backward_input(d_qkv, n, 3 * w, b.qkv_w.data, w, d_y);
    dx = dh;
    for (std::size_t i = 0; i < n; ++i) {
      detail::layer_norm_backward_row(d_y.data() + i * w, b.ln1_w.data.data(), t.ln1_xhat.data() + i * w,
                                      t.ln1_rstd[i], w, dx.data() + i * w);
    }
    if (!detail::all_finite(dx)) {
      throw NumericalError("non-finite residual gradient at text layer " + std::to_string(li + 1));
    }
  }
  out.text_embedding = std::move(fwd.embedding);
  out.trace = std::move(fwd.trace);
  return out;
}

inline GradientTrace attention_gradients(const Model& model, const TokenSequence& tokens, const Embedding& image) {
  return attribute(model, tokens, image).grads;
}

/// Square n x n matrix, row-major.
struct Matrix {
  std::size_t n = 0;
  std::vector<double> values;

  Matrix() = default;
  explicit Matrix(std::size_t n_) : n(n_), values(n_ * n_, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

struct RelevanceMap {
  std::vector<Matrix> per_layer;  // all L layers, as fed to the layer mean
  Matrix aggregate;               // mean over layers l_start..L
  std::size_t l_start = 1;        // 1-based
};

/// Per-layer relevance R_l for every layer under `variant`.
inline std::vector<Matrix> layer_relevance(const AttentionTrace& trace, const GradientTrace& grads,
                                           AttributionVariant variant) {
  if (trace.layers != grads.layers || trace.heads != grads.heads || trace.n != grads.n) {
    throw InputError("attention and gradient traces cover different (layer, head) sets");
  }
  const std::size_t n = trace.n;
  const auto heads = static_cast<double>(trace.heads);
  std::vector<Matrix> out(trace.layers, Matrix(n));
  for (std::size_t l = trace.layers; l-- > 0;) {
    auto& r = out[l].values;
    for (std::size_t h = 0; h < trace.heads; ++h) {
      const auto a = trace.map(l, h);
      const auto g = grads.map(l, h);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = i * n + j;
          double v = 0.0;
          switch (variant) {
            case AttributionVariant::grad_only: v = j > i ? 0.0 : g[k]; break;
            case AttributionVariant::relu_before_head_mean: v = std::min(g[k] * a[k], 0.0); break;
            default: v = g[k] * a[k]; break;
          }
          r[k] += v;
        }
      }
    }
    for (auto& v : r) v /= heads;
    if (variant == AttributionVariant::relu_before_layer_mean) {
      for (auto& v : r) v = std::min(v, 0.0);
    }
  }
  return out;
}

/// Mean of per-layer maps over layers l_start..L (1-based, inclusive).
inline Matrix layer_mean(const std::vector<Matrix>& per_layer, std::size_t l_start) {
  const std::size_t layers = per_layer.size();
  if (l_start < 1 || l_start > layers) {
    throw ConfigError("l_start " + std::to_string(l_start) + " outside 1.." + std::to_string(layers));
  }
  Matrix agg(per_layer.front().n);
  for (std::size_t l = layers; l-- > l_start - 1;) {
    for (std::size_t k = 0; k < agg.values.size(); ++k) agg.values[k] += per_layer[l].values[k];
  }
  const auto count = static_cast<double>(layers - l_start + 1);
  for (auto& v : agg.values) v /= count;
  return agg;
}

inline RelevanceMap relevance(const AttentionTrace& trace, const GradientTrace& grads, std::size_t l_start,
                              AttributionVariant variant = AttributionVariant::signed_product) {
  if (l_start < 1 || l_start > trace.layers) {
    throw ConfigError("l_start " + std::to_string(l_start) + " outside 1.." + std::to_string(trace.layers));
  }
  RelevanceMap m;
  m.per_layer = layer_relevance(trace, grads, variant);
  m.aggregate = layer_mean(m.per_layer, l_start);
  m.l_start = l_start;
  return m;
}

/// Row z of the aggregate map; positions after the EOS carry no attribution.
inline std::vector<std::optional<double>> token_attributions(const Matrix& aggregate, std::size_t z) {
  if (z >= aggregate.n) throw InputError("EOS index outside the relevance map");
  std::vector<std::optional<double>> row(aggregate.n);
  for (std::size_t j = 0; j <= z; ++j) row[j] = aggregate(z, j);
  return row;
}

inline std::vector<std::optional<double>> token_attributions(const RelevanceMap& rel, std::size_t z) {
  return token_attributions(rel.aggregate, z);
}

}  // namespace densealign
