#include <cmath>

#include <gtest/gtest.h>

#include "densealign/model.hpp"
#include "densealign/pipeline.hpp"
#include "densealign/random_model.hpp"
#include "support.hpp"

using namespace densealign;
using namespace testing_support;

namespace {

struct GridPoint {
  std::size_t layers, heads, n;
};

std::vector<GridPoint> grid() {
  std::vector<GridPoint> out;
  for (std::size_t l : {1, 2, 3})
    for (std::size_t h : {1, 2})
      for (std::size_t n : {4, 8}) out.push_back({l, h, n});
  return out;
}

const std::vector<std::string> kCaptions = {"a cat", "two dogs run", "the red car is on the grass", ""};

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST(Model, MatchesNaiveForwardOnGrid) {
  double worst_v = 0, worst_t = 0, worst_s = 0;
  std::uint32_t seed = 11;
  for (const auto& g : grid()) {
    for (Activation act : {Activation::gelu, Activation::quick_gelu}) {
      for (std::size_t width : {8u, 32u}) {
        SCOPED_TRACE("L=" + std::to_string(g.layers) + " H=" + std::to_string(g.heads) + " n=" + std::to_string(g.n) +
                     " W=" + std::to_string(width));
        auto tm = make_tiny(g.layers, g.heads, width, g.n, ++seed, 1.0f, act);
        const NaiveClip ref(tm.config, tm.weights);
        const auto img = random_image(tm.config.image_resolution, seed);
        const auto ev = tm.model.encode_image(img);
        const auto ev_ref = ref.image_embedding(img);
        worst_v = std::max(worst_v, max_abs_diff(ev.values, ev_ref));
        for (const auto& caption : kCaptions) {
          const auto tokens = tokenize_caption(tiny_tokenizer(), caption, "", g.n);
          const auto et = tm.model.encode_text(tokens).embedding;
          const auto et_ref = ref.text_embedding(tokens);
          worst_t = std::max(worst_t, max_abs_diff(et.values, et_ref));
          worst_s = std::max(worst_s, std::fabs(similarity(ev, et) - NaiveClip::cosine(ev_ref, et_ref)));
        }
      }
    }
  }
  EXPECT_LE(worst_v, 1e-6);
  EXPECT_LE(worst_t, 1e-6);
  EXPECT_LE(worst_s, 1e-6);
}

TEST(Model, MatchesOpenClipGridFixtures) {
  const auto names = read_json(oracle_dir() / "grid.json");
  for (const auto& name_json : names) {
    const auto name = name_json.get<std::string>();
    SCOPED_TRACE(name);
    const auto fx = read_json(oracle_dir() / (name + ".json"));
    const auto config = load_config(oracle_dir() / (name + ".config.json"));
    const auto pipe = Pipeline::load(config, oracle_dir() / fx["weights"].get<std::string>());
    const ImageInput img{config.image_resolution, fx["image"].get<std::vector<float>>()};
    const auto ev = pipe.model().encode_image(img);
    EXPECT_LE(max_abs_diff(ev.values, fx["e_v"].get<std::vector<double>>()), 1e-5);
    for (const auto& cs : fx["cases"]) {
      const auto tokens = tokenize_caption(pipe.tokenizer(), cs["caption"].get<std::string>(),
                                           cs["template"].get<std::string>(), config.context_length);
      const auto et = pipe.model().encode_text(tokens).embedding;
      EXPECT_LE(max_abs_diff(et.values, cs["e_t"].get<std::vector<double>>()), 1e-5);
      EXPECT_NEAR(similarity(ev, et), cs["score"].get<double>(), 1e-5);
    }
  }
}

TEST(Model, LoadsHuggingFaceCheckpoint) {
  const auto fx = read_json(oracle_dir() / "hf_model.json");
  const auto config = config_from_json(fx["config"], oracle_dir());
  const auto weights = read_safetensors(oracle_dir() / fx["weights"].get<std::string>());
  ASSERT_TRUE(weights.contains("text_model.encoder.layers.0.self_attn.q_proj.weight"));
  const auto pipe = Pipeline(Model::load(config, weights), Tokenizer::from_file(config.vocab, config.vocab_size));
  const ImageInput img{config.image_resolution, fx["image"].get<std::vector<float>>()};
  const auto ev = pipe.model().encode_image(img);
  EXPECT_LE(max_abs_diff(ev.values, fx["e_v"].get<std::vector<double>>()), 1e-5);
  for (const auto& cs : fx["cases"]) {
    const auto tokens = tokenize_caption(pipe.tokenizer(), cs["caption"].get<std::string>(), "", config.context_length);
    ASSERT_EQ(tokens.ids, cs["ids"].get<std::vector<std::int32_t>>());
    const auto et = pipe.model().encode_text(tokens).embedding;
    EXPECT_LE(max_abs_diff(et.values, cs["e_t"].get<std::vector<double>>()), 1e-5);
    EXPECT_NEAR(similarity(ev, et), cs["score"].get<double>(), 1e-5);
  }
}

TEST(Model, OpenAiNamesLoadIdentically) {
  auto tm = make_tiny(2, 2, 8, 8, 5);
  TensorMap renamed;
  for (const auto& [name, t] : tm.weights) renamed.emplace(openai_name(name), t);
  renamed.emplace("logit_scale", Tensor({}, {4.6f}));
  const auto other = Model::load(tm.config, renamed);
  const auto tokens = tokenize_caption(tiny_tokenizer(), "two dogs run", "", 8);
  EXPECT_EQ(other.encode_text(tokens).embedding.values, tm.model.encode_text(tokens).embedding.values);
  const auto img = random_image(8, 3);
  EXPECT_EQ(other.encode_image(img).values, tm.model.encode_image(img).values);
}

TEST(Model, MissingOrMisshapedTensorsAreNamed) {
  auto tm = make_tiny(1, 1, 8, 4, 2);
  auto w = tm.weights;
  w.erase("text.projection");
  try {
    (void)Model::load(tm.config, w);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("text_projection"), std::string::npos) << e.what();
  }
  w = tm.weights;
  w["text.ln_final.weight"] = Tensor({9});
  try {
    (void)Model::load(tm.config, w);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("ln_final"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[9]"), std::string::npos) << e.what();
  }
}

TEST(Model, ForwardIsDeterministic) {
  auto tm = make_tiny(3, 2, 16, 8, 77);
  const auto tokens = tokenize_caption(tiny_tokenizer(), "a man on a red bike", "", 8);
  const auto a = tm.model.encode_text(tokens);
  const auto b = tm.model.encode_text(tokens);
  EXPECT_EQ(a.embedding.values, b.embedding.values);
  EXPECT_EQ(a.trace.maps, b.trace.maps);
}

TEST(Model, AttentionMapsAreCausalAndStochastic) {
  auto tm = make_tiny(3, 2, 16, 8, 78, 2.0f);
  const auto tokens = tokenize_caption(tiny_tokenizer(), "two dogs", "", 8);
  const auto trace = tm.model.encode_text(tokens).trace;
  ASSERT_EQ(trace.layers, 3u);
  ASSERT_EQ(trace.heads, 2u);
  ASSERT_EQ(trace.n, 8u);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 8; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 8; ++j) {
          const float a = trace.at(l, h, i, j);
          if (j > i) {
            EXPECT_EQ(a, 0.0f);
          } else {
            EXPECT_GE(a, 0.0f);
          }
          sum += a;
        }
        EXPECT_NEAR(sum, 1.0, 1e-5);
      }
}

TEST(Model, IdentityOverrideLeavesEmbeddingUnchanged) {
  auto tm = make_tiny(2, 2, 16, 8, 79);
  const auto tokens = tokenize_caption(tiny_tokenizer(), "the cat", "", 8);
  const auto base = tm.model.encode_text(tokens);
  AttentionOverrides ov;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto m = base.trace.map(l, h);
      ov.set(l, h, std::vector<double>(m.begin(), m.end()));
    }
  const auto again = tm.model.encode_text(tokens, &ov);
  ASSERT_EQ(base.embedding.values.size(), again.embedding.values.size());
  for (std::size_t k = 0; k < base.embedding.values.size(); ++k) {
    EXPECT_NEAR(again.embedding.values[k], base.embedding.values[k], 1e-6);
  }
  AttentionOverrides bad;
  bad.set(0, 0, std::vector<double>(5, 0.0));
  EXPECT_THROW(tm.model.encode_text(tokens, &bad), InputError);
}

TEST(Model, ZeroImageGivesFiniteEmbedding) {
  auto tm = make_tiny(1, 2, 8, 8, 80);
  ImageInput zero{8, std::vector<float>(3 * 64, 0.0f)};
  const auto e = tm.model.encode_image(zero);
  for (float v : e.values) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, InputValidation) {
  auto tm = make_tiny(1, 1, 8, 8, 81);
  EXPECT_THROW(tm.model.encode_image(random_image(16, 1)), InputError);
  auto tokens = tokenize_caption(tiny_tokenizer(), "a cat", "", 8);
  auto bad = tokens;
  bad.ids.pop_back();
  EXPECT_THROW(tm.model.encode_text(bad), InputError);
  bad = tokens;
  bad.ids[1] = 100000;
  EXPECT_THROW(tm.model.encode_text(bad), InputError);
  bad = tokens;
  bad.z = 8;
  EXPECT_THROW(tm.model.encode_text(bad), InputError);
}

TEST(Similarity, Examples) {
  EXPECT_DOUBLE_EQ(similarity({{1, 0}}, {{1, 0}}), 1.0);
  EXPECT_DOUBLE_EQ(similarity({{1, 0}}, {{0, 1}}), 0.0);
  EXPECT_DOUBLE_EQ(similarity({{1, 0}}, {{-1, 0}}), -1.0);
  EXPECT_NEAR(similarity({{1, 1}}, {{1, 0}}), std::sqrt(0.5), 1e-7);
  EXPECT_NEAR(similarity({{3, 4}}, {{6, 8}}), 1.0, 1e-7);
}

TEST(Similarity, DegenerateInputs) {
  EXPECT_THROW(similarity({{0, 0}}, {{1, 0}}), NumericalError);
  EXPECT_THROW(similarity({{1, 0}}, {{NAN, 0}}), NumericalError);
  EXPECT_THROW(similarity({{1, 0}}, {{1, 0, 0}}), InputError);
}

TEST(Model, ShippedConfigShapes) {
  const auto root = std::filesystem::path(DENSEALIGN_SOURCE_DIR) / "configs";
  const auto b = load_config(root / "vit-b-32.json");
  std::size_t params = 0;
  for (const auto& spec : expected_tensors(b)) params += Tensor::element_count(spec.shape);
  // ViT-B/32 has about 151M parameters (logit scale excluded).
  EXPECT_GT(params, 150'000'000u);
  EXPECT_LT(params, 152'000'000u);
  const auto h = load_config(root / "vit-h-14.json");
  params = 0;
  for (const auto& spec : expected_tensors(h)) params += Tensor::element_count(spec.shape);
  EXPECT_GT(params, 980'000'000u);
  EXPECT_LT(params, 990'000'000u);
}
