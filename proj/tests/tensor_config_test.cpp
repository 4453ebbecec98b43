#include <cstring>
#include <fstream>

#include <gtest/gtest.h>

#include "densealign/config.hpp"
#include "densealign/safetensors.hpp"
#include "support.hpp"

using namespace densealign;
using namespace testing_support;

namespace {

void write_raw(const std::filesystem::path& path, const std::string& header, const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

template <typename T>
void append(std::vector<unsigned char>& bytes, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  bytes.insert(bytes.end(), buf, buf + sizeof(T));
}

nlohmann::json minimal_config() {
  return {{"text_layers", 2}, {"text_heads", 2},     {"text_width", 8},       {"context_length", 8},
          {"vocab_size", 600}, {"vision_layers", 1}, {"vision_heads", 2},    {"vision_width", 8},
          {"patch_size", 4},   {"image_resolution", 8}, {"embed_dim", 4}};
}

}  // namespace

TEST(Safetensors, F32RoundTrip) {
  const auto dir = temp_dir("st_roundtrip");
  TensorMap m;
  m["b"] = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  m["a.scalar"] = Tensor({}, {-0.25f});
  m["empty"] = Tensor({0, 4}, {});
  write_safetensors(dir / "x.safetensors", m, {{"format", "pt"}});
  const auto r = read_safetensors(dir / "x.safetensors");
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r.at("b").shape, (std::vector<std::int64_t>{2, 3}));
  EXPECT_EQ(r.at("b").data, m["b"].data);
  EXPECT_EQ(r.at("a.scalar").data, std::vector<float>{-0.25f});
  EXPECT_TRUE(r.at("empty").data.empty());
}

TEST(Safetensors, WritingIsDeterministic) {
  const auto dir = temp_dir("st_det");
  TensorMap m;
  m["z"] = Tensor({1}, {3});
  m["y"] = Tensor({2}, {1, 2});
  write_safetensors(dir / "a.safetensors", m);
  write_safetensors(dir / "b.safetensors", m);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "a.safetensors"), slurp(dir / "b.safetensors"));
  const auto bytes = slurp(dir / "a.safetensors");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  EXPECT_EQ(header_len % 8, 0u);
}

TEST(Safetensors, ReadsHalfBfloatAndDouble) {
  const auto dir = temp_dir("st_dtypes");
  std::vector<unsigned char> payload;
  // F16: 1.0, -2.0, 0.5, smallest subnormal, +inf
  for (std::uint16_t h : {0x3C00, 0xC000, 0x3800, 0x0001, 0x7C00}) append<std::uint16_t>(payload, h);
  // BF16: 1.0, -3.0
  for (std::uint16_t h : {0x3F80, 0xC040}) append<std::uint16_t>(payload, h);
  // F64
  append<double>(payload, 0.1);
  append<double>(payload, -1e10);
  const std::string header =
      R"({"h":{"dtype":"F16","shape":[5],"data_offsets":[0,10]},)"
      R"("b":{"dtype":"BF16","shape":[2],"data_offsets":[10,14]},)"
      R"("d":{"dtype":"F64","shape":[1,2],"data_offsets":[14,30]}})";
  write_raw(dir / "t.safetensors", header, payload);
  const auto r = read_safetensors(dir / "t.safetensors");
  const auto& h = r.at("h").data;
  EXPECT_EQ(h[0], 1.0f);
  EXPECT_EQ(h[1], -2.0f);
  EXPECT_EQ(h[2], 0.5f);
  EXPECT_EQ(h[3], std::ldexp(1.0f, -24));
  EXPECT_TRUE(std::isinf(h[4]));
  EXPECT_EQ(r.at("b").data, (std::vector<float>{1.0f, -3.0f}));
  EXPECT_EQ(r.at("d").data, (std::vector<float>{0.1f, -1e10f}));
}

TEST(Safetensors, MalformedFilesRaiseLoadError) {
  const auto dir = temp_dir("st_bad");
  EXPECT_THROW(read_safetensors(dir / "missing.safetensors"), LoadError);
  std::ofstream(dir / "short.safetensors") << "abc";
  EXPECT_THROW(read_safetensors(dir / "short.safetensors"), LoadError);
  write_raw(dir / "json.safetensors", "{not json", {});
  EXPECT_THROW(read_safetensors(dir / "json.safetensors"), LoadError);
  write_raw(dir / "array.safetensors", "[1,2]", {});
  EXPECT_THROW(read_safetensors(dir / "array.safetensors"), LoadError);
  write_raw(dir / "size.safetensors", R"({"x":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})",
            std::vector<unsigned char>(8));
  EXPECT_THROW(read_safetensors(dir / "size.safetensors"), LoadError);
  write_raw(dir / "range.safetensors", R"({"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
            std::vector<unsigned char>(4));
  EXPECT_THROW(read_safetensors(dir / "range.safetensors"), LoadError);
  write_raw(dir / "dtype.safetensors", R"({"x":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})",
            std::vector<unsigned char>(8));
  EXPECT_THROW(read_safetensors(dir / "dtype.safetensors"), LoadError);
  write_raw(dir / "field.safetensors", R"({"x":{"shape":[1],"data_offsets":[0,4]}})", std::vector<unsigned char>(4));
  EXPECT_THROW(read_safetensors(dir / "field.safetensors"), LoadError);
  {
    std::ofstream out(dir / "len.safetensors", std::ios::binary);
    const std::uint64_t len = 1000;
    out.write(reinterpret_cast<const char*>(&len), 8);
    out << "{}";
  }
  EXPECT_THROW(read_safetensors(dir / "len.safetensors"), LoadError);
}

TEST(Safetensors, ShapeMismatchOnWriteIsRejected) {
  TensorMap m;
  m["x"] = Tensor({2, 2}, {1, 2, 3});
  EXPECT_THROW(write_safetensors(temp_dir("st_w") / "x.safetensors", m), InputError);
}

TEST(Config, DefaultsAndEffectiveLayerStart) {
  auto c = config_from_json(minimal_config());
  EXPECT_EQ(c.activation, Activation::quick_gelu);
  EXPECT_EQ(c.epsilon, -0.00005);
  EXPECT_EQ(c.tmpl, "A photo depicts ");
  EXPECT_EQ(c.mlp_ratio, 4u);
  EXPECT_EQ(c.effective_l_start(), 1u);
  c.text_layers = 12;
  EXPECT_EQ(c.effective_l_start(), 10u);
  c.l_start = 4;
  EXPECT_EQ(c.effective_l_start(), 4u);
  EXPECT_EQ(c.grid(), 2u);
  EXPECT_EQ(c.text_head_dim(), 4u);
}

TEST(Config, JsonRoundTrip) {
  auto j = minimal_config();
  j["activation"] = "gelu";
  j["template"] = "";
  j["epsilon"] = -1e-5;
  j["l_start"] = 2;
  const auto c = config_from_json(j);
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.activation, Activation::gelu);
  EXPECT_EQ(back.tmpl, "");
  EXPECT_EQ(back.l_start, 2u);
}

TEST(Config, RejectsUnknownAndInvalidFields) {
  auto bad = [](auto mutate) {
    auto j = minimal_config();
    mutate(j);
    return j;
  };
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["text_layer"] = 2; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["activation"] = "relu"; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["text_heads"] = 3; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["patch_size"] = 3; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["context_length"] = 2; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["l_start"] = 3; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["epsilon"] = 0.0; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["epsilon"] = 1e-5; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["text_width"] = -8; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["text_width"] = 8.5; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["image_std"] = {0.1, 0.0, 0.2}; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["image_mean"] = {0.1}; })), ConfigError);
  EXPECT_THROW(config_from_json(bad([](auto& j) { j["template"] = 5; })), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(Config, LoadFromFile) {
  const auto dir = temp_dir("cfg_load");
  auto j = minimal_config();
  j["vocab"] = "merges.txt";
  std::ofstream(dir / "c.json") << j.dump();
  const auto c = load_config(dir / "c.json");
  EXPECT_EQ(c.vocab, dir / "merges.txt");
  std::ofstream(dir / "broken.json") << "{\"text_layers\": ";
  EXPECT_THROW(load_config(dir / "broken.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "absent.json"), ConfigError);
}

TEST(Config, ShippedConfigs) {
  const auto root = std::filesystem::path(DENSEALIGN_SOURCE_DIR) / "configs";
  const auto b = load_config(root / "vit-b-32.json");
  EXPECT_EQ(b.text_layers, 12u);
  EXPECT_EQ(b.text_heads, 8u);
  EXPECT_EQ(b.text_width, 512u);
  EXPECT_EQ(b.vision_width, 768u);
  EXPECT_EQ(b.num_patches(), 49u);
  EXPECT_EQ(b.activation, Activation::quick_gelu);
  EXPECT_EQ(b.effective_l_start(), 10u);
  EXPECT_TRUE(std::filesystem::exists(b.vocab));
  const auto h = load_config(root / "vit-h-14.json");
  EXPECT_EQ(h.text_layers, 24u);
  EXPECT_EQ(h.text_heads, 16u);
  EXPECT_EQ(h.text_width, 1024u);
  EXPECT_EQ(h.vision_layers, 32u);
  EXPECT_EQ(h.num_patches(), 256u);
  EXPECT_EQ(h.activation, Activation::gelu);
  EXPECT_EQ(h.embed_dim, 1024u);
  EXPECT_EQ(h.effective_l_start(), 22u);
}
