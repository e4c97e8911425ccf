#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "support/fixtures.hpp"
#include "vitprune/container.hpp"
#include "vitprune/linalg.hpp"

namespace vitprune {
namespace {

using testing::random_model;
using testing::toy_config;

VitModel probed_model() {
  VitModel m = random_model(toy_config(), 2);
  for (int l = 0; l < 2; ++l) {
    Probe p = head_probe(m);
    p.bias[0] = static_cast<float>(l) + 0.5f;
    m.probes.push_back(p);
  }
  return m;
}

VitModel irregular_model() {
  ModelConfig c = ModelConfig::uniform(16, 4, 6, 3, 1, 1, 1, 1, 4);
  c.layers[0] = LayerConfig{3, 6, 3, 0};
  c.layers[1] = LayerConfig{1, 2, 5, 7};
  c.layers[2] = LayerConfig{2, 2, 4, 1};
  VitModel m = random_model(c, 3);
  m.class_ids = {9, 4, 0, 7};
  return m;
}

void expect_same_model(const VitModel& a, const VitModel& b) {
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.class_ids, b.class_ids);
  auto x = named_tensors(a.params);
  auto y = named_tensors(b.params);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].name, y[i].name);
    EXPECT_EQ(*x[i].tensor, *y[i].tensor) << x[i].name;
  }
  ASSERT_EQ(a.probes.size(), b.probes.size());
  for (std::size_t l = 0; l < a.probes.size(); ++l) {
    EXPECT_EQ(a.probes[l].weight, b.probes[l].weight);
    EXPECT_EQ(a.probes[l].bias, b.probes[l].bias);
    EXPECT_EQ(a.probes[l].ln_gamma, b.probes[l].ln_gamma);
  }
}

TEST(Container, ByteExactRoundTrip) {
  for (const VitModel& m : {random_model(toy_config(), 1), probed_model(), irregular_model()}) {
    const auto bytes = serialize_model(m);
    const VitModel back = deserialize_model(bytes);
    expect_same_model(m, back);
    EXPECT_EQ(serialize_model(back), bytes);
  }
}

TEST(Container, LayoutAndHeaderFields) {
  const VitModel m = probed_model();
  const auto bytes = serialize_model(m);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "NUWAVIT1", 8), 0);
  const std::uint32_t len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) |
                            (static_cast<std::uint32_t>(bytes[11]) << 24);
  EXPECT_EQ(container_header_size(bytes), 12u + len);
  const auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  EXPECT_EQ(header["format_version"], 1);
  EXPECT_EQ(header["config"]["depth"], 2);
  EXPECT_EQ(header["config"]["layers"][0]["heads"], 2);
  EXPECT_EQ(header["tensors"][0]["name"], "patch_embed.weight");
  EXPECT_EQ(header["tensors"][0]["byte_offset"], 0);
  EXPECT_EQ(header["tensors"].back()["name"], "probes.1.bias");
  EXPECT_EQ(header["payload_bytes"], bytes.size() - 12 - len);
  // The first payload float is patch_embed.weight[0], little-endian.
  float first;
  std::memcpy(&first, bytes.data() + 12 + len, 4);
  EXPECT_EQ(first, m.params.patch_w[0]);
}

TEST(Container, EveryHeaderByteCorruptionIsDetected) {
  const auto bytes = serialize_model(irregular_model());
  const std::size_t header = container_header_size(bytes);
  for (std::size_t i = 0; i < header; ++i) {
    for (std::uint8_t mask : {0x01, 0x20, 0x80, 0xFF}) {
      auto bad = bytes;
      bad[i] ^= mask;
      EXPECT_THROW(deserialize_model(bad), FormatError) << "byte " << i << " mask " << int(mask);
    }
  }
}

TEST(Container, BadMagicIsNamed) {
  auto bytes = serialize_model(random_model(toy_config(), 4));
  bytes[0] = 'X';
  try {
    deserialize_model(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(Container, PayloadCorruptionAndTruncationAreDetected) {
  const auto bytes = serialize_model(random_model(toy_config(), 5));
  const std::size_t header = container_header_size(bytes);
  for (std::size_t i = header; i < bytes.size(); i += 97) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    EXPECT_THROW(deserialize_model(bad), FormatError) << i;
  }
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, std::size_t{11}, header - 1, header,
                        bytes.size() - 1}) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_THROW(deserialize_model(cut), FormatError) << n;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(deserialize_model(longer), FormatError);
}

TEST(Container, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() /
                    ("vitprune_container_" + std::to_string(::getpid()) + ".nuwa");
  const VitModel m = irregular_model();
  save_model(m, path);
  expect_same_model(m, load_model(path));
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path), FormatError);
}

TEST(Container, ConfigJsonRoundTrip) {
  const ModelConfig c = irregular_model().config;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
}

}  // namespace
}  // namespace vitprune
