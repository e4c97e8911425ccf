#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "support/fixtures.hpp"
#include "vitprune/grad.hpp"
#include "vitprune/score.hpp"

namespace vitprune {
namespace {

using testing::random_images;
using testing::random_labels;
using testing::random_model;
using testing::toy_config;

const std::vector<GroupKind> kAllKinds = {GroupKind::kHead, GroupKind::kNeuron,
                                          GroupKind::kEmbedDim, GroupKind::kQueryKeyRow,
                                          GroupKind::kValueRow};

ImportanceMap map_of(GroupKind kind, std::vector<double> v) {
  ImportanceMap m;
  m.kind = kind;
  for (std::size_t i = 0; i < v.size(); ++i) m.scores.push_back({0, static_cast<int>(i), v[i]});
  return m;
}

TEST(Groups, KindNamesRoundTrip) {
  for (GroupKind k : kAllKinds) EXPECT_EQ(parse_group_kind(to_string(k)), k);
  EXPECT_THROW(parse_group_kind("layer"), ArgumentError);
}

TEST(Groups, CountsFollowConfig) {
  const ModelConfig c = toy_config();
  EXPECT_EQ(enumerate_groups(c, GroupKind::kHead).size(), 4u);
  EXPECT_EQ(enumerate_groups(c, GroupKind::kNeuron).size(), 32u);
  EXPECT_EQ(enumerate_groups(c, GroupKind::kEmbedDim).size(), 8u);
  EXPECT_EQ(enumerate_groups(c, GroupKind::kQueryKeyRow).size(), 16u);
  EXPECT_EQ(enumerate_groups(c, GroupKind::kValueRow).size(), 16u);
}

TEST(Groups, DisjointWithinKindAndCoverTheirTensors) {
  ModelConfig c = toy_config();
  c.layers[1] = LayerConfig{2, 6, 4, 5};
  VitModel m = init_model(c, 0);
  std::map<std::string, std::size_t> sizes;
  for (const auto& nt : named_tensors(m.params)) sizes[nt.name] = nt.tensor->numel();
  // Tensors each kind owns completely.
  const std::map<GroupKind, std::vector<std::string>> owned = {
      {GroupKind::kHead, {"attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo"}},
      {GroupKind::kNeuron, {"mlp.w1", "mlp.b1", "mlp.w2"}},
      {GroupKind::kQueryKeyRow, {"attn.wq", "attn.bq", "attn.wk", "attn.bk"}},
      {GroupKind::kValueRow, {"attn.wv", "attn.bv", "attn.wo"}},
  };
  for (GroupKind kind : kAllKinds) {
    std::map<std::string, std::set<std::size_t>> seen;
    for (const auto& g : enumerate_groups(c, kind)) {
      for (const auto& s : g.members) {
        ASSERT_TRUE(sizes.count(s.tensor)) << s.tensor;
        for (std::size_t i : s.indices) {
          EXPECT_LT(i, sizes[s.tensor]);
          EXPECT_TRUE(seen[s.tensor].insert(i).second) << to_string(kind) << " overlap " << s.tensor;
        }
      }
    }
    if (!owned.count(kind)) continue;
    for (int l = 0; l < 2; ++l) {
      for (const auto& t : owned.at(kind)) {
        const std::string name = "layers." + std::to_string(l) + "." + t;
        EXPECT_EQ(seen[name].size(), sizes[name]) << to_string(kind) << " " << name;
      }
    }
  }
}

TEST(Groups, EmbeddingDimensionsCoverEveryResidualTensor) {
  const ModelConfig c = toy_config();
  VitModel m = init_model(c, 0);
  std::map<std::string, std::size_t> covered;
  for (const auto& g : enumerate_groups(c, GroupKind::kEmbedDim)) {
    for (const auto& s : g.members) covered[s.tensor] += s.indices.size();
  }
  for (const auto& nt : named_tensors(m.params)) {
    const bool no_residual_axis = nt.name.ends_with("attn.bq") || nt.name.ends_with("attn.bk") ||
                                  nt.name.ends_with("attn.bv") || nt.name.ends_with("mlp.b1") ||
                                  nt.name == "head.bias";
    EXPECT_EQ(covered[nt.name], no_residual_axis ? 0u : nt.tensor->numel()) << nt.name;
  }
}

// Taylor score from first principles: per-sample central differences of the
// loss with respect to every member weight.
double finite_difference_score(const VitModel& m, const Tensor& images,
                               const std::vector<int>& labels, const WeightGroup& g) {
  const std::size_t stride = images.numel() / labels.size();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : named_tensors(m.params)) by_name[nt.name] = nt.tensor;
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    Tensor one({1, 3, 32, 32});
    std::copy(images.data() + b * stride, images.data() + (b + 1) * stride, one.data());
    const std::vector<int> y = {labels[b]};
    for (const auto& s : g.members) {
      for (std::size_t i : s.indices) {
        const double grad = finite_diff(m, one, y, s.tensor, i, 1e-4);
        total += std::abs(grad * (*by_name[s.tensor])[i]);
      }
    }
  }
  return total / static_cast<double>(labels.size());
}

TEST(Scores, NeuronAndHeadScoresMatchFiniteDifferenceOracle) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 3);
  const Tensor images = random_images(2, c, 4);
  const auto labels = random_labels(2, 10, 5);
  const ImportanceMap neurons = score_groups(m, images, labels, GroupKind::kNeuron);
  const auto neuron_groups = enumerate_groups(c, GroupKind::kNeuron);
  const WeightGroup& n13 = neuron_groups[16 + 3];
  ASSERT_EQ(n13.layer, 1);
  ASSERT_EQ(n13.index, 3);
  const double want = finite_difference_score(m, images, labels, n13);
  EXPECT_NEAR(neurons.at(1, 3), want, 1e-6 * std::max(1.0, want));

  const ImportanceMap heads = score_groups(m, images, labels, GroupKind::kHead);
  const auto head_groups = enumerate_groups(c, GroupKind::kHead);
  const WeightGroup& h01 = head_groups[1];
  const double want_head = finite_difference_score(m, images, labels, h01);
  EXPECT_NEAR(heads.at(0, 1), want_head, 1e-6 * std::max(1.0, want_head));
  EXPECT_EQ(heads.sample_count, 2u);
}

TEST(Scores, NonNegativeAndZeroForZeroedGroup) {
  const ModelConfig c = toy_config();
  VitModel m = random_model(c, 6);
  for (float& w : m.params.layers[1].w1.row(2)) w = 0.0f;
  m.params.layers[1].b1[2] = 0.0f;
  for (std::size_t r = 0; r < 8; ++r) m.params.layers[1].w2(r, 2) = 0.0f;
  const Tensor images = random_images(4, c, 7);
  const auto labels = random_labels(4, 10, 8);
  for (GroupKind kind : kAllKinds) {
    const ImportanceMap s = score_groups(m, images, labels, kind);
    EXPECT_EQ(s.scores.size(), enumerate_groups(c, kind).size());
    for (const auto& g : s.scores) EXPECT_GE(g.score, 0.0);
  }
  EXPECT_EQ(score_groups(m, images, labels, GroupKind::kNeuron).at(1, 2), 0.0);
}

TEST(Scores, IndependentOfBatchSizeAndThreads) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 9);
  const Tensor images = random_images(5, c, 10);
  const auto labels = random_labels(5, 10, 11);
  ScoreOptions a, b;
  a.batch_size = 1;
  b.batch_size = 32;
  ::setenv("NUWA_THREADS", "3", 1);
  const auto x = score_groups(m, images, labels, GroupKind::kEmbedDim, a).values();
  ::unsetenv("NUWA_THREADS");
  const auto y = score_groups(m, images, labels, GroupKind::kEmbedDim, b).values();
  EXPECT_EQ(x, y);
}

TEST(Similarity, KnownCosine) {
  EXPECT_NEAR(score_similarity(map_of(GroupKind::kHead, {1, 2, 2}),
                               map_of(GroupKind::kHead, {2, 2, 1})),
              8.0 / 9.0, 1e-12);
  EXPECT_EQ(score_similarity(map_of(GroupKind::kHead, {0, 0}), map_of(GroupKind::kHead, {1, 2})),
            0.0);
  EXPECT_NEAR(score_similarity(map_of(GroupKind::kHead, {3, 4}), map_of(GroupKind::kHead, {6, 8})),
              1.0, 1e-12);
  EXPECT_THROW(score_similarity(map_of(GroupKind::kHead, {1}), map_of(GroupKind::kHead, {1, 2})),
               ArgumentError);
}

TEST(ImportanceMapJson, RoundTrips) {
  ImportanceMap m = map_of(GroupKind::kEmbedDim, {0.5, 0.25});
  for (auto& s : m.scores) s.layer = -1;
  m.sample_count = 12;
  m.task_id = "even";
  const nlohmann::json j = m;
  EXPECT_TRUE(j["scores"][0]["layer"].is_null());
  const ImportanceMap back = j.get<ImportanceMap>();
  EXPECT_EQ(back.values(), m.values());
  EXPECT_EQ(back.scores[1].layer, -1);
  EXPECT_EQ(back.task_id, "even");
  EXPECT_THROW(back.at(0, 0), ArgumentError);
}

TEST(TopActivating, MatchesSortedActivations) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 12);
  const Tensor images = random_images(7, c, 13);
  std::vector<double> act(7);
  for (std::size_t i = 0; i < 7; ++i) {
    Tensor one({3, 32, 32});
    std::copy(images.data() + i * 3072, images.data() + (i + 1) * 3072, one.data());
    act[i] = neuron_activation(m, one, 1, 5);
  }
  std::vector<std::size_t> order(7);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return act[a] > act[b]; });
  order.resize(3);
  EXPECT_EQ(top_activating_samples(m, images, 1, 5, 3), order);
}

}  // namespace
}  // namespace vitprune
