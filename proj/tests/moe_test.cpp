#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pcmoe/moe.hpp"
#include "test_support.hpp"

namespace pcmoe {
namespace {

ExpertParams zero_expert(std::size_t d, std::size_t h) {
  ExpertParams e{Matrix(h, d), Vector(h, 0.0), Matrix(d, h), Vector(d, 0.0), 0.0};
  return e;
}

// Step-by-step evaluation with explicit index loops.
Vector oracle_expert(const ExpertParams& e, const Vector& x) {
  const std::size_t d = x.size();
  const std::size_t h = e.b1.size();
  Vector hidden(h);
  for (std::size_t i = 0; i < h; ++i) {
    double acc = e.b1[i];
    for (std::size_t j = 0; j < d; ++j) acc += e.w1.data()[i * d + j] * x[j];
    hidden[i] = acc > 0 ? acc : 0;
  }
  Vector y(d);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = e.b2[i];
    for (std::size_t j = 0; j < h; ++j) acc += e.w2.data()[i * h + j] * hidden[j];
    y[i] = acc;
  }
  return y;
}

TEST(ExpertForward, ZeroWeightsGiveZero) {
  EXPECT_EQ(expert_forward(zero_expert(3, 4), Vector{1, -2, 3}), (Vector{0, 0, 0}));
}

TEST(ExpertForward, ReluKillsNegatives) {
  ExpertParams e{Matrix::identity(2), Vector{0, 0}, Matrix::identity(2), Vector{0, 0}, 0.0};
  EXPECT_EQ(expert_forward(e, Vector{1, -1}), (Vector{1, 0}));
}

TEST(ExpertForward, MatchesStepByStepOracle) {
  testing::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto e = testing::random_expert(rng, 6, 9);
    const Vector x = testing::random_vector(rng, 6);
    const Vector got = expert_forward(e, x);
    const Vector want = oracle_expert(e, x);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(ExpertForward, DimensionMismatch) {
  EXPECT_THROW(expert_forward(zero_expert(3, 4), Vector{1, 2}), std::invalid_argument);
}

TEST(GateForward, ZeroGateIsUniform) {
  GateParams g{Matrix(5, 3)};
  for (double p : gate_forward(g, Vector{1, 2, 3})) EXPECT_NEAR(p, 0.2, 1e-15);
}

TEST(GateForward, ClosedFormTwoExperts) {
  GateParams g{Matrix(2, 1, {0.0, std::log(3.0)})};
  const Vector p = gate_forward(g, Vector{1.0});
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(GateForward, MatchesSoftmaxOfMatvecComposition) {
  testing::Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 6;
    GateParams g{testing::random_matrix(rng, n, 4)};
    const Vector x = testing::random_vector(rng, 4);
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < 4; ++j) logits[i] += g.wg(i, j) * x[j];
    }
    const auto want = testing::oracle_softmax(logits, std::vector<bool>(n, true));
    const Vector got = gate_forward(g, x);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(RouteTopk, Examples) {
  EXPECT_EQ(route_topk(Vector{0.7, 0.2, 0.1}, 1), (Routing{{0, 0.7}}));
  EXPECT_EQ(route_topk(Vector{0.4, 0.4, 0.2}, 2), (Routing{{0, 0.4}, {1, 0.4}}));
  EXPECT_EQ(route_topk(Vector{0.1, 0.3, 0.6}, 2), (Routing{{2, 0.6}, {1, 0.3}}));
}

TEST(LayerForwardReference, SingleExpertIsGateTimesExpert) {
  testing::Rng rng(1);
  auto layer = testing::random_layer(rng, 4, 5, 1, 1);
  const auto tokens = testing::random_tokens(rng, 3, 4);
  const auto out = layer_forward_reference(layer, tokens);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double g = gate_forward(layer.gate, tokens[t])[0];
    const Vector e = expert_forward(layer.experts[0], tokens[t]);
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(out[t][i], g * e[i]);
  }
}

TEST(LayerForwardReference, ScalarExpertsSymbolic) {
  // logits (w0 x, w1 x); y = g0 a x + g1 b x
  const double a = 1.5, b = -0.75, w0 = 0.4, w1 = -0.9;
  const auto layer = testing::scalar_layer({w0, w1}, {a, b}, 2);
  for (double x : {-2.0, -0.3, 0.7, 3.0}) {
    const double e0 = std::exp(w0 * x), e1 = std::exp(w1 * x);
    const double g0 = e0 / (e0 + e1), g1 = e1 / (e0 + e1);
    const auto y = layer_forward_reference(layer, {{x}});
    EXPECT_NEAR(y[0][0], g0 * a * x + g1 * b * x, 1e-12);
  }
}

TEST(LayerForwardReference, ZeroTokensZeroBiases) {
  testing::Rng rng(2);
  auto layer = testing::random_layer(rng, 3, 4, 4, 2);
  for (auto& e : layer.experts) {
    std::fill(e.b1.begin(), e.b1.end(), 0.0);
    std::fill(e.b2.begin(), e.b2.end(), 0.0);
  }
  for (const auto& y : layer_forward_reference(layer, {Vector(3, 0.0), Vector(3, 0.0)})) {
    EXPECT_EQ(y, Vector(3, 0.0));
  }
}

TEST(LayerForwardReference, FullKEqualsDenseMixture) {
  testing::Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + trial % 5;
    const auto layer = testing::random_layer(rng, 5, 6, n, n);
    const auto tokens = testing::random_tokens(rng, 4, 5);
    const auto out = layer_forward_reference(layer, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const Vector g = gate_forward(layer.gate, tokens[t]);
      Vector dense(5, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const Vector e = oracle_expert(layer.experts[i], tokens[t]);
        for (std::size_t j = 0; j < 5; ++j) dense[j] += g[i] * e[j];
      }
      for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(out[t][j], dense[j], 1e-12);
    }
  }
}

TEST(RouteTopk, PositiveScalingKeepsSelectedSet) {
  testing::Rng rng(8);
  std::uniform_real_distribution<double> cd(0.1, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto layer = testing::random_layer(rng, 4, 2, 6, 1 + trial % 3);
    const Vector x = testing::random_vector(rng, 4);
    Vector cx = x;
    const double c = cd(rng);
    for (double& v : cx) v *= c;
    auto set_of = [&](const Vector& t) {
      std::vector<std::size_t> s;
      for (const auto& r : route_topk(gate_forward(layer.gate, t), layer.k)) s.push_back(r.expert);
      std::sort(s.begin(), s.end());
      return s;
    };
    EXPECT_EQ(set_of(x), set_of(cx));
  }
}

TEST(ModelForwardReference, SingleLayerIdentityHead) {
  testing::Rng rng(6);
  MoEModelSpec m;
  m.d = 3;
  m.h = 4;
  m.num_classes = 3;
  m.layers.push_back(testing::random_layer(rng, 3, 4, 3, 2));
  m.head = Matrix::identity(3);
  const Sample s{{testing::random_vector(rng, 3)}, std::nullopt};
  const auto fwd = model_forward_reference(m, s);
  EXPECT_EQ(fwd.logits, layer_forward_reference(m.layers[0], s.tokens)[0]);
}

TEST(ModelForwardReference, DeterministicAndComposes) {
  testing::Rng rng(12);
  const auto m = testing::random_model(rng, 2, 4, 5, 6, 3);
  const Sample s{testing::random_tokens(rng, 4, 5), std::nullopt};
  const auto a = model_forward_reference(m, s);
  const auto b = model_forward_reference(m, s);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.routing, b.routing);

  auto tokens = layer_forward_reference(m.layers[1], layer_forward_reference(m.layers[0], s.tokens));
  Vector mean(5, 0.0);
  for (const auto& t : tokens) {
    for (std::size_t i = 0; i < 5; ++i) mean[i] += t[i] / 4.0;
  }
  for (std::size_t c = 0; c < 3; ++c) {
    double want = 0.0;
    for (std::size_t i = 0; i < 5; ++i) want += m.head(c, i) * mean[i];
    EXPECT_NEAR(a.logits[c], want, 1e-12);
  }
}

TEST(ModelForwardReference, RoutingCountsSumToTokensTimesK) {
  testing::Rng rng(13);
  const auto m = testing::random_model(rng, 3, 5, 4, 4);
  const Sample s{testing::random_tokens(rng, 7, 4), std::nullopt};
  const auto fwd = model_forward_reference(m, s);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    std::size_t count = 0;
    for (const auto& token : fwd.routing[l]) count += token.size();
    EXPECT_EQ(count, 7 * m.layers[l].k);
  }
}

TEST(ExpertMagnitudes, ClosedFormsAndFlattenOracle) {
  testing::Rng rng(14);
  MoEModelSpec m;
  m.d = 2;
  m.h = 3;
  m.num_classes = 1;
  m.head = Matrix(1, 2);
  MoELayerSpec layer;
  layer.k = 1;
  layer.gate.wg = Matrix(3, 2);
  layer.experts.push_back(zero_expert(2, 3));
  auto e34 = zero_expert(2, 3);
  e34.w1(1, 0) = 3.0;
  e34.b2[1] = 4.0;
  e34.refresh_magnitude();
  layer.experts.push_back(e34);
  layer.experts.push_back(testing::random_expert(rng, 2, 3));
  m.layers.push_back(layer);

  const auto mags = expert_magnitudes(m);
  EXPECT_EQ(mags[0][0], 0.0);
  EXPECT_EQ(mags[0][1], 5.0);
  double sq = 0.0;
  for (double v : layer.experts[2].flatten()) sq += v * v;
  EXPECT_NEAR(mags[0][2], std::sqrt(sq), 1e-12);
}

TEST(ExpertMagnitudes, CorruptCacheThrows) {
  testing::Rng rng(15);
  auto m = testing::random_model(rng, 1, 3, 3, 3);
  m.layers[0].experts[1].cached_magnitude += 1e-6;
  EXPECT_THROW(expert_magnitudes(m), std::runtime_error);
}

TEST(ExpertParams, FlattenRoundTrip) {
  testing::Rng rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    const auto e = testing::random_expert(rng, 2 + trial % 4, 3 + trial % 5);
    EXPECT_EQ(ExpertParams::unflatten(e.flatten(), e.d(), e.h()), e);
  }
}

TEST(Model, ValidateRejectsBadShapes) {
  testing::Rng rng(17);
  auto m = testing::random_model(rng, 2, 3, 4, 5);
  EXPECT_NO_THROW(m.validate());
  auto bad_k = m;
  bad_k.layers[1].k = 4;
  EXPECT_THROW(bad_k.validate(), std::invalid_argument);
  auto bad_head = m;
  bad_head.head = Matrix(2, 2);
  EXPECT_THROW(bad_head.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace pcmoe
