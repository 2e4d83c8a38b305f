// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fedmentor/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "reference/oracles.hpp"

namespace fedmentor {
namespace {

std::vector<Sample> random_batch(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.x.resize(dim);
    for (double& v : s.x) v = rng.normal();
    s.label = rng.uniform() < 0.5 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

// Adapters with every entry random (B nonzero too).
AdapterSet random_adapters(const BackboneModel& m, std::size_t rank, Rng& rng) {
  std::vector<LoraPair> pairs;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto& w = m.layers[l];
    const std::size_t r = std::min({rank, w.rows(), w.cols()});
    pairs.emplace_back(l, gaussian(rng, r, w.cols(), 0, 0.5),
                       gaussian(rng, w.rows(), r, 0, 0.5));
  }
  return AdapterSet(m.num_layers(), std::move(pairs));
}

TEST(ForwardTest, ZeroAdaptersEqualBackboneOnly) {
  Rng rng(1);
  const std::size_t dims[] = {4, 6, 5};
  const auto model = BackboneModel::random(dims, rng);
  const AdapterSet zero = zeros_like(random_adapters(model, 2, rng));
  const std::vector<double> x = {0.3, -1.0, 2.0, 0.5};
  EXPECT_EQ(forward(model, zero, x), forward(model, AdapterSet(2, {}), x));
}

TEST(ForwardTest, IdentityEffectiveWeightAppliesHeadToInput) {
  BackboneModel m;
  m.layers.push_back(Matrix(2, 2));
  m.head = {0.7, -1.3};
  std::vector<LoraPair> pairs = {LoraPair(0, Matrix::identity(2), Matrix::identity(2))};
  const AdapterSet id(1, pairs);
  const std::vector<double> x = {2.0, 5.0};
  EXPECT_DOUBLE_EQ(forward(m, id, x), 0.7 * 2.0 - 1.3 * 5.0);
}

TEST(ForwardTest, MatchesMergedWeightReference) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t dims[] = {5, 7, 6, 3};
    const auto model = BackboneModel::random(dims, rng);
    const AdapterSet ad = random_adapters(model, 2, rng);
    for (const auto& s : random_batch(rng, 5, 5)) {
      EXPECT_NEAR(forward(model, ad, s.x),
                  testing::merged_reference_logit(model, ad, s.x), 1e-12);
    }
  }
}

TEST(ForwardTest, ShapeMismatchThrows) {
  Rng rng(1);
  const std::size_t dims[] = {3, 2};
  const auto model = BackboneModel::random(dims, rng);
  EXPECT_THROW(forward(model, AdapterSet(1, {}), std::vector<double>{1, 2}), ShapeError);
}

TEST(LossTest, Examples) {
  EXPECT_NEAR(bce_with_logits(0.0, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_with_logits(0.0, 1), std::log(2.0), 1e-15);
  EXPECT_LT(bce_with_logits(20.0, 1), 1e-8);
  EXPECT_GE(bce_with_logits(20.0, 1), 0.0);
  EXPECT_TRUE(std::isfinite(bce_with_logits(-800.0, 1)));
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double z = 6.0 * (2.0 * rng.uniform() - 1.0);
    const int y = rng.uniform() < 0.5;
    EXPECT_NEAR(bce_with_logits(z, y), testing::naive_bce(z, y), 1e-10);
  }
}

double relative_error(double got, double want) {
  return std::abs(got - want) / std::max(1e-4, std::max(std::abs(got), std::abs(want)));
}

TEST(GradAdaptersTest, MatchesCentralFiniteDifferences) {
  Rng rng(10);
  for (int t = 0; t < 5; ++t) {
    const std::size_t dims[] = {4, 5, 3};
    const auto model = BackboneModel::random(dims, rng);
    const AdapterSet ad = random_adapters(model, 2, rng);
    const auto batch = random_batch(rng, 6, 4);
    const AdapterSet g = grad_adapters(model, ad, batch);
    const AdapterSet fd = testing::finite_difference_grad(model, ad, batch);
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (auto kind : {AdapterKind::kA, AdapterKind::kB}) {
        auto gv = g.pairs()[i].factor(kind).data();
        auto fv = fd.pairs()[i].factor(kind).data();
        for (std::size_t j = 0; j < gv.size(); ++j) {
          EXPECT_LT(relative_error(gv[j], fv[j]), 1e-5)
              << "layer " << i << " " << to_string(kind) << "[" << j << "]";
        }
      }
    }
  }
}

TEST(GradAdaptersTest, GradientOfBVanishesWhenAIsZero) {
  Rng rng(3);
  const std::size_t dims[] = {4, 4, 2};
  const auto model = BackboneModel::random(dims, rng);
  AdapterSet ad = random_adapters(model, 2, rng);
  for (auto& p : ad.pairs()) p.a() = Matrix(p.a().rows(), p.a().cols());
  const AdapterSet g = grad_adapters(model, ad, random_batch(rng, 8, 4));
  for (const auto& p : g.pairs()) EXPECT_EQ(frobenius_norm(p.b()), 0.0);
}

TEST(GradAdaptersTest, SaturatedCorrectBatchHasTinyGradient) {
  BackboneModel m;
  m.layers.push_back(Matrix::identity(2));
  m.head = {40.0, 0.0};
  std::vector<LoraPair> pairs = {LoraPair(0, Matrix{{0.1, 0.1}}, Matrix{{0.1}, {0.1}})};
  const AdapterSet ad(1, pairs);
  const std::vector<Sample> batch = {{{1.0, 0.0}, 1}, {{-1.0, 0.0}, 0}};
  const AdapterSet g = grad_adapters(m, ad, batch);
  double norm = 0.0;
  for (const auto& p : g.pairs()) norm += frobenius_norm(p.a()) + frobenius_norm(p.b());
  EXPECT_LT(norm, 1e-6);
}

TEST(GradAdaptersTest, EmptyBatchThrows) {
  Rng rng(1);
  const std::size_t dims[] = {2, 2};
  const auto model = BackboneModel::random(dims, rng);
  EXPECT_THROW(grad_adapters(model, init_adapters(model, 1, 0.1, rng), {}), InvalidArgument);
}

struct Toy {
  BackboneModel model;
  ClientState client;
  AdapterSet init;
};

Toy make_toy(std::size_t epochs, double lr) {
  Rng rng(21);
  const std::size_t dims[] = {3, 6, 6};
  Toy t;
  t.model = BackboneModel::random(dims, rng);
  t.init = init_adapters(t.model, 2, 0.1, rng);
  DomainSpec spec;
  spec.domain = DomainId{"toy"};
  spec.n_train = 200;
  spec.n_val = 50;
  spec.input_dim = 3;
  spec.true_weights = {1.0, -0.5, 0.25};
  Rng drng(22);
  t.client.domain = spec.domain;
  t.client.data = make_domain(spec, drng);
  t.client.local_epochs = epochs;
  t.client.learning_rate = lr;
  t.client.batch_size = 16;
  return t;
}

TEST(TrainLocalTest, ZeroEpochsIsIdentity) {
  Toy t = make_toy(0, 0.5);
  Rng rng(1);
  const auto res = train_local(t.model, t.client, t.init, rng);
  EXPECT_EQ(res.adapters, t.init);
  EXPECT_EQ(res.stats.steps, 0u);
}

TEST(TrainLocalTest, ZeroLearningRateKeepsAdaptersButReportsLosses) {
  Toy t = make_toy(2, 0.0);
  Rng rng(1);
  const auto res = train_local(t.model, t.client, t.init, rng);
  EXPECT_EQ(res.adapters, t.init);
  EXPECT_EQ(res.stats.steps, 2u * 13u);  // 200 / 16 -> 12 full + 1 partial
  EXPECT_GT(res.stats.final_train_loss, 0.0);
  EXPECT_GT(res.stats.final_eval_loss, 0.0);
}

TEST(TrainLocalTest, LossDecreasesOnSeparableDomain) {
  Toy t = make_toy(20, 0.5);
  Rng rng(1);
  const auto res = train_local(t.model, t.client, t.init, rng);
  EXPECT_LT(res.stats.final_train_loss, res.stats.initial_train_loss);
}

TEST(TrainLocalTest, BackboneStaysFrozenAndRunsAreDeterministic) {
  Toy t = make_toy(3, 0.5);
  const auto before = t.model.checksum();
  Rng r1(9), r2(9);
  const auto a = train_local(t.model, t.client, t.init, r1);
  const auto b = train_local(t.model, t.client, t.init, r2);
  EXPECT_EQ(t.model.checksum(), before);
  EXPECT_EQ(a.adapters, b.adapters);
  EXPECT_NE(a.adapters, t.init);
}

TEST(TrainLocalTest, NonConformableAdaptersThrow) {
  Toy t = make_toy(1, 0.5);
  Rng rng(1);
  std::vector<LoraPair> wrong = {LoraPair(0, Matrix(1, 4), Matrix(6, 1))};
  EXPECT_THROW(train_local(t.model, t.client, AdapterSet(2, wrong), rng), ShapeError);
}

TEST(InitAdaptersTest, BStartsAtZeroAndRankIsClamped) {
  Rng rng(1);
  const std::size_t dims[] = {8, 16, 2};
  const auto model = BackboneModel::random(dims, rng);
  const AdapterSet ad = init_adapters(model, 4, 0.1, rng);
  ASSERT_EQ(ad.size(), 2u);
  EXPECT_EQ(ad.pairs()[0].rank(), 4u);
  EXPECT_EQ(ad.pairs()[1].rank(), 2u);
  for (const auto& p : ad.pairs()) {
    EXPECT_EQ(frobenius_norm(p.b()), 0.0);
    EXPECT_GT(frobenius_norm(p.a()), 0.0);
  }
}

}  // namespace
}  // namespace fedmentor
