// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>

#include "test_util.hpp"

namespace dialogbert {
namespace {

using testing::check_gradients;
using testing::micro_config;
using testing::TensorD;

Utterance utt(std::initializer_list<TokenId> content) {
  Utterance u{Vocab::kCls};
  u.insert(u.end(), content);
  u.push_back(Vocab::kSep);
  return u;
}

TensorD row(std::vector<double> v) {
  const std::size_t n = v.size();
  return TensorD::from(Shape{n}, std::move(v), true);
}

TEST(CorruptionTest, FrequenciesFollowEightyTenTen) {
  const Context ctx{utt({5}), utt({6}), utt({7}), utt({8})};
  const std::vector<Utterance> pool{utt({9}), utt({10})};
  Rng rng(2024);
  std::map<CorruptionMode, int> counts;
  std::vector<int> slots(4, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto c = corrupt_context(ctx, rng, pool);
    ++counts[c.outcome.mode];
    ++slots[c.outcome.slot];
    for (std::size_t s = 0; s < ctx.size(); ++s) {
      if (s != c.outcome.slot) {
        ASSERT_EQ(c.context[s], ctx[s]);
      }
    }
    switch (c.outcome.mode) {
      case CorruptionMode::kMasked: ASSERT_EQ(c.context[c.outcome.slot], mask_utterance()); break;
      case CorruptionMode::kUnchanged: ASSERT_EQ(c.context[c.outcome.slot], ctx[c.outcome.slot]); break;
      case CorruptionMode::kRandomReplaced: {
        const auto& u = c.context[c.outcome.slot];
        ASSERT_TRUE(u == pool[0] || u == pool[1]);
        break;
      }
    }
  }
  EXPECT_NEAR(counts[CorruptionMode::kMasked] / double(n), 0.8, 0.02);
  EXPECT_NEAR(counts[CorruptionMode::kUnchanged] / double(n), 0.1, 0.02);
  EXPECT_NEAR(counts[CorruptionMode::kRandomReplaced] / double(n), 0.1, 0.02);
  for (const int s : slots) EXPECT_NEAR(s / double(n), 0.25, 0.02);
}

TEST(CorruptionTest, Errors) {
  Rng rng(1);
  const std::vector<Utterance> pool{utt({9})};
  EXPECT_THROW(corrupt_context(Context{}, rng, pool), ValueError);
  EXPECT_THROW(corrupt_context(Context{utt({5})}, rng, std::span<const Utterance>{}), ValueError);
}

TEST(ShuffleTest, GoldScoresForKnownPermutation) {
  const Context ctx{utt({5}), utt({6}), utt({7})};
  const std::size_t source[] = {1, 2, 0};
  const auto sh = apply_permutation(ctx, source);
  EXPECT_EQ(sh.context[0], ctx[1]);
  EXPECT_EQ(sh.context[2], ctx[0]);
  EXPECT_DOUBLE_EQ(sh.outcome.gold[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(sh.outcome.gold[1], 1.0);
  EXPECT_DOUBLE_EQ(sh.outcome.gold[2], 1.0 / 3.0);
  EXPECT_EQ(sh.outcome.correct_order(), (std::vector<std::size_t>{2, 0, 1}));
  const std::size_t dup[] = {0, 0, 1};
  EXPECT_THROW(apply_permutation(ctx, dup), ValueError);
}

TEST(ShuffleTest, NeverIdentityAndGoldInvertsShuffle) {
  Rng rng(5);
  for (std::size_t n = 2; n <= 7; ++n) {
    Context ctx;
    for (std::size_t i = 0; i < n; ++i) ctx.push_back(utt({static_cast<TokenId>(5 + i)}));
    for (int trial = 0; trial < 200; ++trial) {
      const auto sh = shuffle_context(ctx, rng);
      ASSERT_TRUE(sh.has_value());
      bool identity = true;
      for (std::size_t i = 0; i < n; ++i) identity = identity && sh->outcome.source[i] == i;
      EXPECT_FALSE(identity);
      // Reading slots by ascending gold restores the original order.
      const auto order = ascending_order(sh->outcome.gold);
      for (std::size_t k = 0; k < n; ++k) ASSERT_EQ(sh->context[order[k]], ctx[k]);
      EXPECT_EQ(order, sh->outcome.correct_order());
    }
  }
  EXPECT_FALSE(shuffle_context(Context{utt({5})}, rng).has_value());
}

TEST(ShuffleTest, TwoUtterancesAlwaysSwap) {
  Rng rng(8);
  const auto sh = shuffle_context(Context{utt({5}), utt({6})}, rng);
  EXPECT_EQ(sh->outcome.source, (std::vector<std::size_t>{1, 0}));
}

TEST(DuorLossTest, HandCaseTwoUtterances) {
  // KL((0.5, 0.5) || softmax(0.5, 1.0)), computed independently with mpmath.
  const double y[] = {0.5, 1.0};
  const auto l = duor_loss(row({0.0, 0.0}), y);
  EXPECT_NEAR(l.item(), 0.0309298, 1e-5);
}

TEST(DuorLossTest, ZeroAtTargetAndShiftInvariant) {
  const double y[] = {1.0 / 3, 2.0 / 3, 1.0};
  EXPECT_NEAR(duor_loss(row({1.0 / 3, 2.0 / 3, 1.0}), y).item(), 0.0, 1e-9);
  EXPECT_NEAR(duor_loss(row({1.0 / 3 + 7.5, 2.0 / 3 + 7.5, 1.0 + 7.5}), y).item(), 0.0, 1e-9);
  EXPECT_GT(duor_loss(row({1.0, 2.0 / 3, 1.0 / 3}), y).item(), 0.0);
}

TEST(DuorLossTest, NonNegativeOnRandomPairs) {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng.below(6);
    std::vector<double> s(n), y(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = 3 * rng.normal();
      y[k] = static_cast<double>(k + 1) / static_cast<double>(n);
    }
    rng.shuffle(std::span<double>(y));
    ASSERT_GE(duor_loss(row(s), y).item(), 0.0);
  }
}

TEST(DuorLossTest, MaskedBatchAveragesRows) {
  const auto scores = TensorD::from(Shape{2, 3}, {0, 0, 99, 0.2, -0.4, 1.0}, true);
  const Mask mask(Shape{2, 3}, {1, 1, 0, 1, 1, 1});
  const std::vector<std::vector<double>> gold{{0.5, 1.0}, {2.0 / 3, 1.0 / 3, 1.0}};
  const double a = duor_loss(row({0, 0}), gold[0]).item();
  const double b = duor_loss(row({0.2, -0.4, 1.0}), gold[1]).item();
  EXPECT_NEAR(duor_loss(scores, mask, gold).item(), (a + b) / 2, 1e-12);
  const std::vector<std::vector<double>> short_gold{{0.5}, {2.0 / 3, 1.0 / 3, 1.0}};
  EXPECT_THROW(duor_loss(scores, mask, short_gold), ShapeError);
}

TEST(DuorLossTest, GradientMatchesFiniteDifferences) {
  auto s = row({0.3, -1.2, 0.8, 0.1});
  const double y[] = {0.5, 0.25, 1.0, 0.75};
  const auto r = check_gradients([&] { return duor_loss(s, y); }, {s});
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(MurLossTest, SquaredNormPerSlotAveragedOverBatch) {
  DialogBert<double> m(micro_config(20), 1);
  const std::vector<ContextSample> batch{{Context{utt({5}), utt({6, 7})}, {}, "a", 2},
                                         {Context{utt({8}), utt({9}), utt({10})}, {}, "b", 3}};
  const auto st = m.encode_context(make_batch(batch));
  const std::size_t slots[] = {1, 2};
  const auto pred = m.convert_masked(st, slots);
  const double eps = 0.01;
  std::vector<double> shifted(pred.data().begin(), pred.data().end());
  for (auto& v : shifted) v -= eps;
  const auto targets = TensorD::from(pred.shape(), shifted);
  // u_hat = u + eps * 1 for every row gives H * eps^2.
  EXPECT_NEAR(mur_loss(m, st, slots, targets).item(), 8 * eps * eps, 1e-12);
  const auto exact = TensorD::from(pred.shape(), std::vector<double>(pred.data().begin(), pred.data().end()));
  EXPECT_NEAR(mur_loss(m, st, slots, exact).item(), 0.0, 1e-15);
  EXPECT_THROW(mur_loss(m, st, slots, TensorD::zeros(Shape{2, 4})), ShapeError);
}

TEST(MurLossTest, TargetsAreDetachedUtteranceVectors) {
  DialogBert<double> m(micro_config(20), 2);
  const auto st = m.encode_context(Context{utt({5}), utt({6, 7})});
  const std::size_t slots[] = {1};
  const auto t = mur_targets(st, slots);
  EXPECT_FALSE(t.requires_grad());
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(t[j], st.utt_vecs[8 + j]);
}

TEST(NugLossTest, UniformModelGivesLogV) {
  DialogBert<double> m(micro_config(30), 3);
  auto w = m.parameter("head.out.weight");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  const std::vector<ContextSample> s{{Context{utt({5, 6})}, utt({7, 8, 9}), "a", 2},
                                     {Context{utt({5}), utt({6})}, utt({10}), "b", 3}};
  EXPECT_NEAR(nug_loss(m, s).item(), std::log(30.0), 1e-12);
  const auto r = nug_nll(m, s);
  EXPECT_EQ(r.tokens, 4u + 2u);
}

TEST(NugLossTest, PaddingDoesNotChangePerSampleLoss) {
  DialogBert<double> m(micro_config(30), 4);
  const ContextSample a{Context{utt({5, 6})}, utt({7, 8, 9, 10, 11}), "a", 2};
  const ContextSample b{Context{utt({12}), utt({13, 14, 15})}, utt({16}), "b", 3};
  const double la = nug_nll(m, std::span<const ContextSample>(&a, 1)).mean.item();
  const double lb = nug_nll(m, std::span<const ContextSample>(&b, 1)).mean.item();
  const std::vector<ContextSample> both{a, b};
  const auto r = nug_nll(m, both);
  EXPECT_NEAR(r.mean.item(), (la * 6 + lb * 2) / 8, 1e-9);
  EXPECT_THROW(nug_loss(m, std::vector<ContextSample>{{Context{utt({5})}, Utterance{Vocab::kCls}, "c", 2}}),
               ValueError);
}

TEST(TotalLossTest, ComponentsAndWeights) {
  const auto corpus = synth_corpus(1, 4, "ordered-markers");
  const auto vocab = Vocab::build(corpus);
  auto cfg = micro_config(vocab.size());
  DialogBert<double> model(cfg, 5);
  const auto samples = make_samples(corpus, vocab);
  const auto pool = utterance_pool(corpus, vocab);
  const std::span<const ContextSample> group(samples.data(), 6);

  Rng r1(3), r2(3);
  const auto all = total_loss(model, group, r1, pool, ObjectiveSet::kAll, {0.5, 2.0});
  EXPECT_GT(all.l_dec, 0);
  EXPECT_GT(all.l_mur, 0);
  EXPECT_GT(all.l_duor, 0);
  EXPECT_NEAR(all.total.item(), all.l_dec + 0.5 * all.l_mur + 2.0 * all.l_duor, 1e-12);
  const auto again = total_loss(model, group, r2, pool, ObjectiveSet::kAll, {0.5, 2.0});
  EXPECT_EQ(again.total.item(), all.total.item());

  Rng r3(3);
  const auto nug = total_loss(model, group, r3, pool, ObjectiveSet::kNug);
  EXPECT_EQ(nug.l_mur, 0.0);
  EXPECT_EQ(nug.l_duor, 0.0);
  EXPECT_NEAR(nug.total.item(), nug_loss(model, group).item(), 1e-12);
  EXPECT_EQ(r3.counter(), 0u);

  std::size_t multi = 0;
  for (const auto& s : group) multi += s.context.size() >= 2;
  EXPECT_EQ(all.duor_contexts, multi);
}

TEST(TotalLossTest, GradientMatchesFiniteDifferencesWithoutMur) {
  const auto corpus = synth_corpus(2, 3, "ordered-markers");
  const auto vocab = Vocab::build(corpus);
  DialogBert<double> model(micro_config(vocab.size(), 4, 2, 1, 6), 6);
  const auto samples = make_samples(corpus, vocab);
  const auto pool = utterance_pool(corpus, vocab);
  const std::span<const ContextSample> group(samples.data() + 1, 3);
  std::vector<TensorD> wrt;
  for (const auto& p : model.params().params()) wrt.push_back(p.tensor);
  const auto res = check_gradients(
      [&] {
        Rng r(9);
        return total_loss(model, group, r, pool, ObjectiveSet::kNugDuor).total;
      },
      wrt, 40);
  EXPECT_LT(res.max_rel, 1e-4);
}

TEST(ObjectiveSetTest, ParseAndName) {
  for (const char* s : {"nug", "nug+mur", "nug+duor", "all"}) EXPECT_EQ(objective_set_name(parse_objective_set(s)), s);
  EXPECT_THROW(parse_objective_set("mur"), ValueError);
  EXPECT_TRUE(uses_mur(ObjectiveSet::kAll));
  EXPECT_FALSE(uses_mur(ObjectiveSet::kNugDuor));
  EXPECT_TRUE(uses_duor(ObjectiveSet::kNugDuor));
  EXPECT_FALSE(uses_duor(ObjectiveSet::kNugMur));
}

}  // namespace
}  // namespace dialogbert
