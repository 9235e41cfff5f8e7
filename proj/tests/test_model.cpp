// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

namespace dialogbert {
namespace {

using testing::micro_config;
using testing::TensorD;

Utterance utt(std::initializer_list<TokenId> content) {
  Utterance u{Vocab::kCls};
  u.insert(u.end(), content);
  u.push_back(Vocab::kSep);
  return u;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(ModelConfigTest, Presets) {
  const auto tiny = ModelConfig::tiny(40);
  EXPECT_EQ(tiny.hidden_size(), 64u);
  EXPECT_EQ(tiny.utt_encoder.num_layers, 2u);
  EXPECT_EQ(tiny.utt_encoder.num_heads, 2u);
  const auto small = ModelConfig::preset("small", 40);
  for (const auto* b : {&small.utt_encoder, &small.ctx_encoder, &small.decoder}) {
    EXPECT_EQ(b->num_layers, 6u);
    EXPECT_EQ(b->hidden_size, 256u);
    EXPECT_EQ(b->num_heads, 2u);
    EXPECT_EQ(b->ffn_size, 1024u);
  }
  EXPECT_EQ(small.max_ctx_utts, 7u);
  EXPECT_EQ(small.max_utt_len, 30u);
  EXPECT_THROW(ModelConfig::preset("huge", 40), ValueError);
}

TEST(ModelConfigTest, Validation) {
  auto c = micro_config(20);
  EXPECT_NO_THROW(c.validate());
  c.vocab_size = 5;
  EXPECT_THROW(c.validate(), ValueError);
  c = micro_config(20);
  c.init_std = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = micro_config(20);
  c.decoder.hidden_size = 16;
  EXPECT_THROW(c.validate(), ValueError);
  c = micro_config(20);
  c.ctx_encoder.max_positions = 3;
  EXPECT_THROW(c.validate(), ValueError);
}

TEST(ModelTest, ParameterNamesAndShapes) {
  DialogBert<double> m(micro_config(20), 1);
  std::set<std::string> names;
  for (const auto& p : m.params().params()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  for (const char* n : {"emb.word.weight", "emb.word_pos.weight", "emb.utt_pos.weight", "dec.pos.weight",
                        "head.mur.weight", "head.mur.bias", "head.dorn.weight", "head.out.weight", "head.out.bias",
                        "utt_enc.layer0.attn.q.weight", "ctx_enc.layer0.ffn.in.bias",
                        "dec.layer0.cross_attn.o.weight", "dec.layer0.self_ln.weight"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  EXPECT_EQ(m.parameter("emb.word.weight").shape(), (Shape{20, 8}));
  EXPECT_EQ(m.parameter("emb.utt_pos.weight").shape(), (Shape{7, 8}));
  EXPECT_EQ(m.parameter("emb.word_pos.weight").shape(), (Shape{30, 8}));
  EXPECT_EQ(m.parameter("head.mur.weight").shape(), (Shape{8, 8}));
  EXPECT_EQ(m.parameter("head.dorn.weight").shape(), (Shape{8, 8}));
  EXPECT_EQ(m.parameter("head.out.weight").shape(), (Shape{8, 20}));
  EXPECT_EQ(m.parameter("head.out.bias").shape(), (Shape{20}));
}

TEST(ModelTest, SmallPresetStructure) {
  DialogBert<float> m(ModelConfig::small(40), 1);
  std::size_t utt = 0, ctx = 0, dec = 0;
  for (const auto& p : m.params().params()) {
    if (p.name.ends_with("attn.q.weight")) {
      EXPECT_EQ(p.tensor.shape(), (Shape{256, 256}));
      utt += p.name.starts_with("utt_enc.");
      ctx += p.name.starts_with("ctx_enc.");
      dec += p.name.starts_with("dec.") && p.name.find("self_attn") != std::string::npos;
    }
  }
  EXPECT_EQ(utt, 6u);
  EXPECT_EQ(ctx, 6u);
  EXPECT_EQ(dec, 6u);
  EXPECT_THROW(m.parameter("utt_enc.layer6.attn.q.weight"), ValueError);
}

TEST(ModelTest, SeededInitIsReproducible) {
  DialogBert<double> a(micro_config(20), 3), b(micro_config(20), 3), c(micro_config(20), 4);
  const auto wa = a.parameter("head.out.weight"), wb = b.parameter("head.out.weight"),
             wc = c.parameter("head.out.weight");
  EXPECT_EQ(max_abs_diff(wa.data(), wb.data()), 0.0);
  EXPECT_GT(max_abs_diff(wa.data(), wc.data()), 0.0);
}

TEST(ModelTest, InitStdScalesWeights) {
  auto cfg = micro_config(200, 16, 2, 1, 32);
  cfg.init_std = 0.1;
  DialogBert<double> m(cfg, 1);
  double s2 = 0;
  const auto w = m.parameter("emb.word.weight");
  for (const double v : w.data()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / w.numel()), 0.1, 0.01);
}

TEST(ModelTest, DornStartsNearIdentityAndMurIsLinear) {
  DialogBert<double> m(micro_config(20), 2);
  const auto w = m.parameter("head.dorn.weight");
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(w[i * 8 + j], i == j ? 1.0 : 0.0, 0.1);

  const Context ctx{utt({5, 6}), utt({7}), utt({8, 9, 10})};
  auto st = m.encode_context(ctx);
  // u_hat for slot 1 equals h_1 W + b.
  const std::size_t slot[] = {1};
  const auto u_hat = m.convert_masked(st, slot);
  const auto W = m.parameter("head.mur.weight");
  const auto b = m.parameter("head.mur.bias");
  for (std::size_t j = 0; j < 8; ++j) {
    double e = b[j];
    for (std::size_t k = 0; k < 8; ++k) e += st.ctx_states[1 * 8 + k] * W[k * 8 + j];
    EXPECT_NEAR(u_hat[j], e, 1e-12);
  }
  const std::size_t bad[] = {3};
  EXPECT_THROW(m.convert_masked(st, bad), ValueError);
}

TEST(ModelTest, DornScoresMatchBilinearAverage) {
  DialogBert<double> m(micro_config(20), 5);
  const Context ctx{utt({5}), utt({6, 7}), utt({8})};
  const auto st = m.encode_context(ctx);
  const auto s = m.dorn_scores(st);
  ASSERT_EQ(s.shape(), (Shape{1, 3}));
  const auto W = m.parameter("head.dorn.weight");
  const auto h = st.ctx_states;
  for (std::size_t i = 0; i < 3; ++i) {
    double e = 0;
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t c = 0; c < 8; ++c) e += h[i * 8 + a] * W[a * 8 + c] * h[j * 8 + c];
    EXPECT_NEAR(s[i], e / 3.0, 1e-10);
  }
}

TEST(ModelTest, DornHandCaseWithIdentity) {
  // H = I, W = I: s_i = (1/|C|) sum_j <h_i, h_j>.
  HierState<double> st;
  st.ctx_states = TensorD::from(Shape{1, 2, 2}, {1, 0, 1, 1});
  st.ctx_mask = Mask::ones(Shape{1, 2});
  st.lengths = {2};
  auto cfg = micro_config(20, 2, 1);
  DialogBert<double> m(cfg, 1);
  auto w = m.parameter("head.dorn.weight");
  const double eye[] = {1, 0, 0, 1};
  std::copy(std::begin(eye), std::end(eye), w.mutable_data().begin());
  const auto s = m.dorn_scores(st);
  EXPECT_DOUBLE_EQ(s[0], 1.0);  // (1 + 1) / 2
  EXPECT_DOUBLE_EQ(s[1], 1.5);  // (1 + 2) / 2
}

TEST(ModelTest, BatchedContextsMatchSingleContexts) {
  DialogBert<double> m(micro_config(20), 6);
  ContextSample a, b;
  a.context = {utt({5, 6, 7})};
  b.context = {utt({8}), utt({9, 10}), utt({11, 12, 13, 14})};
  const std::vector<ContextSample> both{a, b};
  const auto batched = m.encode_context(make_batch(both));
  const auto sa = m.encode_context(a.context), sb = m.encode_context(b.context);
  const auto h = batched.ctx_states.data();
  EXPECT_LT(max_abs_diff(h.subspan(0, 8), sa.ctx_states.data()), 1e-9);
  EXPECT_LT(max_abs_diff(h.subspan(3 * 8, 3 * 8), sb.ctx_states.data()), 1e-9);
  for (std::size_t i = 8; i < 3 * 8; ++i) EXPECT_EQ(h[i], 0.0);
  EXPECT_EQ(batched.lengths, (std::vector<std::size_t>{1, 3}));
}

TEST(ModelTest, DecoderLogitsAreCausal) {
  DialogBert<double> m(micro_config(20), 7);
  const auto st = m.encode_context(Context{utt({5, 6})});
  const auto l1 = m.decode_logits(st, Utterance{Vocab::kCls, 7, 8});
  const auto l2 = m.decode_logits(st, Utterance{Vocab::kCls, 7, 9});
  ASSERT_EQ(l1.shape(), (Shape{3, 20}));
  EXPECT_LT(max_abs_diff(l1.data().subspan(0, 40), l2.data().subspan(0, 40)), 1e-12);
  EXPECT_GT(max_abs_diff(l1.data().subspan(40), l2.data().subspan(40)), 1e-6);
}

TEST(ModelTest, EncodeEnforcesLimits) {
  DialogBert<double> m(micro_config(20), 8);
  Context too_many(8, utt({5}));
  EXPECT_THROW(m.encode_context(too_many), ValueError);
  Utterance too_long(31, 5);
  EXPECT_THROW(m.encode_utterance(too_long), ValueError);
  EXPECT_NO_THROW(m.encode_context(Context(7, utt({5}))));
}

TEST(ModelTest, GenerateStopsAtSepOrLimit) {
  DialogBert<double> m(micro_config(20), 9);
  const Context ctx{utt({5, 6})};
  auto bias = m.parameter("head.out.bias");
  // A huge bias on [SEP] forces an immediate stop.
  bias.mutable_data()[Vocab::kSep] = 100;
  EXPECT_EQ(m.generate(ctx), (Utterance{Vocab::kSep}));
  bias.mutable_data()[Vocab::kSep] = 0;
  bias.mutable_data()[11] = 100;
  const Utterance g = m.generate(ctx);
  EXPECT_EQ(g.size(), kMaxUttLen - 1);
  for (const TokenId t : g) EXPECT_EQ(t, 11);
}

TEST(ModelTest, DropoutOnlyInTrainingMode) {
  auto cfg = micro_config(20);
  cfg.utt_encoder.dropout = cfg.ctx_encoder.dropout = cfg.decoder.dropout = 0.3;
  DialogBert<double> m(cfg, 10);
  const Context ctx{utt({5, 6}), utt({7})};
  const auto e1 = m.encode_context(ctx).ctx_states;
  const auto e2 = m.encode_context(ctx).ctx_states;
  EXPECT_EQ(max_abs_diff(e1.data(), e2.data()), 0.0);
  m.set_training(true);
  const auto t1 = m.encode_context(ctx).ctx_states;
  const auto t2 = m.encode_context(ctx).ctx_states;
  EXPECT_GT(max_abs_diff(t1.data(), t2.data()), 0.0);
}

}  // namespace
}  // namespace dialogbert
