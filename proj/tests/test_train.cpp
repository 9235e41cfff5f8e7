// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

namespace dialogbert {
namespace {

using testing::micro_config;
using testing::TensorD;

TEST(ScheduleTest, WarmupValuesExact) {
  const OptimConfig c;
  EXPECT_EQ(lr_at(c, 0), 0.0);
  EXPECT_EQ(lr_at(c, 2500), 2.5e-5);
  EXPECT_EQ(lr_at(c, 5000), 5e-5);
}

TEST(ScheduleTest, LinearDecayToZero) {
  OptimConfig c;
  c.lr_peak = 1.0;
  c.warmup_steps = 10;
  c.max_steps = 110;
  EXPECT_DOUBLE_EQ(lr_at(c, 5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(c, 60), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(c, 110), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(c, 500), 0.0);
  for (std::size_t s = 10; s < 110; ++s) EXPECT_GE(lr_at(c, s), lr_at(c, s + 1));
  c.max_steps = 5;
  EXPECT_DOUBLE_EQ(lr_at(c, 50), 1.0);
  c.warmup_steps = 0;
  c.max_steps = 4;
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(c, 2), 0.5);
}

TEST(OptimConfigTest, ValidationAndJson) {
  OptimConfig c;
  c.lr_peak = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = OptimConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ValueError);
  c = OptimConfig{};
  c.lr_peak = 3e-4;
  c.max_steps = 77;
  const OptimConfig back = optim_config_from_json(to_json(c));
  EXPECT_EQ(back.lr_peak, 3e-4);
  EXPECT_EQ(back.max_steps, 77u);
  EXPECT_EQ(back.warmup_steps, c.warmup_steps);
  EXPECT_THROW(optim_config_from_json(nlohmann::json{{"lr_peak", "fast"}}), FormatError);
}

OptimConfig plain(double wd = 0.0, double clip = 0.0) {
  OptimConfig c;
  c.weight_decay = wd;
  c.grad_clip_norm = clip;
  return c;
}

TEST(AdamWTest, FirstStepMovesByLearningRate) {
  auto x = TensorD::from(Shape{1}, {1.0}, true);
  AdamW<double> opt({x}, plain());
  sum(mul(x, x)).backward();
  const auto r = opt.step(0.1);
  EXPECT_TRUE(r.applied);
  EXPECT_DOUBLE_EQ(r.grad_norm, 2.0);
  // m_hat / sqrt(v_hat) = g / |g| on the first step.
  EXPECT_NEAR(x[0], 0.9, 1e-7);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.2, 1e-15);
  EXPECT_NEAR(opt.second_moments()[0][0], 0.004, 1e-15);
}

TEST(AdamWTest, DecoupledDecayWithZeroGradientIsExactShrink) {
  auto x = TensorD::from(Shape{3}, {1.0, -2.0, 0.25}, true);
  const double lr = 1e-3, wd = 0.01;
  AdamW<double> opt({x}, plain(wd));
  x.mutable_grad();  // present and zero
  opt.step(lr);
  const double shrink = 1.0 - lr * wd;
  EXPECT_EQ(x[0], 1.0 * shrink);
  EXPECT_EQ(x[1], -2.0 * shrink);
  EXPECT_EQ(x[2], 0.25 * shrink);

  auto y = TensorD::from(Shape{2}, {4.0, 8.0}, true);
  AdamW<double> no_grad({y}, plain(wd));
  no_grad.step(lr);
  EXPECT_EQ(y[0], 4.0 * shrink);
}

TEST(AdamWTest, ForStoreDecaysOnlyMatrices) {
  ParamStore<double> store(Rng(1));
  auto w = store.add("w", Shape{2, 2}, Init::kOnes);
  auto b = store.add("b", Shape{2}, Init::kOnes);
  auto opt = AdamW<double>::for_store(store, plain(0.5));
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(w[0], 0.95);
  EXPECT_EQ(b[0], 1.0);
}

TEST(AdamWTest, ClipsGlobalNorm) {
  auto x = TensorD::from(Shape{2}, {0.0, 0.0}, true);
  AdamW<double> opt({x}, plain(0.0, 1.0));
  auto g = x.mutable_grad();
  g[0] = 30;
  g[1] = 40;
  const auto r = opt.step(0.1);
  EXPECT_DOUBLE_EQ(r.grad_norm, 50.0);
  EXPECT_NEAR(r.clip_coef, 1.0 / (50.0 + 1e-6), 1e-15);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1 * 30 * r.clip_coef, 1e-12);
}

TEST(AdamWTest, SkipsNonFiniteGradients) {
  auto x = TensorD::from(Shape{2}, {1.0, 2.0}, true);
  AdamW<double> opt({x}, plain(0.1));
  x.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  const auto r = opt.step(0.1);
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(opt.skipped(), 1u);
  EXPECT_EQ(opt.steps(), 0u);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(opt.first_moments()[0][1], 0.0);
}

TEST(AdamWTest, MinimizesQuadratic) {
  auto x = TensorD::from(Shape{3}, {3.0, -2.0, 1.0}, true);
  AdamW<double> opt({x}, plain());
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    sum(mul(x, x)).backward();
    opt.step(0.01);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x[i], 0.0, 0.02);
}

TEST(TraceTest, FormatsRows) {
  EXPECT_EQ(format_trace_row({3, 0.5, 0.25, 0.125, 1e-3, 0.0}), "3\t0.5\t0.25\t0.125\t0.001\t0.000");
  EXPECT_STREQ(kTraceHeader, "step\tl_dec\tl_mur\tl_duor\tlr\twall_ms");
}

TEST(SplitTest, HoldsOutTail) {
  const auto corpus = synth_corpus(1, 20, "ordered-markers");
  const auto s = split_corpus(corpus, 0.1);
  EXPECT_EQ(s.train.size(), 18u);
  EXPECT_EQ(s.valid.size(), 2u);
  EXPECT_EQ(s.valid.front().id, corpus[18].id);
  EXPECT_FALSE(s.valid_is_train);
  EXPECT_TRUE(split_corpus(corpus, 0.0).valid_is_train);
  EXPECT_TRUE(split_corpus(std::span<const Dialogue>(corpus.data(), 1), 0.5).valid_is_train);
}

struct TinySetup {
  std::vector<Dialogue> corpus = synth_corpus(3, 6, "deterministic-qa");
  Vocab vocab = Vocab::build(corpus);
  std::vector<ContextSample> samples = make_samples(corpus, vocab);
  std::vector<Utterance> pool = utterance_pool(corpus, vocab);

  TrainOptions options(std::size_t steps) const {
    TrainOptions o;
    o.optim.lr_peak = 3e-3;
    o.optim.warmup_steps = 5;
    o.optim.max_steps = steps;
    o.optim.validate_every = 10;
    o.batch_size = 4;
    return o;
  }
};

TEST(TrainTest, LossDecreasesAndTraceIsWritten) {
  TinySetup t;
  DialogBert<float> m(micro_config(t.vocab.size(), 16, 2, 1, 32), 1);
  std::ostringstream trace;
  auto opt = t.options(40);
  opt.trace = &trace;
  const double before = validation_loss(m, std::span<const ContextSample>(t.samples));
  const auto st = train(m, std::span<const ContextSample>(t.samples), std::span<const ContextSample>(t.samples),
                        std::span<const Utterance>(t.pool), opt);
  EXPECT_EQ(st.step, 40u);
  EXPECT_EQ(st.history.size(), 40u);
  EXPECT_EQ(st.validations.size(), 4u);
  EXPECT_LT(st.best_valid, before);
  EXPECT_NEAR(validation_loss(m, std::span<const ContextSample>(t.samples)), st.best_valid, 1e-6);
  EXPECT_FALSE(m.training());
  std::istringstream lines(trace.str());
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, kTraceHeader);
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 40u);
  for (const auto& r : st.history) {
    EXPECT_TRUE(std::isfinite(r.l_dec));
    EXPECT_GE(r.l_mur, 0);
    EXPECT_GE(r.l_duor, 0);
    EXPECT_EQ(r.lr, lr_at(opt.optim, r.step));
    EXPECT_EQ(r.wall_ms, 0.0);
  }
}

TEST(TrainTest, IdenticalRunsAreBitwiseIdentical) {
  TinySetup t;
  const auto dir = testing::scratch_dir("train_det");
  auto run = [&](const std::string& name) {
    DialogBert<float> m(micro_config(t.vocab.size(), 16, 2, 1, 32), 9);
    std::ostringstream trace;
    auto opt = t.options(25);
    opt.trace = &trace;
    opt.checkpoint = dir / (name + ".bin");
    train(m, std::span<const ContextSample>(t.samples), std::span<const ContextSample>(t.samples),
          std::span<const Utterance>(t.pool), opt);
    return std::make_pair(trace.str(), testing::slurp(dir / (name + ".bin")));
  };
  const auto a = run("a");
  const auto b = run("b");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainTest, SeedChangesTrajectory) {
  TinySetup t;
  auto losses = [&](std::uint64_t seed) {
    DialogBert<float> m(micro_config(t.vocab.size(), 16, 2, 1, 32), 9);
    auto opt = t.options(5);
    opt.seed = seed;
    const auto st = train(m, std::span<const ContextSample>(t.samples), std::span<const ContextSample>(t.samples),
                          std::span<const Utterance>(t.pool), opt);
    return st.history.back().l_dec;
  };
  EXPECT_NE(losses(1), losses(2));
}

TEST(TrainTest, RejectsEmptyInputs) {
  TinySetup t;
  DialogBert<float> m(micro_config(t.vocab.size()), 1);
  const auto opt = t.options(2);
  EXPECT_THROW(train(m, std::span<const ContextSample>{}, std::span<const ContextSample>(t.samples),
                     std::span<const Utterance>(t.pool), opt),
               ValueError);
  EXPECT_THROW(train(m, std::span<const ContextSample>(t.samples), std::span<const ContextSample>{},
                     std::span<const Utterance>(t.pool), opt),
               ValueError);
}

}  // namespace
}  // namespace dialogbert
