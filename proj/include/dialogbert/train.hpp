// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dialogbert/checkpoint.hpp"
#include "dialogbert/data.hpp"
#include "dialogbert/model.hpp"
#include "dialogbert/objectives.hpp"
#include "dialogbert/rng.hpp"

namespace dialogbert {

struct OptimConfig {
  double lr_peak = 5e-5;
  std::size_t warmup_steps = 5000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t max_steps = 100000;
  std::size_t validate_every = 2000;

  void validate() const {
    if (!(lr_peak > 0)) throw ValueError("optim: lr_peak must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ValueError("optim: betas must lie in [0, 1)");
    if (!(eps > 0)) throw ValueError("optim: eps must be positive");
    if (weight_decay < 0) throw ValueError("optim: weight_decay must be non-negative");
    if (max_steps < 1) throw ValueError("optim: max_steps must be at least 1");
    if (validate_every < 1) throw ValueError("optim: validate_every must be at least 1");
  }
};

/// Linear warmup from 0 to lr_peak over warmup_steps, then linear decay to 0
/// at max_steps. Constant lr_peak after warmup when max_steps <= warmup_steps.
inline double lr_at(const OptimConfig& c, std::size_t step) {
  if (step < c.warmup_steps) return c.lr_peak * (static_cast<double>(step) / static_cast<double>(c.warmup_steps));
  if (c.max_steps <= c.warmup_steps) return c.lr_peak;
  if (step >= c.max_steps) return 0.0;
  return c.lr_peak * (static_cast<double>(c.max_steps - step) / static_cast<double>(c.max_steps - c.warmup_steps));
}

struct StepReport {
  bool applied = false;
  double grad_norm = 0;  // before clipping
  double clip_coef = 1;
};

/// AdamW with decoupled weight decay and global-norm clipping.
template <class T>
class AdamW {
 public:
  /// `decay[i]` selects whether params[i] is weight-decayed; empty means all.
  AdamW(std::vector<Tensor<T>> params, OptimConfig cfg, std::vector<bool> decay = {})
      : params_(std::move(params)), cfg_(cfg), decay_(std::move(decay)) {
    cfg_.validate();
    if (decay_.empty()) decay_.assign(params_.size(), true);
    if (decay_.size() != params_.size()) throw ValueError("adamw: decay mask size mismatch");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  /// Parameters of a model; only matrices (rank >= 2) are decayed.
  static AdamW for_store(const ParamStore<T>& store, OptimConfig cfg) {
    std::vector<Tensor<T>> params;
    std::vector<bool> decay;
    for (const auto& p : store.params()) {
      params.push_back(p.tensor);
      decay.push_back(p.tensor.rank() >= 2);
    }
    return AdamW(std::move(params), cfg, std::move(decay));
  }

  /// One update with gradients currently held by the parameters. A non-finite
  /// gradient leaves everything untouched and counts as skipped.
  StepReport step(double lr) {
    StepReport r;
    double sq = 0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (const T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    r.grad_norm = std::sqrt(sq);
    if (!std::isfinite(r.grad_norm)) {
      ++skipped_;
      return r;
    }
    if (cfg_.grad_clip_norm > 0 && r.grad_norm > cfg_.grad_clip_norm) {
      r.clip_coef = cfg_.grad_clip_norm / (r.grad_norm + 1e-6);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T coef = static_cast<T>(r.clip_coef);
    const T shrink = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto value = params_[i].mutable_data();
      const bool has = params_[i].has_grad();
      auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        if (decay_[i]) value[k] *= shrink;
        const T g = has ? grad[k] * coef : T(0);
        m[k] = b1 * m[k] + (T(1) - b1) * g;
        v[k] = b2 * v[k] + (T(1) - b2) * g * g;
        const double mh = static_cast<double>(m[k]) / bc1;
        const double vh = static_cast<double>(v[k]) / bc2;
        value[k] = static_cast<T>(static_cast<double>(value[k]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    r.applied = true;
    return r;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  const OptimConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor<T>> params_;
  OptimConfig cfg_;
  std::vector<bool> decay_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
};

// ---------------------------------------------------------------------------
// Loss trace.

struct TraceRow {
  std::size_t step = 0;
  double l_dec = 0;
  double l_mur = 0;
  double l_duor = 0;
  double lr = 0;
  double wall_ms = 0;
};

inline constexpr const char* kTraceHeader = "step\tl_dec\tl_mur\tl_duor\tlr\twall_ms";

inline std::string format_trace_row(const TraceRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.3f", r.step, r.l_dec, r.l_mur, r.l_duor, r.lr,
                r.wall_ms);
  return buf;
}

struct ValidationRecord {
  std::size_t step = 0;
  double l_dec = 0;
};

struct TrainState {
  std::size_t step = 0;
  double best_valid = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t skipped_steps = 0;
  std::uint64_t epochs = 0;
  std::uint64_t objective_rng_counter = 0;
  std::vector<TraceRow> history;
  std::vector<ValidationRecord> validations;
};

struct TrainOptions {
  OptimConfig optim;
  ObjectiveSet objectives = ObjectiveSet::kAll;
  LossWeights weights;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  bool wall_clock = false;            // record real elapsed time; 0 otherwise
  bool restore_best = true;           // leave the best-validation parameters in the model
  std::filesystem::path checkpoint;   // written on each improvement when set
  std::uint64_t vocab_hash = 0;
  std::ostream* trace = nullptr;      // loss trace sink, header included
  std::function<void(const TraceRow&)> on_step;
};

/// Token-weighted teacher-forced l_dec over `samples`, in eval mode.
template <class T>
double validation_loss(DialogBert<T>& model, std::span<const ContextSample> samples, std::size_t batch_size = 32) {
  if (samples.empty()) throw ValueError("validation: no samples");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  double nll = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const auto group = samples.subspan(i, std::min(batch_size, samples.size() - i));
    const auto r = nug_nll(model, group);
    nll += static_cast<double>(r.mean.item()) * static_cast<double>(r.tokens);
    tokens += r.tokens;
  }
  model.set_training(was_training);
  return nll / static_cast<double>(tokens);
}

namespace detail {

template <class T>
std::vector<std::vector<T>> snapshot(const ParamStore<T>& store) {
  std::vector<std::vector<T>> out;
  for (const auto& p : store.params()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <class T>
void restore(ParamStore<T>& store, const std::vector<std::vector<T>>& values) {
  auto& params = store.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(values[i].begin(), values[i].end(), params[i].tensor.mutable_data().begin());
  }
}

}  // namespace detail

/// Runs optimization for optim.max_steps updates, cycling through reshuffled
/// epochs of `train`. Validation happens every validate_every steps and after
/// the last one. Update t (1-based) uses lr_at(t).
template <class T>
TrainState train(DialogBert<T>& model, std::span<const ContextSample> train_samples,
                 std::span<const ContextSample> valid_samples, std::span<const Utterance> pool,
                 const TrainOptions& opt) {
  if (train_samples.empty()) throw ValueError("train: no training samples");
  if (valid_samples.empty()) throw ValueError("train: no validation samples");
  opt.optim.validate();
  if (opt.batch_size < 1) throw ValueError("train: batch_size must be at least 1");

  auto optim = AdamW<T>::for_store(model.params(), opt.optim);
  Rng batch_rng(opt.seed, 1);
  Rng objective_rng(opt.seed, 2);
  TrainState state;
  std::vector<std::vector<T>> best;
  const auto start = std::chrono::steady_clock::now();

  if (opt.trace) *opt.trace << kTraceHeader << '\n';
  model.set_training(true);

  std::optional<Batcher> batcher;
  std::uint64_t epoch = 0;
  for (std::size_t step = 1; step <= opt.optim.max_steps; ++step) {
    if (!batcher || batcher->done()) batcher.emplace(train_samples, opt.batch_size, batch_rng.fork(epoch++), true);
    const auto group = *batcher->next_samples();

    optim.zero_grad();
    auto losses = total_loss(model, std::span<const ContextSample>(group), objective_rng, pool, opt.objectives,
                             opt.weights);
    losses.total.backward();
    const double lr = lr_at(opt.optim, step);
    optim.step(lr);
    state.step = step;

    TraceRow row{step, losses.l_dec, losses.l_mur, losses.l_duor, lr, 0.0};
    if (opt.wall_clock) {
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    state.history.push_back(row);
    if (opt.trace) *opt.trace << format_trace_row(row) << '\n';
    if (opt.on_step) opt.on_step(row);

    if (step % opt.optim.validate_every == 0 || step == opt.optim.max_steps) {
      const double v = validation_loss(model, valid_samples);
      model.set_training(true);
      state.validations.push_back({step, v});
      if (v < state.best_valid) {
        state.best_valid = v;
        state.best_step = step;
        best = detail::snapshot(model.params());
        if (!opt.checkpoint.empty()) save_checkpoint(opt.checkpoint, model, opt.vocab_hash);
      }
    }
  }
  if (opt.trace) opt.trace->flush();
  state.skipped_steps = optim.skipped();
  state.epochs = epoch;
  state.objective_rng_counter = objective_rng.counter();
  if (opt.restore_best && !best.empty()) detail::restore(model.params(), best);
  model.set_training(false);
  return state;
}

/// Splits dialogues into (train, valid): the last ceil(frac * n) go to valid.
/// With fewer than two dialogues, or frac <= 0, valid aliases train.
struct CorpusSplit {
  std::vector<Dialogue> train;
  std::vector<Dialogue> valid;
  bool valid_is_train = false;
};

inline CorpusSplit split_corpus(std::span<const Dialogue> corpus, double valid_frac) {
  CorpusSplit s;
  const std::size_t n = corpus.size();
  std::size_t n_valid = valid_frac > 0 ? static_cast<std::size_t>(std::ceil(valid_frac * static_cast<double>(n))) : 0;
  if (n < 2 || n_valid == 0 || n_valid >= n) {
    s.train.assign(corpus.begin(), corpus.end());
    s.valid = s.train;
    s.valid_is_train = true;
    return s;
  }
  s.train.assign(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(n_valid));
  s.valid.assign(corpus.end() - static_cast<std::ptrdiff_t>(n_valid), corpus.end());
  return s;
}

inline nlohmann::json to_json(const OptimConfig& c) {
  return {{"lr_peak", c.lr_peak},       {"warmup_steps", c.warmup_steps},     {"beta1", c.beta1},
          {"beta2", c.beta2},           {"eps", c.eps},                       {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm}, {"max_steps", c.max_steps}, {"validate_every", c.validate_every}};
}

inline OptimConfig optim_config_from_json(const nlohmann::json& j) {
  OptimConfig c;
  try {
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.validate_every = j.value("validate_every", c.validate_every);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("optim config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace dialogbert
