// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogbert/data.hpp"
#include "dialogbert/model.hpp"
#include "dialogbert/ops.hpp"
#include "dialogbert/rng.hpp"

namespace dialogbert {

// ---------------------------------------------------------------------------
// Next-utterance generation.

template <class T>
struct TokenNll {
  Tensor<T> mean;          // mean negative log-likelihood per target token
  std::size_t tokens = 0;  // number of targets
};

/// Teacher-forced cross entropy of each response given its context. Inputs are
/// response[0..n-2], targets response[1..n-1]; [CLS] is never a target.
template <class T>
TokenNll<T> nug_nll(DialogBert<T>& model, std::span<const ContextSample> samples) {
  if (samples.empty()) throw ValueError("nug_loss: no samples");
  std::vector<Utterance> inputs;
  std::vector<std::int64_t> targets;
  std::size_t len = 0;
  for (const auto& s : samples) {
    if (s.response.size() < 2) throw ValueError("nug_loss: response must hold [CLS] and at least one target");
    if (s.response.size() > model.config().max_utt_len) {
      throw ValueError("nug_loss: response length " + std::to_string(s.response.size()) + " exceeds max_utt_len");
    }
    len = std::max(len, s.response.size() - 1);
  }
  std::size_t count = 0;
  for (const auto& s : samples) {
    inputs.emplace_back(s.response.begin(), s.response.end() - 1);
    for (std::size_t j = 0; j < len; ++j) {
      const std::int64_t t = j + 1 < s.response.size() ? s.response[j + 1] : Vocab::kPad;
      targets.push_back(t);
      count += t != Vocab::kPad;
    }
  }
  const Batch batch = make_batch(samples);
  const HierState<T> state = model.encode_context(batch);
  const Tensor<T> logits = model.decode_logits(state, inputs);
  const std::size_t vocab = model.config().vocab_size;
  return {cross_entropy_logits(reshape(logits, Shape{samples.size() * len, vocab}), targets, Vocab::kPad), count};
}

template <class T>
Tensor<T> nug_loss(DialogBert<T>& model, std::span<const ContextSample> samples) {
  return nug_nll(model, samples).mean;
}

// ---------------------------------------------------------------------------
// Masked utterance regression.

enum class CorruptionMode { kMasked, kUnchanged, kRandomReplaced };

struct CorruptionOutcome {
  std::size_t slot = 0;
  CorruptionMode mode = CorruptionMode::kMasked;
};

struct CorruptedContext {
  Context context;
  CorruptionOutcome outcome;
};

inline const Utterance& mask_utterance() {
  static const Utterance kMaskUtt{Vocab::kCls, Vocab::kMask, Vocab::kSep};
  return kMaskUtt;
}

/// Picks one slot uniformly; 80% of the time it becomes [CLS, MASK, SEP], 10%
/// it is left alone and 10% it is replaced by a random pool utterance.
inline CorruptedContext corrupt_context(const Context& ctx, Rng& rng, std::span<const Utterance> pool) {
  if (ctx.empty()) throw ValueError("corrupt_context: empty context");
  if (pool.empty()) throw ValueError("corrupt_context: empty utterance pool");
  CorruptedContext out{ctx, {}};
  out.outcome.slot = static_cast<std::size_t>(rng.below(ctx.size()));
  const double u = rng.uniform();
  if (u < 0.8) {
    out.outcome.mode = CorruptionMode::kMasked;
    out.context[out.outcome.slot] = mask_utterance();
  } else if (u < 0.9) {
    out.outcome.mode = CorruptionMode::kUnchanged;
  } else {
    out.outcome.mode = CorruptionMode::kRandomReplaced;
    out.context[out.outcome.slot] = pool[static_cast<std::size_t>(rng.below(pool.size()))];
  }
  return out;
}

/// Regression targets: the original utterance vectors at each slot, [b, H],
/// cut from the graph.
template <class T>
Tensor<T> mur_targets(const HierState<T>& original, std::span<const std::size_t> slots) {
  const std::size_t b = original.batch(), width = original.width(), hidden = original.utt_vecs.dim(2);
  std::vector<std::int64_t> rows(b);
  for (std::size_t i = 0; i < b; ++i) rows[i] = static_cast<std::int64_t>(i * width + slots[i]);
  NoGradGuard no_grad;
  return gather_rows(reshape(original.utt_vecs, Shape{b * width, hidden}), rows).detach();
}

/// Mean over the batch of ||u_hat_slot - u_slot||^2 (summed over H).
template <class T>
Tensor<T> mur_loss(const DialogBert<T>& model, const HierState<T>& corrupted, std::span<const std::size_t> slots,
                   const Tensor<T>& targets) {
  const Tensor<T> predicted = model.convert_masked(corrupted, slots);
  if (!(predicted.shape() == targets.shape())) {
    throw ShapeError("mur_loss: targets " + targets.shape().str() + " vs predictions " + predicted.shape().str());
  }
  return scale(mse(predicted, targets.detach(), Reduction::kSum), T(1) / T(slots.size()));
}

// ---------------------------------------------------------------------------
// Distributed utterance order ranking.

struct ShuffleOutcome {
  std::vector<std::size_t> source;  // source[i]: 0-based original position of the utterance now in slot i
  std::vector<double> gold;         // gold[i] = (source[i] + 1) / |C|

  /// Slots listed in true order (0-based); sorting by gold ascending.
  std::vector<std::size_t> correct_order() const {
    std::vector<std::size_t> order(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) order[source[i]] = i;
    return order;
  }
};

struct ShuffledContext {
  Context context;
  ShuffleOutcome outcome;
};

inline ShuffledContext apply_permutation(const Context& ctx, std::span<const std::size_t> source) {
  if (source.size() != ctx.size()) throw ValueError("apply_permutation: size mismatch");
  std::vector<std::uint8_t> seen(ctx.size(), 0);
  ShuffledContext out;
  const double n = static_cast<double>(ctx.size());
  for (const std::size_t s : source) {
    if (s >= ctx.size() || seen[s]++) throw ValueError("apply_permutation: not a permutation");
    out.context.push_back(ctx[s]);
    out.outcome.source.push_back(s);
    out.outcome.gold.push_back(static_cast<double>(s + 1) / n);
  }
  return out;
}

/// Uniform random non-identity permutation of the utterances, or nothing when
/// |C| < 2.
inline std::optional<ShuffledContext> shuffle_context(const Context& ctx, Rng& rng) {
  if (ctx.size() < 2) return std::nullopt;
  std::vector<std::size_t> source(ctx.size());
  auto is_identity = [&] {
    for (std::size_t i = 0; i < source.size(); ++i)
      if (source[i] != i) return false;
    return true;
  };
  do {
    std::iota(source.begin(), source.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(source));
  } while (is_identity());
  return apply_permutation(ctx, source);
}

/// Mean over rows of KL(softmax(s) || softmax(y)), restricted to valid slots.
template <class T>
Tensor<T> duor_loss(const Tensor<T>& scores, const Mask& mask, std::span<const std::vector<double>> gold) {
  if (scores.rank() != 2 || !(mask.shape == scores.shape()) || gold.size() != scores.dim(0)) {
    throw ShapeError("duor_loss: scores " + scores.shape().str() + " do not match mask/gold");
  }
  const std::size_t rows = scores.dim(0), width = scores.dim(1);
  std::vector<T> log_target(rows * width, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t valid = 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j) {
      if (!mask[r * width + j]) continue;
      if (valid >= gold[r].size()) throw ShapeError("duor_loss: gold row shorter than valid slots");
      mx = std::max(mx, gold[r][valid++]);
    }
    if (valid != gold[r].size()) throw ShapeError("duor_loss: gold row longer than valid slots");
    double z = 0;
    for (const double y : gold[r]) z += std::exp(y - mx);
    const double lse = mx + std::log(z);
    valid = 0;
    for (std::size_t j = 0; j < width; ++j) {
      if (mask[r * width + j]) log_target[r * width + j] = static_cast<T>(gold[r][valid++] - lse);
    }
  }
  const Tensor<T> p_hat = softmax(scores, mask);
  const Tensor<T> log_p_hat = log_softmax(scores, mask);
  const Tensor<T> log_p = Tensor<T>::from(scores.shape(), std::move(log_target));
  return scale(sum(mul(p_hat, sub(log_p_hat, log_p))), T(1) / T(rows));
}

/// Single-context form over |C| scores.
template <class T>
Tensor<T> duor_loss(const Tensor<T>& scores, std::span<const double> gold) {
  const std::size_t n = scores.numel();
  const std::vector<std::vector<double>> g{std::vector<double>(gold.begin(), gold.end())};
  return duor_loss(reshape(scores, Shape{1, n}), Mask::ones(Shape{1, n}), std::span<const std::vector<double>>(g));
}

// ---------------------------------------------------------------------------
// Combined objective.

enum class ObjectiveSet { kNug, kNugMur, kNugDuor, kAll };

inline ObjectiveSet parse_objective_set(std::string_view s) {
  if (s == "nug") return ObjectiveSet::kNug;
  if (s == "nug+mur") return ObjectiveSet::kNugMur;
  if (s == "nug+duor") return ObjectiveSet::kNugDuor;
  if (s == "all") return ObjectiveSet::kAll;
  throw ValueError("unknown objective set '" + std::string(s) + "'");
}

inline std::string objective_set_name(ObjectiveSet s) {
  switch (s) {
    case ObjectiveSet::kNug: return "nug";
    case ObjectiveSet::kNugMur: return "nug+mur";
    case ObjectiveSet::kNugDuor: return "nug+duor";
    case ObjectiveSet::kAll: return "all";
  }
  return "all";
}

inline bool uses_mur(ObjectiveSet s) { return s == ObjectiveSet::kNugMur || s == ObjectiveSet::kAll; }
inline bool uses_duor(ObjectiveSet s) { return s == ObjectiveSet::kNugDuor || s == ObjectiveSet::kAll; }

struct LossWeights {
  double lambda0 = 1.0;  // MUR
  double lambda1 = 1.0;  // DUOR
};

template <class T>
struct LossBundle {
  Tensor<T> total;
  double l_dec = 0;
  double l_mur = 0;
  double l_duor = 0;
  double lambda0 = 1;
  double lambda1 = 1;
  std::size_t duor_contexts = 0;  // contexts with |C| >= 2 that contributed
};

/// L = l_dec + lambda0 * l_mur + lambda1 * l_duor over three forward passes:
/// ordered, corrupted and shuffled contexts. Randomness is drawn from `rng`
/// in sample order, corruptions first.
template <class T>
LossBundle<T> total_loss(DialogBert<T>& model, std::span<const ContextSample> samples, Rng& rng,
                         std::span<const Utterance> pool, ObjectiveSet objectives = ObjectiveSet::kAll,
                         LossWeights weights = {}) {
  LossBundle<T> out;
  out.lambda0 = weights.lambda0;
  out.lambda1 = weights.lambda1;

  const Batch ordered = make_batch(samples);
  const HierState<T> state = model.encode_context(ordered);
  {
    std::vector<Utterance> inputs;
    std::vector<std::int64_t> targets;
    std::size_t len = 0;
    for (const auto& s : samples) {
      if (s.response.size() < 2 || s.response.size() > model.config().max_utt_len) {
        throw ValueError("total_loss: response length " + std::to_string(s.response.size()) + " out of range");
      }
      len = std::max(len, s.response.size() - 1);
    }
    for (const auto& s : samples) {
      inputs.emplace_back(s.response.begin(), s.response.end() - 1);
      for (std::size_t j = 0; j < len; ++j) targets.push_back(j + 1 < s.response.size() ? s.response[j + 1] : Vocab::kPad);
    }
    const Tensor<T> logits = model.decode_logits(state, inputs);
    out.total = cross_entropy_logits(reshape(logits, Shape{samples.size() * len, model.config().vocab_size}), targets,
                                     Vocab::kPad);
    out.l_dec = static_cast<double>(out.total.item());
  }

  if (uses_mur(objectives)) {
    std::vector<ContextSample> corrupted(samples.begin(), samples.end());
    std::vector<std::size_t> slots;
    for (auto& s : corrupted) {
      auto c = corrupt_context(s.context, rng, pool);
      s.context = std::move(c.context);
      slots.push_back(c.outcome.slot);
    }
    const Tensor<T> targets = mur_targets(state, slots);
    const HierState<T> cstate = model.encode_context(make_batch(corrupted));
    const Tensor<T> loss = mur_loss(model, cstate, slots, targets);
    out.l_mur = static_cast<double>(loss.item());
    if (weights.lambda0 != 0.0) out.total = add(out.total, scale(loss, static_cast<T>(weights.lambda0)));
  }

  if (uses_duor(objectives)) {
    std::vector<ContextSample> shuffled;
    std::vector<std::vector<double>> gold;
    for (const auto& s : samples) {
      auto sh = shuffle_context(s.context, rng);
      if (!sh) continue;
      ContextSample c;
      c.context = std::move(sh->context);
      shuffled.push_back(std::move(c));
      gold.push_back(std::move(sh->outcome.gold));
    }
    out.duor_contexts = shuffled.size();
    if (!shuffled.empty()) {
      const HierState<T> sstate = model.encode_context(make_batch(shuffled));
      const Tensor<T> loss = duor_loss(model.dorn_scores(sstate), sstate.ctx_mask, gold);
      out.l_duor = static_cast<double>(loss.item());
      if (weights.lambda1 != 0.0) out.total = add(out.total, scale(loss, static_cast<T>(weights.lambda1)));
    }
  }
  return out;
}

}  // namespace dialogbert
