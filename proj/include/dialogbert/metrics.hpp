// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dialogbert/data.hpp"
#include "dialogbert/model.hpp"
#include "dialogbert/objectives.hpp"

namespace dialogbert {

// ---------------------------------------------------------------------------
// Perplexity.

struct NllTotals {
  double nll = 0;           // summed over target tokens
  std::size_t tokens = 0;
};

/// Teacher-forced NLL summed over every non-pad response target.
template <class T>
NllTotals response_nll(DialogBert<T>& model, std::span<const ContextSample> samples, std::size_t batch_size = 32) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  NllTotals out;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const auto r = nug_nll(model, samples.subspan(i, std::min(batch_size, samples.size() - i)));
    out.nll += static_cast<double>(r.mean.item()) * static_cast<double>(r.tokens);
    out.tokens += r.tokens;
  }
  model.set_training(was_training);
  return out;
}

template <class T>
double perplexity(DialogBert<T>& model, std::span<const ContextSample> samples) {
  if (samples.empty()) throw ValueError("perplexity: no samples");
  const NllTotals t = response_nll(model, samples);
  if (t.tokens == 0) throw ValueError("perplexity: no target tokens");
  return std::exp(t.nll / static_cast<double>(t.tokens));
}

// ---------------------------------------------------------------------------
// BLEU-4.

inline constexpr double kBleuEpsilon = 0.1;

using Ngram = std::vector<TokenId>;

inline std::map<Ngram, std::size_t> ngram_counts(std::span<const TokenId> tokens, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  if (n == 0 || tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

struct NgramPrecision {
  std::size_t matched = 0;  // clipped by reference counts
  std::size_t total = 0;    // hypothesis n-grams
};

inline NgramPrecision modified_precision(std::span<const TokenId> hyp, std::span<const TokenId> ref, std::size_t n) {
  NgramPrecision p;
  const auto ref_counts = ngram_counts(ref, n);
  for (const auto& [gram, c] : ngram_counts(hyp, n)) {
    p.total += c;
    const auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) p.matched += std::min(c, it->second);
  }
  return p;
}

/// Sentence BLEU-4 in [0, 1]. A precision with no matches becomes
/// (matched + eps) / (total + eps); brevity penalty exp(min(0, 1 - r/h)).
inline double bleu4(std::span<const TokenId> hyp, std::span<const TokenId> ref) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const NgramPrecision p = modified_precision(hyp, ref, n);
    const double prec = p.matched > 0 ? static_cast<double>(p.matched) / static_cast<double>(p.total)
                                      : kBleuEpsilon / (static_cast<double>(p.total) + kBleuEpsilon);
    log_sum += std::log(prec);
  }
  const double h = static_cast<double>(hyp.size()), r = static_cast<double>(ref.size());
  return std::exp(std::min(0.0, 1.0 - r / h)) * std::exp(log_sum / 4.0);
}

/// Mean sentence BLEU-4, times 100.
inline double corpus_bleu4(std::span<const Utterance> hyps, std::span<const Utterance> refs) {
  if (hyps.size() != refs.size()) throw ValueError("bleu: hypothesis/reference count mismatch");
  if (hyps.empty()) throw ValueError("bleu: empty corpus");
  double s = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) s += bleu4(hyps[i], refs[i]);
  return 100.0 * s / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------
// NIST.

/// Information weights from reference n-gram counts, and sentence scoring.
class NistScorer {
 public:
  static constexpr std::size_t kDefaultOrder = 5;

  explicit NistScorer(std::span<const Utterance> references, std::size_t n_max = kDefaultOrder) : n_max_(n_max) {
    if (references.empty()) throw ValueError("nist: empty references");
    if (n_max < 1) throw ValueError("nist: n_max must be at least 1");
    for (const auto& r : references) {
      total_words_ += r.size();
      for (std::size_t n = 1; n <= n_max_; ++n)
        for (const auto& [gram, c] : ngram_counts(r, n)) counts_[gram] += c;
    }
    if (total_words_ == 0) throw ValueError("nist: references contain no tokens");
  }

  /// log2(count(w_1..w_{n-1}) / count(w_1..w_n)); the unigram prefix count is
  /// the total number of reference words. Unseen n-grams weigh 0.
  double info(const Ngram& gram) const {
    const auto it = counts_.find(gram);
    if (gram.empty() || it == counts_.end()) return 0.0;
    const double prefix = gram.size() == 1
                              ? static_cast<double>(total_words_)
                              : static_cast<double>(counts_.at(Ngram(gram.begin(), gram.end() - 1)));
    return std::log2(prefix / static_cast<double>(it->second));
  }

  /// Brevity factor exp(beta * log^2(min(h/r, 1))), 0.5 at h/r = 2/3.
  static double brevity(double h, double r) {
    static const double kBeta = std::log(0.5) / std::pow(std::log(1.5), 2);
    if (r <= 0) return 1.0;
    const double x = std::log(std::min(h / r, 1.0));
    return std::exp(kBeta * x * x);
  }

  double sentence(std::span<const TokenId> hyp, std::span<const TokenId> ref) const {
    if (hyp.empty()) return 0.0;
    double score = 0;
    for (std::size_t n = 1; n <= n_max_; ++n) {
      const auto hyp_counts = ngram_counts(hyp, n);
      if (hyp_counts.empty()) continue;
      const auto ref_counts = ngram_counts(ref, n);
      double gained = 0;
      std::size_t total = 0;
      for (const auto& [gram, c] : hyp_counts) {
        total += c;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) gained += info(gram) * static_cast<double>(std::min(c, it->second));
      }
      score += gained / static_cast<double>(total);
    }
    return score * brevity(static_cast<double>(hyp.size()), static_cast<double>(ref.size()));
  }

  std::size_t order() const { return n_max_; }

 private:
  std::size_t n_max_;
  std::size_t total_words_ = 0;
  std::map<Ngram, std::size_t> counts_;
};

/// Mean sentence NIST with weights from `refs`.
inline double corpus_nist(std::span<const Utterance> hyps, std::span<const Utterance> refs,
                          std::size_t n_max = NistScorer::kDefaultOrder) {
  if (hyps.size() != refs.size()) throw ValueError("nist: hypothesis/reference count mismatch");
  const NistScorer scorer(refs, n_max);
  double s = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) s += scorer.sentence(hyps[i], refs[i]);
  return s / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------
// Ordering.

/// Kendall rank correlation between two score lists; ties count toward
/// neither side. 1 for fewer than two items.
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValueError("kendall_tau: size mismatch");
  const std::size_t n = a.size();
  if (n < 2) return 1.0;
  long long s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double x = a[i] - a[j], y = b[i] - b[j];
      if (x * y > 0) ++s;
      else if (x * y < 0) --s;
    }
  return static_cast<double>(s) / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

struct OrderPrediction {
  std::vector<double> scores;      // one per slot
  std::vector<std::size_t> order;  // slots sorted by ascending score: predicted first to last
};

/// Slots sorted by ascending score; ties keep slot order.
inline std::vector<std::size_t> ascending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] < scores[y]; });
  return order;
}

template <class T>
OrderPrediction predict_order(DialogBert<T>& model, const Context& ctx) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  const Tensor<T> s = model.dorn_scores(model.encode_context(ctx));
  model.set_training(was_training);
  OrderPrediction out;
  for (std::size_t i = 0; i < ctx.size(); ++i) out.scores.push_back(static_cast<double>(s[i]));
  out.order = ascending_order(out.scores);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation harness.

/// Content tokens only: [CLS], [SEP] and [PAD] removed.
inline Utterance content_tokens(std::span<const TokenId> u) {
  Utterance out;
  for (const TokenId t : u)
    if (t != Vocab::kCls && t != Vocab::kSep && t != Vocab::kPad) out.push_back(t);
  return out;
}

struct EvalRecord {
  std::string dialogue_id;
  std::size_t turn = 0;
  std::vector<std::string> context;
  std::string reference;
  std::string hypothesis;
  double token_nll = 0;  // mean per target token
  std::size_t tokens = 0;
  double bleu4 = 0;      // sentence score in [0, 1]
  double nist = 0;
};

struct EvalReport {
  double ppl = 0;
  double bleu4 = 0;  // x100
  double nist = 0;
  std::size_t n_samples = 0;
  std::vector<EvalRecord> records;
};

/// Produces a response (without [CLS]) for a sample.
using Generator = std::function<Utterance(const ContextSample&)>;

template <class T>
EvalReport evaluate(DialogBert<T>& model, std::span<const ContextSample> samples, const Vocab& vocab,
                    const Generator& generator = {}) {
  if (samples.empty()) throw ValueError("evaluate: no samples");
  EvalReport rep;
  rep.n_samples = samples.size();
  std::vector<Utterance> hyps, refs;
  double nll = 0;
  std::size_t tokens = 0;
  const bool was_training = model.training();
  model.set_training(false);
  for (const auto& s : samples) {
    EvalRecord rec;
    rec.dialogue_id = s.dialogue_id;
    rec.turn = s.turn;
    for (const auto& u : s.context) rec.context.push_back(vocab.decode_text(u));
    {
      NoGradGuard no_grad;
      const auto r = nug_nll(model, std::span<const ContextSample>(&s, 1));
      rec.token_nll = static_cast<double>(r.mean.item());
      rec.tokens = r.tokens;
    }
    nll += rec.token_nll * static_cast<double>(rec.tokens);
    tokens += rec.tokens;
    const Utterance hyp = generator ? generator(s) : model.generate(s.context);
    hyps.push_back(content_tokens(hyp));
    refs.push_back(content_tokens(s.response));
    rec.reference = vocab.decode_text(s.response);
    rec.hypothesis = vocab.decode_text(hyp);
    rec.bleu4 = bleu4(hyps.back(), refs.back());
    rep.records.push_back(std::move(rec));
  }
  model.set_training(was_training);
  rep.ppl = std::exp(nll / static_cast<double>(tokens));
  rep.bleu4 = corpus_bleu4(hyps, refs);
  const NistScorer scorer(refs);
  double nist_sum = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    rep.records[i].nist = scorer.sentence(hyps[i], refs[i]);
    nist_sum += rep.records[i].nist;
  }
  rep.nist = nist_sum / static_cast<double>(hyps.size());
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& rec : r.records) {
    records.push_back({{"dialogue_id", rec.dialogue_id},
                       {"turn", rec.turn},
                       {"context", rec.context},
                       {"reference", rec.reference},
                       {"hypothesis", rec.hypothesis},
                       {"token_nll", rec.token_nll},
                       {"tokens", rec.tokens},
                       {"bleu4", rec.bleu4},
                       {"nist", rec.nist}});
  }
  return {{"ppl", r.ppl}, {"bleu4", r.bleu4}, {"nist", r.nist}, {"n_samples", r.n_samples}, {"records", records}};
}

inline std::string summary_line(const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "PPL %.4f  BLEU-4 %.2f  NIST %.4f  (n=%zu)", r.ppl, r.bleu4, r.nist, r.n_samples);
  return buf;
}

}  // namespace dialogbert
