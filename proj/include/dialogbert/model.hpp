// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogbert/data.hpp"
#include "dialogbert/ops.hpp"
#include "dialogbert/rng.hpp"
#include "dialogbert/tensor.hpp"
#include "dialogbert/transformer.hpp"

namespace dialogbert {

struct ModelConfig {
  std::size_t vocab_size = 0;
  BlockConfig utt_encoder;
  BlockConfig ctx_encoder;
  BlockConfig decoder;
  std::size_t max_utt_len = kMaxUttLen;  // includes [CLS] and [SEP]
  std::size_t max_ctx_utts = kMaxCtxUtts;
  bool tie_word_embeddings = true;
  double init_std = 0.02;  // weight and embedding init; biases and layer norms are fixed

  std::size_t hidden_size() const { return utt_encoder.hidden_size; }

  /// Desk-scale preset: L=2, H=64, A=2, FFN 256 in every stack.
  static ModelConfig tiny(std::size_t vocab_size) { return uniform(vocab_size, 2, 64, 2, 256, 0.0); }

  /// L=6, H=256, A=2 in every stack, FFN 4H, BERT dropout.
  static ModelConfig small(std::size_t vocab_size) { return uniform(vocab_size, 6, 256, 2, 1024, 0.1); }

  static ModelConfig preset(std::string_view name, std::size_t vocab_size) {
    if (name == "tiny") return tiny(vocab_size);
    if (name == "small") return small(vocab_size);
    throw ValueError("unknown model preset '" + std::string(name) + "'");
  }

  static ModelConfig uniform(std::size_t vocab_size, std::size_t layers, std::size_t hidden, std::size_t heads,
                             std::size_t ffn, double dropout) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.utt_encoder = BlockConfig{hidden, heads, layers, ffn, dropout, c.max_utt_len};
    c.ctx_encoder = BlockConfig{hidden, heads, layers, ffn, dropout, c.max_ctx_utts};
    c.decoder = BlockConfig{hidden, heads, layers, ffn, dropout, c.max_utt_len};
    return c;
  }

  void validate() const {
    if (vocab_size <= Vocab::kNumReserved) throw ValueError("ModelConfig: vocab_size must exceed the reserved ids");
    if (max_utt_len < 3) throw ValueError("ModelConfig: max_utt_len must be at least 3");
    if (max_ctx_utts < 1) throw ValueError("ModelConfig: max_ctx_utts must be at least 1");
    if (!(init_std > 0)) throw ValueError("ModelConfig: init_std must be positive");
    utt_encoder.validate();
    ctx_encoder.validate();
    decoder.validate();
    if (ctx_encoder.hidden_size != hidden_size() || decoder.hidden_size != hidden_size()) {
      throw ValueError("ModelConfig: all stacks must share the hidden size");
    }
    if (utt_encoder.max_positions < max_utt_len || decoder.max_positions < max_utt_len ||
        ctx_encoder.max_positions < max_ctx_utts) {
      throw ValueError("ModelConfig: stack max_positions smaller than the data limits");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Output of the hierarchical encoder for a batch of contexts.
template <class T>
struct HierState {
  Tensor<T> utt_vecs;    // [b, C, H]: [CLS] output + utterance position, zero on padded slots
  Tensor<T> ctx_states;  // [b, C, H]: context encoder output, zero on padded slots
  Mask ctx_mask;         // [b, C]
  std::vector<std::size_t> lengths;  // valid utterances per context

  std::size_t batch() const { return ctx_mask.shape[0]; }
  std::size_t width() const { return ctx_mask.shape[1]; }
};

/// Hierarchical encoder-decoder with the masked-utterance converter and the
/// order-ranking head.
///
/// Parameter names follow `<module>.layer<i>.<sublayer>.<proj>.{weight,bias}`;
/// linear weights are stored as [in, out] and applied as x * W + b.
template <class T>
class DialogBert {
 public:
  DialogBert(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_((cfg.validate(), cfg)),
        store_(Rng(seed, 0x1417), cfg.init_std),
        word_emb_(store_.add("emb.word.weight", Shape{cfg.vocab_size, cfg.hidden_size()}, Init::kNormal)),
        word_pos_(store_.add("emb.word_pos.weight", Shape{cfg.max_utt_len, cfg.hidden_size()}, Init::kNormal)),
        word_ln_(store_, "emb.word_ln", cfg.hidden_size()),
        utt_pos_(store_.add("emb.utt_pos.weight", Shape{cfg.max_ctx_utts, cfg.hidden_size()}, Init::kNormal)),
        utt_ln_(store_, "emb.utt_ln", cfg.hidden_size()),
        utt_enc_(store_, "utt_enc", cfg.utt_encoder),
        ctx_enc_(store_, "ctx_enc", cfg.ctx_encoder),
        dec_word_emb_(cfg.tie_word_embeddings
                          ? word_emb_
                          : store_.add("dec.word.weight", Shape{cfg.vocab_size, cfg.hidden_size()}, Init::kNormal)),
        dec_pos_(store_.add("dec.pos.weight", Shape{cfg.max_utt_len, cfg.hidden_size()}, Init::kNormal)),
        dec_ln_(store_, "dec.emb_ln", cfg.hidden_size()),
        dec_(store_, "dec", cfg.decoder),
        mur_w_(store_.add("head.mur.weight", Shape{cfg.hidden_size(), cfg.hidden_size()}, Init::kNormal)),
        mur_b_(store_.add("head.mur.bias", Shape{cfg.hidden_size()}, Init::kZeros)),
        dorn_w_(store_.add("head.dorn.weight", Shape{cfg.hidden_size(), cfg.hidden_size()}, Init::kIdentityNoise)),
        out_w_(store_.add("head.out.weight", Shape{cfg.hidden_size(), cfg.vocab_size}, Init::kNormal)),
        out_b_(store_.add("head.out.bias", Shape{cfg.vocab_size}, Init::kZeros)),
        dropout_rng_(seed, 0xd80) {}

  DialogBert(const DialogBert&) = delete;
  DialogBert& operator=(const DialogBert&) = delete;
  DialogBert(DialogBert&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  Tensor<T> parameter(const std::string& name) const { return store_.find(name); }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  Rng& dropout_rng() { return dropout_rng_; }

  /// [CLS]-position outputs of the utterance encoder, [n, H]. Rows are
  /// id lists that start with [CLS] and end with [SEP].
  Tensor<T> encode_utterances(std::span<const Utterance> utts) {
    ForwardContext fc = forward_context();
    return encode_utterances(utts, fc);
  }

  Tensor<T> encode_utterance(const Utterance& u) {
    return reshape(encode_utterances(std::span<const Utterance>(&u, 1)), Shape{cfg_.hidden_size()});
  }

  HierState<T> encode_context(const Batch& batch) {
    ForwardContext fc = forward_context();
    return encode_context(batch, fc);
  }

  HierState<T> encode_context(const Context& ctx) {
    ContextSample s;
    s.context = ctx;
    return encode_context(make_batch(std::span<const ContextSample>(&s, 1)));
  }

  /// Logits [b, t, V]; row j of element i scores the token after inputs[i][j].
  Tensor<T> decode_logits(const HierState<T>& state, std::span<const Utterance> inputs) {
    ForwardContext fc = forward_context();
    return decode_logits(state, inputs, fc);
  }

  /// Single-context form returning [t, V].
  Tensor<T> decode_logits(const HierState<T>& state, const Utterance& inputs) {
    const Tensor<T> logits = decode_logits(state, std::span<const Utterance>(&inputs, 1));
    return reshape(logits, Shape{logits.dim(1), logits.dim(2)});
  }

  /// Converter output u_hat = h_slot * W_mur + b_mur for one slot per batch
  /// element, [b, H].
  Tensor<T> convert_masked(const HierState<T>& state, std::span<const std::size_t> slots) const {
    if (slots.size() != state.batch()) {
      throw ValueError("convert_masked: need one slot per batch element");
    }
    std::vector<std::int64_t> rows(slots.size());
    for (std::size_t b = 0; b < slots.size(); ++b) {
      if (slots[b] >= state.width() || !state.ctx_mask[b * state.width() + slots[b]]) {
        throw ValueError("convert_masked: slot " + std::to_string(slots[b]) + " is not a valid utterance of context " +
                         std::to_string(b));
      }
      rows[b] = static_cast<std::int64_t>(b * state.width() + slots[b]);
    }
    const Tensor<T> flat = reshape(state.ctx_states, Shape{state.batch() * state.width(), cfg_.hidden_size()});
    return add(matmul(gather_rows(flat, rows), mur_w_), mur_b_);
  }

  /// Order scores s_i = (1/|C|) sum_j h_i^T W h_j over valid j, [b, C]; zero on
  /// padded slots.
  Tensor<T> dorn_scores(const HierState<T>& state) const {
    const Tensor<T>& h = state.ctx_states;
    const Tensor<T> pair = matmul(matmul(h, dorn_w_), transpose(h));  // [b, C, C]
    std::vector<T> inv(state.batch());
    for (std::size_t b = 0; b < inv.size(); ++b) inv[b] = T(1) / static_cast<T>(state.lengths[b]);
    return mul(sum(pair, 2), Tensor<T>::from(Shape{state.batch(), 1}, std::move(inv)));
  }

  /// Greedy decoding from [CLS]; stops after [SEP] or when the sequence
  /// (including [CLS]) reaches max_utt_len. Ties go to the lowest id. The
  /// result excludes [CLS].
  Utterance generate(const Context& ctx) {
    NoGradGuard no_grad;
    ForwardContext fc{false, nullptr};
    ContextSample s;
    s.context = ctx;
    const Batch batch = make_batch(std::span<const ContextSample>(&s, 1));
    const HierState<T> state = encode_context(batch, fc);
    Utterance seq{Vocab::kCls};
    while (seq.size() < cfg_.max_utt_len) {
      const Tensor<T> logits = decode_logits(state, std::span<const Utterance>(&seq, 1), fc);
      const auto row = logits.data().subspan((seq.size() - 1) * cfg_.vocab_size, cfg_.vocab_size);
      TokenId best = 0;
      for (std::size_t v = 1; v < row.size(); ++v) {
        if (row[v] > row[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(v);
      }
      seq.push_back(best);
      if (best == Vocab::kSep) break;
    }
    return Utterance(seq.begin() + 1, seq.end());
  }

 private:
  ForwardContext forward_context() { return ForwardContext{training_, &dropout_rng_}; }

  static std::size_t real_length(std::span<const TokenId> row) {
    std::size_t n = 0;
    for (const TokenId t : row) n += t != Vocab::kPad;
    return n;
  }

  Tensor<T> encode_utterances(std::span<const Utterance> utts, ForwardContext& fc) {
    if (utts.empty()) throw ValueError("encode_utterances: no utterances");
    std::size_t len = 0;
    for (const auto& u : utts) {
      if (u.empty()) throw ValueError("encode_utterance: empty utterance");
      if (u.size() > cfg_.max_utt_len) {
        throw ValueError("encode_utterance: length " + std::to_string(u.size()) + " exceeds max_utt_len " +
                         std::to_string(cfg_.max_utt_len));
      }
      len = std::max(len, u.size());
    }
    const std::size_t n = utts.size(), hidden = cfg_.hidden_size();
    std::vector<std::int64_t> ids(n * len, Vocab::kPad);
    std::vector<std::uint8_t> valid(n * len, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < utts[i].size(); ++j) {
        ids[i * len + j] = utts[i][j];
        valid[i * len + j] = utts[i][j] != Vocab::kPad;
      }
    }
    Tensor<T> x = reshape(embedding_gather(word_emb_, ids), Shape{n, len, hidden});
    x = maybe_dropout(word_ln_(add(x, slice(word_pos_, 0, 0, len))), cfg_.utt_encoder.dropout, fc);
    const Tensor<T> out = utt_enc_.encode(x, Mask(Shape{n, len}, std::move(valid)), fc);
    std::vector<std::int64_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) cls[i] = static_cast<std::int64_t>(i * len);
    return gather_rows(reshape(out, Shape{n * len, hidden}), cls);
  }

  HierState<T> encode_context(const Batch& batch, ForwardContext& fc) {
    const std::size_t b = batch.size, width = batch.ctx_width, hidden = cfg_.hidden_size();
    if (b == 0) throw ValueError("encode_context: empty batch");
    if (width > cfg_.max_ctx_utts) {
      throw ValueError("encode_context: context width " + std::to_string(width) + " exceeds max_ctx_utts " +
                       std::to_string(cfg_.max_ctx_utts));
    }
    HierState<T> st;
    st.ctx_mask = Mask(Shape{b, width}, batch.context_mask);
    std::vector<Utterance> rows;
    std::vector<std::int64_t> slot_row(b * width, -1), slot_pos(b * width, -1);
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t count = 0;
      for (std::size_t c = 0; c < width; ++c) {
        if (!st.ctx_mask[i * width + c]) continue;
        const auto row = batch.utterance(i, c);
        rows.emplace_back(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(real_length(row)));
        slot_row[i * width + c] = static_cast<std::int64_t>(rows.size() - 1);
        slot_pos[i * width + c] = static_cast<std::int64_t>(c);
        ++count;
      }
      if (count == 0) throw ValueError("encode_context: context " + std::to_string(i) + " has no utterances");
      st.lengths.push_back(count);
    }
    const Tensor<T> cls = encode_utterances(rows, fc);
    st.utt_vecs = reshape(add(gather_rows(cls, slot_row), gather_rows(utt_pos_, slot_pos)), Shape{b, width, hidden});
    std::vector<T> keep(b * width);
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = st.ctx_mask[i] ? T(1) : T(0);
    const Tensor<T> h = ctx_enc_.encode(maybe_dropout(utt_ln_(st.utt_vecs), cfg_.ctx_encoder.dropout, fc), st.ctx_mask, fc);
    st.ctx_states = mul(h, Tensor<T>::from(Shape{b, width, 1}, std::move(keep)));
    return st;
  }

  Tensor<T> decode_logits(const HierState<T>& state, std::span<const Utterance> inputs, ForwardContext& fc) {
    const std::size_t b = state.batch(), hidden = cfg_.hidden_size();
    if (inputs.size() != b) throw ValueError("decode_logits: need one input sequence per context");
    std::size_t len = 0;
    for (const auto& u : inputs) {
      if (u.empty()) throw ValueError("decode_logits: empty response prefix");
      len = std::max(len, u.size());
    }
    if (len > cfg_.max_utt_len) {
      throw ValueError("decode_logits: response length " + std::to_string(len) + " exceeds max_utt_len " +
                       std::to_string(cfg_.max_utt_len));
    }
    std::vector<std::int64_t> ids(b * len, Vocab::kPad);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < inputs[i].size(); ++j) ids[i * len + j] = inputs[i][j];
    Tensor<T> y = reshape(embedding_gather(dec_word_emb_, ids), Shape{b, len, hidden});
    y = maybe_dropout(dec_ln_(add(y, slice(dec_pos_, 0, 0, len))), cfg_.decoder.dropout, fc);
    const Tensor<T> out = dec_.decode(y, state.ctx_states, state.ctx_mask, fc);
    return add(matmul(out, out_w_), out_b_);
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  Tensor<T> word_emb_;
  Tensor<T> word_pos_;
  LayerNormParams<T> word_ln_;
  Tensor<T> utt_pos_;
  LayerNormParams<T> utt_ln_;
  EncoderStack<T> utt_enc_;
  EncoderStack<T> ctx_enc_;
  Tensor<T> dec_word_emb_;
  Tensor<T> dec_pos_;
  LayerNormParams<T> dec_ln_;
  DecoderStack<T> dec_;
  Tensor<T> mur_w_;
  Tensor<T> mur_b_;
  Tensor<T> dorn_w_;
  Tensor<T> out_w_;
  Tensor<T> out_b_;
  bool training_ = false;
  Rng dropout_rng_;
};

}  // namespace dialogbert
