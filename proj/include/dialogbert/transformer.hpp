// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dialogbert/ops.hpp"
#include "dialogbert/rng.hpp"
#include "dialogbert/tensor.hpp"

namespace dialogbert {

/// Sizes of one Transformer stack.
struct BlockConfig {
  std::size_t hidden_size = 64;
  std::size_t num_heads = 2;
  std::size_t num_layers = 2;
  std::size_t ffn_size = 256;
  double dropout = 0.0;
  std::size_t max_positions = 30;

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    if (hidden_size == 0 || num_heads == 0 || num_layers == 0 || ffn_size == 0 || max_positions == 0) {
      throw ValueError("BlockConfig: all sizes must be at least 1");
    }
    if (hidden_size % num_heads != 0) {
      throw ValueError("BlockConfig: hidden size " + std::to_string(hidden_size) + " is not divisible by " +
                       std::to_string(num_heads) + " heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ValueError("BlockConfig: dropout must lie in [0, 1)");
    }
  }

  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

enum class Init { kNormal, kZeros, kOnes, kIdentityNoise };

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered registry of trainable tensors with canonical names.
template <class T>
class ParamStore {
 public:
  static constexpr double kInitStd = 0.02;

  explicit ParamStore(Rng rng = Rng(), double init_std = kInitStd) : rng_(rng), init_std_(init_std) {
    if (!(init_std > 0)) throw ValueError("init_std must be positive");
  }

  Tensor<T> add(const std::string& name, Shape shape, Init init) {
    for (const auto& p : params_) {
      if (p.name == name) {
        throw ValueError("duplicate parameter name " + name);
      }
    }
    std::vector<T> v(shape.numel(), T(0));
    switch (init) {
      case Init::kNormal:
        for (auto& x : v) x = static_cast<T>(init_std_ * rng_.normal());
        break;
      case Init::kZeros:
        break;
      case Init::kOnes:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case Init::kIdentityNoise:
        if (shape.rank() != 2 || shape[0] != shape[1]) {
          throw ShapeError("identity init needs a square matrix, got " + shape.str());
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = static_cast<T>(kInitStd * rng_.normal()) + (i / shape[1] == i % shape[1] ? T(1) : T(0));
        }
        break;
    }
    auto t = Tensor<T>::from(shape, std::move(v), true);
    params_.push_back({name, t});
    return t;
  }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

  Tensor<T> find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw ValueError("unknown parameter " + name);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  Rng rng_;
  double init_std_;
  std::vector<NamedParam<T>> params_;
};

/// Training flag plus the generator that drives dropout.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

template <class T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, ForwardContext& ctx) {
  if (!ctx.training || p == 0.0) return x;
  if (ctx.rng == nullptr) throw ValueError("dropout in training mode needs a generator");
  return dropout(x, p, *ctx.rng, true);
}

inline constexpr double kMaskBias = -1e9;

/// Additive bias [b,1,1,s]: 0 where `keys` is valid, -1e9 elsewhere.
template <class T>
Tensor<T> key_padding_bias(const Mask& keys) {
  if (keys.shape.rank() != 2) throw ShapeError("key mask must be [batch, length], got " + keys.shape.str());
  std::vector<T> v(keys.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = keys[i] ? T(0) : T(kMaskBias);
  return Tensor<T>::from(Shape{keys.shape[0], 1, 1, keys.shape[1]}, std::move(v));
}

/// Additive bias [1,1,t,t] that hides future positions.
template <class T>
Tensor<T> causal_bias(std::size_t t) {
  std::vector<T> v(t * t, T(0));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) v[i * t + j] = T(kMaskBias);
  return Tensor<T>::from(Shape{1, 1, t, t}, std::move(v));
}

/// Affine map x W + b with W stored as [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out)
      : weight(store.add(name + ".weight", Shape{in, out}, Init::kNormal)),
        bias(store.add(name + ".bias", Shape{out}, Init::kZeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-12);

  LayerNormParams() = default;
  LayerNormParams(ParamStore<T>& store, const std::string& name, std::size_t width)
      : gamma(store.add(name + ".weight", Shape{width}, Init::kOnes)),
        beta(store.add(name + ".bias", Shape{width}, Init::kZeros)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Multi-head scaled dot-product attention with 1/sqrt(head_dim) scaling.
template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg)
      : heads_(cfg.num_heads),
        head_dim_(cfg.head_dim()),
        dropout_(cfg.dropout),
        q_(store, name + ".q", cfg.hidden_size, cfg.hidden_size),
        k_(store, name + ".k", cfg.hidden_size, cfg.hidden_size),
        v_(store, name + ".v", cfg.hidden_size, cfg.hidden_size),
        o_(store, name + ".o", cfg.hidden_size, cfg.hidden_size) {}

  /// query [b,t,H], keys [b,s,H], bias broadcastable to [b,heads,t,s].
  /// When `weights` is given it receives the attention probabilities.
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& keys, const Tensor<T>& bias, ForwardContext& ctx,
                       Tensor<T>* weights = nullptr) const {
    const std::size_t b = query.dim(0), t = query.dim(1), s = keys.dim(1);
    const std::size_t hidden = heads_ * head_dim_;
    auto split = [&](const Tensor<T>& x, std::size_t len) {
      return permute(reshape(x, Shape{b, len, heads_, head_dim_}), {0, 2, 1, 3});
    };
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim_));
    const Tensor<T> q = scale(split(q_(query), t), inv_scale);  // [b,A,t,d]
    const Tensor<T> k = permute(reshape(k_(keys), Shape{b, s, heads_, head_dim_}), {0, 2, 3, 1});  // [b,A,d,s]
    const Tensor<T> v = split(v_(keys), s);  // [b,A,s,d]
    const Tensor<T> probs = softmax(add(matmul(q, k), bias));  // [b,A,t,s]
    if (weights != nullptr) *weights = probs;
    const Tensor<T> mixed = matmul(maybe_dropout(probs, dropout_, ctx), v);  // [b,A,t,d]
    return o_(reshape(permute(mixed, {0, 2, 1, 3}), Shape{b, t, hidden}));
  }

 private:
  std::size_t heads_ = 1;
  std::size_t head_dim_ = 1;
  double dropout_ = 0.0;
  Linear<T> q_, k_, v_, o_;
};

template <class T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg)
      : in_(store, name + ".in", cfg.hidden_size, cfg.ffn_size), out_(store, name + ".out", cfg.ffn_size, cfg.hidden_size) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return out_(gelu(in_(x))); }

 private:
  Linear<T> in_, out_;
};

/// Post-LN encoder layer: x = LN(x + attn(x)); x = LN(x + ffn(x)).
template <class T>
class EncoderLayer {
 public:
  EncoderLayer(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg)
      : dropout_(cfg.dropout),
        attn_(store, name + ".attn", cfg),
        attn_ln_(store, name + ".attn_ln", cfg.hidden_size),
        ffn_(store, name + ".ffn", cfg),
        ffn_ln_(store, name + ".ffn_ln", cfg.hidden_size) {}

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& bias, ForwardContext& ctx,
                       Tensor<T>* weights = nullptr) const {
    const Tensor<T> h = attn_ln_(add(x, maybe_dropout(attn_(x, x, bias, ctx, weights), dropout_, ctx)));
    return ffn_ln_(add(h, maybe_dropout(ffn_(h), dropout_, ctx)));
  }

 private:
  double dropout_;
  MultiHeadAttention<T> attn_;
  LayerNormParams<T> attn_ln_;
  FeedForward<T> ffn_;
  LayerNormParams<T> ffn_ln_;
};

/// Post-LN decoder layer with causal self-attention and cross-attention.
template <class T>
class DecoderLayer {
 public:
  DecoderLayer(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg)
      : dropout_(cfg.dropout),
        self_attn_(store, name + ".self_attn", cfg),
        self_ln_(store, name + ".self_ln", cfg.hidden_size),
        cross_attn_(store, name + ".cross_attn", cfg),
        cross_ln_(store, name + ".cross_ln", cfg.hidden_size),
        ffn_(store, name + ".ffn", cfg),
        ffn_ln_(store, name + ".ffn_ln", cfg.hidden_size) {}

  Tensor<T> operator()(const Tensor<T>& y, const Tensor<T>& memory, const Tensor<T>& self_bias,
                       const Tensor<T>& mem_bias, ForwardContext& ctx, Tensor<T>* cross_weights = nullptr) const {
    Tensor<T> h = self_ln_(add(y, maybe_dropout(self_attn_(y, y, self_bias, ctx), dropout_, ctx)));
    h = cross_ln_(add(h, maybe_dropout(cross_attn_(h, memory, mem_bias, ctx, cross_weights), dropout_, ctx)));
    return ffn_ln_(add(h, maybe_dropout(ffn_(h), dropout_, ctx)));
  }

 private:
  double dropout_;
  MultiHeadAttention<T> self_attn_;
  LayerNormParams<T> self_ln_;
  MultiHeadAttention<T> cross_attn_;
  LayerNormParams<T> cross_ln_;
  FeedForward<T> ffn_;
  LayerNormParams<T> ffn_ln_;
};

/// Bidirectional encoder. Positional information is added by the caller.
template <class T>
class EncoderStack {
 public:
  EncoderStack(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      layers_.emplace_back(store, name + ".layer" + std::to_string(i), cfg);
    }
  }

  const BlockConfig& config() const { return cfg_; }

  /// x [b,s,H]; pad_mask [b,s] marks real positions. Padded keys are never
  /// attended to.
  Tensor<T> encode(const Tensor<T>& x, const Mask& pad_mask, ForwardContext& ctx,
                   std::vector<Tensor<T>>* weights = nullptr) const {
    if (x.rank() != 3 || x.dim(2) != cfg_.hidden_size) {
      throw ShapeError("encode: expected [batch, length, " + std::to_string(cfg_.hidden_size) + "], got " +
                       x.shape().str());
    }
    if (x.dim(1) > cfg_.max_positions) {
      throw ValueError("encode: sequence length " + std::to_string(x.dim(1)) + " exceeds max_positions " +
                       std::to_string(cfg_.max_positions));
    }
    if (!(pad_mask.shape == Shape{x.dim(0), x.dim(1)})) {
      throw ShapeError("encode: pad mask " + pad_mask.shape.str() + " does not match input " + x.shape().str());
    }
    const Tensor<T> bias = key_padding_bias<T>(pad_mask);
    Tensor<T> h = x;
    for (const auto& layer : layers_) {
      Tensor<T> w;
      h = layer(h, bias, ctx, weights ? &w : nullptr);
      if (weights) weights->push_back(w);
    }
    return h;
  }

 private:
  BlockConfig cfg_;
  std::vector<EncoderLayer<T>> layers_;
};

/// Causal decoder attending to an encoder memory.
template <class T>
class DecoderStack {
 public:
  DecoderStack(ParamStore<T>& store, const std::string& name, const BlockConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      layers_.emplace_back(store, name + ".layer" + std::to_string(i), cfg);
    }
  }

  const BlockConfig& config() const { return cfg_; }

  /// y [b,t,H]; memory [b,m,H]; mem_mask [b,m] marks valid memory slots.
  Tensor<T> decode(const Tensor<T>& y, const Tensor<T>& memory, const Mask& mem_mask, ForwardContext& ctx,
                   std::vector<Tensor<T>>* cross_weights = nullptr) const {
    if (y.rank() != 3 || memory.rank() != 3 || y.dim(2) != cfg_.hidden_size || memory.dim(2) != cfg_.hidden_size ||
        y.dim(0) != memory.dim(0)) {
      throw ShapeError("decode: incompatible inputs " + y.shape().str() + " and memory " + memory.shape().str());
    }
    if (y.dim(1) > cfg_.max_positions) {
      throw ValueError("decode: sequence length " + std::to_string(y.dim(1)) + " exceeds max_positions " +
                       std::to_string(cfg_.max_positions));
    }
    if (!(mem_mask.shape == Shape{memory.dim(0), memory.dim(1)})) {
      throw ShapeError("decode: memory mask " + mem_mask.shape.str() + " does not match " + memory.shape().str());
    }
    for (std::size_t b = 0; b < memory.dim(0); ++b) {
      bool any = false;
      for (std::size_t j = 0; j < memory.dim(1); ++j) any = any || mem_mask[b * memory.dim(1) + j];
      if (!any) throw ValueError("decode: batch element " + std::to_string(b) + " has an empty memory");
    }
    const Tensor<T> self_bias = causal_bias<T>(y.dim(1));
    const Tensor<T> mem_bias = key_padding_bias<T>(mem_mask);
    Tensor<T> h = y;
    for (const auto& layer : layers_) {
      Tensor<T> w;
      h = layer(h, memory, self_bias, mem_bias, ctx, cross_weights ? &w : nullptr);
      if (cross_weights) cross_weights->push_back(w);
    }
    return h;
  }

 private:
  BlockConfig cfg_;
  std::vector<DecoderLayer<T>> layers_;
};

}  // namespace dialogbert
