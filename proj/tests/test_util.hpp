// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dialogbert/dialogbert.hpp"

namespace dialogbert::testing {

using TensorD = Tensor<double>;

inline TensorD random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = scale * rng.normal();
  return TensorD::from(shape, std::move(v), requires_grad);
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_rel = 0;
  std::size_t checked = 0;
};

/// Central differences of the scalar `loss()` with respect to every element
/// of each tensor in `wrt` (or at most `max_elems` evenly spaced ones),
/// compared with one backward pass.
inline GradCheck check_gradients(const std::function<TensorD()>& loss, std::vector<TensorD> wrt,
                                 std::size_t max_elems = 0, double h = 1e-5) {
  for (auto& t : wrt) t.zero_grad();
  TensorD l = loss();
  l.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : wrt) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t w = 0; w < wrt.size(); ++w) {
    auto data = wrt[w].mutable_data();
    const std::size_t n = data.size();
    const std::size_t count = max_elems == 0 ? n : std::min(n, max_elems);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : (c * n) / count;
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss().item();
      data[i] = orig - h;
      const double down = loss().item();
      data[i] = orig;
      out.max_rel = std::max(out.max_rel, rel_error(analytic[w][i], (up - down) / (2 * h)));
      ++out.checked;
    }
  }
  return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dialogbert_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) { return read_file(p); }

/// Tiny model configuration for fast unit tests.
inline ModelConfig micro_config(std::size_t vocab_size, std::size_t hidden = 8, std::size_t heads = 2,
                                std::size_t layers = 1, std::size_t ffn = 16) {
  return ModelConfig::uniform(vocab_size, layers, hidden, heads, ffn, 0.0);
}

}  // namespace dialogbert::testing
