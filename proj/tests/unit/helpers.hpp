#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dynprompt/model.hpp"
#include "dynprompt/rng.hpp"

namespace testutil {

inline dynprompt::ModelConfig small_config(std::size_t layers = 2, std::uint64_t seed = 1) {
  dynprompt::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 32;
  c.vocab_size = 24;
  c.max_seq_len = 160;
  c.seed = seed;
  return c;
}

template <typename T = float>
dynprompt::BasicTensor<T> random_tensor(dynprompt::Rng& rng, dynprompt::Shape shape, double scale = 0.5) {
  dynprompt::BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

inline std::vector<int> random_tokens(dynprompt::Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> out(n);
  for (auto& t : out) t = static_cast<int>(rng.below(vocab));
  return out;
}

template <typename T>
double max_abs_diff(const dynprompt::BasicTensor<T>& a, const dynprompt::BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

template <typename T>
double max_rel_diff(const dynprompt::BasicTensor<T>& a, const dynprompt::BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a[i], y = b[i];
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-6}));
  }
  return m;
}

}  // namespace testutil
