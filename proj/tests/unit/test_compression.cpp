#include <cstring>

#include "doctest.h"
#include "dynprompt/compression.hpp"
#include "helpers.hpp"

using namespace dynprompt;

TEST_CASE("rtn hand example") {
  Tensor w = Tensor::from_rows({{1}, {-1}, {0.5f}});
  auto q = quantize_rtn(w, {3});
  CHECK(q.scales[0] == doctest::Approx(1.0 / 3.0));
  CHECK(q.weights[0] == 1.0f);
  CHECK(q.weights[1] == -1.0f);
  CHECK(q.weights[2] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("rtn zero channel and grid fixed point") {
  Tensor w = Tensor::from_rows({{0, 2}, {0, -4}});
  auto q = quantize_rtn(w, {4});
  CHECK(q.scales[0] == 0.0);
  CHECK(q.weights.at(0, 0) == 0.0f);
  CHECK(q.weights.at(1, 0) == 0.0f);
  Tensor grid = Tensor::from_rows({{7}, {-3}, {0}, {1}});
  CHECK(quantize_rtn(grid, {4}).weights == grid);
  CHECK_THROWS_AS(quantize_rtn(w, {1}), CompressionError);
  CHECK_THROWS_AS(quantize_rtn(w, {9}), CompressionError);
  CHECK_THROWS_AS(quantize_rtn(Tensor({0, 3}), {4}), CompressionError);
}

TEST_CASE("rtn is idempotent and within half a step") {
  Rng rng(21);
  for (int bits = 2; bits <= 8; ++bits) {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor w = testutil::random_tensor(rng, {17, 9}, 0.7);
      auto q = quantize_rtn(w, {bits});
      auto qq = quantize_rtn(q.weights, {bits});
      CHECK(std::memcmp(q.weights.data(), qq.weights.data(), q.weights.numel() * sizeof(float)) == 0);
      for (std::size_t c = 0; c < 9; ++c) {
        for (std::size_t r = 0; r < 17; ++r) {
          CHECK(std::abs(double(w.at(r, c)) - q.weights.at(r, c)) <= q.scales[c] / 2 * (1 + 1e-6));
        }
      }
    }
  }
}

TEST_CASE("magnitude pruning examples") {
  auto p = prune_magnitude(Tensor::vector({4, -1, 3, 2}), {0.5});
  CHECK(p.weights == Tensor::vector({4, 0, 3, 0}));
  Tensor w = Tensor::vector({1, -2, 3});
  CHECK(prune_magnitude(w, {0.0}).weights == w);
  CHECK(prune_magnitude(Tensor::vector({1, 1, 1, 1}), {0.5}).weights == Tensor::vector({0, 0, 1, 1}));
  CHECK_THROWS_AS(prune_magnitude(w, {1.0}), CompressionError);
}

TEST_CASE("pruning hits the exact count and keeps survivors") {
  Rng rng(4);
  for (double s : {0.1, 0.25, 0.5, 0.9}) {
    Tensor w = testutil::random_tensor(rng, {13, 7});
    auto p = prune_magnitude(w, {s});
    const auto k = static_cast<std::size_t>(std::floor(s * 91));
    std::size_t zeroed = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if (p.weights[i] == 0.0f) {
        ++zeroed;
      } else {
        CHECK(p.weights[i] == w[i]);
      }
    }
    CHECK(zeroed == k);
    CHECK(p.report.achieved_sparsity == doctest::Approx(double(k) / 91));
  }
}

TEST_CASE("compress_model touches only the six projections") {
  auto w = Weights<float>::init(testutil::small_config(2, 3));
  auto c = compress_model(w, QuantSpec{2});
  CHECK(c.report.matrices.size() == 12);
  CHECK(c.weights.embedding == w.embedding);
  CHECK(c.weights.final_norm == w.final_norm);
  CHECK(c.weights.layers[1].attn_norm == w.layers[1].attn_norm);
  CHECK_FALSE(c.weights.layers[1].w_up == w.layers[1].w_up);
  CHECK(c.report.csv().rfind("matrix,method,setting,max_abs_error,mse,sparsity\n", 0) == 0);
  auto p = compress_model(w, PruneSpec{0.5});
  for (const auto& m : p.report.matrices) CHECK(m.achieved_sparsity == doctest::Approx(0.5));
}
