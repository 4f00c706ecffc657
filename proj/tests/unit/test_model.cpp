#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "dynprompt/adapters.hpp"
#include "helpers.hpp"

using namespace dynprompt;
using testutil::max_abs_diff;
using testutil::small_config;

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ModelError);
  c = small_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ModelError);
}

TEST_CASE("segment layout arithmetic") {
  std::vector<std::size_t> lens{2, 3};
  auto l = SegmentLayout::with_prompts(lens, 4);
  CHECK(l.total() == 9);
  CHECK(l.prompt_count() == 2);
  CHECK(l.prompt_offset(1) == 2);
  CHECK(l.input_offset() == 5);
  CHECK(l.prompt_of(4).value() == 1);
  CHECK_FALSE(l.prompt_of(5).has_value());
  CHECK_THROWS(SegmentLayout::input_only(0));
}

TEST_CASE("dense causal mask is lower triangular") {
  Tensor m = build_mask(SegmentLayout::input_only(3), AttentionPolicy::dense_causal);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(is_masked(m.at(i, j)) == (j > i));
  }
}

TEST_CASE("inter-prompt blocks are masked under idp") {
  std::vector<std::size_t> lens{2, 3};
  auto layout = SegmentLayout::with_prompts(lens, 2);
  Tensor m = build_mask(layout, AttentionPolicy::idp);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 2; c < 5; ++c) CHECK(is_masked(m.at(r, c)));
  }
  for (std::size_t r = 2; r < 5; ++r) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(is_masked(m.at(r, c)));
  }
  // input rows see both prompts and earlier input
  for (std::size_t c = 0; c < 6; ++c) CHECK_FALSE(is_masked(m.at(5, c)));
  CHECK(is_masked(m.at(5, 6)));
  for (std::size_t c = 0; c < 7; ++c) CHECK_FALSE(is_masked(m.at(6, c)));
  // naive concat has no blocks
  Tensor cat = build_mask(layout, AttentionPolicy::naive_concat);
  CHECK_FALSE(is_masked(cat.at(3, 0)));
}

TEST_CASE("single prompt mask equals the causal prefix mask") {
  std::vector<std::size_t> lens{3};
  auto layout = SegmentLayout::with_prompts(lens, 4);
  Tensor a = build_mask(layout, AttentionPolicy::single_prompt);
  Tensor b = build_mask(layout, AttentionPolicy::naive_concat);
  Tensor c = build_mask(SegmentLayout::input_only(7), AttentionPolicy::dense_causal);
  CHECK(a == b);
  CHECK(a == c);
  CHECK_THROWS(build_mask(layout, AttentionPolicy::dense_causal));
}

TEST_CASE("one unmasked key copies its value row") {
  Graph<double> g;
  Rng rng(2);
  auto q = testutil::random_tensor<double>(rng, {1, 4});
  auto k = testutil::random_tensor<double>(rng, {3, 4});
  auto v = testutil::random_tensor<double>(rng, {3, 4});
  Tensor mask = Tensor::from_rows({{kMaskedOut, 0.0f, kMaskedOut}});
  Var out = attention<double>(g, g.constant(q), g.constant(k), g.constant(v), mask, 2, nullptr, nullptr);
  for (std::size_t c = 0; c < 4; ++c) CHECK(g.value(out).at(0, c) == doctest::Approx(v.at(1, c)));
}

TEST_CASE("forward is deterministic, causal and row-stochastic") {
  auto w = Weights<float>::init(small_config(2, 4));
  Rng rng(9);
  auto toks = testutil::random_tokens(rng, 10, w.config.vocab_size);
  ForwardOptions<float> opt;
  opt.capture = true;
  auto a = forward_tokens(w, toks, opt);
  auto b = forward_tokens(w, toks, opt);
  CHECK(a.logits == b.logits);
  CHECK(a.logits.rows() == 10);
  CHECK(a.logits.cols() == w.config.vocab_size);

  for (const auto& layer : a.trace.layers) {
    const auto& att = layer.attention;
    for (std::size_t h = 0; h < att.shape()[0]; ++h) {
      for (std::size_t r = 0; r < att.shape()[1]; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < att.shape()[2]; ++c) {
          const float p = att[(h * att.shape()[1] + r) * att.shape()[2] + c];
          if (c > r) CHECK(p == 0.0f);
          s += p;
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }

  for (std::size_t j = 1; j < toks.size(); ++j) {
    auto changed = toks;
    for (std::size_t i = j; i < changed.size(); ++i) changed[i] = (changed[i] + 5) % 24;
    auto c = forward_tokens(w, changed);
    for (std::size_t r = 0; r < j; ++r) {
      for (std::size_t col = 0; col < c.logits.cols(); ++col) {
        if (c.logits.at(r, col) != a.logits.at(r, col)) {
          FAIL("logits before position " << j << " changed");
        }
      }
    }
  }
}

TEST_CASE("incremental decode matches full forward") {
  auto w = Weights<float>::init(small_config(3, 6));
  Rng rng(1);
  auto toks = testutil::random_tokens(rng, 12, w.config.vocab_size);
  auto full = forward_tokens(w, toks);
  KVCache<float> cache(w.config, 16);
  ForwardOptions<float> opt;
  opt.cache = &cache;
  // prefill four tokens, then one at a time
  auto pre = forward_tokens(w, std::span<const int>(toks).subspan(0, 4), opt);
  double worst = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < pre.logits.cols(); ++c) {
      worst = std::max(worst, std::abs(static_cast<double>(pre.logits.at(r, c)) - full.logits.at(r, c)));
    }
  }
  for (std::size_t i = 4; i < toks.size(); ++i) {
    auto step = forward_tokens(w, std::span<const int>(toks).subspan(i, 1), opt);
    CHECK(step.logits.rows() == 1);
    for (std::size_t c = 0; c < step.logits.cols(); ++c) {
      worst = std::max(worst, std::abs(static_cast<double>(step.logits.at(0, c)) - full.logits.at(i, c)));
    }
  }
  CHECK(cache.watermark() == toks.size());
  CHECK(worst < 1e-5);
}

TEST_CASE("cache rejects writes past capacity") {
  auto w = Weights<float>::init(small_config(1));
  KVCache<float> cache(w.config, 3);
  ForwardOptions<float> opt;
  opt.cache = &cache;
  std::vector<int> toks{1, 2, 3, 4};
  CHECK_THROWS(forward_tokens(w, toks, opt));
}

TEST_CASE("end-to-end gradient of a 2-layer model matches finite differences") {
  auto cfg = small_config(2, 3);
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.vocab_size = 10;
  auto w = Weights<float>::init(cfg).cast<double>();
  w.set_all_trainable(true);
  std::vector<int> toks{1, 4, 2, 9, 0, 3};
  std::vector<int> targets{4, 2, 9, 0, 3, 7};
  std::vector<Tensor64*> params;
  w.for_each([&](const std::string&, Tensor64& t) { params.push_back(&t); });
  auto loss = [&](Graph<double>& g) {
    Transformer<double> tf(g, w);
    auto out = tf.forward(tf.embed(toks), SegmentLayout::input_only(toks.size()), {});
    return ag::cross_entropy(g, out.logits, targets);
  };
  auto rep = finite_diff_check(loss, params, 1e-4, 24);
  CHECK(rep.entries_checked > 200);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("prompt positions ablation numbers every row") {
  std::vector<std::size_t> lens{2};
  auto layout = SegmentLayout::with_prompts(lens, 3);
  auto none = layout_positions(layout, false);
  CHECK(none == std::vector<int>{ag::kNoPosition, ag::kNoPosition, 0, 1, 2});
  auto all = layout_positions(layout, true, 5);
  CHECK(all == std::vector<int>{5, 6, 7, 8, 9});
}

TEST_CASE("weights container round trip and digest") {
  auto w = Weights<float>::init(small_config(2, 8));
  const auto path = (std::filesystem::temp_directory_path() / "dynprompt_weights_test.bin").string();
  save_weights(path, w);
  auto back = load_weights(path);
  std::filesystem::remove(path);
  CHECK(back.config == w.config);
  CHECK(weights_digest(back) == weights_digest(w));
  auto other = w;
  other.layers[1].wv[3] += 1e-3f;
  CHECK(weights_digest(other) != weights_digest(w));
  CHECK_THROWS(read_container("/nonexistent/dir/file.bin"));
}

TEST_CASE("config json round trip") {
  auto c = small_config(3, 77);
  c.prompt_positions = true;
  CHECK(config_from_json(config_json(c)) == c);
}
