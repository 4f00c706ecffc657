#include <filesystem>

#include "doctest.h"
#include "dynprompt/adapters.hpp"
#include "dynprompt/idp.hpp"
#include "helpers.hpp"

using namespace dynprompt;
using testutil::max_abs_diff;
using testutil::small_config;

namespace {

std::string tmp_path(const char* name) { return (std::filesystem::temp_directory_path() / name).string(); }

Weights<double> tiny_double(std::uint64_t seed) {
  auto cfg = small_config(2, seed);
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.vocab_size = 10;
  return Weights<float>::init(cfg).cast<double>();
}

}  // namespace

TEST_CASE("prepend_prompts layout and contents") {
  Rng rng(1);
  SoftPrompt p{"a", testutil::random_tensor(rng, {2, 4}), "", 0};
  Tensor input = testutil::random_tensor(rng, {3, 4});
  auto out = prepend_prompts(p, input);
  CHECK(out.layout.total() == 5);
  CHECK(out.layout.prompt_count() == 1);
  CHECK(out.layout.prompt_length(0) == 2);
  CHECK(out.layout.input_length() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.embeddings.at(2 + r, c) == input.at(r, c));
  }
  CHECK_THROWS_AS(prepend_prompts(p, Tensor({0, 4})), AdapterError);

  PromptBank bank({{"x", Tensor({26, 4}), "", 0}, {"y", Tensor({100, 4}), "", 0}});
  auto two = prepend_prompts(bank, Tensor({7, 4}));
  CHECK(two.layout.total() == 133);
  CHECK_THROWS_AS(PromptBank({{"x", Tensor({2, 4}), "", 0}, {"x", Tensor({2, 4}), "", 0}}), AdapterError);
}

TEST_CASE("lora delta hand example") {
  LoraAdapter<float> a;
  a.rank = 1;
  a.layers.resize(1);
  for (auto& pr : a.layers[0]) pr = {Tensor::from_rows({{1, 0}}), Tensor::from_rows({{1}, {0}})};
  LoraHook<float> hook(a, false);
  Graph<float> g;
  hook.bind(g);
  auto d = hook.projection_delta(g, 0, Projection::q, g.constant(Tensor::from_rows({{3, 4}})));
  REQUIRE(d.has_value());
  CHECK(g.value(*d).at(0, 0) == 3.0f);
  CHECK(g.value(*d).at(0, 1) == 0.0f);
}

TEST_CASE("lora with zero B leaves logits bitwise unchanged") {
  auto w = Weights<float>::init(small_config(2, 5));
  auto lora = LoraAdapter<float>::init(w.config, 2, 3);
  auto hook = apply_lora(w, lora);
  Rng rng(4);
  auto toks = testutil::random_tokens(rng, 9, w.config.vocab_size);
  ForwardOptions<float> opt;
  opt.hook = &hook;
  CHECK(forward_tokens(w, toks, opt).logits == forward_tokens(w, toks).logits);
  CHECK_THROWS_AS(LoraAdapter<float>::init(w.config, 17, 3), AdapterError);
}

TEST_CASE("full-rank lora equals merged weights") {
  auto w = Weights<float>::init(small_config(2, 6)).cast<double>();
  const std::size_t r = w.config.d_model;
  auto lora = LoraAdapter<double>::init(w.config, r, 8, 0.2);
  Rng rng(12);
  lora.for_each([&](const std::string&, Tensor64& t) {
    for (auto& v : t.values()) v = rng.normal() * 0.2;
  });
  auto merged = w;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    for (Projection p : kAllProjections) {
      const auto& pr = lora.pair(l, p);
      Tensor64& m = merged.layers[l].projection(p);
      // x W + (x A^T) B^T = x (W + A^T B^T)
      for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
          for (std::size_t k = 0; k < r; ++k) m.at(i, j) += pr.a.at(k, i) * pr.b.at(j, k);
        }
      }
    }
  }
  auto hook = apply_lora(w, lora);
  std::vector<int> toks{3, 1, 4, 1, 5, 9, 2, 6};
  ForwardOptions<double> opt;
  opt.hook = &hook;
  auto adapted = forward_tokens(w, toks, opt);
  auto oracle = forward_tokens(merged, toks);
  CHECK(max_abs_diff(adapted.logits, oracle.logits) < 1e-6);
}

TEST_CASE("prefix of length zero is the base model") {
  auto w = Weights<float>::init(small_config(2, 2));
  auto empty = PrefixSet<float>::init(w.config, 0, 1);
  auto hook = apply_prefix(w, empty);
  std::vector<int> toks{1, 2, 3, 4};
  ForwardOptions<float> opt;
  opt.hook = &hook;
  CHECK(forward_tokens(w, toks, opt).logits == forward_tokens(w, toks).logits);
}

TEST_CASE("prefix adds t keys per layer and rows stay stochastic") {
  auto w = Weights<float>::init(small_config(2, 2));
  auto prefix = PrefixSet<float>::init(w.config, 5, 1);
  auto hook = apply_prefix(w, prefix);
  std::vector<int> toks{1, 2, 3, 4};
  ForwardOptions<float> opt;
  opt.hook = &hook;
  opt.capture = true;
  auto out = forward_tokens(w, toks, opt);
  CHECK(out.trace.extra_keys == 5);
  for (const auto& layer : out.trace.layers) {
    CHECK(layer.attention_mean.cols() == 9);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (float v : layer.attention_mean.row(r)) s += v;
      CHECK(std::abs(s - 1.0) < 1e-6);
      for (std::size_t c = 5 + r + 1; c < 9; ++c) CHECK(layer.attention_mean.at(r, c) == 0.0f);
    }
  }
  CHECK(prefix.parameter_count() == 2 * 5 * 16);
}

TEST_CASE("count_params matches the closed forms") {
  auto prompt = [](std::size_t t) { return count_params(AdapterKind::prompt, {t, 4096, 0, 0, 0, 0}); };
  auto prefix = [](std::size_t t) { return count_params(AdapterKind::prefix, {t, 4096, 32, 0, 0, 0}); };
  CHECK(prompt(26).count == 106496);
  CHECK(prompt(26).millions == "0.1M");
  CHECK(prompt(50).millions == "0.2M");
  CHECK(prompt(100).millions == "0.4M");
  CHECK(prefix(26).count == 3407872);
  CHECK(prefix(50).count == 6553600);
  CHECK(prefix(50).millions == "6.5M");
  CHECK(prefix(100).count == 13107200);
  CHECK(prefix(100).millions == "13.1M");
  auto idp = count_params(AdapterKind::idp, {150, 4096, 0, 0, 0, 0});
  CHECK(idp.count == 614400);
  CHECK(idp.millions == "0.6M");
  // bank cost is the sum of its prompts
  CHECK(count_params(AdapterKind::idp, {126, 4096, 0, 0, 0, 0}).count == prompt(26).count + prompt(100).count);

  auto lora = count_params(AdapterKind::lora, {0, 0, 32, 2, 4096, 11008});
  CHECK(lora.count == 32ull * (8 * 4096 * 2 + 4 * 11008 * 2));
  CHECK(lora.shape_exact == 32ull * (8 * 2 * 4096 + 2 * 2 * (4096 + 11008)));
  CHECK_THROWS_AS(parse_adapter_kind("adapterx"), AdapterError);
  CHECK(format_millions(149999) == "0.1M");
}

TEST_CASE("lora shape-exact count matches the constructed adapter") {
  auto cfg = small_config(3, 1);
  auto lora = LoraAdapter<float>::init(cfg, 2, 1);
  auto rep = count_params(AdapterKind::lora, {0, 0, cfg.n_layers, 2, cfg.d_model, cfg.d_ff});
  CHECK(lora.parameter_count() == rep.shape_exact);
}

TEST_CASE("adapter checkpoints round trip") {
  auto cfg = small_config(2, 1);
  Rng rng(5);
  SoftPrompt p{"domain_a", testutil::random_tensor(rng, {3, cfg.d_model}), "a", 40};
  save_prompt(tmp_path("dp_prompt.bin"), p);
  auto p2 = load_prompt(tmp_path("dp_prompt.bin"));
  CHECK(p2.id == p.id);
  CHECK(p2.steps == 40);
  CHECK(p2.embedding == p.embedding);

  auto lora = LoraAdapter<float>::init(cfg, 2, 9);
  save_lora(tmp_path("dp_lora.bin"), lora);
  auto l2 = load_lora(tmp_path("dp_lora.bin"));
  CHECK(l2.rank == 2);
  CHECK(l2.pair(1, Projection::down).a == lora.pair(1, Projection::down).a);

  auto prefix = PrefixSet<float>::init(cfg, 4, 2);
  save_prefix(tmp_path("dp_prefix.bin"), prefix);
  auto x2 = load_prefix(tmp_path("dp_prefix.bin"));
  CHECK(x2.layers.size() == 2);
  CHECK(x2.layers[1] == prefix.layers[1]);
  CHECK_THROWS(load_lora(tmp_path("dp_prompt.bin")));
}

TEST_CASE("adapter gradients match finite differences") {
  auto w = tiny_double(3);
  std::vector<int> toks{1, 4, 2, 9, 0};
  std::vector<int> targets{4, 2, 9, 0, 3};
  Rng rng(17);

  SUBCASE("prompt") {
    Tensor64 prompt = testutil::random_tensor<double>(rng, {3, 8});
    std::vector<Tensor64*> params{&prompt};
    auto rep = finite_diff_check(
        [&](Graph<double>& g) {
          Transformer<double> tf(g, w);
          SegmentLayout layout;
          std::array<Var, 1> ps{g.parameter(prompt, true)};
          Var x = prepend_prompts<double>(g, ps, tf.embed(toks), layout);
          ForwardOptions<double> opt;
          opt.policy = AttentionPolicy::single_prompt;
          return ag::cross_entropy(g, tf.forward(x, layout, opt).logits, targets);
        },
        params, 1e-4);
    CHECK(rep.entries_checked == 24);
    CHECK(rep.max_rel_error < 1e-4);
  }
  SUBCASE("prefix") {
    auto prefix = PrefixSet<double>::init(w.config, 3, 4);
    std::vector<Tensor64*> params;
    for (auto& l : prefix.layers) params.push_back(&l);
    auto rep = finite_diff_check(
        [&](Graph<double>& g) {
          auto hook = apply_prefix(w, prefix, true);
          hook.bind(g);
          Transformer<double> tf(g, w);
          ForwardOptions<double> opt;
          opt.hook = &hook;
          return ag::cross_entropy(g, tf.forward(tf.embed(toks), SegmentLayout::input_only(5), opt).logits, targets);
        },
        params, 1e-4);
    CHECK(rep.entries_checked == 48);
    CHECK(rep.max_rel_error < 1e-4);
  }
  SUBCASE("lora") {
    auto lora = LoraAdapter<double>::init(w.config, 2, 4, 0.3);
    std::vector<Tensor64*> params;
    lora.for_each([&](const std::string&, Tensor64& t) {
      for (auto& v : t.values()) v = rng.normal() * 0.3;
      params.push_back(&t);
    });
    auto rep = finite_diff_check(
        [&](Graph<double>& g) {
          auto hook = apply_lora(w, lora, true);
          hook.bind(g);
          Transformer<double> tf(g, w);
          ForwardOptions<double> opt;
          opt.hook = &hook;
          return ag::cross_entropy(g, tf.forward(tf.embed(toks), SegmentLayout::input_only(5), opt).logits, targets);
        },
        params, 1e-4);
    CHECK(rep.entries_checked > 0);
    CHECK(rep.max_rel_error < 1e-4);
  }
}
