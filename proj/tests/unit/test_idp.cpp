#include "doctest.h"
#include "dynprompt/idp.hpp"
#include "helpers.hpp"

using namespace dynprompt;
using testutil::max_abs_diff;
using testutil::small_config;

namespace {

PromptBank make_bank(Rng& rng, std::size_t d, std::vector<std::size_t> lengths) {
  PromptBank bank;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    bank.add({"p" + std::to_string(i), testutil::random_tensor(rng, {lengths[i], d}, 0.8), "", 0});
  }
  return bank;
}

}  // namespace

TEST_CASE("score_prompts hand example") {
  std::vector<std::size_t> lens{2, 4};
  auto layout = SegmentLayout::with_prompts(lens, 2);
  Tensor att({8, 8});
  for (std::size_t r = 6; r < 8; ++r) {
    att.at(r, 0) = att.at(r, 1) = 0.15f;
    for (std::size_t c = 2; c < 6; ++c) att.at(r, c) = 0.05f;
    att.at(r, 6) = 0.5f;
  }
  auto scores = score_prompts(att, layout);
  REQUIRE(scores.size() == 2);
  CHECK(scores[0] == doctest::Approx(0.15));
  CHECK(scores[1] == doctest::Approx(0.05));
  CHECK(select(scores, {}) == 0);
}

TEST_CASE("select rules") {
  std::vector<double> s{0.1, 0.4, 0.2};
  CHECK(select(s, {}) == 1);
  std::vector<double> eq{0.3, 0.3, 0.3};
  CHECK(select(eq, {}) == 0);
  CHECK(select(s, SelectionConfig::forced(2)) == 2);
  std::vector<double> one{0.7};
  CHECK(select(one, {}) == 0);
  CHECK_THROWS_AS(SelectionConfig::forced(3).validate(3), IdpError);
  CHECK(parse_scope("global") == SelectionScope::first_layer_global);
}

TEST_CASE("discard and renormalize hand example") {
  std::vector<std::size_t> lens{1, 1};
  auto layout = SegmentLayout::with_prompts(lens, 1);
  Tensor w({3, 3});
  w.at(0, 0) = 1.0f;
  w.at(1, 1) = 1.0f;
  w.at(2, 0) = 0.2f;
  w.at(2, 1) = 0.3f;
  w.at(2, 2) = 0.5f;
  auto on = discard_and_renormalize(w, layout, 1);
  CHECK(on.at(2, 0) == 0.0f);
  CHECK(on.at(2, 1) == doctest::Approx(0.375));
  CHECK(on.at(2, 2) == doctest::Approx(0.625));
  CHECK(on.at(0, 0) == 1.0f);
  auto off = discard_and_renormalize(w, layout, 1, false);
  CHECK(off.at(2, 0) == 0.0f);
  CHECK(off.at(2, 1) == doctest::Approx(0.3));
  CHECK(off.at(2, 2) == doctest::Approx(0.5));

  std::vector<std::size_t> single{2};
  auto l1 = SegmentLayout::with_prompts(single, 1);
  Tensor w1 = Tensor::from_rows({{1, 0, 0}, {0.5f, 0.5f, 0}, {0.2f, 0.3f, 0.5f}});
  CHECK(discard_and_renormalize(w1, l1, 0) == w1);
}

TEST_CASE("joint prompt K/V equals isolated K/V") {
  auto w = Weights<float>::init(small_config(3, 2));
  Rng rng(8);
  for (std::vector<std::size_t> lens : {std::vector<std::size_t>{2}, {26, 2}, {2, 26, 100, 2}}) {
    auto bank = make_bank(rng, w.config.d_model, lens);
    auto store = build_prompt_cache(w, bank);
    auto joint_in = prepend_prompts(bank, testutil::random_tensor(rng, {3, w.config.d_model}));
    KVCache<float> joint(w.config, joint_in.layout.total());
    ForwardOptions<float> opt;
    opt.policy = AttentionPolicy::idp;
    opt.cache = &joint;
    forward(w, joint_in.embeddings, joint_in.layout, opt);
    for (std::size_t i = 0; i < lens.size(); ++i) {
      for (std::size_t l = 0; l < w.config.n_layers; ++l) {
        const std::size_t off = joint_in.layout.prompt_offset(i);
        CHECK(testutil::max_rel_diff(joint.keys(l, off, lens[i]), store.prompts[i].keys(l)) <= 1e-6);
        CHECK(testutil::max_rel_diff(joint.values(l, off, lens[i]), store.prompts[i].values(l)) <= 1e-6);
      }
    }
  }
}

TEST_CASE("prompt isolation is exact in every layer and head") {
  auto w = Weights<float>::init(small_config(2, 3));
  Rng rng(4);
  auto bank = make_bank(rng, w.config.d_model, {3, 5});
  std::vector<int> toks{1, 2, 3};
  auto out = idp_forward(w, bank, toks, nullptr, {}, true);
  const auto& layout = out.trace.layout;
  for (const auto& layer : out.trace.layers) {
    const auto& a = layer.attention;
    const std::size_t rows = a.shape()[1], keys = a.shape()[2];
    for (std::size_t h = 0; h < a.shape()[0]; ++h) {
      for (std::size_t r = 0; r < layout.prompt_tokens(); ++r) {
        for (std::size_t c = 0; c < layout.prompt_tokens(); ++c) {
          if (*layout.prompt_of(r) != *layout.prompt_of(c)) CHECK(a[(h * rows + r) * keys + c] == 0.0f);
        }
      }
    }
  }
}

TEST_CASE("forced selection equals single-prompt forward") {
  auto w = Weights<float>::init(small_config(3, 5));
  Rng rng(6);
  auto bank = make_bank(rng, w.config.d_model, {7, 2, 12});
  auto store = build_prompt_cache(w, bank);
  auto toks = testutil::random_tokens(rng, 6, w.config.vocab_size);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    auto oracle = single_prompt_forward(w, bank.at(i), toks);
    auto cached = idp_forward(w, bank, toks, &store, SelectionConfig::forced(i));
    auto joint = idp_forward(w, bank, toks, nullptr, SelectionConfig::forced(i));
    CHECK(max_abs_diff(cached.logits, oracle.logits) <= 1e-5);
    CHECK(max_abs_diff(joint.logits, oracle.logits) <= 1e-5);
    for (const auto& rec : cached.trace.selections) CHECK(rec.chosen == i);
  }
}

TEST_CASE("a single-prompt bank reduces to the single-prompt forward") {
  auto w = Weights<float>::init(small_config(2, 5));
  Rng rng(1);
  auto bank = make_bank(rng, w.config.d_model, {4});
  auto store = build_prompt_cache(w, bank);
  std::vector<int> toks{5, 6, 7, 8};
  auto oracle = single_prompt_forward(w, bank.at(0), toks);
  CHECK(max_abs_diff(idp_forward(w, bank, toks, &store, {}).logits, oracle.logits) <= 1e-5);
  CHECK(max_abs_diff(concat_forward(w, bank, toks).logits, oracle.logits) <= 1e-5);
}

TEST_CASE("concat differs from idp with two prompts") {
  auto w = Weights<float>::init(small_config(2, 5));
  Rng rng(2);
  auto bank = make_bank(rng, w.config.d_model, {4, 3});
  std::vector<int> toks{5, 6, 7, 8};
  auto cat = concat_forward(w, bank, toks, true);
  auto idp = idp_forward(w, bank, toks, nullptr, {});
  CHECK(cat.trace.layout.total() == 11);
  CHECK(max_abs_diff(cat.logits, idp.logits) > 1e-4);
}

TEST_CASE("selection follows prompt identity under bank permutation") {
  auto w = Weights<float>::init(small_config(3, 9));
  Rng rng(3);
  auto bank = make_bank(rng, w.config.d_model, {4, 6, 3});
  PromptBank perm({bank.at(2), bank.at(0), bank.at(1)});
  const std::vector<std::size_t> to_perm{1, 2, 0};
  auto toks = testutil::random_tokens(rng, 5, w.config.vocab_size);
  auto a = idp_forward(w, bank, toks, nullptr, {});
  auto b = idp_forward(w, perm, toks, nullptr, {});
  REQUIRE(a.trace.selections.size() == b.trace.selections.size());
  for (std::size_t l = 0; l < a.trace.selections.size(); ++l) {
    const auto& ra = a.trace.selections[l];
    const auto& rb = b.trace.selections[l];
    CHECK(to_perm[ra.chosen] == rb.chosen);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ra.scores[i] == doctest::Approx(rb.scores[to_perm[i]]).epsilon(1e-5));
  }
  CHECK(max_abs_diff(a.logits, b.logits) <= 1e-5);
}

TEST_CASE("first-layer-global scope reuses layer 0 selection") {
  auto w = Weights<float>::init(small_config(4, 9));
  Rng rng(5);
  auto bank = make_bank(rng, w.config.d_model, {4, 6});
  SelectionConfig cfg;
  cfg.scope = SelectionScope::first_layer_global;
  auto out = idp_forward(w, bank, std::vector<int>{1, 2, 3, 4}, nullptr, cfg);
  REQUIRE(out.trace.selections.size() == 4);
  for (const auto& r : out.trace.selections) CHECK(r.chosen == out.trace.selections[0].chosen);
}

TEST_CASE("session decode matches full forward under forced selection") {
  auto w = Weights<float>::init(small_config(2, 11));
  Rng rng(7);
  auto bank = make_bank(rng, w.config.d_model, {5, 3});
  auto store = build_prompt_cache(w, bank);
  auto toks = testutil::random_tokens(rng, 8, w.config.vocab_size);
  auto full = idp_forward(w, bank, toks, &store, SelectionConfig::forced(1));
  IdpSession s(w, bank, store, SelectionConfig::forced(1));
  auto pre = s.prefill(std::span<const int>(toks).subspan(0, 3));
  double worst = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < pre.cols(); ++c) worst = std::max(worst, std::abs(double(pre.at(r, c)) - full.logits.at(r, c)));
  }
  for (std::size_t i = 3; i < toks.size(); ++i) {
    auto step = s.step(toks[i]);
    for (std::size_t c = 0; c < step.cols(); ++c) worst = std::max(worst, std::abs(double(step.at(0, c)) - full.logits.at(i, c)));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("decode steps reuse prefill selections") {
  auto w = Weights<float>::init(small_config(2, 11));
  Rng rng(8);
  auto bank = make_bank(rng, w.config.d_model, {5, 3});
  auto store = build_prompt_cache(w, bank);
  IdpSession s(w, bank, store, {});
  s.prefill(std::vector<int>{1, 2, 3});
  const auto after_prefill = s.selections();
  REQUIRE(after_prefill.size() == 2);
  for (int t : {4, 5, 6}) s.step(t);
  const auto& all = s.selections();
  for (std::size_t i = 2; i < all.size(); ++i) CHECK(all[i].chosen == after_prefill[all[i].layer].chosen);
}

TEST_CASE("cached prefill MACs are input-only prefill plus extra-key attention") {
  auto w = Weights<float>::init(small_config(2, 11));
  Rng rng(9);
  auto bank = make_bank(rng, w.config.d_model, {26, 6});
  auto store = build_prompt_cache(w, bank);
  std::vector<int> toks{1, 2, 3, 4, 5};
  std::uint64_t base = 0, cached = 0;
  {
    MacScope m;
    forward_tokens(w, toks);
    base = m.count();
  }
  {
    MacScope m;
    idp_forward(w, bank, toks, &store, {});
    cached = m.count();
  }
  const std::uint64_t extra = 2ull * w.config.n_layers * toks.size() * 32 * w.config.d_model;
  CHECK(cached == base + extra);
}

TEST_CASE("empty banks are rejected") {
  auto w = Weights<float>::init(small_config(1, 1));
  PromptBank empty;
  std::vector<int> toks{1};
  CHECK_THROWS(idp_forward(w, empty, toks, nullptr, {}));
}
