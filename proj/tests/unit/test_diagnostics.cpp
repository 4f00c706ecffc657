#include <numeric>

#include "doctest.h"
#include "dynprompt/compression.hpp"
#include "dynprompt/diagnostics.hpp"
#include "helpers.hpp"

using namespace dynprompt;

namespace {

// Returns fixed log-probabilities at every row: the next-token row is always `probs`.
class TableScorer : public Scorer {
 public:
  explicit TableScorer(std::vector<double> probs) : probs_(std::move(probs)) {}
  Tensor logits(std::span<const int> tokens) override {
    Tensor out({tokens.size(), probs_.size()});
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      for (std::size_t c = 0; c < probs_.size(); ++c) out.at(r, c) = static_cast<float>(std::log(probs_[c]));
    }
    return out;
  }
  std::string name() const override { return "table"; }

 private:
  std::vector<double> probs_;
};

// Puts all mass on the token that follows in a fixed cycle.
class CycleScorer : public Scorer {
 public:
  Tensor logits(std::span<const int> tokens) override {
    Tensor out({tokens.size(), 4}, -1e4f);
    for (std::size_t r = 0; r < tokens.size(); ++r) out.at(r, static_cast<std::size_t>((tokens[r] + 1) % 4)) = 0.0f;
    return out;
  }
  std::string name() const override { return "cycle"; }
};

}  // namespace

TEST_CASE("cosine cases") {
  std::vector<double> x{0.3, -2, 5};
  CHECK(cosine<double>(x, x) == doctest::Approx(1.0));
  std::vector<double> a{1, 0}, b{0, 1}, c{1, 1};
  CHECK(cosine<double>(a, b) == 0.0);
  CHECK(cosine<double>(c, a) == doctest::Approx(std::sqrt(2.0) / 2));
  std::vector<double> z{0, 0};
  CHECK(cosine<double>(z, z) == 0.0);
  std::vector<double> three{1, 2, 3};
  CHECK_THROWS_AS(cosine<double>(a, three), DiagnosticsError);
}

TEST_CASE("self similarity is one and quantization moves activations") {
  auto w = Weights<float>::init(testutil::small_config(3, 5));
  auto base = make_base_scorer(w);
  std::vector<int> toks{1, 5, 7, 2, 9, 3};
  auto t = base->trace(toks);
  auto self = layer_similarity(t, t);
  REQUIRE(self.attention.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(std::abs(self.attention[l] - 1.0) < 1e-6);
    CHECK(std::abs(self.activation[l] - 1.0) < 1e-6);
  }
  auto q = compress_model(w, QuantSpec{2});
  auto qs = make_base_scorer(q.weights);
  auto sim = layer_similarity(t, qs->trace(toks));
  CHECK(*std::min_element(sim.activation.begin(), sim.activation.end()) < 1.0);
  for (double v : sim.activation) CHECK((v >= -1.0 && v <= 1.0));
  CHECK(sim.csv().find("layer,attn_cos,act_cos") != std::string::npos);
}

TEST_CASE("similarity aligns prompted traces on input positions") {
  auto w = Weights<float>::init(testutil::small_config(2, 5));
  Rng rng(3);
  SoftPrompt p{"p", testutil::random_tensor(rng, {4, w.config.d_model}), "", 0};
  std::vector<int> toks{1, 5, 7};
  auto base = make_base_scorer(w)->trace(toks);
  auto prompted = make_prompt_scorer(w, p)->trace(toks);
  auto sim = layer_similarity(base, prompted);
  CHECK(sim.attention.size() == 2);
  for (double v : sim.attention) CHECK((v >= -1.0 && v <= 1.0));
}

TEST_CASE("perplexity cases") {
  TableScorer uniform(std::vector<double>(6, 1.0 / 6));
  std::vector<std::vector<int>> corpus{{0, 1, 2}, {3, 4}};
  CHECK(perplexity(uniform, corpus) == doctest::Approx(6.0));
  CycleScorer perfect;
  CHECK(perplexity(perfect, {{0, 1, 2, 3, 0}}) == doctest::Approx(1.0));

  TableScorer skew({0.5, 0.25, 0.25});
  const double nll1 = -std::log(0.25), nll2 = -std::log(0.5);
  CHECK(perplexity(skew, {{0, 1, 0}}) == doctest::Approx(std::exp((nll1 + nll2) / 2)));

  auto w = Weights<float>::init(testutil::small_config(2, 5));
  auto base = make_base_scorer(w);
  std::vector<std::vector<int>> docs{{1, 2, 3, 4}, {5, 6, 7}, {8, 9, 10, 11, 12}};
  const double a = perplexity(*base, docs);
  std::reverse(docs.begin(), docs.end());
  CHECK(perplexity(*base, docs) == doctest::Approx(a).epsilon(1e-12));
  CHECK(a >= 1.0);
}

TEST_CASE("multiple choice scoring") {
  CycleScorer s;
  McItem single{{0, 1}, {{3}}, 0, "a"};
  CHECK(mc_accuracy(s, {single}).accuracy == 1.0);
  McItem ties{{0, 1}, {{3}, {3}}, 1, "a"};
  CHECK(mc_accuracy(s, {ties}).predictions[0] == 0);

  auto w = Weights<float>::init(testutil::small_config(2, 7));
  auto base = make_base_scorer(w);
  McItem item{{1, 2, 3}, {{4, 5}, {6, 7}, {8, 9}, {10, 11}}, 2, "b"};
  // brute force: one full forward per option
  std::vector<double> brute;
  for (const auto& o : item.options) {
    std::vector<int> seq = item.context;
    seq.insert(seq.end(), o.begin(), o.end());
    auto lg = forward_tokens(w, seq).logits;
    double tot = 0;
    for (std::size_t k = 0; k < o.size(); ++k) tot += kernels::log_softmax_row(lg, item.context.size() + k - 1)[o[k]];
    brute.push_back(tot);
  }
  auto scores = option_scores(*base, item);
  for (std::size_t i = 0; i < 4; ++i) CHECK(scores[i] == doctest::Approx(brute[i]));
  const auto best = std::max_element(brute.begin(), brute.end()) - brute.begin();
  auto r = mc_accuracy(*base, {item});
  CHECK(r.predictions[0] == static_cast<std::size_t>(best));

  McItem rotated = item;
  std::rotate(rotated.options.begin(), rotated.options.begin() + 1, rotated.options.end());
  auto r2 = mc_accuracy(*base, {rotated});
  CHECK(r2.predictions[0] == (static_cast<std::size_t>(best) + 3) % 4);
  CHECK(r.csv().find("all,") != std::string::npos);
  CHECK_THROWS_AS(option_scores(*base, McItem{{}, {{1}}, 0, ""}), DiagnosticsError);
}
