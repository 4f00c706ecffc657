#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprompt/adapters.hpp"
#include "dynprompt/idp.hpp"
#include "dynprompt/model.hpp"

namespace dynprompt {

class DiagnosticsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// dot / (|a| |b|); a zero vector on either side gives 0.
template <typename T>
double cosine(std::span<const T> a, std::span<const T> b);

struct LayerSimilarity {
  std::vector<double> attention;
  std::vector<double> activation;
  std::string csv() const;  // layer,attn_cos,act_cos
};

// Compares input positions only: residual vectors per input token, and
// head-averaged attention rows restricted to input keys and renormalized.
LayerSimilarity layer_similarity(const ForwardTrace<float>& baseline, const ForwardTrace<float>& variant);

// Produces next-token logits for the input rows of a token sequence under some
// model variant (plain, prompted, IDP, adapter...).
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual Tensor logits(std::span<const int> tokens) = 0;
  virtual ForwardTrace<float> trace(std::span<const int> tokens);
  virtual std::string name() const = 0;
};

std::unique_ptr<Scorer> make_base_scorer(const Weights<float>& w);
std::unique_ptr<Scorer> make_prompt_scorer(const Weights<float>& w, const SoftPrompt& p);
std::unique_ptr<Scorer> make_concat_scorer(const Weights<float>& w, const PromptBank& bank);
std::unique_ptr<Scorer> make_lora_scorer(const Weights<float>& w, const LoraAdapter<float>& a);
std::unique_ptr<Scorer> make_prefix_scorer(const Weights<float>& w, const PrefixSet<float>& p);

// Cached IDP; keeps every selection record it produced.
class IdpScorer : public Scorer {
 public:
  IdpScorer(const Weights<float>& w, const PromptBank& bank, SelectionConfig cfg);
  Tensor logits(std::span<const int> tokens) override;
  ForwardTrace<float> trace(std::span<const int> tokens) override;
  std::string name() const override { return "idp"; }
  // One entry per scored sequence.
  const std::vector<std::vector<SelectionRecord>>& records() const { return records_; }

 private:
  const Weights<float>& w_;
  const PromptBank& bank_;
  SelectionConfig cfg_;
  PromptKVStore<float> store_;
  std::vector<std::vector<SelectionRecord>> records_;
};

// exp(mean NLL) over next-token predictions of every document. Documents are
// scored independently; only positions with a target in targets (or every
// position when targets is empty) count.
double perplexity(Scorer& s, const std::vector<std::vector<int>>& corpus,
                  const std::vector<std::vector<int>>& targets = {});

struct McItem {
  std::vector<int> context;
  std::vector<std::vector<int>> options;
  std::size_t answer = 0;
  std::string domain;
};

struct EvalResult {
  double accuracy = 0.0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_domain;  // correct, total
  std::vector<std::size_t> predictions;
  double perplexity = 0.0;  // filled by callers that also measure it

  double domain_accuracy(const std::string& d) const;
  std::string csv() const;  // group,correct,total,accuracy
};

struct McOptions {
  bool length_normalize = false;
};

// Option score = summed log-prob of its tokens after the context; argmax with
// ties to the lowest option index.
EvalResult mc_accuracy(Scorer& s, const std::vector<McItem>& items, const McOptions& opt = {});
std::vector<double> option_scores(Scorer& s, const McItem& item, const McOptions& opt = {});

}  // namespace dynprompt
