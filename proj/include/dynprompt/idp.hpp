#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "dynprompt/adapters.hpp"
#include "dynprompt/model.hpp"

namespace dynprompt {

class IdpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SelectionScope { per_layer, first_layer_global, forced };

struct SelectionConfig {
  SelectionScope scope = SelectionScope::per_layer;
  std::size_t forced_index = 0;
  bool renormalize = true;
  bool freeze_after_prefill = true;

  static SelectionConfig forced(std::size_t i) {
    SelectionConfig c;
    c.scope = SelectionScope::forced;
    c.forced_index = i;
    return c;
  }
  void validate(std::size_t m) const;
};

const char* scope_name(SelectionScope s);
SelectionScope parse_scope(const std::string& name);

// Per-prompt K/V from isolated forwards over each prompt alone.
template <typename T>
struct PromptKVStore {
  std::vector<KVCache<T>> prompts;
  std::vector<std::size_t> lengths;

  std::size_t total_tokens() const;
  // A cache holding every prompt in bank order, with room for extra rows.
  KVCache<T> assemble(const ModelConfig& cfg, std::size_t extra_capacity) const;
};

template <typename T>
PromptKVStore<T> build_prompt_cache(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts);
PromptKVStore<float> build_prompt_cache(const Weights<float>& w, const PromptBank& bank);

// score_i = mean over heads, input query rows and prompt-i key columns.
// head_probs[h] covers layout rows [row_begin, row_begin + rows) and all layout columns.
template <typename T>
std::vector<double> score_prompts(std::span<const BasicTensor<T>> head_probs, const SegmentLayout& layout,
                                  std::size_t row_begin = 0);
// Rank-3 [heads x rows x keys] or rank-2 [rows x keys] attention.
template <typename T>
std::vector<double> score_prompts(const BasicTensor<T>& attention, const SegmentLayout& layout,
                                  std::size_t row_begin = 0);

// Argmax with ties to the lowest index; forced scope ignores the scores.
std::size_t select(std::span<const double> scores, const SelectionConfig& cfg);

// Zeroes input-row weights on unselected prompt columns, optionally rescaling
// each input row to sum to 1. Prompt rows are left alone.
template <typename T>
void discard_in_place(BasicTensor<T>& weights, const SegmentLayout& layout, std::size_t selected, bool renormalize,
                      std::size_t row_begin = 0);
// Same result computed from the pre-softmax scores: renormalized rows are a
// fresh softmax over the kept, unmasked columns.
template <typename T>
void discard_from_scores(BasicTensor<T>& weights, const BasicTensor<T>& scores, const Tensor& mask,
                         const SegmentLayout& layout, std::size_t selected, bool renormalize, std::size_t row_begin = 0);
template <typename T>
BasicTensor<T> discard_and_renormalize(const BasicTensor<T>& weights, const SegmentLayout& layout,
                                       std::size_t selected, bool renormalize = true, std::size_t row_begin = 0);

// Score, select and discard inside each attention layer.
template <typename T>
class PromptRouter : public AttentionRouter<T> {
 public:
  explicit PromptRouter(SelectionConfig cfg) : cfg_(cfg) {}
  void route(std::size_t layer, const SegmentLayout& layout, std::size_t row_begin,
             std::vector<BasicTensor<T>>& head_probs, const std::vector<BasicTensor<T>>& head_scores,
             const Tensor& mask, std::vector<SelectionRecord>& records) override;
  // Forget frozen selections before a new sequence.
  void reset() { chosen_.clear(); }
  const std::vector<std::optional<std::size_t>>& chosen() const { return chosen_; }

 private:
  SelectionConfig cfg_;
  std::vector<std::optional<std::size_t>> chosen_;
};

template <typename T>
struct IdpOutput {
  BasicTensor<T> logits;  // [input rows x vocab]
  ForwardTrace<T> trace;
};

// Full pipeline over an input given as embeddings. With a store, prompt K/V
// come from the cache and only input rows are computed.
template <typename T>
IdpOutput<T> idp_forward(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts,
                         const BasicTensor<T>& input, const PromptKVStore<T>* store, const SelectionConfig& cfg,
                         bool capture = false);
IdpOutput<float> idp_forward(const Weights<float>& w, const PromptBank& bank, std::span<const int> tokens,
                             const PromptKVStore<float>* store, const SelectionConfig& cfg, bool capture = false);

// All prompts prepended with full mutual attention and no discard.
template <typename T>
ForwardResult<T> concat_forward(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts,
                                const BasicTensor<T>& input, bool capture = false);
ForwardResult<float> concat_forward(const Weights<float>& w, const PromptBank& bank, std::span<const int> tokens,
                                    bool capture = false);

template <typename T>
ForwardResult<T> single_prompt_forward(const Weights<T>& w, const BasicTensor<T>& prompt, const BasicTensor<T>& input,
                                       bool capture = false);
ForwardResult<float> single_prompt_forward(const Weights<float>& w, const SoftPrompt& prompt,
                                           std::span<const int> tokens, bool capture = false);

// Prefill followed by greedy one-token decode steps over the cached IDP layout.
// Selections made during prefill are reused by decode steps when frozen.
class IdpSession {
 public:
  IdpSession(const Weights<float>& w, const PromptBank& bank, const PromptKVStore<float>& store,
             SelectionConfig cfg);

  Tensor prefill(std::span<const int> tokens);
  Tensor step(int token);
  const std::vector<SelectionRecord>& selections() const { return selections_; }

 private:
  Tensor run(std::span<const int> tokens);

  const Weights<float>& w_;
  const PromptBank& bank_;
  PromptRouter<float> router_;
  KVCache<float> cache_;
  SegmentLayout layout_;
  std::size_t input_len_ = 0;
  std::vector<SelectionRecord> selections_;
};

}  // namespace dynprompt
