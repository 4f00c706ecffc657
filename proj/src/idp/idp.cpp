#include "dynprompt/idp.hpp"

#include <cmath>

namespace dynprompt {

void SelectionConfig::validate(std::size_t m) const {
  if (m == 0) throw IdpError("prompt bank is empty");
  if (scope == SelectionScope::forced && forced_index >= m) {
    throw IdpError("forced prompt index " + std::to_string(forced_index) + " out of range for " + std::to_string(m) +
                   " prompts");
  }
}

const char* scope_name(SelectionScope s) {
  switch (s) {
    case SelectionScope::per_layer: return "per_layer";
    case SelectionScope::first_layer_global: return "first_layer_global";
    case SelectionScope::forced: return "forced";
  }
  return "?";
}

SelectionScope parse_scope(const std::string& name) {
  if (name == "per_layer") return SelectionScope::per_layer;
  if (name == "first_layer_global" || name == "global") return SelectionScope::first_layer_global;
  if (name == "forced") return SelectionScope::forced;
  throw IdpError("unknown selection scope '" + name + "'");
}

template <typename T>
std::size_t PromptKVStore<T>::total_tokens() const {
  std::size_t n = 0;
  for (std::size_t l : lengths) n += l;
  return n;
}

template <typename T>
KVCache<T> PromptKVStore<T>::assemble(const ModelConfig& cfg, std::size_t extra_capacity) const {
  KVCache<T> cache(cfg, total_tokens() + extra_capacity);
  for (const auto& p : prompts) cache.append(p);
  return cache;
}

template <typename T>
PromptKVStore<T> build_prompt_cache(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts) {
  PromptKVStore<T> store;
  std::size_t offset = 0;
  for (const auto* p : prompts) {
    if (p->rank() != 2 || p->cols() != w.config.d_model) throw IdpError("prompt width does not match d_model");
    if (p->rows() > w.config.max_seq_len) throw IdpError("prompt longer than max_seq_len");
    KVCache<T> cache(w.config, p->rows());
    SegmentLayout layout;
    layout.add_prompt(p->rows());
    ForwardOptions<T> opt;
    opt.policy = AttentionPolicy::single_prompt;
    opt.cache = &cache;
    opt.position_offset = offset;
    forward(w, *p, layout, opt);
    store.prompts.push_back(std::move(cache));
    store.lengths.push_back(p->rows());
    offset += p->rows();
  }
  return store;
}

PromptKVStore<float> build_prompt_cache(const Weights<float>& w, const PromptBank& bank) {
  bank.check_width(w.config.d_model);
  std::vector<const Tensor*> ptrs;
  for (const auto& p : bank.prompts()) ptrs.push_back(&p.embedding);
  return build_prompt_cache<float>(w, ptrs);
}

template <typename T>
std::vector<double> score_prompts(std::span<const BasicTensor<T>> head_probs, const SegmentLayout& layout,
                                  std::size_t row_begin) {
  if (!layout.has_input()) throw IdpError("score_prompts: layout has no input segment");
  if (head_probs.empty()) throw IdpError("score_prompts: no attention heads");
  const std::size_t rows = head_probs[0].rows();
  const std::size_t keys = head_probs[0].cols();
  if (keys != layout.total()) throw IdpError("score_prompts: attention does not cover the layout columns");
  const std::size_t in_off = layout.input_offset();
  const std::size_t first = std::max(row_begin, in_off);
  if (first >= row_begin + rows) throw IdpError("score_prompts: no input query rows");
  const std::size_t n_rows = row_begin + rows - first;
  std::vector<double> scores(layout.prompt_count(), 0.0);
  for (std::size_t p = 0; p < layout.prompt_count(); ++p) {
    const std::size_t off = layout.prompt_offset(p);
    const std::size_t n = layout.prompt_length(p);
    double s = 0.0;
    for (const auto& hp : head_probs) {
      for (std::size_t r = first - row_begin; r < rows; ++r) {
        for (std::size_t j = off; j < off + n; ++j) s += static_cast<double>(hp.at(r, j));
      }
    }
    scores[p] = s / (static_cast<double>(head_probs.size()) * static_cast<double>(n_rows) * static_cast<double>(n));
  }
  return scores;
}

template <typename T>
std::vector<double> score_prompts(const BasicTensor<T>& attention, const SegmentLayout& layout,
                                  std::size_t row_begin) {
  if (attention.rank() == 2) return score_prompts<T>(std::span<const BasicTensor<T>>(&attention, 1), layout, row_begin);
  if (attention.rank() != 3) throw IdpError("score_prompts: attention must be rank 2 or 3");
  const std::size_t heads = attention.extent(0), rows = attention.extent(1), keys = attention.extent(2);
  std::vector<BasicTensor<T>> split;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<T> data(attention.data() + h * rows * keys, attention.data() + (h + 1) * rows * keys);
    split.emplace_back(Shape{rows, keys}, std::move(data));
  }
  return score_prompts<T>(std::span<const BasicTensor<T>>(split), layout, row_begin);
}

std::size_t select(std::span<const double> scores, const SelectionConfig& cfg) {
  if (cfg.scope == SelectionScope::forced) return cfg.forced_index;
  if (scores.empty()) throw IdpError("select: no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

template <typename T>
void discard_in_place(BasicTensor<T>& weights, const SegmentLayout& layout, std::size_t selected, bool renormalize,
                      std::size_t row_begin) {
  if (selected >= layout.prompt_count()) throw IdpError("selected prompt index out of range");
  if (!layout.has_input() || layout.prompt_count() == 1) return;
  const std::size_t rows = weights.rows();
  const std::size_t keys = weights.cols();
  const std::size_t in_off = layout.input_offset();
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_begin + r < in_off) continue;
    T* row = weights.data() + r * keys;
    for (std::size_t p = 0; p < layout.prompt_count(); ++p) {
      if (p == selected) continue;
      const std::size_t off = layout.prompt_offset(p);
      for (std::size_t j = off; j < off + layout.prompt_length(p); ++j) row[j] = T{0};
    }
    if (!renormalize) continue;
    double total = 0;
    for (std::size_t j = 0; j < keys; ++j) total += row[j];
    if (total <= 0) throw IdpError("discard left an input row with no attention mass");
    for (std::size_t j = 0; j < keys; ++j) row[j] = static_cast<T>(row[j] / total);
  }
}

template <typename T>
void discard_from_scores(BasicTensor<T>& weights, const BasicTensor<T>& scores, const Tensor& mask,
                         const SegmentLayout& layout, std::size_t selected, bool renormalize, std::size_t row_begin) {
  if (!renormalize) {
    discard_in_place(weights, layout, selected, false, row_begin);
    return;
  }
  if (selected >= layout.prompt_count()) throw IdpError("selected prompt index out of range");
  if (!layout.has_input() || layout.prompt_count() == 1) return;
  if (scores.shape() != weights.shape() || mask.shape() != weights.shape()) {
    throw IdpError("discard: scores and mask must match the weights");
  }
  const std::size_t rows = weights.rows(), keys = weights.cols();
  std::vector<char> drop(keys, 0);
  for (std::size_t p = 0; p < layout.prompt_count(); ++p) {
    if (p == selected) continue;
    const std::size_t off = layout.prompt_offset(p);
    for (std::size_t j = off; j < std::min(keys, off + layout.prompt_length(p)); ++j) drop[j] = 1;
  }
  std::vector<double> e(keys);
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_begin + r < layout.input_offset()) continue;
    const T* s = scores.data() + r * keys;
    const float* m = mask.data() + r * keys;
    T* row = weights.data() + r * keys;
    // mirrors kernels::softmax_rows restricted to the kept columns
    T max_v{};
    bool any = false;
    for (std::size_t j = 0; j < keys; ++j) {
      if (drop[j] || is_masked(m[j])) continue;
      const T v = s[j] + static_cast<T>(m[j]);
      max_v = any ? std::max(max_v, v) : v;
      any = true;
    }
    if (!any) throw IdpError("discard left an input row with no attention mass");
    double total = 0;
    for (std::size_t j = 0; j < keys; ++j) {
      e[j] = 0;
      if (drop[j] || is_masked(m[j])) continue;
      e[j] = std::exp(static_cast<double>(s[j] + static_cast<T>(m[j])) - static_cast<double>(max_v));
      total += e[j];
    }
    for (std::size_t j = 0; j < keys; ++j) row[j] = static_cast<T>(e[j] / total);
  }
}

template <typename T>
BasicTensor<T> discard_and_renormalize(const BasicTensor<T>& weights, const SegmentLayout& layout,
                                       std::size_t selected, bool renormalize, std::size_t row_begin) {
  BasicTensor<T> out = weights;
  discard_in_place(out, layout, selected, renormalize, row_begin);
  return out;
}

template <typename T>
void PromptRouter<T>::route(std::size_t layer, const SegmentLayout& layout, std::size_t row_begin,
                            std::vector<BasicTensor<T>>& head_probs, const std::vector<BasicTensor<T>>& head_scores,
                            const Tensor& mask, std::vector<SelectionRecord>& records) {
  cfg_.validate(layout.prompt_count());
  if (!layout.has_input() || head_probs.empty()) return;
  if (row_begin + head_probs[0].rows() <= layout.input_offset()) return;
  if (chosen_.size() <= layer) chosen_.resize(layer + 1);

  SelectionRecord rec;
  rec.layer = layer;
  rec.scores = score_prompts<T>(std::span<const BasicTensor<T>>(head_probs), layout, row_begin);
  if (cfg_.freeze_after_prefill && chosen_[layer]) {
    rec.chosen = *chosen_[layer];
  } else if (cfg_.scope == SelectionScope::first_layer_global && layer > 0) {
    if (!chosen_[0]) throw IdpError("global selection requested before layer 0 was routed");
    rec.chosen = *chosen_[0];
  } else {
    rec.chosen = select(rec.scores, cfg_);
  }
  chosen_[layer] = rec.chosen;
  if (head_scores.size() == head_probs.size()) {
    for (std::size_t h = 0; h < head_probs.size(); ++h) {
      discard_from_scores(head_probs[h], head_scores[h], mask, layout, rec.chosen, cfg_.renormalize, row_begin);
    }
  } else {
    for (auto& hp : head_probs) discard_in_place(hp, layout, rec.chosen, cfg_.renormalize, row_begin);
  }
  records.push_back(std::move(rec));
}

template <typename T>
IdpOutput<T> idp_forward(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts,
                         const BasicTensor<T>& input, const PromptKVStore<T>* store, const SelectionConfig& cfg,
                         bool capture) {
  cfg.validate(prompts.size());
  PromptRouter<T> router(cfg);
  ForwardOptions<T> opt;
  opt.policy = AttentionPolicy::idp;
  opt.router = &router;
  opt.capture = capture;
  IdpOutput<T> out;
  if (store) {
    if (store->prompts.size() != prompts.size()) throw IdpError("prompt cache does not match the bank");
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      if (store->lengths[i] != prompts[i]->rows()) throw IdpError("prompt cache does not match the bank");
    }
    KVCache<T> cache = store->assemble(w.config, input.rows());
    SegmentLayout layout;
    for (const auto* p : prompts) layout.add_prompt(p->rows());
    layout.set_input(input.rows());
    opt.cache = &cache;
    auto r = forward(w, input, layout, opt);
    out.logits = std::move(r.logits);
    out.trace = std::move(r.trace);
    return out;
  }
  auto pre = prepend_prompts<T>(prompts, input);
  auto r = forward(w, pre.embeddings, pre.layout, opt);
  out.logits = std::move(r.logits);
  out.trace = std::move(r.trace);
  return out;
}

namespace {

std::vector<const Tensor*> bank_ptrs(const PromptBank& bank) {
  std::vector<const Tensor*> ptrs;
  for (const auto& p : bank.prompts()) ptrs.push_back(&p.embedding);
  return ptrs;
}

}  // namespace

IdpOutput<float> idp_forward(const Weights<float>& w, const PromptBank& bank, std::span<const int> tokens,
                             const PromptKVStore<float>* store, const SelectionConfig& cfg, bool capture) {
  bank.check_width(w.config.d_model);
  return idp_forward<float>(w, bank_ptrs(bank), kernels::embed(tokens, w.embedding), store, cfg, capture);
}

template <typename T>
ForwardResult<T> concat_forward(const Weights<T>& w, std::span<const BasicTensor<T>* const> prompts,
                                const BasicTensor<T>& input, bool capture) {
  if (prompts.empty()) throw IdpError("prompt bank is empty");
  auto pre = prepend_prompts<T>(prompts, input);
  ForwardOptions<T> opt;
  opt.policy = AttentionPolicy::naive_concat;
  opt.capture = capture;
  return forward(w, pre.embeddings, pre.layout, opt);
}

ForwardResult<float> concat_forward(const Weights<float>& w, const PromptBank& bank, std::span<const int> tokens,
                                    bool capture) {
  bank.check_width(w.config.d_model);
  return concat_forward<float>(w, bank_ptrs(bank), kernels::embed(tokens, w.embedding), capture);
}

template <typename T>
ForwardResult<T> single_prompt_forward(const Weights<T>& w, const BasicTensor<T>& prompt, const BasicTensor<T>& input,
                                       bool capture) {
  const BasicTensor<T>* ptr = &prompt;
  auto pre = prepend_prompts<T>(std::span<const BasicTensor<T>* const>(&ptr, 1), input);
  ForwardOptions<T> opt;
  opt.policy = AttentionPolicy::single_prompt;
  opt.capture = capture;
  return forward(w, pre.embeddings, pre.layout, opt);
}

ForwardResult<float> single_prompt_forward(const Weights<float>& w, const SoftPrompt& prompt,
                                           std::span<const int> tokens, bool capture) {
  return single_prompt_forward<float>(w, prompt.embedding, kernels::embed(tokens, w.embedding), capture);
}

IdpSession::IdpSession(const Weights<float>& w, const PromptBank& bank, const PromptKVStore<float>& store,
                       SelectionConfig cfg)
    : w_(w), bank_(bank), router_(cfg), cache_(store.assemble(w.config, w.config.max_seq_len - store.total_tokens())) {
  cfg.validate(bank.size());
  for (std::size_t n : bank.lengths()) layout_.add_prompt(n);
}

Tensor IdpSession::run(std::span<const int> tokens) {
  input_len_ += tokens.size();
  layout_.set_input(input_len_);
  ForwardOptions<float> opt;
  opt.policy = AttentionPolicy::idp;
  opt.router = &router_;
  opt.cache = &cache_;
  auto r = forward(w_, kernels::embed(tokens, w_.embedding), layout_, opt);
  selections_.insert(selections_.end(), r.trace.selections.begin(), r.trace.selections.end());
  return std::move(r.logits);
}

Tensor IdpSession::prefill(std::span<const int> tokens) {
  if (input_len_ != 0) throw IdpError("session already prefilled");
  if (tokens.empty()) throw IdpError("empty input");
  return run(tokens);
}

Tensor IdpSession::step(int token) {
  if (input_len_ == 0) throw IdpError("decode step before prefill");
  const int t[1] = {token};
  return run(t);
}

#define DYNPROMPT_INSTANTIATE(T)                                                                                   \
  template struct PromptKVStore<T>;                                                                                \
  template PromptKVStore<T> build_prompt_cache(const Weights<T>&, std::span<const BasicTensor<T>* const>);        \
  template std::vector<double> score_prompts(std::span<const BasicTensor<T>>, const SegmentLayout&, std::size_t); \
  template std::vector<double> score_prompts(const BasicTensor<T>&, const SegmentLayout&, std::size_t);           \
  template void discard_in_place(BasicTensor<T>&, const SegmentLayout&, std::size_t, bool, std::size_t);          \
  template void discard_from_scores(BasicTensor<T>&, const BasicTensor<T>&, const Tensor&, const SegmentLayout&,     \
                                    std::size_t, bool, std::size_t);                                                \
  template BasicTensor<T> discard_and_renormalize(const BasicTensor<T>&, const SegmentLayout&, std::size_t, bool, \
                                                  std::size_t);                                                    \
  template class PromptRouter<T>;                                                                                  \
  template IdpOutput<T> idp_forward(const Weights<T>&, std::span<const BasicTensor<T>* const>,                    \
                                    const BasicTensor<T>&, const PromptKVStore<T>*, const SelectionConfig&, bool); \
  template ForwardResult<T> concat_forward(const Weights<T>&, std::span<const BasicTensor<T>* const>,             \
                                           const BasicTensor<T>&, bool);                                           \
  template ForwardResult<T> single_prompt_forward(const Weights<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                                  bool);

DYNPROMPT_INSTANTIATE(float)
DYNPROMPT_INSTANTIATE(double)
#undef DYNPROMPT_INSTANTIATE

}  // namespace dynprompt
