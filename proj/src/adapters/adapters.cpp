#include <set>

#include "dynprompt/adapters.hpp"
#include "dynprompt/rng.hpp"

namespace dynprompt {

PromptBank::PromptBank(std::vector<SoftPrompt> prompts) {
  for (auto& p : prompts) add(std::move(p));
}

void PromptBank::add(SoftPrompt p) {
  if (p.length() == 0) throw AdapterError("soft prompt '" + p.id + "' has no tokens");
  for (const auto& q : prompts_) {
    if (q.id == p.id) throw AdapterError("duplicate prompt identifier '" + p.id + "'");
  }
  prompts_.push_back(std::move(p));
}

std::vector<std::size_t> PromptBank::lengths() const {
  std::vector<std::size_t> out;
  for (const auto& p : prompts_) out.push_back(p.length());
  return out;
}

std::size_t PromptBank::total_tokens() const {
  std::size_t n = 0;
  for (const auto& p : prompts_) n += p.length();
  return n;
}

void PromptBank::check_width(std::size_t d_model) const {
  if (prompts_.empty()) throw AdapterError("prompt bank is empty");
  for (const auto& p : prompts_) {
    if (p.embedding.cols() != d_model) {
      throw AdapterError("prompt '" + p.id + "' width " + std::to_string(p.embedding.cols()) +
                         " does not match d_model " + std::to_string(d_model));
    }
  }
}

template <typename T>
Prepended<T> prepend_prompts(std::span<const BasicTensor<T>* const> prompts, const BasicTensor<T>& input) {
  if (input.empty() || input.rank() != 2) throw AdapterError("input embeddings must be a non-empty matrix");
  const std::size_t d = input.cols();
  Prepended<T> out;
  std::size_t rows = input.rows();
  for (const auto* p : prompts) {
    if (p->rank() != 2 || p->cols() != d) throw AdapterError("prompt width does not match input width");
    out.layout.add_prompt(p->rows());
    rows += p->rows();
  }
  out.layout.set_input(input.rows());
  out.embeddings = BasicTensor<T>({rows, d});
  T* dst = out.embeddings.data();
  for (const auto* p : prompts) dst = std::copy(p->data(), p->data() + p->numel(), dst);
  std::copy(input.data(), input.data() + input.numel(), dst);
  return out;
}

Prepended<float> prepend_prompts(const PromptBank& bank, const Tensor& input) {
  std::vector<const Tensor*> ptrs;
  for (const auto& p : bank.prompts()) ptrs.push_back(&p.embedding);
  return prepend_prompts<float>(ptrs, input);
}

Prepended<float> prepend_prompts(const SoftPrompt& prompt, const Tensor& input) {
  const Tensor* ptr = &prompt.embedding;
  return prepend_prompts<float>(std::span<const Tensor* const>(&ptr, 1), input);
}

template <typename T>
Var prepend_prompts(Graph<T>& g, std::span<const Var> prompts, Var input, SegmentLayout& layout) {
  const auto& iv = g.value(input);
  if (iv.empty() || iv.rank() != 2) throw AdapterError("input embeddings must be a non-empty matrix");
  layout = SegmentLayout();
  std::vector<Var> parts;
  for (Var p : prompts) {
    if (g.value(p).cols() != iv.cols()) throw AdapterError("prompt width does not match input width");
    layout.add_prompt(g.value(p).rows());
    parts.push_back(p);
  }
  layout.set_input(iv.rows());
  if (parts.empty()) return input;
  parts.push_back(input);
  return ag::concat_rows<T>(g, parts);
}

template <typename T>
LoraAdapter<T> LoraAdapter<T>::init(const ModelConfig& cfg, std::size_t rank, std::uint64_t seed, double init_std) {
  if (rank == 0) throw AdapterError("LoRA rank must be >= 1");
  Rng rng(seed);
  LoraAdapter out;
  out.rank = rank;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::array<LoraPair<T>, 6> layer;
    for (Projection p : kAllProjections) {
      auto [din, dout] = projection_shape(cfg, p);
      if (rank > din || rank > dout) throw AdapterError("LoRA rank exceeds a projection dimension");
      LoraPair<T> pair{BasicTensor<T>({rank, din}), BasicTensor<T>({dout, rank})};
      for (auto& v : pair.a.values()) v = static_cast<T>(rng.normal() * init_std);
      layer[static_cast<std::size_t>(p)] = std::move(pair);
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

template <typename T>
void LoraAdapter<T>::for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (Projection p : kAllProjections) {
      auto& pair = layers[l][static_cast<std::size_t>(p)];
      const std::string base = layer_tensor_name(l, projection_name(p));
      fn(base + ".lora_a", pair.a);
      fn(base + ".lora_b", pair.b);
    }
  }
}

template <typename T>
std::size_t LoraAdapter<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) {
    for (const auto& p : l) n += p.a.numel() + p.b.numel();
  }
  return n;
}

template <typename T>
void LoraHook<T>::bind(Graph<T>& g) {
  graph_ = &g;
  vars_.clear();
  for (const auto& layer : adapter_.layers) {
    std::array<std::pair<Var, Var>, 6> vs;
    for (std::size_t i = 0; i < 6; ++i) vs[i] = {g.parameter(layer[i].a, trainable_), g.parameter(layer[i].b, trainable_)};
    vars_.push_back(vs);
  }
}

template <typename T>
std::optional<Var> LoraHook<T>::projection_delta(Graph<T>& g, std::size_t layer, Projection p, Var x) {
  if (graph_ != &g) throw AdapterError("LoRA hook is not bound to this graph");
  const auto [a, b] = vars_.at(layer)[static_cast<std::size_t>(p)];
  Var delta = ag::matmul_nt(g, ag::matmul_nt(g, x, a), b);
  if (adapter_.scale != 1.0) delta = ag::scale(g, delta, static_cast<T>(adapter_.scale));
  return delta;
}

template <typename T>
LoraHook<T> apply_lora(const Weights<T>& w, const LoraAdapter<T>& adapter, bool trainable) {
  if (adapter.layers.size() != w.config.n_layers) throw AdapterError("LoRA layer count does not match the model");
  for (std::size_t l = 0; l < adapter.layers.size(); ++l) {
    for (Projection p : kAllProjections) {
      auto [din, dout] = projection_shape(w.config, p);
      const auto& pair = adapter.pair(l, p);
      if (adapter.rank > din || adapter.rank > dout) throw AdapterError("LoRA rank exceeds a projection dimension");
      if (pair.a.shape() != Shape{adapter.rank, din} || pair.b.shape() != Shape{dout, adapter.rank}) {
        throw AdapterError("LoRA factor shapes do not match " + layer_tensor_name(l, projection_name(p)));
      }
    }
  }
  return LoraHook<T>(adapter, trainable);
}

template <typename T>
PrefixSet<T> PrefixSet<T>::init(const ModelConfig& cfg, std::size_t t, std::uint64_t seed, double init_std) {
  Rng rng(seed);
  PrefixSet out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BasicTensor<T> block({t, cfg.d_model});
    for (auto& v : block.values()) v = static_cast<T>(rng.normal() * init_std);
    out.layers.push_back(std::move(block));
  }
  return out;
}

template <typename T>
std::size_t PrefixSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.numel();
  return n;
}

template <typename T>
void PrefixHook<T>::bind(Graph<T>& g) {
  graph_ = &g;
  vars_.clear();
  for (const auto& block : prefix_.layers) vars_.push_back(g.parameter(block, trainable_));
}

template <typename T>
std::optional<std::pair<Var, Var>> PrefixHook<T>::layer_context(Graph<T>& g, std::size_t layer,
                                                                 const LayerVars& lv) {
  if (prefix_.length() == 0) return std::nullopt;
  if (graph_ != &g) throw AdapterError("prefix hook is not bound to this graph");
  Var h = ag::rms_norm(g, vars_.at(layer), lv.attn_norm, eps_);
  return std::make_pair(ag::matmul(g, h, lv.wk), ag::matmul(g, h, lv.wv));
}

template <typename T>
PrefixHook<T> apply_prefix(const Weights<T>& w, const PrefixSet<T>& prefix, bool trainable) {
  if (prefix.length() > 0) {
    if (prefix.layers.size() != w.config.n_layers) throw AdapterError("prefix layer count does not match the model");
    for (const auto& block : prefix.layers) {
      if (block.shape() != Shape{prefix.length(), w.config.d_model}) throw AdapterError("prefix block shape mismatch");
    }
    if (prefix.length() >= w.config.max_seq_len) throw AdapterError("prefix longer than the sequence budget");
  }
  return PrefixHook<T>(prefix, trainable, w.config.norm_eps);
}

#define DYNPROMPT_INSTANTIATE(T)                                                                         \
  template Prepended<T> prepend_prompts(std::span<const BasicTensor<T>* const>, const BasicTensor<T>&); \
  template Var prepend_prompts(Graph<T>&, std::span<const Var>, Var, SegmentLayout&);                  \
  template struct LoraAdapter<T>;                                                                        \
  template class LoraHook<T>;                                                                            \
  template LoraHook<T> apply_lora(const Weights<T>&, const LoraAdapter<T>&, bool);                      \
  template struct PrefixSet<T>;                                                                          \
  template class PrefixHook<T>;                                                                          \
  template PrefixHook<T> apply_prefix(const Weights<T>&, const PrefixSet<T>&, bool);

DYNPROMPT_INSTANTIATE(float)
DYNPROMPT_INSTANTIATE(double)
#undef DYNPROMPT_INSTANTIATE

}  // namespace dynprompt
