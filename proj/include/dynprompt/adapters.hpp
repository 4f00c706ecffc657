#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprompt/model.hpp"

namespace dynprompt {

class AdapterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SoftPrompt {
  std::string id;
  Tensor embedding;  // [n x d_model]
  std::string dataset_tag;
  std::size_t steps = 0;

  std::size_t length() const { return embedding.empty() ? 0 : embedding.rows(); }
};

class PromptBank {
 public:
  PromptBank() = default;
  explicit PromptBank(std::vector<SoftPrompt> prompts);

  void add(SoftPrompt p);
  std::size_t size() const { return prompts_.size(); }
  bool empty() const { return prompts_.empty(); }
  const SoftPrompt& at(std::size_t i) const { return prompts_.at(i); }
  const std::vector<SoftPrompt>& prompts() const { return prompts_; }
  std::vector<std::size_t> lengths() const;
  std::size_t total_tokens() const;
  void check_width(std::size_t d_model) const;

 private:
  std::vector<SoftPrompt> prompts_;
};

// Prompt rows stacked in bank order above the input rows.
template <typename T>
struct Prepended {
  BasicTensor<T> embeddings;
  SegmentLayout layout;
};

template <typename T>
Prepended<T> prepend_prompts(std::span<const BasicTensor<T>* const> prompts, const BasicTensor<T>& input);
Prepended<float> prepend_prompts(const PromptBank& bank, const Tensor& input);
Prepended<float> prepend_prompts(const SoftPrompt& prompt, const Tensor& input);
// Graph form; layout is filled in.
template <typename T>
Var prepend_prompts(Graph<T>& g, std::span<const Var> prompts, Var input, SegmentLayout& layout);

// Low-rank update B (A x) on one projection. b is [d_out x r], a is [r x d_in].
template <typename T>
struct LoraPair {
  BasicTensor<T> a;
  BasicTensor<T> b;
};

template <typename T>
struct LoraAdapter {
  std::size_t rank = 0;
  double scale = 1.0;
  std::vector<std::array<LoraPair<T>, 6>> layers;  // indexed by Projection

  // B = 0, A ~ N(0, init_std^2).
  static LoraAdapter init(const ModelConfig& cfg, std::size_t rank, std::uint64_t seed, double init_std = 0.01);
  LoraPair<T>& pair(std::size_t layer, Projection p) { return layers.at(layer)[static_cast<std::size_t>(p)]; }
  const LoraPair<T>& pair(std::size_t layer, Projection p) const {
    return layers.at(layer)[static_cast<std::size_t>(p)];
  }
  void for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  std::size_t parameter_count() const;

  template <typename U>
  LoraAdapter<U> cast() const {
    LoraAdapter<U> out;
    out.rank = rank;
    out.scale = scale;
    for (const auto& l : layers) {
      std::array<LoraPair<U>, 6> c;
      for (std::size_t i = 0; i < 6; ++i) c[i] = {l[i].a.template cast<U>(), l[i].b.template cast<U>()};
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

// Hooks must be bound to the graph they will run in before the forward.
template <typename T>
class LoraHook : public ForwardHook<T> {
 public:
  LoraHook(const LoraAdapter<T>& adapter, bool trainable) : adapter_(adapter), trainable_(trainable) {}
  void bind(Graph<T>& g) override;
  std::optional<Var> projection_delta(Graph<T>& g, std::size_t layer, Projection p, Var x) override;

 private:
  const LoraAdapter<T>& adapter_;
  bool trainable_;
  Graph<T>* graph_ = nullptr;
  std::vector<std::array<std::pair<Var, Var>, 6>> vars_;
};

// Validates shapes against the model and returns a frozen hook.
template <typename T>
LoraHook<T> apply_lora(const Weights<T>& w, const LoraAdapter<T>& adapter, bool trainable = false);

template <typename T>
struct PrefixSet {
  std::vector<BasicTensor<T>> layers;  // one [t x d_model] block per layer

  static PrefixSet init(const ModelConfig& cfg, std::size_t t, std::uint64_t seed, double init_std = 0.3);
  std::size_t length() const { return layers.empty() || layers[0].empty() ? 0 : layers[0].rows(); }
  std::size_t parameter_count() const;

  template <typename U>
  PrefixSet<U> cast() const {
    PrefixSet<U> out;
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    return out;
  }
};

// Per layer: keys/values = rms_norm(prefix, attn_norm) through the frozen K/V projections.
template <typename T>
class PrefixHook : public ForwardHook<T> {
 public:
  PrefixHook(const PrefixSet<T>& prefix, bool trainable, double norm_eps = 1e-6)
      : prefix_(prefix), trainable_(trainable), eps_(norm_eps) {}
  void bind(Graph<T>& g) override;
  std::optional<std::pair<Var, Var>> layer_context(Graph<T>& g, std::size_t layer, const LayerVars& lv) override;

 private:
  const PrefixSet<T>& prefix_;
  bool trainable_;
  double eps_;
  Graph<T>* graph_ = nullptr;
  std::vector<Var> vars_;
};

template <typename T>
PrefixHook<T> apply_prefix(const Weights<T>& w, const PrefixSet<T>& prefix, bool trainable = false);

enum class AdapterKind { prompt, idp, prefix, lora };
AdapterKind parse_adapter_kind(const std::string& name);
const char* adapter_kind_name(AdapterKind k);

struct ParamConfig {
  std::size_t tokens = 0;    // prompt / idp / prefix
  std::size_t d_model = 0;   // prompt / idp / prefix
  std::size_t n_layers = 0;  // prefix / lora
  std::size_t rank = 0;      // lora
  std::size_t d_act = 0;     // lora
  std::size_t d_inter = 0;   // lora
};

struct ParamReport {
  AdapterKind kind = AdapterKind::prompt;
  std::string config;
  std::uint64_t count = 0;        // closed form
  std::uint64_t shape_exact = 0;  // sum of tensor sizes of the construction
  std::string millions;           // count in millions, one decimal, truncated
};

ParamReport count_params(AdapterKind kind, const ParamConfig& cfg);
std::string format_millions(std::uint64_t count);

// Checkpoints in the model container format.
void save_prompt(const std::string& path, const SoftPrompt& p);
SoftPrompt load_prompt(const std::string& path);
void save_lora(const std::string& path, const LoraAdapter<float>& a);
LoraAdapter<float> load_lora(const std::string& path);
void save_prefix(const std::string& path, const PrefixSet<float>& p);
PrefixSet<float> load_prefix(const std::string& path);

}  // namespace dynprompt
