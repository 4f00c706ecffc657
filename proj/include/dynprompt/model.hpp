#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynprompt/autograd.hpp"
#include "dynprompt/tensor.hpp"

namespace dynprompt {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  // Ablation: give prompt tokens sequential positions instead of none.
  bool prompt_positions = false;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Projection { q, k, v, o, up, down };
inline constexpr std::array<Projection, 6> kAllProjections = {Projection::q, Projection::k, Projection::v,
                                                              Projection::o, Projection::up, Projection::down};
const char* projection_name(Projection p);
// {d_in, d_out} of a projection; weights are stored [d_in x d_out] and applied as x W.
std::pair<std::size_t, std::size_t> projection_shape(const ModelConfig& cfg, Projection p);

template <typename T>
struct LayerWeights {
  BasicTensor<T> attn_norm;
  BasicTensor<T> wq, wk, wv, wo;
  BasicTensor<T> ffn_norm;
  BasicTensor<T> w_up, w_down;

  BasicTensor<T>& projection(Projection p);
  const BasicTensor<T>& projection(Projection p) const;
};

template <typename T>
struct Weights {
  ModelConfig config;
  BasicTensor<T> embedding;  // [vocab x d]; also the output head
  std::vector<LayerWeights<T>> layers;
  BasicTensor<T> final_norm;
  // Names of tensors a trainer may update. Empty means fully frozen.
  std::set<std::string> trainable;

  static Weights init(const ModelConfig& cfg);

  template <typename U>
  Weights<U> cast() const {
    Weights<U> out;
    out.config = config;
    out.embedding = embedding.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    out.trainable = trainable;
    for (const auto& l : layers) {
      out.layers.push_back({l.attn_norm.template cast<U>(), l.wq.template cast<U>(), l.wk.template cast<U>(),
                            l.wv.template cast<U>(), l.wo.template cast<U>(), l.ffn_norm.template cast<U>(),
                            l.w_up.template cast<U>(), l.w_down.template cast<U>()});
    }
    return out;
  }

  // Visits every tensor with its canonical name ("embedding", "layers.0.wq", ...).
  void for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn);
  void for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const;
  void set_all_trainable(bool on);
  bool is_trainable(const std::string& name) const { return trainable.count(name) != 0; }
  void check_shapes() const;
};

std::string layer_tensor_name(std::size_t layer, const char* field);

// FNV-1a over names, shapes and raw bytes. Used to prove frozen weights stay bitwise equal.
std::uint64_t weights_digest(const Weights<float>& w);

enum class SegmentKind { prompt, input };

struct Segment {
  SegmentKind kind = SegmentKind::input;
  std::size_t prompt_index = 0;
  std::size_t length = 0;
};

class SegmentLayout {
 public:
  static SegmentLayout input_only(std::size_t input_length);
  static SegmentLayout with_prompts(std::span<const std::size_t> prompt_lengths, std::size_t input_length);

  void add_prompt(std::size_t length);
  void set_input(std::size_t length);

  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t total() const;
  std::size_t prompt_count() const { return prompt_offsets_.size(); }
  std::size_t prompt_tokens() const;
  std::size_t prompt_offset(std::size_t i) const;
  std::size_t prompt_length(std::size_t i) const;
  bool has_input() const { return input_segment_.has_value(); }
  std::size_t input_offset() const;
  std::size_t input_length() const;
  // Prompt index covering a row, or nullopt for input rows.
  std::optional<std::size_t> prompt_of(std::size_t row) const;

 private:
  std::vector<Segment> segments_;
  std::vector<std::size_t> prompt_offsets_;
  std::optional<std::size_t> input_segment_;
};

enum class AttentionPolicy { dense_causal, single_prompt, naive_concat, idp };
const char* policy_name(AttentionPolicy p);

// Additive [tk x tk] mask; 0 for allowed entries and kMaskedOut for forbidden ones.
Tensor build_mask(const SegmentLayout& layout, AttentionPolicy policy);

// Position per layout row. Input rows count from 0; prompt rows get ag::kNoPosition
// unless prompt_positions is set, in which case all rows are numbered in order
// starting at offset.
std::vector<int> layout_positions(const SegmentLayout& layout, bool prompt_positions, std::size_t offset = 0);

template <typename T>
class KVCache {
 public:
  KVCache(const ModelConfig& cfg, std::size_t capacity);

  std::size_t capacity() const { return capacity_; }
  std::size_t watermark() const { return watermark_; }
  std::size_t n_layers() const { return keys_.size(); }

  // Rows [0, watermark) of a layer.
  BasicTensor<T> keys(std::size_t layer) const { return rows(keys_, layer, watermark_); }
  BasicTensor<T> values(std::size_t layer) const { return rows(values_, layer, watermark_); }
  BasicTensor<T> keys(std::size_t layer, std::size_t begin, std::size_t count) const;
  BasicTensor<T> values(std::size_t layer, std::size_t begin, std::size_t count) const;

  // Writes rows starting at the watermark; the watermark moves only on advance().
  void write(std::size_t layer, const BasicTensor<T>& k, const BasicTensor<T>& v);
  void advance(std::size_t n);
  // Appends another cache's valid rows (all layers) and advances past them.
  void append(const KVCache& other);

 private:
  BasicTensor<T> rows(const std::vector<BasicTensor<T>>& src, std::size_t layer, std::size_t count) const;

  std::size_t capacity_;
  std::size_t d_model_;
  std::size_t watermark_ = 0;
  std::vector<BasicTensor<T>> keys_;
  std::vector<BasicTensor<T>> values_;
};

struct SelectionRecord {
  std::size_t layer = 0;
  std::vector<double> scores;
  std::size_t chosen = 0;
};

template <typename T>
struct LayerTrace {
  BasicTensor<T> attention;       // [heads x rows x keys]
  BasicTensor<T> attention_mean;  // [rows x keys], head average
  BasicTensor<T> attn_residual;   // [rows x d], after the attention add
  BasicTensor<T> residual;        // [rows x d], after the feed-forward add
};

template <typename T>
struct ForwardTrace {
  SegmentLayout layout;
  std::size_t row_begin = 0;    // first layout row computed
  std::size_t extra_keys = 0;   // hook-supplied keys placed before the layout keys
  std::vector<LayerTrace<T>> layers;
  std::vector<SelectionRecord> selections;
};

// Adjusts post-softmax weights of one layer in place. head_probs[h] is
// [rows x keys]; rows are layout rows [row_begin, row_begin + rows) and keys
// are layout columns [0, keys). head_scores are the scaled pre-softmax scores
// and mask the additive mask they were normalized under.
template <typename T>
class AttentionRouter {
 public:
  virtual ~AttentionRouter() = default;
  virtual void route(std::size_t layer, const SegmentLayout& layout, std::size_t row_begin,
                     std::vector<BasicTensor<T>>& head_probs, const std::vector<BasicTensor<T>>& head_scores,
                     const Tensor& mask, std::vector<SelectionRecord>& records) = 0;
};

// Graph handles for the frozen weights of one layer.
struct LayerVars {
  Var attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down;
  Var projection(Projection p) const;
};

// Adapter entry points into the forward pass.
template <typename T>
class ForwardHook {
 public:
  virtual ~ForwardHook() = default;
  // Registers adapter tensors in the graph the next forward runs in.
  virtual void bind(Graph<T>& g) { (void)g; }
  // Added to x W for the given projection.
  virtual std::optional<Var> projection_delta(Graph<T>& g, std::size_t layer, Projection p, Var x) {
    (void)g, (void)layer, (void)p, (void)x;
    return std::nullopt;
  }
  // Extra {keys, values} rows visible to every query of the layer, without position.
  virtual std::optional<std::pair<Var, Var>> layer_context(Graph<T>& g, std::size_t layer, const LayerVars& lv) {
    (void)g, (void)layer, (void)lv;
    return std::nullopt;
  }
};

template <typename T>
struct ForwardOptions {
  AttentionPolicy policy = AttentionPolicy::dense_causal;
  KVCache<T>* cache = nullptr;          // rows before its watermark are read, new rows appended
  ForwardHook<T>* hook = nullptr;
  AttentionRouter<T>* router = nullptr;
  bool capture = false;
  std::size_t position_offset = 0;      // only used with ModelConfig::prompt_positions
};

template <typename T>
struct GraphForward {
  Var logits;  // [input rows computed x vocab]; invalid when no input row was computed
  ForwardTrace<T> trace;
};

// Weights bound into a Graph. Tensors named in Weights::trainable become
// trainable leaves unless frozen is set; everything else is frozen.
template <typename T>
class Transformer {
 public:
  Transformer(Graph<T>& g, const Weights<T>& w, bool frozen = false);

  Var embed(std::span<const int> tokens);
  // embeddings holds layout rows [row_begin, total). row_begin must equal the
  // cache watermark when a cache is given, and 0 otherwise.
  GraphForward<T> forward(Var embeddings, const SegmentLayout& layout, const ForwardOptions<T>& opt);

  Graph<T>& graph() { return g_; }
  const Weights<T>& weights() const { return w_; }
  const LayerVars& layer(std::size_t l) const { return layers_.at(l); }
  Var embedding() const { return embedding_; }

 private:
  Var project(std::size_t layer, Projection p, Var x, ForwardHook<T>* hook);

  Graph<T>& g_;
  const Weights<T>& w_;
  Var embedding_;
  Var final_norm_;
  std::vector<LayerVars> layers_;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;  // [input rows computed x vocab]
  ForwardTrace<T> trace;
};

// Value-level forward. embeddings holds rows [watermark, total) of the layout.
template <typename T>
ForwardResult<T> forward(const Weights<T>& w, const BasicTensor<T>& embeddings, const SegmentLayout& layout,
                         const ForwardOptions<T>& opt = {});
// Token input with no prompts.
template <typename T>
ForwardResult<T> forward_tokens(const Weights<T>& w, std::span<const int> tokens, const ForwardOptions<T>& opt = {});

template <typename T>
using RouteFn = std::function<void(std::vector<BasicTensor<T>>&, const std::vector<BasicTensor<T>>&, const Tensor&)>;

// Fused multi-head attention. mask is [rows x keys] additive. When route is set
// it may rewrite the post-softmax weights before they multiply v; such a node
// is not differentiable. probs_out receives the final per-head weights.
template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, const Tensor& mask, std::size_t n_heads,
              const RouteFn<T>* route, std::vector<BasicTensor<T>>* probs_out);

// Container file: 8-byte little-endian header length, UTF-8 JSON header,
// then little-endian float32 blobs at the offsets listed in the header.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::string kind;
  std::string meta_json = "{}";
  std::vector<NamedTensor> tensors;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

void save_weights(const std::string& path, const Weights<float>& w);
Weights<float> load_weights(const std::string& path);
std::string config_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace dynprompt
