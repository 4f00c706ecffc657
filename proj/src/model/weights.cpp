#include <cmath>

#include "dynprompt/model.hpp"
#include "dynprompt/rng.hpp"

namespace dynprompt {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ModelError("model extents must all be >= 1");
  }
  if (d_model % n_heads != 0) throw ModelError("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ModelError("head width must be even for rotary positions");
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "wq";
    case Projection::k: return "wk";
    case Projection::v: return "wv";
    case Projection::o: return "wo";
    case Projection::up: return "w_up";
    case Projection::down: return "w_down";
  }
  return "?";
}

std::pair<std::size_t, std::size_t> projection_shape(const ModelConfig& cfg, Projection p) {
  switch (p) {
    case Projection::up: return {cfg.d_model, cfg.d_ff};
    case Projection::down: return {cfg.d_ff, cfg.d_model};
    default: return {cfg.d_model, cfg.d_model};
  }
}

Var LayerVars::projection(Projection p) const {
  switch (p) {
    case Projection::q: return wq;
    case Projection::k: return wk;
    case Projection::v: return wv;
    case Projection::o: return wo;
    case Projection::up: return w_up;
    case Projection::down: return w_down;
  }
  return {};
}

template <typename T>
BasicTensor<T>& LayerWeights<T>::projection(Projection p) {
  switch (p) {
    case Projection::q: return wq;
    case Projection::k: return wk;
    case Projection::v: return wv;
    case Projection::o: return wo;
    case Projection::up: return w_up;
    case Projection::down: return w_down;
  }
  throw ModelError("unknown projection");
}

template <typename T>
const BasicTensor<T>& LayerWeights<T>::projection(Projection p) const {
  return const_cast<LayerWeights*>(this)->projection(p);
}

std::string layer_tensor_name(std::size_t layer, const char* field) {
  return "layers." + std::to_string(layer) + "." + field;
}

namespace {

template <typename T>
BasicTensor<T> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  BasicTensor<T> t({rows, cols});
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

}  // namespace

template <typename T>
Weights<T> Weights<T>::init(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Weights w;
  w.config = cfg;
  const double d = static_cast<double>(cfg.d_model);
  const double ff = static_cast<double>(cfg.d_ff);
  const double depth = std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  w.embedding = random_matrix<T>(rng, cfg.vocab_size, cfg.d_model, 0.3);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<T> lw;
    lw.attn_norm = BasicTensor<T>({cfg.d_model}, T{1});
    lw.wq = random_matrix<T>(rng, cfg.d_model, cfg.d_model, 1.0 / std::sqrt(d));
    lw.wk = random_matrix<T>(rng, cfg.d_model, cfg.d_model, 1.0 / std::sqrt(d));
    lw.wv = random_matrix<T>(rng, cfg.d_model, cfg.d_model, 1.0 / std::sqrt(d));
    lw.wo = random_matrix<T>(rng, cfg.d_model, cfg.d_model, 1.0 / std::sqrt(d) / depth);
    lw.ffn_norm = BasicTensor<T>({cfg.d_model}, T{1});
    lw.w_up = random_matrix<T>(rng, cfg.d_model, cfg.d_ff, 1.0 / std::sqrt(d));
    lw.w_down = random_matrix<T>(rng, cfg.d_ff, cfg.d_model, 1.0 / std::sqrt(ff) / depth);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = BasicTensor<T>({cfg.d_model}, T{1});
  return w;
}

template <typename T>
void Weights<T>::for_each(const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
  fn("embedding", embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& lw = layers[l];
    fn(layer_tensor_name(l, "attn_norm"), lw.attn_norm);
    for (Projection p : {Projection::q, Projection::k, Projection::v, Projection::o}) {
      fn(layer_tensor_name(l, projection_name(p)), lw.projection(p));
    }
    fn(layer_tensor_name(l, "ffn_norm"), lw.ffn_norm);
    fn(layer_tensor_name(l, "w_up"), lw.w_up);
    fn(layer_tensor_name(l, "w_down"), lw.w_down);
  }
  fn("final_norm", final_norm);
}

template <typename T>
void Weights<T>::for_each(const std::function<void(const std::string&, const BasicTensor<T>&)>& fn) const {
  const_cast<Weights*>(this)->for_each(
      [&](const std::string& name, BasicTensor<T>& t) { fn(name, static_cast<const BasicTensor<T>&>(t)); });
}

template <typename T>
void Weights<T>::set_all_trainable(bool on) {
  trainable.clear();
  if (!on) return;
  for_each([&](const std::string& name, BasicTensor<T>&) { trainable.insert(name); });
}

template <typename T>
void Weights<T>::check_shapes() const {
  config.validate();
  auto expect = [](const BasicTensor<T>& t, Shape s, const std::string& name) {
    if (t.shape() != s) {
      throw ModelError(name + " has shape " + shape_string(t.shape()) + ", expected " + shape_string(s));
    }
  };
  const auto& c = config;
  expect(embedding, {c.vocab_size, c.d_model}, "embedding");
  expect(final_norm, {c.d_model}, "final_norm");
  if (layers.size() != c.n_layers) throw ModelError("layer count does not match config");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lw = layers[l];
    expect(lw.attn_norm, {c.d_model}, layer_tensor_name(l, "attn_norm"));
    expect(lw.ffn_norm, {c.d_model}, layer_tensor_name(l, "ffn_norm"));
    for (Projection p : kAllProjections) {
      auto [din, dout] = projection_shape(c, p);
      expect(lw.projection(p), {din, dout}, layer_tensor_name(l, projection_name(p)));
    }
  }
}

std::uint64_t weights_digest(const Weights<float>& w) {
  std::uint64_t h = kFnvOffset;
  w.for_each([&](const std::string& name, const Tensor& t) {
    h = fnv1a(name.data(), name.size(), h);
    for (std::size_t e : t.shape()) {
      const std::uint64_t v = e;
      h = fnv1a(&v, sizeof v, h);
    }
    h = fnv1a(t.data(), t.numel() * sizeof(float), h);
  });
  return h;
}

template struct LayerWeights<float>;
template struct LayerWeights<double>;
template struct Weights<float>;
template struct Weights<double>;

}  // namespace dynprompt
