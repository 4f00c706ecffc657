#include <numeric>

#include "dynprompt/model.hpp"

namespace dynprompt {

template <typename T>
Transformer<T>::Transformer(Graph<T>& g, const Weights<T>& w, bool frozen) : g_(g), w_(w) {
  w.check_shapes();
  auto bind = [&](const std::string& name, const BasicTensor<T>& t) {
    return g.parameter(t, !frozen && w.is_trainable(name));
  };
  embedding_ = bind("embedding", w.embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    LayerVars lv;
    lv.attn_norm = bind(layer_tensor_name(l, "attn_norm"), lw.attn_norm);
    lv.wq = bind(layer_tensor_name(l, "wq"), lw.wq);
    lv.wk = bind(layer_tensor_name(l, "wk"), lw.wk);
    lv.wv = bind(layer_tensor_name(l, "wv"), lw.wv);
    lv.wo = bind(layer_tensor_name(l, "wo"), lw.wo);
    lv.ffn_norm = bind(layer_tensor_name(l, "ffn_norm"), lw.ffn_norm);
    lv.w_up = bind(layer_tensor_name(l, "w_up"), lw.w_up);
    lv.w_down = bind(layer_tensor_name(l, "w_down"), lw.w_down);
    layers_.push_back(lv);
  }
  final_norm_ = bind("final_norm", w.final_norm);
}

template <typename T>
Var Transformer<T>::embed(std::span<const int> tokens) {
  return ag::embed(g_, embedding_, tokens);
}

template <typename T>
Var Transformer<T>::project(std::size_t layer, Projection p, Var x, ForwardHook<T>* hook) {
  Var y = ag::matmul(g_, x, layers_[layer].projection(p));
  if (hook) {
    if (auto delta = hook->projection_delta(g_, layer, p, x)) y = ag::add(g_, y, *delta);
  }
  return y;
}

template <typename T>
GraphForward<T> Transformer<T>::forward(Var embeddings, const SegmentLayout& layout, const ForwardOptions<T>& opt) {
  const ModelConfig& cfg = w_.config;
  const std::size_t tk = layout.total();
  const std::size_t row_begin = opt.cache ? opt.cache->watermark() : 0;
  const auto& x0 = g_.value(embeddings);
  if (tk > cfg.max_seq_len) {
    throw ModelError("sequence of " + std::to_string(tk) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (row_begin > tk || x0.rank() != 2 || x0.rows() != tk - row_begin || x0.cols() != cfg.d_model) {
    throw ModelError("embeddings " + shape_string(x0.shape()) + " do not match layout rows [" +
                     std::to_string(row_begin) + ", " + std::to_string(tk) + ")");
  }
  if (opt.router && opt.policy != AttentionPolicy::idp) throw ModelError("a router needs the idp policy");
  const std::size_t rows = tk - row_begin;

  const Tensor full_mask = build_mask(layout, opt.policy);
  const std::vector<int> all_pos = layout_positions(layout, cfg.prompt_positions, opt.position_offset);
  const std::vector<int> pos(all_pos.begin() + static_cast<std::ptrdiff_t>(row_begin), all_pos.end());

  GraphForward<T> result;
  result.trace.layout = layout;
  result.trace.row_begin = row_begin;

  Var x = embeddings;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerVars& lv = layers_[l];
    Var h = ag::rms_norm(g_, x, lv.attn_norm, cfg.norm_eps);
    Var q = ag::rope(g_, project(l, Projection::q, h, opt.hook), pos, cfg.n_heads, cfg.rope_base);
    Var k = ag::rope(g_, project(l, Projection::k, h, opt.hook), pos, cfg.n_heads, cfg.rope_base);
    Var v = project(l, Projection::v, h, opt.hook);

    Var keys = k, values = v;
    if (opt.cache) {
      opt.cache->write(l, g_.value(k), g_.value(v));
      if (row_begin > 0) {
        std::array<Var, 2> kp{g_.constant(opt.cache->keys(l, 0, row_begin)), k};
        std::array<Var, 2> vp{g_.constant(opt.cache->values(l, 0, row_begin)), v};
        keys = ag::concat_rows<T>(g_, kp);
        values = ag::concat_rows<T>(g_, vp);
      }
    }
    std::size_t extra = 0;
    if (opt.hook) {
      if (auto ctx = opt.hook->layer_context(g_, l, lv)) {
        extra = g_.value(ctx->first).rows();
        std::array<Var, 2> kp{ctx->first, keys};
        std::array<Var, 2> vp{ctx->second, values};
        keys = ag::concat_rows<T>(g_, kp);
        values = ag::concat_rows<T>(g_, vp);
      }
    }
    if (extra > 0 && opt.router) throw ModelError("hook context keys cannot be combined with a router");
    result.trace.extra_keys = extra;

    Tensor mask({rows, extra + tk}, 0.0f);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < tk; ++j) mask.at(i, extra + j) = full_mask.at(row_begin + i, j);
    }

    RouteFn<T> route;
    if (opt.router) {
      route = [&, l](std::vector<BasicTensor<T>>& probs, const std::vector<BasicTensor<T>>& scores, const Tensor& m) {
        opt.router->route(l, layout, row_begin, probs, scores, m, result.trace.selections);
      };
    }
    std::vector<BasicTensor<T>> probs;
    Var ctx = attention<T>(g_, q, keys, values, mask, cfg.n_heads, opt.router ? &route : nullptr,
                           opt.capture ? &probs : nullptr);
    x = ag::add(g_, x, project(l, Projection::o, ctx, opt.hook));
    LayerTrace<T> lt;
    if (opt.capture) {
      const std::size_t nk = extra + tk;
      lt.attention = BasicTensor<T>({cfg.n_heads, rows, nk});
      lt.attention_mean = BasicTensor<T>({rows, nk});
      const T inv_h = T{1} / static_cast<T>(cfg.n_heads);
      for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
        std::copy(probs[hh].data(), probs[hh].data() + rows * nk, lt.attention.data() + hh * rows * nk);
        for (std::size_t i = 0; i < rows * nk; ++i) lt.attention_mean[i] += probs[hh][i] * inv_h;
      }
      lt.attn_residual = g_.value(x);
    }

    Var h2 = ag::rms_norm(g_, x, lv.ffn_norm, cfg.norm_eps);
    Var up = ag::gelu(g_, project(l, Projection::up, h2, opt.hook));
    x = ag::add(g_, x, project(l, Projection::down, up, opt.hook));
    if (opt.capture) {
      lt.residual = g_.value(x);
      result.trace.layers.push_back(std::move(lt));
    }
  }
  if (opt.cache) opt.cache->advance(rows);

  if (!layout.has_input() || tk <= layout.input_offset()) return result;
  const std::size_t first_input = std::max(row_begin, layout.input_offset());
  Var xf = ag::rms_norm(g_, x, final_norm_, cfg.norm_eps);
  if (first_input > row_begin) xf = ag::slice_rows(g_, xf, first_input - row_begin, tk - first_input);
  result.logits = ag::matmul_nt(g_, xf, embedding_);
  return result;
}

template <typename T>
ForwardResult<T> forward(const Weights<T>& w, const BasicTensor<T>& embeddings, const SegmentLayout& layout,
                         const ForwardOptions<T>& opt) {
  Graph<T> g;
  Transformer<T> model(g, w, true);
  if (opt.hook) opt.hook->bind(g);
  Var x = g.constant(embeddings);
  auto out = model.forward(x, layout, opt);
  ForwardResult<T> result;
  if (out.logits.valid()) result.logits = g.value(out.logits);
  result.trace = std::move(out.trace);
  return result;
}

template <typename T>
ForwardResult<T> forward_tokens(const Weights<T>& w, std::span<const int> tokens, const ForwardOptions<T>& opt) {
  const std::size_t start = opt.cache ? opt.cache->watermark() : 0;
  if (tokens.empty()) throw ModelError("empty token sequence");
  BasicTensor<T> emb = kernels::embed(tokens, w.embedding);
  return forward(w, emb, SegmentLayout::input_only(start + tokens.size()), opt);
}

template class Transformer<float>;
template class Transformer<double>;
template ForwardResult<float> forward(const Weights<float>&, const Tensor&, const SegmentLayout&,
                                      const ForwardOptions<float>&);
template ForwardResult<double> forward(const Weights<double>&, const Tensor64&, const SegmentLayout&,
                                       const ForwardOptions<double>&);
template ForwardResult<float> forward_tokens(const Weights<float>&, std::span<const int>,
                                             const ForwardOptions<float>&);
template ForwardResult<double> forward_tokens(const Weights<double>&, std::span<const int>,
                                              const ForwardOptions<double>&);

}  // namespace dynprompt
