#include <cmath>

#include "dynprompt/model.hpp"

namespace dynprompt {

template <typename T>
Var attention(Graph<T>& g, Var q, Var k, Var v, const Tensor& mask, std::size_t n_heads,
              const RouteFn<T>* route, std::vector<BasicTensor<T>>* probs_out) {
  const auto& qv = g.value(q);
  const auto& kv = g.value(k);
  const auto& vv = g.value(v);
  const std::size_t rows = qv.rows();
  const std::size_t keys = kv.rows();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != keys) throw TensorError("attention: q/k/v shapes disagree");
  if (mask.shape() != Shape{rows, keys}) {
    throw TensorError("attention: mask " + shape_string(mask.shape()) + " vs scores [" + std::to_string(rows) + "x" +
                      std::to_string(keys) + "]");
  }
  if (n_heads == 0 || d % n_heads != 0) throw TensorError("attention: bad head count");
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<BasicTensor<T>> probs, head_scores;
  probs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    BasicTensor<T> scores({rows, keys});
    for (std::size_t i = 0; i < rows; ++i) {
      const T* qi = qv.data() + i * d + h * dh;
      for (std::size_t j = 0; j < keys; ++j) {
        if (is_masked(mask.at(i, j))) continue;
        const T* kj = kv.data() + j * d + h * dh;
        T s{0};
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores.at(i, j) = s * inv_sqrt;
      }
    }
    probs.push_back(kernels::softmax_rows(scores, mask));
    if (route) head_scores.push_back(std::move(scores));
  }
  const bool routed = route != nullptr && *route;
  if (routed) (*route)(probs, head_scores, mask);

  BasicTensor<T> out({rows, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto& p = probs[h];
    for (std::size_t i = 0; i < rows; ++i) {
      T* oi = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < keys; ++j) {
        const T w = p.at(i, j);
        if (w == T{0}) continue;
        const T* vj = vv.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
  // Dense count: q k^T and p v over all heads, masked entries included.
  mac_counter() += 2 * rows * keys * d;
  if (probs_out) *probs_out = probs;

  return g.record(std::move(out), {q, k, v},
                  [q, k, v, n_heads, inv_sqrt, routed, probs = std::move(probs)](Graph<T>& gr,
                                                                                const BasicTensor<T>& dy) {
                    if (routed) throw TensorError("attention: no gradient through routed weights");
                    const auto& qv2 = gr.value(q);
                    const auto& kv2 = gr.value(k);
                    const auto& vv2 = gr.value(v);
                    const std::size_t rows2 = qv2.rows();
                    const std::size_t keys2 = kv2.rows();
                    const std::size_t d2 = qv2.cols();
                    const std::size_t dh2 = d2 / n_heads;
                    BasicTensor<T> dq({rows2, d2}), dk({keys2, d2}), dv({keys2, d2});
                    std::vector<T> dp(keys2);
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const auto& p = probs[h];
                      for (std::size_t i = 0; i < rows2; ++i) {
                        const T* dyi = dy.data() + i * d2 + h * dh2;
                        T dot{0};
                        for (std::size_t j = 0; j < keys2; ++j) {
                          const T w = p.at(i, j);
                          if (w == T{0}) {
                            dp[j] = T{0};
                            continue;
                          }
                          const T* vj = vv2.data() + j * d2 + h * dh2;
                          T* dvj = dv.data() + j * d2 + h * dh2;
                          T s{0};
                          for (std::size_t c = 0; c < dh2; ++c) {
                            s += dyi[c] * vj[c];
                            dvj[c] += w * dyi[c];
                          }
                          dp[j] = s;
                          dot += s * w;
                        }
                        const T* qi = qv2.data() + i * d2 + h * dh2;
                        T* dqi = dq.data() + i * d2 + h * dh2;
                        for (std::size_t j = 0; j < keys2; ++j) {
                          const T w = p.at(i, j);
                          if (w == T{0}) continue;
                          const T ds = w * (dp[j] - dot) * inv_sqrt;
                          const T* kj = kv2.data() + j * d2 + h * dh2;
                          T* dkj = dk.data() + j * d2 + h * dh2;
                          for (std::size_t c = 0; c < dh2; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                          }
                        }
                      }
                    }
                    gr.accumulate_grad(q, dq);
                    gr.accumulate_grad(k, dk);
                    gr.accumulate_grad(v, dv);
                  });
}

template Var attention(Graph<float>&, Var, Var, Var, const Tensor&, std::size_t, const RouteFn<float>*,
                       std::vector<BasicTensor<float>>*);
template Var attention(Graph<double>&, Var, Var, Var, const Tensor&, std::size_t, const RouteFn<double>*,
                       std::vector<BasicTensor<double>>*);

}  // namespace dynprompt
