#include "dynprompt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dynprompt {

template <typename T>
const BasicTensor<T>& Gradients<T>::at(const BasicTensor<T>& param) const {
  auto it = grads_.find(&param);
  if (it == grads_.end()) throw TensorError("no gradient recorded for this parameter");
  return it->second;
}

template <typename T>
void Gradients<T>::accumulate(const BasicTensor<T>* key, const BasicTensor<T>& grad) {
  auto [it, inserted] = grads_.try_emplace(key, grad);
  if (!inserted) {
    for (std::size_t i = 0; i < grad.numel(); ++i) it->second[i] += grad[i];
  }
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (v.id >= nodes_.size()) throw TensorError("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw TensorError("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::constant(BasicTensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::parameter(const BasicTensor<T>& source, bool trainable) {
  Node n;
  n.external = &source;
  n.requires_grad = trainable;
  n.trainable_leaf = trainable;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename T>
Var Graph<T>::record(BasicTensor<T> value, std::span<const Var> inputs, BackwardFn backward) {
  if (consumed_) throw TensorError("graph already consumed by backward()");
  if (!value.all_finite()) throw TensorError("non-finite value produced by an operation");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return node(v).requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.owned;
}

template <typename T>
BasicTensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = BasicTensor<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Graph<T>::accumulate_grad(Var v, const BasicTensor<T>& grad) {
  if (!node(v).requires_grad) return;
  BasicTensor<T>& buf = grad_buffer(v);
  if (buf.numel() != grad.numel()) throw TensorError("gradient shape mismatch");
  for (std::size_t i = 0; i < grad.numel(); ++i) buf[i] += grad[i];
}

template <typename T>
Gradients<T> Graph<T>::backward(Var loss) {
  if (consumed_) throw TensorError("graph already consumed by backward()");
  if (value(loss).numel() != 1) throw TensorError("backward() needs a scalar loss, got " + shape_string(value(loss).shape()));
  consumed_ = true;
  Gradients<T> out;
  if (!node(loss).requires_grad) return out;
  grad_buffer(loss).fill(T{1});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      // Move the closure out so a node's saved state is released once used.
      BackwardFn fn = std::move(n.backward);
      fn(*this, n.grad);
    }
    if (n.trainable_leaf) out.accumulate(n.external, n.grad);
  }
  return out;
}

template class Gradients<float>;
template class Gradients<double>;
template class Graph<float>;
template class Graph<double>;

namespace ag {

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  auto out = kernels::matmul(av, bv);
  mac_counter() += av.extent(0) * av.extent(1) * bv.extent(1);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const BasicTensor<T>& dy) {
    if (gr.requires_grad(a)) gr.accumulate_grad(a, kernels::matmul_nt(dy, gr.value(b)));
    if (gr.requires_grad(b)) gr.accumulate_grad(b, kernels::matmul_tn(gr.value(a), dy));
  });
}

template <typename T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  auto out = kernels::matmul_nt(av, bv);
  mac_counter() += av.extent(0) * av.extent(1) * bv.extent(0);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const BasicTensor<T>& dy) {
    if (gr.requires_grad(a)) gr.accumulate_grad(a, kernels::matmul(dy, gr.value(b)));
    if (gr.requires_grad(b)) gr.accumulate_grad(b, kernels::matmul_tn(dy, gr.value(a)));
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw TensorError("add: shapes differ " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const BasicTensor<T>& dy) {
    gr.accumulate_grad(a, dy);
    gr.accumulate_grad(b, dy);
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) throw TensorError("mul: shapes differ");
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const BasicTensor<T>& dy) {
    if (gr.requires_grad(a)) {
      BasicTensor<T> da = dy;
      const auto& bv2 = gr.value(b);
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] *= bv2[i];
      gr.accumulate_grad(a, da);
    }
    if (gr.requires_grad(b)) {
      BasicTensor<T> db = dy;
      const auto& av2 = gr.value(a);
      for (std::size_t i = 0; i < db.numel(); ++i) db[i] *= av2[i];
      gr.accumulate_grad(b, db);
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  BasicTensor<T> out = g.value(a);
  for (auto& v : out.values()) v *= factor;
  return g.record(std::move(out), {a}, [a, factor](Graph<T>& gr, const BasicTensor<T>& dy) {
    BasicTensor<T> da = dy;
    for (auto& v : da.values()) v *= factor;
    gr.accumulate_grad(a, da);
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  T total{0};
  for (T v : g.value(a).values()) total += v;
  return g.record(BasicTensor<T>({1}, total), {a}, [a](Graph<T>& gr, const BasicTensor<T>& dy) {
    gr.accumulate_grad(a, BasicTensor<T>(gr.value(a).shape(), dy[0]));
  });
}

template <typename T>
Var rms_norm(Graph<T>& g, Var x, Var gain, double eps) {
  const auto& xv = g.value(x);
  const auto& gv = g.value(gain);
  auto out = kernels::rms_norm(xv, gv, eps);
  return g.record(std::move(out), {x, gain}, [x, gain, eps](Graph<T>& gr, const BasicTensor<T>& dy) {
    const auto& xv2 = gr.value(x);
    const auto& gv2 = gr.value(gain);
    const std::size_t d = xv2.cols();
    const std::size_t rows = xv2.numel() / d;
    BasicTensor<T> dx(xv2.shape());
    BasicTensor<T> dg(gv2.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xv2.data() + r * d;
      const T* dyr = dy.data() + r * d;
      T ss{0};
      for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
      const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
      // y_j = g_j x_j inv;  dx_i = inv (g_i dy_i - x_i inv^2 / d * sum_j g_j dy_j x_j)
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) {
        dot += gv2[j] * dyr[j] * xr[j];
        dg[j] += dyr[j] * xr[j] * inv;
      }
      const T coef = inv * inv * inv / static_cast<T>(d) * dot;
      for (std::size_t j = 0; j < d; ++j) dx.data()[r * d + j] = gv2[j] * dyr[j] * inv - xr[j] * coef;
    }
    gr.accumulate_grad(x, dx);
    gr.accumulate_grad(gain, dg);
  });
}

template <typename T>
Var gelu(Graph<T>& g, Var x) {
  auto out = kernels::gelu(g.value(x));
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, const BasicTensor<T>& dy) {
    const auto& xv = gr.value(x);
    BasicTensor<T> dx(xv.shape());
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = dy[i] * kernels::gelu_grad(xv[i]);
    gr.accumulate_grad(x, dx);
  });
}

template <typename T>
Var embed(Graph<T>& g, Var table, std::span<const int> tokens) {
  auto out = kernels::embed(tokens, g.value(table));
  std::vector<int> saved(tokens.begin(), tokens.end());
  return g.record(std::move(out), {table}, [table, saved = std::move(saved)](Graph<T>& gr, const BasicTensor<T>& dy) {
    BasicTensor<T>& buf = gr.grad_buffer(table);
    const std::size_t d = buf.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      T* dst = buf.data() + static_cast<std::size_t>(saved[i]) * d;
      const T* src = dy.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

namespace {

template <typename T>
void rotate_rows(BasicTensor<T>& x, std::span<const int> positions, std::size_t n_heads, double base,
                 bool inverse) {
  const std::size_t d = x.cols();
  const std::size_t head_dim = d / n_heads;
  const std::size_t half = head_dim / 2;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const int pos = positions[r];
    if (pos < 0) continue;
    T* row = x.data() + r * d;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -static_cast<double>(2 * i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(pos) * freq;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      for (std::size_t h = 0; h < n_heads; ++h) {
        T* hp = row + h * head_dim;
        const T a = hp[i];
        const T b = hp[i + half];
        hp[i] = a * c - b * s;
        hp[i + half] = a * s + b * c;
      }
    }
  }
}

}  // namespace

template <typename T>
Var rope(Graph<T>& g, Var x, std::span<const int> positions, std::size_t n_heads, double base) {
  BasicTensor<T> out = g.value(x);
  if (positions.size() != out.rows()) throw TensorError("rope: one position per row required");
  if (n_heads == 0 || out.cols() % n_heads != 0 || (out.cols() / n_heads) % 2 != 0) {
    throw TensorError("rope: head width must be even");
  }
  rotate_rows(out, positions, n_heads, base, false);
  std::vector<int> saved(positions.begin(), positions.end());
  return g.record(std::move(out), {x},
                  [x, saved = std::move(saved), n_heads, base](Graph<T>& gr, const BasicTensor<T>& dy) {
                    BasicTensor<T> dx = dy;
                    rotate_rows(dx, saved, n_heads, base, true);
                    gr.accumulate_grad(x, dx);
                  });
}

template <typename T>
Var concat_rows(Graph<T>& g, std::span<const Var> parts) {
  if (parts.empty()) throw TensorError("concat_rows: nothing to concatenate");
  const std::size_t d = g.value(parts[0]).cols();
  std::size_t total = 0;
  for (Var p : parts) {
    if (g.value(p).cols() != d) throw TensorError("concat_rows: widths differ");
    total += g.value(p).rows();
  }
  BasicTensor<T> out({total, d});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    std::copy(v.data(), v.data() + v.numel(), out.data() + off * d);
    offsets.push_back(off);
    off += v.rows();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [saved, offsets](Graph<T>& gr, const BasicTensor<T>& dy) {
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (!gr.requires_grad(saved[i])) continue;
      const auto& v = gr.value(saved[i]);
      gr.accumulate_grad(saved[i], dy.slice_rows(offsets[i], v.rows()));
    }
  });
}

template <typename T>
Var slice_rows(Graph<T>& g, Var x, std::size_t begin, std::size_t count) {
  auto out = g.value(x).slice_rows(begin, count);
  return g.record(std::move(out), {x}, [x, begin](Graph<T>& gr, const BasicTensor<T>& dy) {
    BasicTensor<T>& buf = gr.grad_buffer(x);
    const std::size_t d = buf.cols();
    for (std::size_t i = 0; i < dy.numel(); ++i) buf.data()[begin * d + i] += dy[i];
  });
}

template <typename T>
Var gather_rows(Graph<T>& g, Var x, std::span<const std::size_t> rows) {
  const auto& xv = g.value(x);
  const std::size_t d = xv.cols();
  BasicTensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw TensorError("gather_rows: row out of range");
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return g.record(std::move(out), {x}, [x, saved = std::move(saved)](Graph<T>& gr, const BasicTensor<T>& dy) {
    BasicTensor<T>& buf = gr.grad_buffer(x);
    const std::size_t d2 = buf.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::size_t j = 0; j < d2; ++j) buf.data()[saved[i] * d2 + j] += dy.data()[i * d2 + j];
    }
  });
}

template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const int> targets) {
  const auto& lv = g.value(logits);
  const double loss = kernels::cross_entropy(lv, targets);
  std::vector<int> saved(targets.begin(), targets.end());
  return g.record(BasicTensor<T>({1}, static_cast<T>(loss)), {logits},
                  [logits, saved = std::move(saved)](Graph<T>& gr, const BasicTensor<T>& dy) {
                    const auto& lv2 = gr.value(logits);
                    const std::size_t vocab = lv2.cols();
                    std::size_t count = 0;
                    for (int t : saved) count += t != kernels::kIgnoreTarget;
                    BasicTensor<T>& buf = gr.grad_buffer(logits);
                    const double scale_factor = static_cast<double>(dy[0]) / static_cast<double>(count);
                    for (std::size_t r = 0; r < saved.size(); ++r) {
                      if (saved[r] == kernels::kIgnoreTarget) continue;
                      const auto lp = kernels::log_softmax_row(lv2, r);
                      for (std::size_t j = 0; j < vocab; ++j) {
                        double p = std::exp(lp[j]);
                        if (static_cast<int>(j) == saved[r]) p -= 1.0;
                        buf.data()[r * vocab + j] += static_cast<T>(p * scale_factor);
                      }
                    }
                  });
}

#define DYNPROMPT_INSTANTIATE(T)                                                        \
  template Var matmul(Graph<T>&, Var, Var);                                             \
  template Var matmul_nt(Graph<T>&, Var, Var);                                          \
  template Var add(Graph<T>&, Var, Var);                                                \
  template Var mul(Graph<T>&, Var, Var);                                                \
  template Var scale(Graph<T>&, Var, T);                                                \
  template Var sum(Graph<T>&, Var);                                                     \
  template Var rms_norm(Graph<T>&, Var, Var, double);                                   \
  template Var gelu(Graph<T>&, Var);                                                    \
  template Var embed(Graph<T>&, Var, std::span<const int>);                             \
  template Var rope(Graph<T>&, Var, std::span<const int>, std::size_t, double);         \
  template Var concat_rows(Graph<T>&, std::span<const Var>);                            \
  template Var slice_rows(Graph<T>&, Var, std::size_t, std::size_t);                    \
  template Var gather_rows(Graph<T>&, Var, std::span<const std::size_t>);               \
  template Var cross_entropy(Graph<T>&, Var, std::span<const int>);

DYNPROMPT_INSTANTIATE(float)
DYNPROMPT_INSTANTIATE(double)
#undef DYNPROMPT_INSTANTIATE

}  // namespace ag

FiniteDiffReport finite_diff_check(const std::function<Var(Graph<double>&)>& build_loss,
                                   std::span<Tensor64* const> params, double step,
                                   std::size_t max_entries_per_param) {
  Gradients<double> analytic;
  {
    Graph<double> g;
    const Var loss = build_loss(g);
    analytic = g.backward(loss);
  }
  auto evaluate = [&]() {
    Graph<double> g;
    const double v = g.value(build_loss(g))[0];
    if (!std::isfinite(v)) throw TensorError("finite_diff_check: non-finite loss evaluation");
    return v;
  };

  FiniteDiffReport report;
  for (Tensor64* p : params) {
    const std::size_t n = p->numel();
    const std::size_t limit = max_entries_per_param ? std::min(n, max_entries_per_param) : n;
    // Spread sampled entries evenly over the tensor.
    const std::size_t stride = std::max<std::size_t>(1, n / limit);
    const Tensor64* grad = analytic.contains(*p) ? &analytic.at(*p) : nullptr;
    for (std::size_t k = 0, i = 0; k < limit && i < n; ++k, i += stride) {
      const double saved = (*p)[i];
      (*p)[i] = saved + step;
      const double up = evaluate();
      (*p)[i] = saved - step;
      const double down = evaluate();
      (*p)[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grad ? (*grad)[i] : 0.0;
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
      ++report.entries_checked;
    }
  }
  return report;
}

}  // namespace dynprompt
