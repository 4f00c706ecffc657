#include "dynprompt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dynprompt {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw TensorError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_string(shape_));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(n_rows * n_cols);
  for (const auto& r : rows) {
    if (r.size() != n_cols) throw TensorError("ragged rows in from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return BasicTensor({n_rows, n_cols}, std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::vector(std::initializer_list<T> values) {
  return BasicTensor({values.size()}, std::vector<T>(values));
}

template <typename T>
std::size_t BasicTensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw TensorError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw TensorError("rows() needs a rank-2 tensor, got " + shape_string(shape_));
  return shape_[0];
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  if (shape_.empty()) return 0;
  return shape_.back();
}

template <typename T>
std::span<T> BasicTensor<T>::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<T>(data_.data() + r * c, c);
}

template <typename T>
std::span<const T> BasicTensor<T>::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const T>(data_.data() + r * c, c);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows()) throw TensorError("slice_rows out of range");
  const std::size_t c = cols();
  std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                     data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return BasicTensor({count, c}, std::move(out));
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

std::uint64_t& mac_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

namespace kernels {

namespace {

void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw TensorError(std::string(what) + ": expected rank-2 tensor, got " + shape_string(s));
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw TensorError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      if (av == T{0}) continue;
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a.shape(), "matmul_nt");
  require_rank2(b.shape(), "matmul_nt");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  if (b.extent(1) != k) {
    throw TensorError("matmul_nt: inner extents differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()) + "^T");
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a.shape(), "matmul_tn");
  require_rank2(b.shape(), "matmul_tn");
  const std::size_t k = a.extent(0), m = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw TensorError("matmul_tn: inner extents differ " + shape_string(a.shape()) + "^T x " +
                      shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = pa + p * m;
    const T* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const Tensor& mask) {
  if (!mask.empty() && mask.shape() != x.shape()) {
    throw TensorError("softmax_rows: mask shape " + shape_string(mask.shape()) + " differs from " +
                      shape_string(x.shape()));
  }
  const std::size_t n = x.cols();
  const std::size_t rows = n ? x.numel() / n : 0;
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * n;
    const float* m = mask.empty() ? nullptr : mask.data() + r * n;
    T* o = out.data() + r * n;
    T max_v = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (m && is_masked(m[j])) continue;
      const T v = in[j] + (m ? static_cast<T>(m[j]) : T{0});
      max_v = any ? std::max(max_v, v) : v;
      any = true;
    }
    if (!any) throw TensorError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    // exponentials kept in double so the result does not depend on which key set set the max
    std::vector<double> e(n, 0.0);
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (m && is_masked(m[j])) continue;
      e[j] = std::exp(static_cast<double>(in[j] + (m ? static_cast<T>(m[j]) : T{0})) - static_cast<double>(max_v));
      sum += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(e[j] / sum);
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  return softmax_rows(x, Tensor{});
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d) throw TensorError("rms_norm: gain length differs from row width");
  BasicTensor<T> out(x.shape());
  const std::size_t rows = d ? x.numel() / d : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T* o = out.data() + r * d;
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) o[j] = in[j] * inv * gain[j];
  }
  return out;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2.0 * 3.14159265358979323846));
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = gelu(x[i]);
  return out;
}

template <typename T>
BasicTensor<T> embed(std::span<const int> tokens, const BasicTensor<T>& table) {
  require_rank2(table.shape(), "embed");
  const std::size_t vocab = table.extent(0), d = table.extent(1);
  BasicTensor<T> out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw TensorError("embed: token " + std::to_string(t) + " outside vocabulary of " +
                        std::to_string(vocab));
    }
    std::copy_n(table.data() + static_cast<std::size_t>(t) * d, d, out.data() + i * d);
  }
  return out;
}

template <typename T>
std::vector<double> log_softmax_row(const BasicTensor<T>& logits, std::size_t row) {
  const auto r = logits.row(row);
  double max_v = -std::numeric_limits<double>::infinity();
  for (T v : r) max_v = std::max(max_v, static_cast<double>(v));
  double sum = 0.0;
  for (T v : r) sum += std::exp(static_cast<double>(v) - max_v);
  const double log_z = max_v + std::log(sum);
  std::vector<double> out(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) out[j] = static_cast<double>(r[j]) - log_z;
  return out;
}

template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  require_rank2(logits.shape(), "cross_entropy");
  if (targets.size() != logits.extent(0)) throw TensorError("cross_entropy: one target per row required");
  const std::size_t vocab = logits.extent(1);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int t = targets[r];
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw TensorError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
    }
    total -= log_softmax_row(logits, r)[static_cast<std::size_t>(t)];
    ++count;
  }
  if (count == 0) throw TensorError("cross_entropy: no target positions");
  return total / static_cast<double>(count);
}

#define DYNPROMPT_INSTANTIATE(T)                                                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&, const Tensor&);             \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                            \
  template BasicTensor<T> rms_norm(const BasicTensor<T>&, const BasicTensor<T>&, double); \
  template T gelu(T);                                                                     \
  template T gelu_grad(T);                                                                \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                    \
  template BasicTensor<T> embed(std::span<const int>, const BasicTensor<T>&);             \
  template std::vector<double> log_softmax_row(const BasicTensor<T>&, std::size_t);       \
  template double cross_entropy(const BasicTensor<T>&, std::span<const int>);

DYNPROMPT_INSTANTIATE(float)
DYNPROMPT_INSTANTIATE(double)
#undef DYNPROMPT_INSTANTIATE

}  // namespace kernels

}  // namespace dynprompt
