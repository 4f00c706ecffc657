#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynprompt {

using Shape = std::vector<std::size_t>;

// Thrown for contract violations on tensor shapes and values.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);

// 64-bit FNV-1a, chainable through the state argument.
inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t state = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    state ^= p[i];
    state *= 1099511628211ull;
  }
  return state;
}

// Dense row-major array. Rank is usually 1 or 2; attention maps are rank 3.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows);
  static BasicTensor vector(std::initializer_list<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-2 helpers. rows() of a rank-1 tensor is 1.
  std::size_t rows() const;
  std::size_t cols() const;

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r);
  std::span<const T> row(std::size_t r) const;

  BasicTensor reshaped(Shape shape) const;
  // Rows [begin, begin + count) of a rank-2 tensor.
  BasicTensor slice_rows(std::size_t begin, std::size_t count) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;
  void fill(T value);

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Additive-mask sentinel for a forbidden attention entry. It survives row-max
// subtraction and is mapped to an exact zero weight. -infinity is accepted too.
inline constexpr float kMaskedOut = -1.0e30f;

inline bool is_masked(float mask_value) { return mask_value <= kMaskedOut * 0.5f; }

// Multiply-accumulate instrumentation. Forward kernels add their MAC count to a
// per-thread counter; MacScope measures the delta over its lifetime.
std::uint64_t& mac_counter();

class MacScope {
 public:
  MacScope() : start_(mac_counter()) {}
  std::uint64_t count() const { return mac_counter() - start_; }

 private:
  std::uint64_t start_;
};

namespace kernels {

// c = a x b, a [m x k], b [k x n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// c = a x b^T, a [m x k], b [n x k]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
// c = a^T x b, a [k x m], b [k x n]
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Row softmax of x + mask over the last axis. Masked entries come out exactly 0.
// Throws TensorError when any row has no unmasked entry.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x, const Tensor& mask);
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> embed(std::span<const int> tokens, const BasicTensor<T>& table);

// Mean negative log-likelihood over rows whose target is not kIgnoreTarget.
inline constexpr int kIgnoreTarget = -1;
template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

// log-softmax of each row, computed in double.
template <typename T>
std::vector<double> log_softmax_row(const BasicTensor<T>& logits, std::size_t row);

}  // namespace kernels

}  // namespace dynprompt
