#include "dynprompt/compression.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dynprompt {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8) throw CompressionError("bits must be in [2, 8], got " + std::to_string(bits));
}

void PruneSpec::validate() const {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw CompressionError("sparsity must be in [0, 1)");
}

namespace {

void fill_errors(const Tensor& before, const Tensor& after, MatrixReport& r) {
  double max_err = 0, sq = 0;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < before.numel(); ++i) {
    const double e = std::abs(static_cast<double>(before[i]) - static_cast<double>(after[i]));
    max_err = std::max(max_err, e);
    sq += e * e;
    zeros += after[i] == 0.0f;
  }
  r.max_abs_error = max_err;
  r.mse = before.numel() ? sq / static_cast<double>(before.numel()) : 0.0;
  r.achieved_sparsity = before.numel() ? static_cast<double>(zeros) / static_cast<double>(before.numel()) : 0.0;
}

}  // namespace

Quantized quantize_rtn(const Tensor& w, const QuantSpec& spec) {
  spec.validate();
  if (w.empty()) throw CompressionError("cannot quantize an empty matrix");
  const std::size_t rows = w.rank() == 2 ? w.rows() : w.numel();
  const std::size_t cols = w.rank() == 2 ? w.cols() : 1;
  const double qmax = static_cast<double>((1 << (spec.bits - 1)) - 1);
  Quantized q{w, std::vector<double>(cols, 0.0), {}};
  for (std::size_t c = 0; c < cols; ++c) {
    float amax = 0.0f;
    for (std::size_t r = 0; r < rows; ++r) amax = std::max(amax, std::abs(w[r * cols + c]));
    // Scale in double: the largest dequantized value rounds back to amax in
    // float, so a second pass sees the same scale and reproduces W' bitwise.
    const double scale = static_cast<double>(amax) / qmax;
    q.scales[c] = scale;
    if (scale == 0.0) continue;
    for (std::size_t r = 0; r < rows; ++r) {
      const double level = std::clamp(std::nearbyint(static_cast<double>(w[r * cols + c]) / scale), -qmax, qmax);
      q.weights[r * cols + c] = static_cast<float>(level * scale);
    }
  }
  q.report.method = "rtn";
  q.report.setting = spec.bits;
  fill_errors(w, q.weights, q.report);
  return q;
}

Pruned prune_magnitude(const Tensor& w, const PruneSpec& spec) {
  spec.validate();
  const std::size_t n = w.numel();
  const auto k = static_cast<std::size_t>(std::floor(spec.sparsity * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(w[a]) < std::abs(w[b]); });
  Pruned p{w, {}};
  for (std::size_t i = 0; i < k; ++i) p.weights[order[i]] = 0.0f;
  p.report.method = "prune";
  p.report.setting = spec.sparsity;
  fill_errors(w, p.weights, p.report);
  // Report the pruned fraction by construction, not by counting zeros that were already there.
  p.report.achieved_sparsity = n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
  return p;
}

namespace {

template <typename F>
CompressedModel compress_each(const Weights<float>& w, F&& fn) {
  CompressedModel out{w, {}};
  for (std::size_t l = 0; l < out.weights.layers.size(); ++l) {
    for (Projection p : kAllProjections) {
      Tensor& t = out.weights.layers[l].projection(p);
      MatrixReport r = fn(t);
      r.name = layer_tensor_name(l, projection_name(p));
      out.report.matrices.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace

CompressedModel compress_model(const Weights<float>& w, const QuantSpec& spec) {
  spec.validate();
  return compress_each(w, [&](Tensor& t) {
    auto q = quantize_rtn(t, spec);
    t = std::move(q.weights);
    return q.report;
  });
}

CompressedModel compress_model(const Weights<float>& w, const PruneSpec& spec) {
  spec.validate();
  return compress_each(w, [&](Tensor& t) {
    auto p = prune_magnitude(t, spec);
    t = std::move(p.weights);
    return p.report;
  });
}

std::string CompressionReport::csv() const {
  std::ostringstream os;
  os << "matrix,method,setting,max_abs_error,mse,sparsity\n";
  os.precision(9);
  for (const auto& m : matrices) {
    os << m.name << ',' << m.method << ',' << m.setting << ',' << m.max_abs_error << ',' << m.mse << ','
       << m.achieved_sparsity << '\n';
  }
  return os.str();
}

}  // namespace dynprompt
