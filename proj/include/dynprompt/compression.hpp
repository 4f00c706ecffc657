#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dynprompt/model.hpp"

namespace dynprompt {

class CompressionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Symmetric round-to-nearest with one scale per output channel (column of W[d_in x d_out]).
struct QuantSpec {
  int bits = 8;
  void validate() const;
};

struct PruneSpec {
  double sparsity = 0.5;
  void validate() const;
};

struct MatrixReport {
  std::string name;
  std::string method;  // "rtn" or "prune"
  double setting = 0;  // bits or sparsity
  double max_abs_error = 0;
  double mse = 0;
  double achieved_sparsity = 0;
};

struct CompressionReport {
  std::vector<MatrixReport> matrices;
  std::string csv() const;
};

struct Quantized {
  Tensor weights;
  std::vector<double> scales;  // per output channel
  MatrixReport report;
};

Quantized quantize_rtn(const Tensor& w, const QuantSpec& spec);

struct Pruned {
  Tensor weights;
  MatrixReport report;
};

// Zeroes the floor(s * numel) smallest-magnitude entries; ties go to the lower flat index.
Pruned prune_magnitude(const Tensor& w, const PruneSpec& spec);

struct CompressedModel {
  Weights<float> weights;
  CompressionReport report;
};

// Applies to Q, K, V, O, up and down of every layer. Embeddings and norms are untouched.
CompressedModel compress_model(const Weights<float>& w, const QuantSpec& spec);
CompressedModel compress_model(const Weights<float>& w, const PruneSpec& spec);

}  // namespace dynprompt
