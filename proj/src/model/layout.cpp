#include <algorithm>

#include "dynprompt/model.hpp"

namespace dynprompt {

SegmentLayout SegmentLayout::input_only(std::size_t input_length) {
  SegmentLayout l;
  l.set_input(input_length);
  return l;
}

SegmentLayout SegmentLayout::with_prompts(std::span<const std::size_t> prompt_lengths, std::size_t input_length) {
  SegmentLayout l;
  for (std::size_t n : prompt_lengths) l.add_prompt(n);
  l.set_input(input_length);
  return l;
}

void SegmentLayout::add_prompt(std::size_t length) {
  if (length == 0) throw ModelError("segment lengths must be >= 1");
  if (input_segment_) throw ModelError("prompt segments must precede the input");
  prompt_offsets_.push_back(total());
  segments_.push_back({SegmentKind::prompt, prompt_offsets_.size() - 1, length});
}

void SegmentLayout::set_input(std::size_t length) {
  if (length == 0) throw ModelError("segment lengths must be >= 1");
  if (input_segment_) {
    segments_[*input_segment_].length = length;
    return;
  }
  input_segment_ = segments_.size();
  segments_.push_back({SegmentKind::input, 0, length});
}

std::size_t SegmentLayout::total() const {
  std::size_t n = 0;
  for (const auto& s : segments_) n += s.length;
  return n;
}

std::size_t SegmentLayout::prompt_tokens() const {
  return has_input() ? input_offset() : total();
}

std::size_t SegmentLayout::prompt_offset(std::size_t i) const {
  if (i >= prompt_offsets_.size()) throw ModelError("prompt index out of range");
  return prompt_offsets_[i];
}

std::size_t SegmentLayout::prompt_length(std::size_t i) const {
  if (i >= prompt_offsets_.size()) throw ModelError("prompt index out of range");
  return segments_[i].length;
}

std::size_t SegmentLayout::input_offset() const {
  if (!input_segment_) throw ModelError("layout has no input segment");
  return total() - segments_[*input_segment_].length;
}

std::size_t SegmentLayout::input_length() const {
  return input_segment_ ? segments_[*input_segment_].length : 0;
}

std::optional<std::size_t> SegmentLayout::prompt_of(std::size_t row) const {
  for (std::size_t i = 0; i < prompt_offsets_.size(); ++i) {
    if (row >= prompt_offsets_[i] && row < prompt_offsets_[i] + segments_[i].length) return i;
  }
  return std::nullopt;
}

const char* policy_name(AttentionPolicy p) {
  switch (p) {
    case AttentionPolicy::dense_causal: return "dense_causal";
    case AttentionPolicy::single_prompt: return "single_prompt";
    case AttentionPolicy::naive_concat: return "naive_concat";
    case AttentionPolicy::idp: return "idp";
  }
  return "?";
}

Tensor build_mask(const SegmentLayout& layout, AttentionPolicy policy) {
  const std::size_t tk = layout.total();
  Tensor mask({tk, tk}, kMaskedOut);
  const bool isolate = policy == AttentionPolicy::single_prompt || policy == AttentionPolicy::idp;
  if (policy == AttentionPolicy::single_prompt && layout.prompt_count() > 1) {
    throw ModelError("single_prompt policy takes at most one prompt");
  }
  if (policy == AttentionPolicy::dense_causal && layout.prompt_count() > 0) {
    throw ModelError("dense_causal policy takes no prompts");
  }
  if (!isolate) {
    for (std::size_t i = 0; i < tk; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask.at(i, j) = 0.0f;
    }
    return mask;
  }
  for (std::size_t p = 0; p < layout.prompt_count(); ++p) {
    const std::size_t off = layout.prompt_offset(p);
    const std::size_t n = layout.prompt_length(p);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask.at(off + i, off + j) = 0.0f;
    }
  }
  if (layout.has_input()) {
    const std::size_t off = layout.input_offset();
    for (std::size_t i = off; i < tk; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask.at(i, j) = 0.0f;
    }
  }
  return mask;
}

std::vector<int> layout_positions(const SegmentLayout& layout, bool prompt_positions, std::size_t offset) {
  const std::size_t tk = layout.total();
  std::vector<int> pos(tk, ag::kNoPosition);
  if (prompt_positions) {
    for (std::size_t i = 0; i < tk; ++i) pos[i] = static_cast<int>(offset + i);
    return pos;
  }
  if (layout.has_input()) {
    const std::size_t off = layout.input_offset();
    for (std::size_t i = off; i < tk; ++i) pos[i] = static_cast<int>(i - off);
  }
  return pos;
}

template <typename T>
KVCache<T>::KVCache(const ModelConfig& cfg, std::size_t capacity) : capacity_(capacity), d_model_(cfg.d_model) {
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    keys_.emplace_back(Shape{capacity, cfg.d_model});
    values_.emplace_back(Shape{capacity, cfg.d_model});
  }
}

template <typename T>
BasicTensor<T> KVCache<T>::rows(const std::vector<BasicTensor<T>>& src, std::size_t layer,
                                std::size_t count) const {
  if (layer >= src.size()) throw ModelError("cache layer out of range");
  return src[layer].slice_rows(0, count);
}

template <typename T>
BasicTensor<T> KVCache<T>::keys(std::size_t layer, std::size_t begin, std::size_t count) const {
  if (begin + count > watermark_) throw ModelError("cache read past watermark");
  return keys_.at(layer).slice_rows(begin, count);
}

template <typename T>
BasicTensor<T> KVCache<T>::values(std::size_t layer, std::size_t begin, std::size_t count) const {
  if (begin + count > watermark_) throw ModelError("cache read past watermark");
  return values_.at(layer).slice_rows(begin, count);
}

template <typename T>
void KVCache<T>::write(std::size_t layer, const BasicTensor<T>& k, const BasicTensor<T>& v) {
  if (layer >= keys_.size()) throw ModelError("cache layer out of range");
  if (k.shape() != v.shape() || k.cols() != d_model_) throw ModelError("cache write shape mismatch");
  const std::size_t n = k.rows();
  if (watermark_ + n > capacity_) throw ModelError("KV cache capacity exceeded");
  std::copy(k.data(), k.data() + k.numel(), keys_[layer].data() + watermark_ * d_model_);
  std::copy(v.data(), v.data() + v.numel(), values_[layer].data() + watermark_ * d_model_);
}

template <typename T>
void KVCache<T>::advance(std::size_t n) {
  if (watermark_ + n > capacity_) throw ModelError("KV cache capacity exceeded");
  watermark_ += n;
}

template <typename T>
void KVCache<T>::append(const KVCache& other) {
  if (other.n_layers() != n_layers() || other.d_model_ != d_model_) throw ModelError("cache geometry mismatch");
  for (std::size_t l = 0; l < n_layers(); ++l) write(l, other.keys(l), other.values(l));
  advance(other.watermark());
}

template class KVCache<float>;
template class KVCache<double>;

}  // namespace dynprompt
