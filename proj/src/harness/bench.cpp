#include <algorithm>
#include <chrono>
#include <memory>
#include <sstream>

#include "dynprompt/harness.hpp"
#include "dynprompt/rng.hpp"

namespace dynprompt {

void BenchConfig::validate() const {
  model.validate();
  if (warmup < 3) throw HarnessError("latency bench needs at least 3 warmup iterations");
  if (iterations < 1 || batch < 1 || input_length < 1) throw HarnessError("bench extents must be positive");
  if (prompt_length < 1 || second_prompt_length < 1) throw HarnessError("bench prompts must be non-empty");
  if (prompt_length + second_prompt_length + input_length + decode_tokens > model.max_seq_len) {
    throw HarnessError("bench sequence exceeds max_seq_len");
  }
}

double median(std::vector<double> v) { return percentile(std::move(v), 0.5); }

double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  // nearest rank
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

std::uint64_t lora_extra_macs(const ModelConfig& cfg, std::size_t rank, std::size_t tokens) {
  std::uint64_t per_token = 0;
  for (Projection p : kAllProjections) {
    const auto [din, dout] = projection_shape(cfg, p);
    per_token += rank * (din + dout);
  }
  return per_token * cfg.n_layers * tokens;
}

namespace {

// One decode stream: prefill once, then single-token steps.
class Stream {
 public:
  virtual ~Stream() = default;
  virtual void prefill(std::span<const int> tokens) = 0;
  virtual void step(int token) = 0;
};

class PlainStream : public Stream {
 public:
  PlainStream(const Weights<float>& w, std::size_t capacity, ForwardHook<float>* hook)
      : w_(w), cache_(w.config, capacity) {
    opt_.cache = &cache_;
    opt_.hook = hook;
  }
  void prefill(std::span<const int> tokens) override { forward_tokens(w_, tokens, opt_); }
  void step(int token) override { forward_tokens(w_, std::span<const int>(&token, 1), opt_); }

 private:
  const Weights<float>& w_;
  KVCache<float> cache_;
  ForwardOptions<float> opt_;
};

// Prompt rows recomputed at prefill.
class UncachedPromptStream : public Stream {
 public:
  UncachedPromptStream(const Weights<float>& w, std::vector<const Tensor*> prompts, AttentionPolicy policy,
                       std::size_t capacity)
      : w_(w), prompts_(std::move(prompts)), cache_(w.config, capacity) {
    opt_.cache = &cache_;
    opt_.policy = policy;
  }
  void prefill(std::span<const int> tokens) override {
    auto p = prepend_prompts<float>(prompts_, kernels::embed(tokens, w_.embedding));
    layout_ = p.layout;
    forward(w_, p.embeddings, layout_, opt_);
  }
  void step(int token) override {
    layout_.set_input(layout_.input_length() + 1);
    forward(w_, kernels::embed(std::span<const int>(&token, 1), w_.embedding), layout_, opt_);
  }

 private:
  const Weights<float>& w_;
  std::vector<const Tensor*> prompts_;
  KVCache<float> cache_;
  SegmentLayout layout_;
  ForwardOptions<float> opt_;
};

class SessionStream : public Stream {
 public:
  SessionStream(const Weights<float>& w, const PromptBank& bank, const PromptKVStore<float>& store)
      : s_(w, bank, store, SelectionConfig{}) {}
  void prefill(std::span<const int> tokens) override { s_.prefill(tokens); }
  void step(int token) override { s_.step(token); }

 private:
  IdpSession s_;
};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

BenchReport latency_bench(const BenchConfig& cfg) {
  cfg.validate();
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  const auto w = Weights<float>::init(mc);
  Rng rng(cfg.seed ^ 0xd1b54a32d192ed03ull);
  auto random_prompt = [&](std::size_t n, const char* id) {
    SoftPrompt p{id, Tensor({n, mc.d_model}), "", 0};
    for (auto& v : p.embedding.values()) v = static_cast<float>(0.3 * rng.normal());
    return p;
  };
  const PromptBank single({random_prompt(cfg.prompt_length, "p0")});
  const PromptBank pair({single.at(0), random_prompt(cfg.second_prompt_length, "p1")});
  const auto single_store = build_prompt_cache(w, single);
  const auto pair_store = build_prompt_cache(w, pair);
  auto lora = LoraAdapter<float>::init(mc, cfg.lora_rank, cfg.seed);
  // Non-zero B so the adapter does real work.
  lora.for_each([&](const std::string&, Tensor& t) {
    for (auto& v : t.values()) v = static_cast<float>(0.01 * rng.normal());
  });
  auto lora_hook = apply_lora(w, lora);

  std::vector<std::vector<int>> inputs(cfg.batch);
  for (auto& in : inputs) {
    for (std::size_t i = 0; i < cfg.input_length + cfg.decode_tokens; ++i) {
      in.push_back(static_cast<int>(rng.below(mc.vocab_size)));
    }
  }
  const std::size_t cap = cfg.input_length + cfg.decode_tokens;
  const std::vector<const Tensor*> one{&single.at(0).embedding};
  const std::vector<const Tensor*> both{&pair.at(0).embedding, &pair.at(1).embedding};

  using Factory = std::function<std::unique_ptr<Stream>()>;
  const std::vector<std::pair<std::string, Factory>> policies{
      {"no_prompt", [&] { return std::make_unique<PlainStream>(w, cap, nullptr); }},
      {"single_prompt_uncached",
       [&] {
         return std::make_unique<UncachedPromptStream>(w, one, AttentionPolicy::single_prompt,
                                                       cap + cfg.prompt_length);
       }},
      {"single_prompt_cached", [&] { return std::make_unique<SessionStream>(w, single, single_store); }},
      {"idp_cached", [&] { return std::make_unique<SessionStream>(w, pair, pair_store); }},
      {"concat",
       [&] {
         return std::make_unique<UncachedPromptStream>(w, both, AttentionPolicy::naive_concat,
                                                       cap + cfg.prompt_length + cfg.second_prompt_length);
       }},
      {"lora", [&] { return std::make_unique<PlainStream>(w, cap, &lora_hook); }},
  };

  BenchReport report;
  for (const auto& [name, make] : policies) {
    BenchRow row;
    row.policy = name;
    {
      auto s = make();
      const std::span<const int> in(inputs[0]);
      MacScope m;
      s->prefill(in.subspan(0, cfg.input_length));
      row.prefill_macs = m.count();
      if (cfg.decode_tokens > 0) {
        MacScope d;
        s->step(in[cfg.input_length]);
        row.decode_macs = d.count();
      }
    }
    std::vector<double> prefill_ms, decode_ms;
    for (std::size_t it = 0; it < cfg.warmup + cfg.iterations; ++it) {
      std::vector<std::unique_ptr<Stream>> streams;
      for (std::size_t b = 0; b < cfg.batch; ++b) streams.push_back(make());
      auto t0 = Clock::now();
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        streams[b]->prefill(std::span<const int>(inputs[b]).subspan(0, cfg.input_length));
      }
      const double pre = ms_since(t0);
      t0 = Clock::now();
      for (std::size_t k = 0; k < cfg.decode_tokens; ++k) {
        for (std::size_t b = 0; b < cfg.batch; ++b) streams[b]->step(inputs[b][cfg.input_length + k]);
      }
      const double dec = cfg.decode_tokens ? ms_since(t0) / static_cast<double>(cfg.decode_tokens) : 0.0;
      if (it < cfg.warmup) continue;
      prefill_ms.push_back(pre);
      decode_ms.push_back(dec);
    }
    row.prefill_median_ms = median(prefill_ms);
    row.prefill_p90_ms = percentile(prefill_ms, 0.9);
    row.decode_median_ms = median(decode_ms);
    row.decode_p90_ms = percentile(decode_ms, 0.9);
    report.rows.push_back(row);
  }
  return report;
}

const BenchRow& BenchReport::row(const std::string& policy) const {
  for (const auto& r : rows) {
    if (r.policy == policy) return r;
  }
  throw HarnessError("no bench row for policy " + policy);
}

std::string BenchReport::csv() const {
  std::ostringstream os;
  os << "policy,prefill_median_ms,prefill_p90_ms,decode_median_ms,decode_p90_ms,prefill_macs,decode_macs\n";
  for (const auto& r : rows) {
    os << r.policy << ',' << r.prefill_median_ms << ',' << r.prefill_p90_ms << ',' << r.decode_median_ms << ','
       << r.decode_p90_ms << ',' << r.prefill_macs << ',' << r.decode_macs << '\n';
  }
  return os.str();
}

}  // namespace dynprompt
