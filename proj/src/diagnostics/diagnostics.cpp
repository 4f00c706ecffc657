#include "dynprompt/diagnostics.hpp"

#include <cmath>
#include <sstream>

namespace dynprompt {

template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DiagnosticsError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template double cosine(std::span<const float>, std::span<const float>);
template double cosine(std::span<const double>, std::span<const double>);

std::string LayerSimilarity::csv() const {
  std::ostringstream os;
  os << "# attention compared over input queries and input keys, renormalized\n";
  os << "layer,attn_cos,act_cos\n";
  os.precision(9);
  for (std::size_t l = 0; l < activation.size(); ++l) os << l << ',' << attention[l] << ',' << activation[l] << '\n';
  return os.str();
}

namespace {

struct InputView {
  std::size_t first_row;  // local row of the first input token
  std::size_t first_key;  // key column of the first input token
  std::size_t n;
};

InputView input_view(const ForwardTrace<float>& t) {
  if (!t.layout.has_input()) throw DiagnosticsError("trace has no input segment");
  const std::size_t in_off = t.layout.input_offset();
  if (t.row_begin > in_off) throw DiagnosticsError("trace does not cover every input row");
  return {in_off - t.row_begin, t.extra_keys + in_off, t.layout.input_length()};
}

std::vector<double> input_attention_row(const Tensor& mean, std::size_t row, std::size_t first_key, std::size_t n) {
  std::vector<double> out(n);
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = mean.at(row, first_key + j);
    total += out[j];
  }
  if (total > 0) {
    for (double& v : out) v /= total;
  }
  return out;
}

}  // namespace

LayerSimilarity layer_similarity(const ForwardTrace<float>& baseline, const ForwardTrace<float>& variant) {
  if (baseline.layers.size() != variant.layers.size()) throw DiagnosticsError("layer count mismatch");
  if (baseline.layers.empty()) throw DiagnosticsError("traces hold no layers; run the forward with capture on");
  const InputView a = input_view(baseline);
  const InputView b = input_view(variant);
  if (a.n != b.n) throw DiagnosticsError("traces cover different input lengths");
  LayerSimilarity out;
  for (std::size_t l = 0; l < baseline.layers.size(); ++l) {
    const auto& la = baseline.layers[l];
    const auto& lb = variant.layers[l];
    double act = 0, att = 0;
    for (std::size_t i = 0; i < a.n; ++i) {
      act += cosine<float>(la.residual.row(a.first_row + i), lb.residual.row(b.first_row + i));
      const auto ra = input_attention_row(la.attention_mean, a.first_row + i, a.first_key, a.n);
      const auto rb = input_attention_row(lb.attention_mean, b.first_row + i, b.first_key, b.n);
      att += cosine<double>(ra, rb);
    }
    out.activation.push_back(act / static_cast<double>(a.n));
    out.attention.push_back(att / static_cast<double>(a.n));
  }
  return out;
}

ForwardTrace<float> Scorer::trace(std::span<const int> tokens) {
  (void)tokens;
  throw DiagnosticsError(name() + " scorer does not capture traces");
}

namespace {

class BaseScorer : public Scorer {
 public:
  explicit BaseScorer(const Weights<float>& w) : w_(w) {}
  Tensor logits(std::span<const int> tokens) override { return forward_tokens(w_, tokens).logits; }
  ForwardTrace<float> trace(std::span<const int> tokens) override {
    ForwardOptions<float> opt;
    opt.capture = true;
    return forward_tokens(w_, tokens, opt).trace;
  }
  std::string name() const override { return "base"; }

 private:
  const Weights<float>& w_;
};

class PromptScorer : public Scorer {
 public:
  PromptScorer(const Weights<float>& w, const SoftPrompt& p) : w_(w), p_(p) {}
  Tensor logits(std::span<const int> tokens) override { return single_prompt_forward(w_, p_, tokens).logits; }
  ForwardTrace<float> trace(std::span<const int> tokens) override {
    return single_prompt_forward(w_, p_, tokens, true).trace;
  }
  std::string name() const override { return "prompt"; }

 private:
  const Weights<float>& w_;
  const SoftPrompt& p_;
};

class ConcatScorer : public Scorer {
 public:
  ConcatScorer(const Weights<float>& w, const PromptBank& bank) : w_(w), bank_(bank) {}
  Tensor logits(std::span<const int> tokens) override { return concat_forward(w_, bank_, tokens).logits; }
  ForwardTrace<float> trace(std::span<const int> tokens) override {
    return concat_forward(w_, bank_, tokens, true).trace;
  }
  std::string name() const override { return "concat"; }

 private:
  const Weights<float>& w_;
  const PromptBank& bank_;
};

template <typename Hook>
class HookScorer : public Scorer {
 public:
  HookScorer(const Weights<float>& w, Hook hook, std::string name) : w_(w), hook_(std::move(hook)), name_(name) {}
  Tensor logits(std::span<const int> tokens) override { return run(tokens, false).logits; }
  ForwardTrace<float> trace(std::span<const int> tokens) override { return run(tokens, true).trace; }
  std::string name() const override { return name_; }

 private:
  ForwardResult<float> run(std::span<const int> tokens, bool capture) {
    ForwardOptions<float> opt;
    opt.hook = &hook_;
    opt.capture = capture;
    return forward_tokens(w_, tokens, opt);
  }
  const Weights<float>& w_;
  Hook hook_;
  std::string name_;
};

}  // namespace

std::unique_ptr<Scorer> make_base_scorer(const Weights<float>& w) { return std::make_unique<BaseScorer>(w); }

std::unique_ptr<Scorer> make_prompt_scorer(const Weights<float>& w, const SoftPrompt& p) {
  return std::make_unique<PromptScorer>(w, p);
}

std::unique_ptr<Scorer> make_concat_scorer(const Weights<float>& w, const PromptBank& bank) {
  return std::make_unique<ConcatScorer>(w, bank);
}

std::unique_ptr<Scorer> make_lora_scorer(const Weights<float>& w, const LoraAdapter<float>& a) {
  return std::make_unique<HookScorer<LoraHook<float>>>(w, apply_lora(w, a), "lora");
}

std::unique_ptr<Scorer> make_prefix_scorer(const Weights<float>& w, const PrefixSet<float>& p) {
  return std::make_unique<HookScorer<PrefixHook<float>>>(w, apply_prefix(w, p), "prefix");
}

IdpScorer::IdpScorer(const Weights<float>& w, const PromptBank& bank, SelectionConfig cfg)
    : w_(w), bank_(bank), cfg_(cfg), store_(build_prompt_cache(w, bank)) {
  cfg_.validate(bank.size());
}

Tensor IdpScorer::logits(std::span<const int> tokens) {
  auto out = idp_forward(w_, bank_, tokens, &store_, cfg_);
  records_.push_back(std::move(out.trace.selections));
  return std::move(out.logits);
}

ForwardTrace<float> IdpScorer::trace(std::span<const int> tokens) {
  auto out = idp_forward(w_, bank_, tokens, &store_, cfg_, true);
  records_.push_back(out.trace.selections);
  return std::move(out.trace);
}

double perplexity(Scorer& s, const std::vector<std::vector<int>>& corpus, const std::vector<std::vector<int>>& targets) {
  if (!targets.empty() && targets.size() != corpus.size()) throw DiagnosticsError("targets do not match corpus");
  double nll = 0;
  std::size_t count = 0;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    const auto& doc = corpus[d];
    if (doc.size() < 2) continue;
    const Tensor lg = s.logits(doc);
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
      int target = doc[i + 1];
      if (!targets.empty()) {
        target = targets[d].at(i);
        if (target == kernels::kIgnoreTarget) continue;
      }
      const auto lp = kernels::log_softmax_row(lg, i);
      if (target < 0 || static_cast<std::size_t>(target) >= lp.size()) throw DiagnosticsError("target out of vocabulary");
      nll -= lp[static_cast<std::size_t>(target)];
      ++count;
    }
  }
  if (count == 0) throw DiagnosticsError("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(count));
}

std::vector<double> option_scores(Scorer& s, const McItem& item, const McOptions& opt) {
  if (item.options.empty()) throw DiagnosticsError("multiple-choice item has no options");
  if (item.context.empty()) throw DiagnosticsError("multiple-choice item has no context");
  std::vector<double> scores;
  bool single = true;
  for (const auto& o : item.options) single = single && o.size() == 1;
  if (single) {
    // One forward over the context serves every single-token option.
    const Tensor lg = s.logits(item.context);
    const auto lp = kernels::log_softmax_row(lg, lg.rows() - 1);
    for (const auto& o : item.options) scores.push_back(lp.at(static_cast<std::size_t>(o[0])));
    return scores;
  }
  for (const auto& o : item.options) {
    if (o.empty()) throw DiagnosticsError("empty option");
    std::vector<int> seq = item.context;
    seq.insert(seq.end(), o.begin(), o.end());
    const Tensor lg = s.logits(seq);
    double total = 0;
    for (std::size_t k = 0; k < o.size(); ++k) {
      const auto lp = kernels::log_softmax_row(lg, item.context.size() + k - 1);
      total += lp.at(static_cast<std::size_t>(o[k]));
    }
    if (opt.length_normalize) total /= static_cast<double>(o.size());
    scores.push_back(total);
  }
  return scores;
}

EvalResult mc_accuracy(Scorer& s, const std::vector<McItem>& items, const McOptions& opt) {
  EvalResult r;
  std::size_t correct = 0;
  for (const auto& item : items) {
    const auto scores = option_scores(s, item, opt);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] > scores[best]) best = i;
    }
    r.predictions.push_back(best);
    const bool ok = best == item.answer;
    correct += ok;
    auto& d = r.per_domain[item.domain];
    d.first += ok;
    d.second += 1;
  }
  r.accuracy = items.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(items.size());
  return r;
}

double EvalResult::domain_accuracy(const std::string& d) const {
  auto it = per_domain.find(d);
  if (it == per_domain.end() || it->second.second == 0) return 0.0;
  return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
}

std::string EvalResult::csv() const {
  std::ostringstream os;
  os << "group,correct,total,accuracy\n";
  std::size_t c = 0, t = 0;
  for (const auto& [name, ct] : per_domain) {
    os << name << ',' << ct.first << ',' << ct.second << ',' << domain_accuracy(name) << '\n';
    c += ct.first;
    t += ct.second;
  }
  os << "all," << c << ',' << t << ',' << accuracy << '\n';
  return os.str();
}

}  // namespace dynprompt
