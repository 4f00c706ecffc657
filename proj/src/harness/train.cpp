#include <cmath>

#include "dynprompt/harness.hpp"
#include "dynprompt/rng.hpp"

namespace dynprompt {

void TrainConfig::validate() const {
  if (batch == 0) throw HarnessError("batch must be positive");
  if (!(lr > 0.0) || weight_decay < 0.0) throw HarnessError("learning rate must be positive and decay non-negative");
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw HarnessError("AdamW: parameter and gradient counts differ");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) throw HarnessError("AdamW: gradient shape mismatch");
    auto& st = state_[&p];
    if (st.m.shape() != p.shape()) {
      st.m = Tensor(p.shape());
      st.v = Tensor(p.shape());
    }
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = g[j];
      const double m = cfg_.beta1 * st.m[j] + (1.0 - cfg_.beta1) * gj;
      const double v = cfg_.beta2 * st.v[j] + (1.0 - cfg_.beta2) * gj * gj;
      st.m[j] = static_cast<float>(m);
      st.v[j] = static_cast<float>(v);
      double w = p[j] * (1.0 - cfg_.lr * cfg_.weight_decay);
      w -= cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      p[j] = static_cast<float>(w);
    }
  }
}

TrainLog train_loop(const std::vector<Tensor*>& params, std::size_t n_examples,
                    const std::function<Var(Graph<float>&, std::size_t)>& loss, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.steps > 0 && n_examples == 0) throw HarnessError("no training examples");
  AdamW opt(cfg);
  Rng rng(cfg.seed ^ 0x7f4a7c159e3779b9ull);
  TrainLog log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> grads;
    for (const Tensor* p : params) grads.emplace_back(p->shape());
    double total = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Graph<float> g;
      const Var l = loss(g, rng.below(n_examples));
      total += g.value(l)[0];
      const auto gr = g.backward(l);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!gr.contains(*params[i])) continue;
        const Tensor& src = gr.at(*params[i]);
        for (std::size_t j = 0; j < src.numel(); ++j) grads[i][j] += src[j];
      }
    }
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    for (auto& gt : grads) {
      for (auto& v : gt.values()) v *= inv;
    }
    opt.step(params, grads);
    log.losses.push_back(total / static_cast<double>(cfg.batch));
  }
  return log;
}

namespace {

Var example_loss(Transformer<float>& tf, const Example& ex, ForwardHook<float>* hook) {
  ForwardOptions<float> opt;
  opt.hook = hook;
  auto out = tf.forward(tf.embed(ex.tokens), SegmentLayout::input_only(ex.tokens.size()), opt);
  return ag::cross_entropy(tf.graph(), out.logits, ex.targets);
}

}  // namespace

Weights<float> pretrain_base(const ModelConfig& cfg, const TaskData& task, const TrainConfig& train, TrainLog* log) {
  if (cfg.vocab_size < task.vocab) throw HarnessError("model vocabulary smaller than the task vocabulary");
  Weights<float> w = Weights<float>::init(cfg);
  w.set_all_trainable(true);
  std::vector<Tensor*> params;
  w.for_each([&](const std::string&, Tensor& t) { params.push_back(&t); });
  const auto examples = task.corpus_examples();
  for (const auto& ex : examples) {
    if (ex.tokens.size() > cfg.max_seq_len) throw HarnessError("document longer than max_seq_len");
  }
  auto l = train_loop(params, examples.size(), [&](Graph<float>& g, std::size_t i) {
    Transformer<float> tf(g, w);
    return example_loss(tf, examples[i], nullptr);
  }, train);
  if (log) *log = std::move(l);
  w.set_all_trainable(false);
  return w;
}

SoftPrompt tune_prompt(const Weights<float>& w, const std::vector<Example>& data, std::size_t length,
                       const TrainConfig& train, const std::string& id, TrainLog* log,
                       const std::vector<int>& init_tokens) {
  if (length == 0) throw HarnessError("prompt length must be positive");
  if (init_tokens.empty()) throw HarnessError("prompt init needs at least one token");
  for (int t : init_tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= w.config.vocab_size) throw HarnessError("prompt init token out of vocabulary");
  }
  Rng rng(train.seed ^ 0x2545f4914f6cdd1dull);
  SoftPrompt p{id, Tensor({length, w.config.d_model}), "", train.steps};
  for (std::size_t r = 0; r < length; ++r) {
    for (std::size_t c = 0; c < w.config.d_model; ++c) {
      const auto tok = static_cast<std::size_t>(init_tokens[r % init_tokens.size()]);
      p.embedding.at(r, c) = w.embedding.at(tok, c) + static_cast<float>(0.01 * rng.normal());
    }
  }
  auto l = train_loop({&p.embedding}, data.size(), [&](Graph<float>& g, std::size_t i) {
    Transformer<float> tf(g, w, true);
    SegmentLayout layout;
    std::array<Var, 1> ps{g.parameter(p.embedding, true)};
    Var x = prepend_prompts<float>(g, ps, tf.embed(data[i].tokens), layout);
    ForwardOptions<float> opt;
    opt.policy = AttentionPolicy::single_prompt;
    return ag::cross_entropy(g, tf.forward(x, layout, opt).logits, data[i].targets);
  }, train);
  if (log) *log = std::move(l);
  return p;
}

LoraAdapter<float> tune_lora(const Weights<float>& w, const std::vector<Example>& data, std::size_t rank,
                             const TrainConfig& train, TrainLog* log) {
  auto lora = LoraAdapter<float>::init(w.config, rank, train.seed ^ 0x94d049bb133111ebull);
  std::vector<Tensor*> params;
  lora.for_each([&](const std::string&, Tensor& t) { params.push_back(&t); });
  auto l = train_loop(params, data.size(), [&](Graph<float>& g, std::size_t i) {
    auto hook = apply_lora(w, lora, true);
    hook.bind(g);
    Transformer<float> tf(g, w, true);
    return example_loss(tf, data[i], &hook);
  }, train);
  if (log) *log = std::move(l);
  return lora;
}

PrefixSet<float> tune_prefix(const Weights<float>& w, const std::vector<Example>& data, std::size_t length,
                             const TrainConfig& train, TrainLog* log) {
  if (length == 0) throw HarnessError("prefix length must be positive");
  auto prefix = PrefixSet<float>::init(w.config, length, train.seed ^ 0xbf58476d1ce4e5b9ull);
  std::vector<Tensor*> params;
  for (auto& t : prefix.layers) params.push_back(&t);
  auto l = train_loop(params, data.size(), [&](Graph<float>& g, std::size_t i) {
    auto hook = apply_prefix(w, prefix, true);
    hook.bind(g);
    Transformer<float> tf(g, w, true);
    return example_loss(tf, data[i], &hook);
  }, train);
  if (log) *log = std::move(l);
  return prefix;
}

AdapterCheckpoint tune_adapter(AdapterKind kind, const Weights<float>& w, const std::vector<Example>& data,
                               std::size_t size, const TrainConfig& train, TrainLog* log, const std::string& id,
                               const std::vector<int>& prompt_init) {
  AdapterCheckpoint c;
  c.kind = kind;
  switch (kind) {
    case AdapterKind::prompt:
    case AdapterKind::idp:
      c.prompt = tune_prompt(w, data, size, train, id, log, prompt_init);
      break;
    case AdapterKind::lora:
      c.lora = tune_lora(w, data, size, train, log);
      break;
    case AdapterKind::prefix:
      c.prefix = tune_prefix(w, data, size, train, log);
      break;
  }
  return c;
}

void AdapterCheckpoint::save(const std::string& path) const {
  if (prompt) {
    save_prompt(path, *prompt);
  } else if (lora) {
    save_lora(path, *lora);
  } else if (prefix) {
    save_prefix(path, *prefix);
  } else {
    throw HarnessError("empty adapter checkpoint");
  }
}

double recall_accuracy(Scorer& s, const std::vector<McItem>& items) { return mc_accuracy(s, items).accuracy; }

std::vector<int> prompt_init_tokens(const std::string& mode, const TaskData& task, std::optional<std::size_t> domain) {
  if (mode == "bos") return {kBos};
  if (mode == "relations") return task.relation_tokens(domain);
  throw HarnessError("unknown prompt init '" + mode + "' (bos or relations)");
}

}  // namespace dynprompt
