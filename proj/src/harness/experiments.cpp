#include <unistd.h>

#include <filesystem>

#include "dynprompt/harness.hpp"

namespace dynprompt {

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_layers = 2;
  c.model.d_ff = 64;
  c.model.max_seq_len = 64;
  c.pretrain.lr = 3e-3;
  c.pretrain.weight_decay = 0.0;
  c.pretrain.steps = 1500;
  c.pretrain.batch = 32;
  c.tune.lr = 1e-2;
  c.tune.weight_decay = 1e-5;
  c.tune.steps = 600;
  c.tune.batch = 32;
  return c;
}

namespace {

// Stage seeds keep every training run on its own random stream.
TrainConfig seeded(TrainConfig t, std::uint64_t seed, std::uint64_t stage) {
  t.seed = seed * 1000003ull + stage;
  return t;
}

ModelConfig model_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  ModelConfig m = cfg.model;
  m.vocab_size = cfg.task.vocab_needed();
  m.seed = seed;
  return m;
}

std::vector<std::vector<int>> ppl_docs(const TaskData& task) {
  const std::size_t n = std::min<std::size_t>(task.corpus.size(), 200);
  return {task.corpus.begin(), task.corpus.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace

BaseRun prepare_base(const ExperimentConfig& cfg, std::uint64_t seed) {
  BaseRun run;
  run.seed = seed;
  run.task = gen_corpus(cfg.task, seed);
  const ModelConfig m = model_for(cfg, seed);
  std::string cached;
  if (!cfg.cache_dir.empty()) {
    // Key on everything that determines the checkpoint.
    ExperimentConfig key;
    key.model = m;
    key.task = cfg.task;
    key.pretrain = cfg.pretrain;
    const std::string digest = config_digest(to_key_values(key) + "seed=" + std::to_string(seed));
    cached = (std::filesystem::path(cfg.cache_dir) / ("base_" + digest + ".bin")).string();
  }
  if (!cached.empty() && std::filesystem::exists(cached)) {
    run.weights = load_weights(cached);
    if (!(run.weights.config == m)) throw HarnessError("cached base model does not match its config: " + cached);
  } else {
    run.weights = pretrain_base(m, run.task, seeded(cfg.pretrain, seed, 1), &run.log);
    if (!cached.empty()) {
      std::filesystem::create_directories(cfg.cache_dir);
      const std::string tmp = cached + ".tmp" + std::to_string(::getpid());
      save_weights(tmp, run.weights);
      std::filesystem::rename(tmp, cached);
    }
  }
  auto s = make_base_scorer(run.weights);
  run.accuracy = recall_accuracy(*s, run.task.items);
  return run;
}

std::map<int, double> bit_sweep(const ExperimentConfig& cfg, const BaseRun& base) {
  std::map<int, double> out;
  for (int bits : cfg.bit_sweep) {
    auto q = compress_model(base.weights, QuantSpec{bits});
    auto s = make_base_scorer(q.weights);
    out[bits] = recall_accuracy(*s, base.task.items);
  }
  return out;
}

RecoveryResult recovery_experiment(const ExperimentConfig& cfg, const BaseRun& base) {
  RecoveryResult r;
  const auto docs = ppl_docs(base.task);
  const auto& items = base.task.items;
  auto bs = make_base_scorer(base.weights);
  r.base = recall_accuracy(*bs, items);
  r.base_ppl = perplexity(*bs, docs);

  const auto q = compress_model(base.weights, QuantSpec{cfg.bits});
  const Weights<float>& wq = q.weights;
  auto qs = make_base_scorer(wq);
  r.compressed = recall_accuracy(*qs, items);
  r.compressed_ppl = perplexity(*qs, docs);

  const auto data = base.task.recall_examples();
  const auto prompt = tune_prompt(wq, data, cfg.prompt_length, seeded(cfg.tune, base.seed, 2), "recovery", nullptr,
                                  prompt_init_tokens(cfg.prompt_init, base.task));
  auto ps = make_prompt_scorer(wq, prompt);
  r.prompt = recall_accuracy(*ps, items);
  r.prompt_ppl = perplexity(*ps, docs);

  const auto lora = tune_lora(wq, data, cfg.lora_rank, seeded(cfg.tune, base.seed, 3));
  auto ls = make_lora_scorer(wq, lora);
  r.lora = recall_accuracy(*ls, items);
  r.lora_ppl = perplexity(*ls, docs);

  if (cfg.with_prefix) {
    const auto prefix = tune_prefix(wq, data, cfg.prefix_length, seeded(cfg.tune, base.seed, 4));
    auto xs = make_prefix_scorer(wq, prefix);
    r.prefix = recall_accuracy(*xs, items);
  }
  return r;
}

RoutingResult routing_experiment(const ExperimentConfig& cfg, const BaseRun& base) {
  RoutingResult r;
  const auto q = compress_model(base.weights, QuantSpec{cfg.bits});
  const Weights<float>& wq = q.weights;
  const std::size_t m = base.task.spec.domains;
  PromptBank bank;
  for (std::size_t d = 0; d < m; ++d) {
    bank.add(tune_prompt(wq, base.task.recall_examples(d), cfg.prompt_length, seeded(cfg.tune, base.seed, 10 + d),
                         domain_name(d), nullptr, prompt_init_tokens(cfg.prompt_init, base.task, d)));
  }
  std::vector<std::vector<McItem>> per_domain;
  for (std::size_t d = 0; d < m; ++d) per_domain.push_back(base.task.items_for(d));

  double cross = 0;
  for (std::size_t d = 0; d < m; ++d) {
    auto own = make_prompt_scorer(wq, bank.at(d));
    r.oracle += recall_accuracy(*own, per_domain[d]);
    for (std::size_t e = 0; e < m; ++e) {
      if (e == d) continue;
      auto other = make_prompt_scorer(wq, bank.at(e));
      cross += recall_accuracy(*other, per_domain[d]) / static_cast<double>(m - 1);
    }
  }
  r.oracle /= static_cast<double>(m);
  r.cross = cross / static_cast<double>(m);

  IdpScorer idp(wq, bank, cfg.selection);
  auto cat = make_concat_scorer(wq, bank);
  const std::size_t layers = wq.config.n_layers;
  std::vector<double> hits(layers, 0.0), counts(layers, 0.0);
  std::size_t item_index = 0;
  for (std::size_t d = 0; d < m; ++d) {
    const std::size_t before = idp.records().size();
    r.idp += recall_accuracy(idp, per_domain[d]) / static_cast<double>(m);
    r.concat += recall_accuracy(*cat, per_domain[d]) / static_cast<double>(m);
    for (std::size_t i = before; i < idp.records().size(); ++i, ++item_index) {
      for (const auto& rec : idp.records()[i]) {
        hits[rec.layer] += rec.chosen == d;
        counts[rec.layer] += 1;
        r.audit.push_back(rec);
        r.audit_item.push_back(item_index);
      }
    }
  }
  for (std::size_t l = 0; l < layers; ++l) r.selection_accuracy.push_back(counts[l] > 0 ? hits[l] / counts[l] : 0.0);
  return r;
}

}  // namespace dynprompt
