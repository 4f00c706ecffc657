#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <tuple>

#include "doctest.h"
#include "dynprompt/harness.hpp"
#include "helpers.hpp"

using namespace dynprompt;

namespace {

TaskSpec tiny_task() {
  TaskSpec t;
  t.subjects = 30;
  t.relations = 2;
  t.objects = 12;
  t.facts = 50;
  t.docs = 60;
  return t;
}

ModelConfig tiny_model(const TaskSpec& t) {
  ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.n_layers = 2;
  m.d_ff = 32;
  m.max_seq_len = 64;
  m.vocab_size = t.vocab_needed();
  return m;
}

TrainConfig quick(std::size_t steps, double lr = 1e-2) {
  TrainConfig c;
  c.lr = lr;
  c.steps = steps;
  c.batch = 8;
  return c;
}

// Mean of the first and last five step losses.
bool decreased(const TrainLog& log) {
  const std::size_t n = std::min<std::size_t>(5, log.losses.size() / 2);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < n; ++i) {
    head += log.losses[i];
    tail += log.losses[log.losses.size() - 1 - i];
  }
  return n > 0 && tail < head;
}

}  // namespace

TEST_CASE("gen_corpus is deterministic and well formed") {
  const auto spec = tiny_task();
  const auto a = gen_corpus(spec, 3);
  const auto b = gen_corpus(spec, 3);
  CHECK(a.corpus == b.corpus);
  CHECK(a.items.size() == b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i].options == b.items[i].options);
  CHECK(gen_corpus(spec, 4).corpus != a.corpus);

  // 2 domains x 50 facts
  REQUIRE(a.facts.size() == 100);
  std::set<std::tuple<int, int, int>> triples;
  std::set<std::pair<int, int>> keys;
  for (const auto& f : a.facts) {
    triples.insert({f.subject, f.relation, f.object});
    keys.insert({f.subject, f.relation});
  }
  CHECK(triples.size() == 100);
  CHECK(keys.size() == 100);

  REQUIRE(a.items.size() == a.facts.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    const auto& item = a.items[i];
    const auto& f = a.facts[i];
    CHECK(item.context == TaskData::query(f));
    CHECK(item.options.size() == spec.distractors + 1);
    CHECK(item.options[item.answer] == std::vector<int>{f.object});
    CHECK(item.domain == domain_name(f.domain));
    std::set<int> seen;
    for (std::size_t o = 0; o < item.options.size(); ++o) {
      seen.insert(item.options[o][0]);
      if (o != item.answer) CHECK(item.options[o][0] != f.object);
    }
    CHECK(seen.size() == item.options.size());
  }
  CHECK(a.items_for(0).size() == 50);
  CHECK(a.recall_examples(1).size() == 50);
  CHECK(a.recall_examples().size() == 100);
}

TEST_CASE("vocab ranges of the domains are disjoint") {
  const auto t = gen_corpus(tiny_task(), 1);
  std::set<int> d0, d1;
  for (const auto& f : t.facts) {
    auto& s = f.domain == 0 ? d0 : d1;
    s.insert({f.subject, f.relation, f.object});
  }
  for (int x : d0) CHECK_FALSE(d1.count(x));
  for (int x : d0) CHECK(x > kBos);
  CHECK(t.vocab == tiny_task().vocab_needed());
}

TEST_CASE("mixed documents keep one relation per domain") {
  auto spec = tiny_task();
  spec.mixed_docs = true;
  spec.facts_per_doc = 8;
  const auto t = gen_corpus(spec, 9);
  CHECK(t.corpus == gen_corpus(spec, 9).corpus);
  std::map<std::pair<int, int>, int> object_of;
  std::map<int, std::size_t> domain_of;
  for (const auto& f : t.facts) {
    object_of[{f.subject, f.relation}] = f.object;
    domain_of[f.subject] = f.domain;
  }
  bool saw_mixed = false;
  for (const auto& doc : t.corpus) {
    REQUIRE(doc.size() == 1 + 3 * spec.facts_per_doc);
    CHECK(doc[0] == kBos);
    std::map<std::size_t, int> rel;
    for (std::size_t k = 0; k < spec.facts_per_doc; ++k) {
      const int s = doc[1 + 3 * k], r = doc[2 + 3 * k], o = doc[3 + 3 * k];
      CHECK(object_of.at({s, r}) == o);
      const auto d = domain_of.at(s);
      if (rel.count(d)) CHECK(rel[d] == r);
      rel[d] = r;
    }
    saw_mixed = saw_mixed || rel.size() > 1;
  }
  CHECK(saw_mixed);
}

TEST_CASE("prompt init tokens") {
  const auto t = gen_corpus(tiny_task(), 1);
  // [BOS | 30 subjects | 2 relations | 12 objects] per domain
  CHECK(t.relation_tokens(0) == std::vector<int>{31, 32});
  CHECK(t.relation_tokens(1) == std::vector<int>{75, 76});
  CHECK(t.relation_tokens().size() == 4);
  for (const auto& f : t.facts) {
    const auto r = t.relation_tokens(f.domain);
    CHECK(std::find(r.begin(), r.end(), f.relation) != r.end());
  }
  CHECK(prompt_init_tokens("bos", t) == std::vector<int>{kBos});
  CHECK(prompt_init_tokens("relations", t, 1) == t.relation_tokens(1));
  CHECK_THROWS_AS(prompt_init_tokens("random", t), HarnessError);

  const auto w = Weights<float>::init(tiny_model(t.spec));
  const auto p = tune_prompt(w, t.recall_examples(0), 5, quick(0), "a", nullptr, t.relation_tokens(0));
  for (std::size_t r = 0; r < 5; ++r) {
    const auto tok = static_cast<std::size_t>(t.relation_tokens(0)[r % 2]);
    for (std::size_t c = 0; c < w.config.d_model; ++c) CHECK(std::abs(p.embedding.at(r, c) - w.embedding.at(tok, c)) < 0.1);
  }
  CHECK_THROWS_AS(tune_prompt(w, t.recall_examples(0), 2, quick(0), "a", nullptr, {}), HarnessError);
  CHECK_THROWS_AS(tune_prompt(w, t.recall_examples(0), 2, quick(0), "a", nullptr, {100000}), HarnessError);
}

TEST_CASE("task spec validation") {
  auto t = tiny_task();
  t.facts = t.subjects * t.relations + 1;
  CHECK_THROWS_AS(gen_corpus(t, 0), HarnessError);
  t = tiny_task();
  t.objects = t.distractors;
  CHECK_THROWS_AS(gen_corpus(t, 0), HarnessError);
}

TEST_CASE("AdamW first step moves each entry by lr against the gradient sign") {
  TrainConfig c = quick(1, 0.1);
  c.weight_decay = 0.0;
  Tensor p({1, 3}, {1.0f, -2.0f, 0.5f});
  AdamW opt(c);
  opt.step({&p}, {Tensor({1, 3}, {0.3f, -4.0f, 0.0f})});
  CHECK(p.at(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.at(0, 1) == doctest::Approx(-1.9).epsilon(1e-6));
  CHECK(p.at(0, 2) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("AdamW decay is decoupled from the gradient") {
  TrainConfig c = quick(1, 0.1);
  c.weight_decay = 0.5;
  Tensor p({1, 1}, {2.0f});
  AdamW opt(c);
  opt.step({&p}, {Tensor({1, 1}, {0.0f})});
  // zero gradient: only the decay term acts
  CHECK(p.at(0, 0) == doctest::Approx(2.0 * (1 - 0.1 * 0.5)).epsilon(1e-6));
}

TEST_CASE("train config validation") {
  CHECK_THROWS_AS(quick(1, 0.0).validate(), HarnessError);
  TrainConfig c = quick(1);
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), HarnessError);
}

TEST_CASE("pretraining lowers the loss") {
  const auto task = gen_corpus(tiny_task(), 2);
  auto m = tiny_model(task.spec);
  TrainLog log;
  const auto w = pretrain_base(m, task, quick(40, 3e-3), &log);
  REQUIRE(log.losses.size() == 40);
  CHECK(decreased(log));
  CHECK(w.trainable.empty());
}

TEST_CASE("adapter tuning leaves the base bitwise intact") {
  const auto task = gen_corpus(tiny_task(), 5);
  const auto w = Weights<float>::init(tiny_model(task.spec));
  const auto digest = weights_digest(w);
  const auto data = task.recall_examples(0);

  TrainLog pl, ll, xl;
  const auto p = tune_prompt(w, data, 4, quick(60), "p", &pl);
  CHECK(weights_digest(w) == digest);
  CHECK(decreased(pl));
  tune_lora(w, data, 2, quick(60), &ll);
  CHECK(weights_digest(w) == digest);
  CHECK(decreased(ll));
  tune_prefix(w, data, 3, quick(60), &xl);
  CHECK(weights_digest(w) == digest);
  CHECK(decreased(xl));
  CHECK(p.embedding.rows() == 4);
}

TEST_CASE("zero-step tuning returns the initialization") {
  const auto task = gen_corpus(tiny_task(), 6);
  const auto w = Weights<float>::init(tiny_model(task.spec));
  const auto data = task.recall_examples();
  const auto a = tune_prompt(w, data, 5, quick(0), "a");
  const auto b = tune_prompt(w, data, 5, quick(0), "a");
  CHECK(a.embedding == b.embedding);
  // init is the BOS embedding plus small noise
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < w.config.d_model; ++c) {
      CHECK(std::abs(a.embedding.at(r, c) - w.embedding.at(kBos, c)) < 0.1);
    }
  }
  auto lora = tune_lora(w, data, 2, quick(0));
  auto fresh = LoraAdapter<float>::init(w.config, 2, quick(0).seed ^ 0x94d049bb133111ebull);
  bool same = true;
  lora.for_each([&](const std::string& name, Tensor& t) {
    fresh.for_each([&](const std::string& n2, Tensor& t2) {
      if (name == n2) same = same && t == t2;
    });
  });
  CHECK(same);
  const auto ck = tune_adapter(AdapterKind::lora, w, data, 2, quick(0));
  CHECK(ck.lora.has_value());
  CHECK_FALSE(ck.prompt.has_value());
}

TEST_CASE("tuning is deterministic for a seed") {
  const auto task = gen_corpus(tiny_task(), 7);
  const auto w = Weights<float>::init(tiny_model(task.spec));
  const auto data = task.recall_examples();
  CHECK(tune_prompt(w, data, 3, quick(5), "x").embedding == tune_prompt(w, data, 3, quick(5), "x").embedding);
}

TEST_CASE("key = value configuration") {
  const auto kv = parse_key_values("# comment\n model.d_model = 32\n\ntune.lr=0.5 # trailing\nseeds = 1, 2,3\n");
  CHECK(kv.at("model.d_model") == "32");
  CHECK(kv.at("tune.lr") == "0.5");
  ExperimentConfig cfg;
  apply_key_values(cfg, kv);
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.tune.lr == 0.5);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});

  CHECK_THROWS_AS(apply_key_values(cfg, {{"model.colour", "red"}}), HarnessError);
  CHECK_THROWS_AS(apply_key_values(cfg, {{"nonsense", "1"}}), HarnessError);
  CHECK_THROWS_AS(apply_key_values(cfg, {{"bits", "three"}}), HarnessError);
  CHECK_THROWS_AS(parse_key_values("no equals sign"), HarnessError);
  CHECK_THROWS_AS(apply_key_values(cfg, {{"selection.scope", "sideways"}}), std::exception);

  // round trip
  ExperimentConfig again;
  apply_key_values(again, parse_key_values(to_key_values(cfg)));
  CHECK(to_key_values(again) == to_key_values(cfg));
  CHECK(config_digest(to_key_values(again)) == config_digest(to_key_values(cfg)));
  CHECK(config_digest("a") != config_digest("b"));

  BenchConfig b;
  apply_key_values(b, parse_key_values("warmup=5\nmodel.n_layers=2\n"));
  CHECK(b.warmup == 5);
  CHECK(b.model.n_layers == 2);
  BenchConfig b2;
  apply_key_values(b2, parse_key_values(to_key_values(b)));
  CHECK(to_key_values(b2) == to_key_values(b));
  CHECK_THROWS_AS(apply_key_values(b, {{"tune.lr", "1"}}), HarnessError);
}

TEST_CASE("manifest records digest and config") {
  Manifest m{"eval", {0, 1}, "a=1\n", {{"report", "report.csv"}}};
  const auto j = m.json();
  CHECK(j.find(config_digest("a=1\n")) != std::string::npos);
  CHECK(j.find("git_revision") != std::string::npos);
  CHECK(j.find("report.csv") != std::string::npos);
}

TEST_CASE("percentiles use nearest rank") {
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 3, 2}) == 2);
  CHECK(percentile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.9) == 9);
  CHECK(percentile({}, 0.5) == 0);
}

TEST_CASE("bench validation and MAC bookkeeping") {
  BenchConfig cfg;
  cfg.model = tiny_model(tiny_task());
  cfg.prompt_length = 8;
  cfg.second_prompt_length = 5;
  cfg.input_length = 2;
  cfg.batch = 2;
  cfg.iterations = 2;
  cfg.decode_tokens = 2;
  cfg.warmup = 2;
  CHECK_THROWS_AS(latency_bench(cfg), HarnessError);
  cfg.warmup = 3;
  const auto r = latency_bench(cfg);
  REQUIRE(r.rows.size() == 6);
  const auto& m = cfg.model;
  const auto none = r.row("no_prompt").prefill_macs;
  CHECK(r.row("lora").prefill_macs == none + lora_extra_macs(m, cfg.lora_rank, cfg.input_length));
  CHECK(r.row("idp_cached").prefill_macs ==
        none + 2ull * m.n_layers * cfg.input_length * (cfg.prompt_length + cfg.second_prompt_length) * m.d_model);
  CHECK(r.row("single_prompt_cached").prefill_macs < r.row("single_prompt_uncached").prefill_macs);
  CHECK(r.csv().rfind("policy,", 0) == 0);
  CHECK_THROWS_AS(r.row("nope"), HarnessError);
  // r (d_in + d_out) summed over the six projections
  CHECK(lora_extra_macs(m, 1, 1) == m.n_layers * (4 * 2 * m.d_model + 2 * (m.d_model + m.d_ff)));
}

TEST_CASE("base checkpoints are cached by config") {
  ExperimentConfig cfg;
  cfg.task = tiny_task();
  cfg.model = tiny_model(cfg.task);
  cfg.pretrain = quick(3, 3e-3);
  cfg.cache_dir = (std::filesystem::temp_directory_path() / "dynprompt_cache_test").string();
  std::filesystem::remove_all(cfg.cache_dir);
  const auto a = prepare_base(cfg, 1);
  CHECK(a.log.losses.size() == 3);
  const auto b = prepare_base(cfg, 1);
  CHECK(b.log.losses.empty());
  CHECK(weights_digest(a.weights) == weights_digest(b.weights));
  CHECK(a.accuracy == b.accuracy);
  std::filesystem::remove_all(cfg.cache_dir);
}
