#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dynprompt/harness.hpp"
#include "json.hpp"

using namespace dynprompt;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string run_dir;
  std::int64_t seed = -1;
};

void add_common(CLI::App* app, Common& c, const std::string& default_dir) {
  app->add_option("-c,--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  app->add_option("-s,--set", c.overrides, "override a configuration key (key=value)");
  c.run_dir = default_dir;
  app->add_option("-o,--run-dir", c.run_dir, "directory for artifacts and the manifest")->capture_default_str();
  app->add_option("--seed", c.seed, "seed (defaults to the first configured seed)");
}

KeyValues gather(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : read_key_values(c.config);
  for (const auto& o : c.overrides) {
    for (const auto& [k, v] : parse_key_values(o)) kv[k] = v;
  }
  return kv;
}

ExperimentConfig experiment_config(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::desk_default();
  apply_key_values(cfg, gather(c));
  if (c.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(c.seed)};
  return cfg;
}

std::uint64_t seed_of(const ExperimentConfig& cfg) { return cfg.seeds.at(0); }

ModelConfig model_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  ModelConfig m = cfg.model;
  m.vocab_size = cfg.task.vocab_needed();
  m.seed = seed;
  return m;
}

std::string in_dir(const Common& c, const std::string& name) {
  fs::create_directories(c.run_dir);
  return (fs::path(c.run_dir) / name).string();
}

void finish(const Common& c, const std::string& command, const std::string& config_text,
            const std::vector<std::uint64_t>& seeds, const std::map<std::string, std::string>& artifacts) {
  Manifest m{command, seeds, config_text, artifacts};
  write_text(in_dir(c, "manifest.json"), m.json());
  for (const auto& [name, path] : artifacts) std::cout << name << ": " << (fs::path(c.run_dir) / path).string() << '\n';
}

std::string loss_csv(const TrainLog& log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss\n";
  for (std::size_t i = 0; i < log.losses.size(); ++i) os << i << ',' << log.losses[i] << '\n';
  return os.str();
}

std::string items_jsonl(const std::vector<McItem>& items) {
  std::string out;
  for (const auto& it : items) {
    ordered_json j;
    j["context"] = it.context;
    j["options"] = it.options;
    j["answer"] = it.answer;
    j["domain"] = it.domain;
    out += j.dump() + "\n";
  }
  return out;
}

std::string selections_jsonl(const std::vector<SelectionRecord>& recs, const std::vector<std::size_t>& item,
                             const std::vector<McItem>& items) {
  std::string out;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ordered_json j;
    j["item"] = item[i];
    if (item[i] < items.size()) j["domain"] = items[item[i]].domain;
    j["layer"] = recs[i].layer;
    j["scores"] = recs[i].scores;
    j["chosen"] = recs[i].chosen;
    out += j.dump() + "\n";
  }
  return out;
}

PromptBank load_bank(const std::vector<std::string>& paths) {
  PromptBank bank;
  for (const auto& p : paths) bank.add(load_prompt(p));
  return bank;
}

std::string num(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic prompt routing over compressed toy transformers"};
  app.require_subcommand(1);

  Common gen_c, pre_c, comp_c, tune_c, eval_c, diag_c, bench_c, rep_c;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-domain fact corpus");
  add_common(gen, gen_c, "runs/gen-data");

  auto* pre = app.add_subcommand("pretrain", "train the base model on the fact corpus");
  add_common(pre, pre_c, "runs/pretrain");

  auto* comp = app.add_subcommand("compress", "quantize or prune a model");
  add_common(comp, comp_c, "runs/compress");
  std::string comp_model;
  int comp_bits = 0;
  double comp_sparsity = -1;
  comp->add_option("-m,--model", comp_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  auto* bits_opt = comp->add_option("--bits", comp_bits, "round-to-nearest bit width");
  auto* sp_opt = comp->add_option("--sparsity", comp_sparsity, "magnitude pruning fraction");
  bits_opt->excludes(sp_opt);

  auto* tune = app.add_subcommand("tune", "tune a prompt, prefix or LoRA adapter on a frozen model");
  add_common(tune, tune_c, "runs/tune");
  std::string tune_model, tune_kind = "prompt";
  std::int64_t tune_domain = -1;
  std::size_t tune_size = 0;
  tune->add_option("-m,--model", tune_model, "frozen model checkpoint")->required()->check(CLI::ExistingFile);
  tune->add_option("-k,--kind", tune_kind, "prompt, prefix or lora")->capture_default_str();
  tune->add_option("-d,--domain", tune_domain, "train on one domain only");
  tune->add_option("--size", tune_size, "prompt/prefix length or LoRA rank (default from config)");

  auto* ev = app.add_subcommand("eval", "recall accuracy and perplexity of a model variant");
  add_common(ev, eval_c, "runs/eval");
  std::string ev_model, ev_policy = "auto", ev_lora, ev_prefix;
  std::vector<std::string> ev_prompts;
  bool ev_norm = false;
  ev->add_option("-m,--model", ev_model, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("-p,--prompt", ev_prompts, "prompt checkpoints (a bank when repeated)");
  ev->add_option("--lora", ev_lora, "LoRA checkpoint");
  ev->add_option("--prefix", ev_prefix, "prefix checkpoint");
  ev->add_option("--policy", ev_policy, "idp or concat for banks")->capture_default_str();
  ev->add_flag("--length-normalize", ev_norm, "average option log-probs over option tokens");

  auto* diag = app.add_subcommand("diagnose", "layer-wise similarity and IDP selection audit");
  add_common(diag, diag_c, "runs/diagnose");
  std::string dg_model, dg_variant, dg_prompt;
  std::vector<std::string> dg_bank;
  std::size_t dg_items = 50;
  diag->add_option("-m,--model", dg_model, "baseline model checkpoint")->required()->check(CLI::ExistingFile);
  diag->add_option("--variant", dg_variant, "variant model checkpoint (e.g. compressed)");
  diag->add_option("-p,--prompt", dg_prompt, "prompt applied to the variant");
  diag->add_option("--bank", dg_bank, "prompt checkpoints for the selection audit");
  diag->add_option("--items", dg_items, "number of recall items to diagnose")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "prefill and decode latency across prompt policies");
  add_common(bench, bench_c, "runs/bench");

  auto* rep = app.add_subcommand("report", "recovery, routing and bit-sweep experiments over all seeds");
  add_common(rep, rep_c, "runs/report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      auto cfg = experiment_config(gen_c);
      const auto task = gen_corpus(cfg.task, seed_of(cfg));
      std::string corpus;
      for (const auto& d : task.corpus) corpus += ordered_json{{"tokens", d}}.dump() + "\n";
      write_text(in_dir(gen_c, "corpus.jsonl"), corpus);
      write_text(in_dir(gen_c, "items.jsonl"), items_jsonl(task.items));
      finish(gen_c, "gen-data", to_key_values(cfg), {seed_of(cfg)},
             {{"corpus", "corpus.jsonl"}, {"items", "items.jsonl"}});
    } else if (*pre) {
      auto cfg = experiment_config(pre_c);
      const auto seed = seed_of(cfg);
      const auto task = gen_corpus(cfg.task, seed);
      TrainLog log;
      auto t = cfg.pretrain;
      t.seed = seed * 1000003ull + 1;
      const auto w = pretrain_base(model_config(cfg, seed), task, t, &log);
      save_weights(in_dir(pre_c, "base.bin"), w);
      write_text(in_dir(pre_c, "pretrain_loss.csv"), loss_csv(log));
      auto s = make_base_scorer(w);
      std::cout << "loss " << num(log.first()) << " -> " << num(log.last()) << ", recall accuracy "
                << num(recall_accuracy(*s, task.items)) << '\n';
      finish(pre_c, "pretrain", to_key_values(cfg), {seed}, {{"model", "base.bin"}, {"loss", "pretrain_loss.csv"}});
    } else if (*comp) {
      auto cfg = experiment_config(comp_c);
      if (comp_bits == 0 && comp_sparsity < 0) throw HarnessError("give --bits or --sparsity");
      const auto w = load_weights(comp_model);
      const auto c = comp_bits ? compress_model(w, QuantSpec{comp_bits}) : compress_model(w, PruneSpec{comp_sparsity});
      save_weights(in_dir(comp_c, "compressed.bin"), c.weights);
      write_text(in_dir(comp_c, "compression.csv"), c.report.csv());
      finish(comp_c, "compress", to_key_values(cfg), {}, {{"model", "compressed.bin"}, {"report", "compression.csv"}});
    } else if (*tune) {
      auto cfg = experiment_config(tune_c);
      const auto seed = seed_of(cfg);
      const auto kind = parse_adapter_kind(tune_kind);
      const auto w = load_weights(tune_model);
      const auto task = gen_corpus(cfg.task, seed);
      const auto data = tune_domain >= 0 ? task.recall_examples(static_cast<std::size_t>(tune_domain))
                                         : task.recall_examples();
      std::size_t size = tune_size;
      if (size == 0) {
        size = kind == AdapterKind::lora ? cfg.lora_rank
               : kind == AdapterKind::prefix ? cfg.prefix_length
                                             : cfg.prompt_length;
      }
      auto t = cfg.tune;
      t.seed = seed * 1000003ull + 2;
      const auto before = weights_digest(w);
      TrainLog log;
      const std::string id = tune_domain >= 0 ? domain_name(static_cast<std::size_t>(tune_domain)) : "all";
      const auto init = tune_domain >= 0
                            ? prompt_init_tokens(cfg.prompt_init, task, static_cast<std::size_t>(tune_domain))
                            : prompt_init_tokens(cfg.prompt_init, task);
      auto ck = tune_adapter(kind, w, data, size, t, &log, id, init);
      if (weights_digest(w) != before) throw HarnessError("base weights changed during tuning");
      if (ck.prompt) ck.prompt->dataset_tag = id;
      ck.save(in_dir(tune_c, "adapter.bin"));
      write_text(in_dir(tune_c, "tune_loss.csv"), loss_csv(log));
      std::cout << adapter_kind_name(kind) << " loss " << num(log.first()) << " -> " << num(log.last()) << '\n';
      finish(tune_c, "tune", to_key_values(cfg), {seed}, {{"adapter", "adapter.bin"}, {"loss", "tune_loss.csv"}});
    } else if (*ev) {
      auto cfg = experiment_config(eval_c);
      const auto seed = seed_of(cfg);
      const auto w = load_weights(ev_model);
      const auto task = gen_corpus(cfg.task, seed);
      const PromptBank bank = load_bank(ev_prompts);
      std::optional<LoraAdapter<float>> lora;
      std::optional<PrefixSet<float>> prefix;
      std::unique_ptr<Scorer> s;
      if (!ev_lora.empty()) {
        lora = load_lora(ev_lora);
        s = make_lora_scorer(w, *lora);
      } else if (!ev_prefix.empty()) {
        prefix = load_prefix(ev_prefix);
        s = make_prefix_scorer(w, *prefix);
      } else if (bank.size() == 1 && ev_policy == "auto") {
        s = make_prompt_scorer(w, bank.at(0));
      } else if (bank.size() >= 1 && ev_policy == "concat") {
        s = make_concat_scorer(w, bank);
      } else if (bank.size() >= 1) {
        s = std::make_unique<IdpScorer>(w, bank, cfg.selection);
      } else {
        s = make_base_scorer(w);
      }
      auto r = mc_accuracy(*s, task.items, McOptions{ev_norm});
      const std::size_t n = std::min<std::size_t>(200, task.corpus.size());
      r.perplexity = perplexity(*s, {task.corpus.begin(), task.corpus.begin() + static_cast<std::ptrdiff_t>(n)});
      write_text(in_dir(eval_c, "eval.csv"), r.csv());
      std::cout << s->name() << " accuracy " << num(r.accuracy) << ", perplexity " << num(r.perplexity) << '\n';
      finish(eval_c, "eval", to_key_values(cfg), {seed}, {{"report", "eval.csv"}});
    } else if (*diag) {
      auto cfg = experiment_config(diag_c);
      const auto seed = seed_of(cfg);
      const auto w = load_weights(dg_model);
      const auto task = gen_corpus(cfg.task, seed);
      std::vector<McItem> items(task.items.begin(),
                                task.items.begin() + static_cast<std::ptrdiff_t>(std::min(dg_items, task.items.size())));
      std::map<std::string, std::string> artifacts;
      if (!dg_variant.empty() || !dg_prompt.empty()) {
        const auto variant = dg_variant.empty() ? w : load_weights(dg_variant);
        std::optional<SoftPrompt> prompt;
        if (!dg_prompt.empty()) prompt = load_prompt(dg_prompt);
        auto base = make_base_scorer(w);
        auto other = prompt ? make_prompt_scorer(variant, *prompt) : make_base_scorer(variant);
        LayerSimilarity total;
        for (const auto& it : items) {
          auto sim = layer_similarity(base->trace(it.context), other->trace(it.context));
          total.attention.resize(sim.attention.size());
          total.activation.resize(sim.activation.size());
          for (std::size_t l = 0; l < sim.attention.size(); ++l) {
            total.attention[l] += sim.attention[l] / static_cast<double>(items.size());
            total.activation[l] += sim.activation[l] / static_cast<double>(items.size());
          }
        }
        write_text(in_dir(diag_c, "similarity.csv"), total.csv());
        artifacts["similarity"] = "similarity.csv";
      }
      if (!dg_bank.empty()) {
        const PromptBank bank = load_bank(dg_bank);
        IdpScorer idp(w, bank, cfg.selection);
        std::vector<SelectionRecord> recs;
        std::vector<std::size_t> which;
        for (std::size_t i = 0; i < items.size(); ++i) {
          idp.logits(items[i].context);
          for (const auto& r : idp.records().back()) {
            recs.push_back(r);
            which.push_back(i);
          }
        }
        write_text(in_dir(diag_c, "selections.jsonl"), selections_jsonl(recs, which, items));
        artifacts["selections"] = "selections.jsonl";
      }
      if (artifacts.empty()) throw HarnessError("diagnose needs --variant, --prompt or --bank");
      finish(diag_c, "diagnose", to_key_values(cfg), {seed}, artifacts);
    } else if (*bench) {
      BenchConfig cfg;
      apply_key_values(cfg, gather(bench_c));
      if (bench_c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(bench_c.seed);
      const auto r = latency_bench(cfg);
      write_text(in_dir(bench_c, "bench.csv"), r.csv());
      std::cout << r.csv();
      finish(bench_c, "bench", to_key_values(cfg), {cfg.seed}, {{"report", "bench.csv"}});
    } else if (*rep) {
      auto cfg = experiment_config(rep_c);
      std::ostringstream rec, rou, bits;
      rec << "seed,base,compressed,prompt,lora,prefix,base_ppl,compressed_ppl,prompt_ppl,lora_ppl\n";
      rou << "seed,oracle,idp,concat,cross";
      for (std::size_t l = 0; l < cfg.model.n_layers; ++l) rou << ",sel_layer" << l;
      rou << '\n';
      bits << "seed";
      for (int b : cfg.bit_sweep) bits << ",bits" << b;
      bits << '\n';
      std::string jsonl, audit;
      for (auto seed : cfg.seeds) {
        const auto base = prepare_base(cfg, seed);
        const auto sweep = bit_sweep(cfg, base);
        const auto r = recovery_experiment(cfg, base);
        const auto ro = routing_experiment(cfg, base);
        rec << seed << ',' << r.base << ',' << r.compressed << ',' << r.prompt << ',' << r.lora << ','
            << (r.prefix ? num(*r.prefix) : "") << ',' << r.base_ppl << ',' << r.compressed_ppl << ','
            << r.prompt_ppl << ',' << r.lora_ppl << '\n';
        rou << seed << ',' << ro.oracle << ',' << ro.idp << ',' << ro.concat << ',' << ro.cross;
        for (double s : ro.selection_accuracy) rou << ',' << s;
        rou << '\n';
        bits << seed;
        for (int b : cfg.bit_sweep) bits << ',' << sweep.at(b);
        bits << '\n';
        ordered_json j;
        j["seed"] = seed;
        j["recovery"] = {{"base", r.base}, {"compressed", r.compressed}, {"prompt", r.prompt}, {"lora", r.lora}};
        j["routing"] = {{"oracle", ro.oracle}, {"idp", ro.idp}, {"concat", ro.concat}, {"cross", ro.cross},
                        {"selection_accuracy", ro.selection_accuracy}};
        ordered_json bj;
        for (const auto& [b, a] : sweep) bj[std::to_string(b)] = a;
        j["bits"] = bj;
        jsonl += j.dump() + "\n";
        std::vector<McItem> ordered;
        for (std::size_t d = 0; d < cfg.task.domains; ++d) {
          for (auto& it : base.task.items_for(d)) ordered.push_back(it);
        }
        audit += selections_jsonl(ro.audit, ro.audit_item, ordered);
        std::cerr << "seed " << seed << " done\n";
      }
      write_text(in_dir(rep_c, "recovery.csv"), rec.str());
      write_text(in_dir(rep_c, "routing.csv"), rou.str());
      write_text(in_dir(rep_c, "bits.csv"), bits.str());
      write_text(in_dir(rep_c, "results.jsonl"), jsonl);
      write_text(in_dir(rep_c, "selections.jsonl"), audit);
      std::cout << rec.str() << rou.str() << bits.str();
      finish(rep_c, "report", to_key_values(cfg), cfg.seeds,
             {{"recovery", "recovery.csv"}, {"routing", "routing.csv"}, {"bits", "bits.csv"},
              {"results", "results.jsonl"}, {"selections", "selections.jsonl"}});
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
