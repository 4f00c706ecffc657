#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynprompt/adapters.hpp"
#include "dynprompt/compression.hpp"
#include "dynprompt/diagnostics.hpp"
#include "dynprompt/idp.hpp"
#include "dynprompt/model.hpp"

namespace dynprompt {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token 0 opens every document and query.
inline constexpr int kBos = 0;

// Synthetic fact recall. Each domain owns disjoint subject, relation and
// object token ranges; a fact is (subject, relation) -> object.
struct TaskSpec {
  std::size_t domains = 2;
  std::size_t subjects = 100;  // per domain
  std::size_t relations = 2;
  std::size_t objects = 60;
  std::size_t facts = 150;     // per domain
  std::size_t distractors = 3;
  std::size_t facts_per_doc = 4;
  std::size_t docs = 4000;
  // Documents interleave domains; inside one document each domain sticks to a
  // single relation, so reading a subject pays to look back at its own domain.
  bool mixed_docs = false;

  std::size_t vocab_needed() const { return 1 + domains * (subjects + relations + objects); }
  void validate() const;
};

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
  std::size_t domain = 0;
};

// A training sequence with one target per position (kernels::kIgnoreTarget to skip).
struct Example {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::size_t domain = 0;
};

struct TaskData {
  TaskSpec spec;
  std::size_t vocab = 0;
  std::vector<Fact> facts;                // grouped by domain
  std::vector<std::vector<int>> corpus;   // packed documents
  std::vector<McItem> items;              // items[i] asks about facts[i]

  static std::vector<int> query(const Fact& f) { return {kBos, f.subject, f.relation}; }
  // Query examples with the object as the only target; all domains when domain is empty.
  std::vector<Example> recall_examples(std::optional<std::size_t> domain = std::nullopt) const;
  std::vector<Example> corpus_examples() const;
  std::vector<McItem> items_for(std::size_t domain) const;
  // Relation token ids of one domain, or of all domains.
  std::vector<int> relation_tokens(std::optional<std::size_t> domain = std::nullopt) const;
};

std::string domain_name(std::size_t d);

TaskData gen_corpus(const TaskSpec& spec, std::uint64_t seed);

// AdamW with decoupled weight decay.
struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 100;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  void validate() const;
};

class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  // One update of every listed tensor; grads[i] belongs to params[i].
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<const Tensor*, Moments> state_;
};

struct TrainLog {
  std::vector<double> losses;  // mean batch loss per step
  double first() const { return losses.empty() ? 0.0 : losses.front(); }
  double last() const { return losses.empty() ? 0.0 : losses.back(); }
};

// Minibatch loop. loss builds the loss for one example inside a fresh graph in
// which every tensor of params is registered as trainable.
TrainLog train_loop(const std::vector<Tensor*>& params, std::size_t n_examples,
                    const std::function<Var(Graph<float>&, std::size_t)>& loss, const TrainConfig& cfg);

Weights<float> pretrain_base(const ModelConfig& cfg, const TaskData& task, const TrainConfig& train,
                             TrainLog* log = nullptr);

// Row r starts from the embedding of init_tokens[r % n] plus small noise.
SoftPrompt tune_prompt(const Weights<float>& w, const std::vector<Example>& data, std::size_t length,
                       const TrainConfig& train, const std::string& id, TrainLog* log = nullptr,
                       const std::vector<int>& init_tokens = {kBos});
LoraAdapter<float> tune_lora(const Weights<float>& w, const std::vector<Example>& data, std::size_t rank,
                             const TrainConfig& train, TrainLog* log = nullptr);
PrefixSet<float> tune_prefix(const Weights<float>& w, const std::vector<Example>& data, std::size_t length,
                             const TrainConfig& train, TrainLog* log = nullptr);

struct AdapterCheckpoint {
  AdapterKind kind = AdapterKind::prompt;
  std::optional<SoftPrompt> prompt;
  std::optional<LoraAdapter<float>> lora;
  std::optional<PrefixSet<float>> prefix;
  void save(const std::string& path) const;
};

// size is the prompt/prefix length or the LoRA rank.
AdapterCheckpoint tune_adapter(AdapterKind kind, const Weights<float>& w, const std::vector<Example>& data,
                               std::size_t size, const TrainConfig& train, TrainLog* log = nullptr,
                               const std::string& id = "prompt", const std::vector<int>& prompt_init = {kBos});

// "bos" or "relations" (the relation tokens of the domain, or of every domain).
std::vector<int> prompt_init_tokens(const std::string& mode, const TaskData& task,
                                    std::optional<std::size_t> domain = std::nullopt);

double recall_accuracy(Scorer& s, const std::vector<McItem>& items);

// Everything the recovery, routing and bit-sweep experiments need.
struct ExperimentConfig {
  ModelConfig model;
  TaskSpec task;
  TrainConfig pretrain;
  TrainConfig tune;
  std::size_t prompt_length = 8;
  std::size_t lora_rank = 2;
  std::size_t prefix_length = 8;
  std::string prompt_init = "bos";
  int bits = 3;
  std::vector<int> bit_sweep{8, 4, 3, 2};
  SelectionConfig selection;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool with_prefix = false;
  std::string cache_dir;  // base checkpoints are reused from here when set

  static ExperimentConfig desk_default();
};

struct BaseRun {
  std::uint64_t seed = 0;
  TaskData task;
  Weights<float> weights;
  double accuracy = 0.0;
  TrainLog log;  // empty when loaded from the cache
};

BaseRun prepare_base(const ExperimentConfig& cfg, std::uint64_t seed);

std::map<int, double> bit_sweep(const ExperimentConfig& cfg, const BaseRun& base);

struct RecoveryResult {
  double base = 0, compressed = 0, prompt = 0, lora = 0;
  std::optional<double> prefix;
  double base_ppl = 0, compressed_ppl = 0, prompt_ppl = 0, lora_ppl = 0;
};
RecoveryResult recovery_experiment(const ExperimentConfig& cfg, const BaseRun& base);

struct RoutingResult {
  double oracle = 0, idp = 0, concat = 0, cross = 0;
  std::vector<double> selection_accuracy;  // per layer: fraction choosing the input's own domain prompt
  std::vector<SelectionRecord> audit;      // every selection record, in item order
  std::vector<std::size_t> audit_item;     // item index of each audit record
};
RoutingResult routing_experiment(const ExperimentConfig& cfg, const BaseRun& base);

// Latency of prefill and decode across prompt placement policies.
struct BenchConfig {
  ModelConfig model;  // toy default
  std::size_t prompt_length = 26;
  std::size_t second_prompt_length = 100;
  std::size_t input_length = 6;
  std::size_t lora_rank = 4;
  std::size_t batch = 16;
  std::size_t warmup = 3;
  std::size_t iterations = 15;
  std::size_t decode_tokens = 4;
  std::uint64_t seed = 0;
  void validate() const;
};

struct BenchRow {
  std::string policy;
  double prefill_median_ms = 0, prefill_p90_ms = 0;
  double decode_median_ms = 0, decode_p90_ms = 0;
  std::uint64_t prefill_macs = 0;  // one sequence
  std::uint64_t decode_macs = 0;   // one token of one sequence
};

struct BenchReport {
  std::vector<BenchRow> rows;
  const BenchRow& row(const std::string& policy) const;
  std::string csv() const;
};

BenchReport latency_bench(const BenchConfig& cfg);

// MACs added by LoRA over a forward of n tokens: r (d_in + d_out) per projection per token.
std::uint64_t lora_extra_macs(const ModelConfig& cfg, std::size_t rank, std::size_t tokens);

double median(std::vector<double> v);
double percentile(std::vector<double> v, double p);

// key = value files; '#' starts a comment.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::string& path);
// Unknown keys are errors.
void apply_key_values(ExperimentConfig& cfg, const KeyValues& kv);
void apply_key_values(BenchConfig& cfg, const KeyValues& kv);
std::string to_key_values(const ExperimentConfig& cfg);
std::string to_key_values(const BenchConfig& cfg);

struct Manifest {
  std::string command;
  std::vector<std::uint64_t> seeds;
  std::string config_text;
  std::map<std::string, std::string> artifacts;  // name -> relative path
  std::string json() const;                      // includes the config digest and git revision
};
std::string config_digest(const std::string& config_text);
std::string git_revision();
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace dynprompt
