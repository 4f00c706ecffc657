#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dynprompt/harness.hpp"
#include "json.hpp"

namespace dynprompt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw HarnessError("config key " + key + ": expected a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw HarnessError("config key " + key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw HarnessError("config key " + key + ": expected true or false, got '" + v + "'");
}

template <typename T>
std::vector<T> to_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(to_size(key, trim(item))));
  if (out.empty()) throw HarnessError("config key " + key + ": empty list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

// Handles keys under a prefix; returns false when the key is not one of them.
bool apply_model(ModelConfig& m, const std::string& k, const std::string& v) {
  if (k == "d_model") m.d_model = to_size(k, v);
  else if (k == "n_heads") m.n_heads = to_size(k, v);
  else if (k == "n_layers") m.n_layers = to_size(k, v);
  else if (k == "d_ff") m.d_ff = to_size(k, v);
  else if (k == "vocab_size") m.vocab_size = to_size(k, v);
  else if (k == "max_seq_len") m.max_seq_len = to_size(k, v);
  else if (k == "rope_base") m.rope_base = to_double(k, v);
  else if (k == "prompt_positions") m.prompt_positions = to_bool(k, v);
  else return false;
  return true;
}

bool apply_train(TrainConfig& t, const std::string& k, const std::string& v) {
  if (k == "lr") t.lr = to_double(k, v);
  else if (k == "weight_decay") t.weight_decay = to_double(k, v);
  else if (k == "steps") t.steps = to_size(k, v);
  else if (k == "batch") t.batch = to_size(k, v);
  else return false;
  return true;
}

bool apply_task(TaskSpec& t, const std::string& k, const std::string& v) {
  if (k == "domains") t.domains = to_size(k, v);
  else if (k == "subjects") t.subjects = to_size(k, v);
  else if (k == "relations") t.relations = to_size(k, v);
  else if (k == "objects") t.objects = to_size(k, v);
  else if (k == "facts") t.facts = to_size(k, v);
  else if (k == "distractors") t.distractors = to_size(k, v);
  else if (k == "facts_per_doc") t.facts_per_doc = to_size(k, v);
  else if (k == "docs") t.docs = to_size(k, v);
  else if (k == "mixed_docs") t.mixed_docs = to_bool(k, v);
  else return false;
  return true;
}

void emit_model(std::ostream& os, const ModelConfig& m) {
  os << "model.d_model=" << m.d_model << "\nmodel.n_heads=" << m.n_heads << "\nmodel.n_layers=" << m.n_layers
     << "\nmodel.d_ff=" << m.d_ff << "\nmodel.vocab_size=" << m.vocab_size << "\nmodel.max_seq_len=" << m.max_seq_len
     << "\nmodel.rope_base=" << num(m.rope_base) << "\nmodel.prompt_positions=" << (m.prompt_positions ? "true" : "false")
     << '\n';
}

void emit_train(std::ostream& os, const char* prefix, const TrainConfig& t) {
  os << prefix << ".lr=" << num(t.lr) << '\n'
     << prefix << ".weight_decay=" << num(t.weight_decay) << '\n'
     << prefix << ".steps=" << t.steps << '\n'
     << prefix << ".batch=" << t.batch << '\n';
}

std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) return {"", key};
  return {key.substr(0, dot), key.substr(dot + 1)};
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(ss, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw HarnessError("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw HarnessError("config line " + std::to_string(n) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) { return parse_key_values(read_text(path)); }

void apply_key_values(ExperimentConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, v] : kv) {
    const auto [group, k] = split_key(key);
    bool ok = false;
    if (group == "model") ok = apply_model(cfg.model, k, v);
    else if (group == "task") ok = apply_task(cfg.task, k, v);
    else if (group == "pretrain") ok = apply_train(cfg.pretrain, k, v);
    else if (group == "tune") ok = apply_train(cfg.tune, k, v);
    else if (group == "selection") {
      ok = true;
      if (k == "scope") cfg.selection.scope = parse_scope(v);
      else if (k == "forced_index") cfg.selection.forced_index = to_size(key, v);
      else if (k == "renormalize") cfg.selection.renormalize = to_bool(key, v);
      else if (k == "freeze_after_prefill") cfg.selection.freeze_after_prefill = to_bool(key, v);
      else ok = false;
    } else if (group.empty()) {
      ok = true;
      if (k == "prompt_length") cfg.prompt_length = to_size(k, v);
      else if (k == "lora_rank") cfg.lora_rank = to_size(k, v);
      else if (k == "prefix_length") cfg.prefix_length = to_size(k, v);
      else if (k == "prompt_init") cfg.prompt_init = v;
      else if (k == "bits") cfg.bits = static_cast<int>(to_size(k, v));
      else if (k == "bit_sweep") cfg.bit_sweep = to_list<int>(k, v);
      else if (k == "seeds") cfg.seeds = to_list<std::uint64_t>(k, v);
      else if (k == "with_prefix") cfg.with_prefix = to_bool(k, v);
      else if (k == "cache_dir") cfg.cache_dir = v;
      else ok = false;
    }
    if (!ok) throw HarnessError("unknown config key: " + key);
  }
}

void apply_key_values(BenchConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, v] : kv) {
    const auto [group, k] = split_key(key);
    bool ok = false;
    if (group == "model") {
      ok = apply_model(cfg.model, k, v);
    } else if (group.empty()) {
      ok = true;
      if (k == "prompt_length") cfg.prompt_length = to_size(k, v);
      else if (k == "second_prompt_length") cfg.second_prompt_length = to_size(k, v);
      else if (k == "input_length") cfg.input_length = to_size(k, v);
      else if (k == "lora_rank") cfg.lora_rank = to_size(k, v);
      else if (k == "batch") cfg.batch = to_size(k, v);
      else if (k == "warmup") cfg.warmup = to_size(k, v);
      else if (k == "iterations") cfg.iterations = to_size(k, v);
      else if (k == "decode_tokens") cfg.decode_tokens = to_size(k, v);
      else if (k == "seed") cfg.seed = to_size(k, v);
      else ok = false;
    }
    if (!ok) throw HarnessError("unknown config key: " + key);
  }
}

std::string to_key_values(const ExperimentConfig& c) {
  std::ostringstream os;
  emit_model(os, c.model);
  const TaskSpec& t = c.task;
  os << "task.domains=" << t.domains << "\ntask.subjects=" << t.subjects << "\ntask.relations=" << t.relations
     << "\ntask.objects=" << t.objects << "\ntask.facts=" << t.facts << "\ntask.distractors=" << t.distractors
     << "\ntask.facts_per_doc=" << t.facts_per_doc << "\ntask.docs=" << t.docs
     << "\ntask.mixed_docs=" << (t.mixed_docs ? "true" : "false") << '\n';
  emit_train(os, "pretrain", c.pretrain);
  emit_train(os, "tune", c.tune);
  os << "selection.scope=" << scope_name(c.selection.scope) << "\nselection.forced_index=" << c.selection.forced_index
     << "\nselection.renormalize=" << (c.selection.renormalize ? "true" : "false")
     << "\nselection.freeze_after_prefill=" << (c.selection.freeze_after_prefill ? "true" : "false") << '\n';
  os << "prompt_length=" << c.prompt_length << "\nlora_rank=" << c.lora_rank << "\nprefix_length=" << c.prefix_length
     << "\nprompt_init=" << c.prompt_init
     << "\nbits=" << c.bits << "\nbit_sweep=" << join(c.bit_sweep) << "\nseeds=" << join(c.seeds)
     << "\nwith_prefix=" << (c.with_prefix ? "true" : "false") << '\n';
  return os.str();
}

std::string to_key_values(const BenchConfig& c) {
  std::ostringstream os;
  emit_model(os, c.model);
  os << "prompt_length=" << c.prompt_length << "\nsecond_prompt_length=" << c.second_prompt_length
     << "\ninput_length=" << c.input_length << "\nlora_rank=" << c.lora_rank << "\nbatch=" << c.batch
     << "\nwarmup=" << c.warmup << "\niterations=" << c.iterations << "\ndecode_tokens=" << c.decode_tokens
     << "\nseed=" << c.seed << '\n';
  return os.str();
}

std::string config_digest(const std::string& config_text) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(config_text.data(), config_text.size());
  return os.str();
}

std::string git_revision() {
  std::array<char, 128> buf{};
  std::string out;
  FILE* p = ::popen("git rev-parse HEAD 2>/dev/null", "r");
  if (!p) return "unknown";
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), p)) out += buf.data();
  ::pclose(p);
  out = trim(out);
  if (!out.empty() && out.back() == '\n') out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string Manifest::json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["seeds"] = seeds;
  j["config_digest"] = config_digest(config_text);
  j["git_revision"] = git_revision();
  j["config"] = parse_key_values(config_text);
  j["artifacts"] = artifacts;
  return j.dump(2) + "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw HarnessError("cannot write " + path);
  f << text;
  if (!f) throw HarnessError("write failed: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw HarnessError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace dynprompt
