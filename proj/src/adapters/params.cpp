#include <cstdio>

#include "dynprompt/adapters.hpp"
#include "json.hpp"

namespace dynprompt {

using json = nlohmann::json;

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "prompt") return AdapterKind::prompt;
  if (name == "idp") return AdapterKind::idp;
  if (name == "prefix") return AdapterKind::prefix;
  if (name == "lora") return AdapterKind::lora;
  throw AdapterError("unknown adapter kind '" + name + "'");
}

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::prompt: return "prompt";
    case AdapterKind::idp: return "idp";
    case AdapterKind::prefix: return "prefix";
    case AdapterKind::lora: return "lora";
  }
  return "?";
}

std::string format_millions(std::uint64_t count) {
  // Tenths of a million, truncated toward zero.
  const std::uint64_t tenths = count / 100000;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%llu.%lluM", static_cast<unsigned long long>(tenths / 10),
                static_cast<unsigned long long>(tenths % 10));
  return buf;
}

ParamReport count_params(AdapterKind kind, const ParamConfig& c) {
  auto need = [](std::size_t v, const char* what) {
    if (v == 0) throw AdapterError(std::string("count_params: ") + what + " must be positive");
    return static_cast<std::uint64_t>(v);
  };
  ParamReport r;
  r.kind = kind;
  switch (kind) {
    case AdapterKind::prompt:
    case AdapterKind::idp: {
      const auto t = need(c.tokens, "tokens"), d = need(c.d_model, "d_model");
      r.count = t * d;
      r.shape_exact = r.count;
      r.config = "t=" + std::to_string(t) + " d=" + std::to_string(d);
      break;
    }
    case AdapterKind::prefix: {
      const auto L = need(c.n_layers, "n_layers"), t = need(c.tokens, "tokens"), d = need(c.d_model, "d_model");
      r.count = L * t * d;
      r.shape_exact = r.count;
      r.config = "L=" + std::to_string(L) + " t=" + std::to_string(t) + " d=" + std::to_string(d);
      break;
    }
    case AdapterKind::lora: {
      const auto L = need(c.n_layers, "n_layers"), rk = need(c.rank, "rank");
      const auto da = need(c.d_act, "d_act"), di = need(c.d_inter, "d_inter");
      r.count = L * (8 * da * rk + 4 * di * rk);
      // Four d x d projections plus up (d -> d_inter) and down (d_inter -> d), each r (d_in + d_out).
      r.shape_exact = L * (4 * rk * (da + da) + 2 * rk * (da + di));
      r.config = "L=" + std::to_string(L) + " r=" + std::to_string(rk) + " d_act=" + std::to_string(da) +
                 " d_inter=" + std::to_string(di);
      break;
    }
  }
  r.millions = format_millions(r.count);
  return r;
}

void save_prompt(const std::string& path, const SoftPrompt& p) {
  Container c;
  c.kind = "prompt";
  c.meta_json = json{{"id", p.id}, {"dataset", p.dataset_tag}, {"steps", p.steps}}.dump();
  c.tensors.push_back({"prompt", p.embedding});
  write_container(path, c);
}

SoftPrompt load_prompt(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "prompt") throw AdapterError(path + " holds a '" + c.kind + "' checkpoint, not a prompt");
  const json meta = json::parse(c.meta_json);
  SoftPrompt p;
  p.id = meta.at("id");
  p.dataset_tag = meta.at("dataset");
  p.steps = meta.at("steps");
  p.embedding = c.at("prompt");
  return p;
}

void save_lora(const std::string& path, const LoraAdapter<float>& a) {
  Container c;
  c.kind = "lora";
  c.meta_json = json{{"rank", a.rank}, {"scale", a.scale}, {"n_layers", a.layers.size()}}.dump();
  const_cast<LoraAdapter<float>&>(a).for_each(
      [&](const std::string& name, Tensor& t) { c.tensors.push_back({name, t}); });
  write_container(path, c);
}

LoraAdapter<float> load_lora(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "lora") throw AdapterError(path + " holds a '" + c.kind + "' checkpoint, not LoRA");
  const json meta = json::parse(c.meta_json);
  LoraAdapter<float> a;
  a.rank = meta.at("rank");
  a.scale = meta.at("scale");
  a.layers.resize(meta.at("n_layers").get<std::size_t>());
  a.for_each([&](const std::string& name, Tensor& t) { t = c.at(name); });
  return a;
}

void save_prefix(const std::string& path, const PrefixSet<float>& p) {
  Container c;
  c.kind = "prefix";
  c.meta_json = json{{"tokens", p.length()}, {"n_layers", p.layers.size()}}.dump();
  for (std::size_t l = 0; l < p.layers.size(); ++l) c.tensors.push_back({layer_tensor_name(l, "prefix"), p.layers[l]});
  write_container(path, c);
}

PrefixSet<float> load_prefix(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "prefix") throw AdapterError(path + " holds a '" + c.kind + "' checkpoint, not a prefix");
  const json meta = json::parse(c.meta_json);
  PrefixSet<float> p;
  const std::size_t n = meta.at("n_layers");
  for (std::size_t l = 0; l < n; ++l) p.layers.push_back(c.at(layer_tensor_name(l, "prefix")));
  return p;
}

}  // namespace dynprompt
