#include <bit>
#include <cstring>
#include <fstream>

#include "dynprompt/model.hpp"
#include "json.hpp"

namespace dynprompt {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

const Tensor& Container::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw ModelError("container has no tensor named " + name);
}

bool Container::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_container(const std::string& path, const Container& c) {
  json header;
  header["kind"] = c.kind;
  header["meta"] = json::parse(c.meta_json);
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::uint64_t nbytes = t.tensor.numel() * sizeof(float);
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", t.tensor.shape()}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot open " + path + " for writing");
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : c.tensors) {
    out.write(reinterpret_cast<const char*>(t.tensor.data()),
              static_cast<std::streamsize>(t.tensor.numel() * sizeof(float)));
  }
  if (!out) throw ModelError("write failed for " + path);
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ull << 30)) throw ModelError(path + ": bad container header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ModelError(path + ": truncated header");
  const json header = json::parse(text);
  const std::streamoff data_start = static_cast<std::streamoff>(sizeof len + len);

  Container c;
  c.kind = header.at("kind").get<std::string>();
  c.meta_json = header.at("meta").dump();
  for (const auto& entry : header.at("tensors")) {
    if (entry.at("dtype").get<std::string>() != "f32") throw ModelError(path + ": unsupported dtype");
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != t.numel() * sizeof(float)) throw ModelError(path + ": byte count does not match shape");
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw ModelError(path + ": truncated tensor " + entry.at("name").get<std::string>());
    c.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  return c;
}

std::string config_json(const ModelConfig& cfg) {
  json j = {{"d_model", cfg.d_model},     {"n_heads", cfg.n_heads},
            {"n_layers", cfg.n_layers},   {"d_ff", cfg.d_ff},
            {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
            {"seed", cfg.seed},           {"rope_base", cfg.rope_base},
            {"norm_eps", cfg.norm_eps},   {"prompt_positions", cfg.prompt_positions}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.n_layers = j.at("n_layers");
  c.d_ff = j.at("d_ff");
  c.vocab_size = j.at("vocab_size");
  c.max_seq_len = j.at("max_seq_len");
  c.seed = j.at("seed");
  c.rope_base = j.at("rope_base");
  c.norm_eps = j.at("norm_eps");
  c.prompt_positions = j.at("prompt_positions");
  c.validate();
  return c;
}

void save_weights(const std::string& path, const Weights<float>& w) {
  Container c;
  c.kind = "model";
  c.meta_json = json{{"config", json::parse(config_json(w.config))}}.dump();
  w.for_each([&](const std::string& name, const Tensor& t) { c.tensors.push_back({name, t}); });
  write_container(path, c);
}

Weights<float> load_weights(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "model") throw ModelError(path + " holds a '" + c.kind + "' checkpoint, not a model");
  Weights<float> w = Weights<float>::init(config_from_json(json::parse(c.meta_json).at("config").dump()));
  w.for_each([&](const std::string& name, Tensor& t) { t = c.at(name); });
  w.check_shapes();
  return w;
}

}  // namespace dynprompt
