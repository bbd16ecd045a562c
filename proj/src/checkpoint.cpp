#include "qlab/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace qlab {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "qlab-checkpoint";

json params_to_json(const QuantParams& p) {
  return {{"scale", p.scale}, {"zero_point", p.zero_point}, {"qmin", p.qmin}, {"qmax", p.qmax},
          {"bitwidth", p.bitwidth}};
}

QuantParams params_from_json(const json& j) {
  return {j.at("scale").get<double>(), j.at("zero_point").get<int>(), j.at("qmin").get<int>(),
          j.at("qmax").get<int>(), j.at("bitwidth").get<int>()};
}

json tensors_to_json(const Model& m) {
  json out = json::object();
  for (const auto& t : model_tensors(m)) {
    auto v = t.values();
    out[t.name] = {{"shape", {t.rows, t.cols}}, {"data", std::vector<float>(v.begin(), v.end())}};
  }
  return out;
}

void tensors_from_json(const json& j, Model& m) {
  for (auto& t : model_tensors(m)) {
    if (!j.contains(t.name)) throw DataError("checkpoint is missing tensor " + t.name);
    const auto& e = j.at(t.name);
    const auto shape = e.at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] != t.rows || shape[1] != t.cols)
      throw DataError("checkpoint tensor " + t.name + " has the wrong shape");
    const auto data = e.at("data").get<std::vector<float>>();
    if (data.size() != t.values().size()) throw DataError("checkpoint tensor " + t.name + " has the wrong size");
    std::copy(data.begin(), data.end(), t.values().begin());
  }
}

json quantization_to_json(const QuantizedModel& q) {
  json j;
  j["spec"] = {{"bitwidth", q.spec.bitwidth},
               {"signed", q.spec.is_signed},
               {"symmetric", q.spec.symmetric},
               {"scale_method", to_string(q.spec.scale_method)},
               {"percentile", q.spec.percentile},
               {"enabled", q.spec.enabled}};
  j["conditioning"] = to_string(q.conditioning);
  json sites = json::object();
  for (int s = 0; s < kNumSites; ++s) {
    const auto i = static_cast<std::size_t>(s);
    if (!q.sites[i]) continue;
    sites[to_string(static_cast<Site>(s))] =
        q.activation_params[i] ? params_to_json(*q.activation_params[i]) : json(nullptr);
  }
  j["activations"] = sites;
  // quantized weights as integer codes; dequantizing reproduces them exactly
  json weights = json::object();
  for (const auto& t : model_tensors(q.model)) {
    const auto it = q.weight_params.find(t.name);
    if (it == q.weight_params.end()) continue;
    std::vector<int> codes;
    codes.reserve(t.values().size());
    for (float v : t.values()) codes.push_back(quantize_code(v, it->second));
    json e = params_to_json(it->second);
    e["codes"] = codes;
    weights[t.name] = e;
  }
  j["weights"] = weights;
  return j;
}

QuantizedModel quantization_from_json(const json& j, const Model& fp) {
  QuantizedModel q;
  q.fp = fp;
  q.model = fp;
  const auto& s = j.at("spec");
  q.spec.bitwidth = s.at("bitwidth").get<int>();
  q.spec.is_signed = s.at("signed").get<bool>();
  q.spec.symmetric = s.at("symmetric").get<bool>();
  q.spec.scale_method = parse_scale_method(s.at("scale_method").get<std::string>());
  q.spec.percentile = s.at("percentile").get<double>();
  q.spec.enabled = s.at("enabled").get<bool>();
  q.conditioning = parse_gen_conditioning(j.at("conditioning").get<std::string>());
  q.sites = {false, false, false, false};
  for (const auto& [name, p] : j.at("activations").items()) {
    const auto i = static_cast<std::size_t>(parse_site(name));
    q.sites[i] = true;
    if (!p.is_null()) q.activation_params[i] = params_from_json(p);
  }
  const auto& weights = j.at("weights");
  for (auto& t : model_tensors(q.model)) {
    if (!weights.contains(t.name)) continue;
    const auto& e = weights.at(t.name);
    const QuantParams p = params_from_json(e);
    const auto codes = e.at("codes").get<std::vector<int>>();
    if (codes.size() != t.values().size()) throw DataError("quantized tensor " + t.name + " has the wrong size");
    auto v = t.values();
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (codes[i] < p.qmin || codes[i] > p.qmax) throw DataError("code out of range in " + t.name);
      v[i] = static_cast<float>((codes[i] - p.zero_point) * p.scale);
    }
    q.weight_params.emplace(t.name, p);
  }
  return q;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  const ModelDims d = model_dims(ckpt.model);
  json j;
  j["format"] = kFormat;
  j["version"] = kCheckpointVersion;
  j["header"] = {{"model_type", to_string(model_type(ckpt.model))},
                 {"vocab_size", d.vocab_size},
                 {"embed_dim", d.embed_dim},
                 {"hidden_dim", d.hidden_dim},
                 {"label_dim", d.label_dim},
                 {"num_classes", d.num_classes},
                 {"gate_order", "i,f,g,o"},
                 {"max_tokens", ckpt.max_tokens}};
  j["vocab"] = ckpt.vocab.tokens();
  j["tensors"] = tensors_to_json(ckpt.model);
  if (ckpt.quantized) j["quantization"] = quantization_to_json(*ckpt.quantized);
  return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", "") != kFormat) throw DataError("not a qlab checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    const auto& h = j.at("header");
    if (h.at("gate_order").get<std::string>() != "i,f,g,o") throw DataError("unsupported gate order");
    ModelDims d;
    d.vocab_size = h.at("vocab_size").get<int>();
    d.embed_dim = h.at("embed_dim").get<int>();
    d.hidden_dim = h.at("hidden_dim").get<int>();
    d.label_dim = h.at("label_dim").get<int>();
    d.num_classes = h.at("num_classes").get<int>();
    const ModelType type = parse_model_type(h.at("model_type").get<std::string>());
    Checkpoint c{type == ModelType::disc ? Model(DiscModel::zeros(d)) : Model(GenModel::zeros(d)),
                 Vocab(j.at("vocab").get<std::vector<std::string>>()), h.at("max_tokens").get<std::size_t>(),
                 std::nullopt};
    if (c.vocab.size() != d.vocab_size) throw DataError("vocabulary size does not match the header");
    tensors_from_json(j.at("tensors"), c.model);
    if (j.contains("quantization")) c.quantized = quantization_from_json(j.at("quantization"), c.model);
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << checkpoint_to_json(ckpt);
  if (!out) throw DataError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace qlab
