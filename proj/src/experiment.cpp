#include "qlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "toml.hpp"

namespace qlab {

namespace {

// ---- TOML helpers ------------------------------------------------------------

const toml::table* section(const toml::table& root, std::string_view name) {
  const auto* node = root.get(name);
  if (!node) return nullptr;
  const auto* t = node->as_table();
  if (!t) throw ConfigError("config: [" + std::string(name) + "] must be a table");
  return t;
}

void check_keys(const toml::table* t, std::string_view name, std::initializer_list<std::string_view> known) {
  if (!t) return;
  for (const auto& [k, v] : *t) {
    if (std::find(known.begin(), known.end(), k.str()) == known.end())
      throw ConfigError("config: unknown key '" + std::string(name) + "." + std::string(k.str()) + "'");
  }
}

template <typename T>
void read(const toml::table* t, std::string_view sec, std::string_view key, T& out) {
  if (!t) return;
  const auto* node = t->get(key);
  if (!node) return;
  const std::string where = std::string(sec) + "." + std::string(key);
  if constexpr (std::is_same_v<T, bool>) {
    auto v = node->value<bool>();
    if (!v) throw ConfigError("config: " + where + " must be a boolean");
    out = *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    auto v = node->value<double>();
    if (!v) throw ConfigError("config: " + where + " must be a number");
    out = static_cast<T>(*v);
  } else if constexpr (std::is_integral_v<T>) {
    auto v = node->value<int64_t>();
    if (!v) throw ConfigError("config: " + where + " must be an integer");
    if (*v < 0 && std::is_unsigned_v<T>) throw ConfigError("config: " + where + " must be non-negative");
    out = static_cast<T>(*v);
  } else {
    auto v = node->value<std::string>();
    if (!v) throw ConfigError("config: " + where + " must be a string");
    out = T(*v);
  }
}

template <typename T>
std::optional<std::vector<T>> read_array(const toml::table* t, std::string_view sec, std::string_view key) {
  if (!t) return std::nullopt;
  const auto* node = t->get(key);
  if (!node) return std::nullopt;
  const std::string where = std::string(sec) + "." + std::string(key);
  const auto* arr = node->as_array();
  if (!arr) throw ConfigError("config: " + where + " must be an array");
  std::vector<T> out;
  for (const auto& e : *arr) {
    if constexpr (std::is_floating_point_v<T>) {
      auto v = e.value<double>();
      if (!v) throw ConfigError("config: " + where + " must hold numbers");
      out.push_back(*v);
    } else if constexpr (std::is_integral_v<T>) {
      auto v = e.value<int64_t>();
      if (!v) throw ConfigError("config: " + where + " must hold integers");
      out.push_back(static_cast<T>(*v));
    } else {
      auto v = e.value<std::string>();
      if (!v) throw ConfigError("config: " + where + " must hold strings");
      out.push_back(*v);
    }
  }
  return out;
}

void apply_override(toml::table& root, const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + text + "' is not of the form section.key=value");
  const std::string sec = text.substr(0, dot);
  const std::string key = text.substr(dot + 1, eq - dot - 1);
  std::string value = text.substr(eq + 1);
  toml::table tmp;
  try {
    tmp = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    // bare words are taken as strings
    tmp = toml::table{{"v", value}};
  }
  if (!root.contains(sec)) root.insert(sec, toml::table{});
  auto* t = root.get(sec)->as_table();
  if (!t) throw ConfigError("override: [" + sec + "] is not a table");
  t->insert_or_assign(key, *tmp.get("v"));
}

std::string site_list(const SiteMask& mask) {
  std::string out;
  for (int s = 0; s < kNumSites; ++s)
    if (mask[static_cast<std::size_t>(s)]) out += (out.empty() ? "" : ",") + to_string(static_cast<Site>(s));
  return out;
}

// ---- CSV helpers -------------------------------------------------------------

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q.push_back('"');
    q.push_back(c);
  }
  return q + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back().push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back().push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back().push_back(c);
    }
  }
  return out;
}

std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& s : d.samples) out.push_back(s.label);
  return out;
}

const Matrix& head_weights(const Model& m) {
  if (const auto* d = std::get_if<DiscModel>(&m)) return d->head;
  return std::get<GenModel>(m).decoder;
}

}  // namespace

// ---- config ------------------------------------------------------------------

std::string CalibChoice::name() const {
  if (scheme == CalibrationScheme::coverage) return "coverage:" + std::to_string(coverage_k);
  return to_string(scheme);
}

CalibChoice CalibChoice::parse(std::string_view text) {
  const auto colon = text.find(':');
  CalibChoice c;
  c.scheme = parse_calibration_scheme(text.substr(0, colon));
  if (c.scheme == CalibrationScheme::coverage) {
    if (colon == std::string_view::npos) throw ConfigError("coverage scheme needs a class count, e.g. coverage:1");
    try {
      c.coverage_k = std::stoi(std::string(text.substr(colon + 1)));
    } catch (const std::exception&) {
      throw ConfigError("bad coverage class count in '" + std::string(text) + "'");
    }
    if (c.coverage_k < 1) throw ConfigError("coverage class count must be >= 1");
  } else if (colon != std::string_view::npos) {
    throw ConfigError("only the coverage scheme takes a class count");
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (id.empty()) throw ConfigError("experiment id must not be empty");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (model_types.empty()) throw ConfigError("at least one model type is required");
  if (calib.empty()) throw ConfigError("at least one calibration scheme is required");
  if (noise_grid.empty()) throw ConfigError("noise grid must not be empty");
  for (double e : noise_grid)
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("noise levels must lie in [0, 1]");
  for (int b : bitwidths)
    if (b < 2 || b > 8) throw ConfigError("bitwidths must lie in [2, 8]");
  if (data.source != "synthetic" && data.source != "csv" && data.source != "jsonl")
    throw ConfigError("data.source must be synthetic, csv or jsonl");
  if (data.source != "synthetic" && (data.train_path.empty() || data.test_path.empty()))
    throw ConfigError("data.train_path and data.test_path are required for file sources");
  if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0))
    throw ConfigError("data.train_fraction must lie in (0, 1)");
  if (data.vocab_size < 3) throw ConfigError("data.vocab_size must be at least 3");
  if (dims.embed_dim < 1 || dims.hidden_dim < 1 || dims.label_dim < 1)
    throw ConfigError("model dimensions must be positive");
  if (!(ptq.calib_fraction > 0.0 && ptq.calib_fraction <= 1.0))
    throw ConfigError("calib.fraction must lie in (0, 1]");
  if (kde_bitwidth < 2 || kde_bitwidth > 8) throw ConfigError("report.kde_bitwidth must lie in [2, 8]");
  train.validate();
  QuantSpec probe = ptq.spec;
  probe.bitwidth = 8;
  probe.validate();
}

ExperimentConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(os.str());
  }
  for (const auto& o : overrides) apply_override(root, o);

  for (const auto& [k, v] : root)
    if (!v.is_table()) throw ConfigError("config: top-level key '" + std::string(k.str()) + "' must be a section");
  check_keys(&root, "", {"experiment", "data", "synthetic", "model", "train", "quant", "calib", "gpfq", "noise",
                         "report"});

  ExperimentConfig cfg;
  const auto* ex = section(root, "experiment");
  check_keys(ex, "experiment", {"id", "output_dir", "seeds"});
  read(ex, "experiment", "id", cfg.id);
  std::string out_dir = cfg.output_dir.string();
  read(ex, "experiment", "output_dir", out_dir);
  cfg.output_dir = out_dir;
  if (auto s = read_array<int64_t>(ex, "experiment", "seeds")) {
    cfg.seeds.clear();
    for (auto v : *s) {
      if (v < 0) throw ConfigError("config: seeds must be non-negative");
      cfg.seeds.push_back(static_cast<uint64_t>(v));
    }
  }

  const auto* da = section(root, "data");
  check_keys(da, "data", {"source", "train_path", "test_path", "num_classes", "train_samples", "test_samples",
                          "subsample_seed", "vocab_size", "min_freq", "max_tokens", "train_fraction"});
  auto& d = cfg.data;
  read(da, "data", "source", d.source);
  std::string tp, vp;
  read(da, "data", "train_path", tp);
  read(da, "data", "test_path", vp);
  d.train_path = tp;
  d.test_path = vp;
  read(da, "data", "num_classes", d.num_classes);
  read(da, "data", "train_samples", d.train_samples);
  read(da, "data", "test_samples", d.test_samples);
  read(da, "data", "subsample_seed", d.subsample_seed);
  read(da, "data", "vocab_size", d.vocab_size);
  read(da, "data", "min_freq", d.min_freq);
  read(da, "data", "max_tokens", d.max_tokens);
  read(da, "data", "train_fraction", d.train_fraction);

  const auto* sy = section(root, "synthetic");
  check_keys(sy, "synthetic", {"seed", "general_words", "topic_words_per_class", "neighbor_leak", "label_noise"});
  read(sy, "synthetic", "seed", d.synth.seed);
  read(sy, "synthetic", "general_words", d.synth.general_words);
  read(sy, "synthetic", "topic_words_per_class", d.synth.topic_words_per_class);
  read(sy, "synthetic", "neighbor_leak", d.synth.neighbor_leak);
  read(sy, "synthetic", "label_noise", d.synth.label_noise);

  const auto* mo = section(root, "model");
  check_keys(mo, "model", {"types", "embed_dim", "hidden_dim", "label_dim"});
  if (auto t = read_array<std::string>(mo, "model", "types")) {
    cfg.model_types.clear();
    for (const auto& s : *t) cfg.model_types.push_back(parse_model_type(s));
  }
  read(mo, "model", "embed_dim", cfg.dims.embed_dim);
  read(mo, "model", "hidden_dim", cfg.dims.hidden_dim);
  read(mo, "model", "label_dim", cfg.dims.label_dim);

  const auto* tr = section(root, "train");
  check_keys(tr, "train", {"learning_rate", "batch_size", "max_epochs", "patience", "clip_norm", "noise"});
  read(tr, "train", "learning_rate", cfg.train.learning_rate);
  read(tr, "train", "batch_size", cfg.train.batch_size);
  read(tr, "train", "max_epochs", cfg.train.max_epochs);
  read(tr, "train", "patience", cfg.train.patience);
  read(tr, "train", "clip_norm", cfg.train.clip_norm);
  double train_noise = 0.0;
  read(tr, "train", "noise", train_noise);
  if (train_noise > 0.0) cfg.train.train_noise = NoiseSpec{train_noise};

  const auto* qu = section(root, "quant");
  check_keys(qu, "quant", {"bitwidths", "include_fp", "scale_method", "percentile", "symmetric", "signed", "sites",
                           "conditioning"});
  if (auto b = read_array<int64_t>(qu, "quant", "bitwidths")) {
    cfg.bitwidths.clear();
    for (auto v : *b) cfg.bitwidths.push_back(static_cast<int>(v));
  }
  read(qu, "quant", "include_fp", cfg.include_fp);
  std::string method = to_string(cfg.ptq.spec.scale_method);
  read(qu, "quant", "scale_method", method);
  cfg.ptq.spec.scale_method = parse_scale_method(method);
  read(qu, "quant", "percentile", cfg.ptq.spec.percentile);
  read(qu, "quant", "symmetric", cfg.ptq.spec.symmetric);
  read(qu, "quant", "signed", cfg.ptq.spec.is_signed);
  if (auto s = read_array<std::string>(qu, "quant", "sites")) {
    cfg.ptq.sites = {false, false, false, false};
    for (const auto& name : *s) cfg.ptq.sites[static_cast<std::size_t>(parse_site(name))] = true;
  }
  std::string cond = to_string(cfg.ptq.conditioning);
  read(qu, "quant", "conditioning", cond);
  cfg.ptq.conditioning = parse_gen_conditioning(cond);

  const auto* ca = section(root, "calib");
  check_keys(ca, "calib", {"schemes", "fraction"});
  if (auto s = read_array<std::string>(ca, "calib", "schemes")) {
    cfg.calib.clear();
    for (const auto& name : *s) cfg.calib.push_back(CalibChoice::parse(name));
  }
  read(ca, "calib", "fraction", cfg.ptq.calib_fraction);

  const auto* gp = section(root, "gpfq");
  check_keys(gp, "gpfq", {"enabled", "max_rows", "reference"});
  read(gp, "gpfq", "enabled", cfg.ptq.gpfq);
  read(gp, "gpfq", "max_rows", cfg.ptq.collect.max_rows);
  std::string ref = cfg.ptq.collect.reference == ReferenceMode::fp ? "fp" : "quantized";
  read(gp, "gpfq", "reference", ref);
  if (ref == "fp")
    cfg.ptq.collect.reference = ReferenceMode::fp;
  else if (ref == "quantized")
    cfg.ptq.collect.reference = ReferenceMode::quantized;
  else
    throw ConfigError("config: gpfq.reference must be fp or quantized");

  const auto* no = section(root, "noise");
  check_keys(no, "noise", {"grid"});
  if (auto g = read_array<double>(no, "noise", "grid")) cfg.noise_grid = *g;

  const auto* re = section(root, "report");
  check_keys(re, "report", {"kde_noise", "kde_bitwidth"});
  read(re, "report", "kde_noise", cfg.kde_noise);
  read(re, "report", "kde_bitwidth", cfg.kde_bitwidth);

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string config_to_toml(const ExperimentConfig& cfg) {
  auto arr = [](const auto& values) {
    toml::array a;
    for (const auto& v : values) a.push_back(v);
    return a;
  };
  std::vector<int64_t> seeds(cfg.seeds.begin(), cfg.seeds.end());
  std::vector<std::string> types, schemes, sites;
  for (auto t : cfg.model_types) types.push_back(to_string(t));
  for (const auto& c : cfg.calib) schemes.push_back(c.name());
  for (int s = 0; s < kNumSites; ++s)
    if (cfg.ptq.sites[static_cast<std::size_t>(s)]) sites.push_back(to_string(static_cast<Site>(s)));
  std::vector<int64_t> bits(cfg.bitwidths.begin(), cfg.bitwidths.end());

  const auto& d = cfg.data;
  toml::table root{
      {"experiment", toml::table{{"id", cfg.id}, {"output_dir", cfg.output_dir.string()}, {"seeds", arr(seeds)}}},
      {"data", toml::table{{"source", d.source},
                           {"train_path", d.train_path.string()},
                           {"test_path", d.test_path.string()},
                           {"num_classes", d.num_classes},
                           {"train_samples", static_cast<int64_t>(d.train_samples)},
                           {"test_samples", static_cast<int64_t>(d.test_samples)},
                           {"subsample_seed", static_cast<int64_t>(d.subsample_seed)},
                           {"vocab_size", d.vocab_size},
                           {"min_freq", d.min_freq},
                           {"max_tokens", static_cast<int64_t>(d.max_tokens)},
                           {"train_fraction", d.train_fraction}}},
      {"synthetic", toml::table{{"seed", static_cast<int64_t>(d.synth.seed)},
                                {"general_words", d.synth.general_words},
                                {"topic_words_per_class", d.synth.topic_words_per_class},
                                {"neighbor_leak", d.synth.neighbor_leak},
                                {"label_noise", d.synth.label_noise}}},
      {"model", toml::table{{"types", arr(types)},
                            {"embed_dim", cfg.dims.embed_dim},
                            {"hidden_dim", cfg.dims.hidden_dim},
                            {"label_dim", cfg.dims.label_dim}}},
      {"train", toml::table{{"learning_rate", cfg.train.learning_rate},
                            {"batch_size", cfg.train.batch_size},
                            {"max_epochs", cfg.train.max_epochs},
                            {"patience", cfg.train.patience},
                            {"clip_norm", cfg.train.clip_norm},
                            {"noise", cfg.train.train_noise ? cfg.train.train_noise->epsilon : 0.0}}},
      {"quant", toml::table{{"bitwidths", arr(bits)},
                            {"include_fp", cfg.include_fp},
                            {"scale_method", to_string(cfg.ptq.spec.scale_method)},
                            {"percentile", cfg.ptq.spec.percentile},
                            {"symmetric", cfg.ptq.spec.symmetric},
                            {"signed", cfg.ptq.spec.is_signed},
                            {"sites", arr(sites)},
                            {"conditioning", to_string(cfg.ptq.conditioning)}}},
      {"calib", toml::table{{"schemes", arr(schemes)}, {"fraction", cfg.ptq.calib_fraction}}},
      {"gpfq", toml::table{{"enabled", cfg.ptq.gpfq},
                           {"max_rows", static_cast<int64_t>(cfg.ptq.collect.max_rows)},
                           {"reference", cfg.ptq.collect.reference == ReferenceMode::fp ? "fp" : "quantized"}}},
      {"noise", toml::table{{"grid", arr(cfg.noise_grid)}}},
      {"report", toml::table{{"kde_noise", cfg.kde_noise}, {"kde_bitwidth", cfg.kde_bitwidth}}},
  };
  std::ostringstream os;
  os << root << "\n";
  return os.str();
}

std::filesystem::path output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return std::filesystem::path(env) / cfg.id;
  return cfg.output_dir / cfg.id;
}

// ---- data --------------------------------------------------------------------

Dataset tokenize_dataset(Dataset data, const Vocab& vocab, std::size_t max_tokens) {
  attach_tokens(data, vocab);
  if (max_tokens) truncate_tokens(data, max_tokens);
  return data;
}

PreparedData prepare_data(const DataConfig& cfg) {
  Dataset pool, test;
  if (cfg.source == "synthetic") {
    SynthCorpusSpec spec = cfg.synth;
    spec.num_classes = cfg.num_classes;
    spec.num_train = cfg.train_samples ? cfg.train_samples : spec.num_train;
    spec.num_test = cfg.test_samples ? cfg.test_samples : spec.num_test;
    const auto corpus = generate_news_corpus(spec);
    pool = to_dataset(corpus.train, cfg.num_classes, Split::train);
    test = to_dataset(corpus.test, cfg.num_classes, Split::test);
  } else {
    const auto fmt = parse_dataset_format(cfg.source);
    pool = load_dataset(cfg.train_path, fmt, cfg.num_classes);
    test = load_dataset(cfg.test_path, fmt, pool.num_classes);
    if (cfg.train_samples && pool.size() > cfg.train_samples)
      pool = subsample(pool, cfg.train_samples, cfg.subsample_seed);
    if (cfg.test_samples && test.size() > cfg.test_samples)
      test = subsample(test, cfg.test_samples, cfg.subsample_seed + 1);
  }
  pool.validate();
  test.validate();
  std::vector<std::string> texts;
  texts.reserve(pool.size());
  for (const auto& s : pool.samples) texts.push_back(s.text);
  PreparedData out{build_vocab(texts, cfg.vocab_size, cfg.min_freq), {}, {}, cfg.max_tokens};
  out.pool = tokenize_dataset(std::move(pool), out.vocab, cfg.max_tokens);
  out.test = tokenize_dataset(std::move(test), out.vocab, cfg.max_tokens);
  return out;
}

Dataset corrupt(const Dataset& data, const Vocab& vocab, std::size_t max_tokens, const NoiseSpec& noise) {
  if (noise.epsilon <= 0.0) return data;
  Rng rng(noise.seed);
  Dataset out = data;
  for (auto& s : out.samples) s.text = inject_noise(s.text, noise, rng);
  return tokenize_dataset(std::move(out), vocab, max_tokens);
}

TrainValSplit seed_split(const PreparedData& data, double train_fraction, uint64_t seed) {
  return split_dataset(data.pool, train_fraction, derive_seed(seed, 1));
}

ModelDims resolve_dims(const ExperimentConfig& cfg, const PreparedData& data) {
  ModelDims d = cfg.dims;
  d.vocab_size = data.vocab.size();
  d.num_classes = data.pool.num_classes;
  return d;
}

TrainResult train_model(const ExperimentConfig& cfg, ModelType type, const PreparedData& data,
                        const TrainValSplit& split, uint64_t seed,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, 2);
  if (tc.train_noise) tc.train_noise->seed = derive_seed(seed, 3);
  TrainOptions opts{&data.vocab, data.max_tokens, on_epoch};
  return train(init_model(type, resolve_dims(cfg, data), derive_seed(seed, 4)), split.train, split.val, tc, opts);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 over the pair
  uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- PTQ ---------------------------------------------------------------------

PtqResult run_ptq(const Model& fp, const Dataset& calib_pool, const CalibChoice& choice, uint64_t seed,
                  const PtqOptions& options) {
  PtqResult r;
  auto& audit = r.audit;
  CalibrationPlan plan{choice.scheme, choice.coverage_k, options.calib_fraction, derive_seed(seed, 5)};
  const Dataset calib = sample_calibration(calib_pool, plan);
  audit.calib_size = calib.size();
  audit.calib_class_counts = calib.class_counts();
  {
    std::ostringstream os;
    os << "calibration set: " << choice.name() << ", " << calib.size() << " samples, per class";
    for (auto c : audit.calib_class_counts) os << " " << c;
    audit.log.push_back(os.str());
  }
  const std::vector<TokenSequence> tokens = strip_labels(calib);

  QuantizedModel q = quantize_weights(fp, options.spec, options.sites);
  q.conditioning = options.conditioning;
  audit.log.push_back("raw quantization: " + std::to_string(options.spec.bitwidth) + "-bit weights, " +
                      std::to_string(q.weight_params.size()) + " tensors");
  q = calibrate(std::move(q), tokens);
  {
    std::ostringstream os;
    os << "calibration: sites " << (q.passthrough() ? "none" : site_list(q.sites));
    for (int s = 0; s < kNumSites; ++s)
      if (const auto& p = q.activation_params[static_cast<std::size_t>(s)])
        os << "; " << to_string(static_cast<Site>(s)) << " scale " << p->scale;
    audit.log.push_back(os.str());
  }
  if (options.gpfq && !q.passthrough()) {
    const auto acts = collect_layer_inputs(q, tokens, options.collect);
    GpfqReport rep;
    q = gpfq_refine(std::move(q), acts, &rep);
    std::ostringstream os;
    os << "gpfq: " << rep.tensor << ", " << rep.rows << " rows, m = " << rep.samples << ", objective "
       << rep.objective_before << " -> " << rep.objective_after;
    audit.log.push_back(os.str());
    audit.gpfq = rep;
  } else {
    audit.log.push_back("gpfq: skipped");
  }
  r.model = std::move(q);
  return r;
}

double evaluate(const QuantizedModel& q, const Dataset& data) {
  return accuracy(quantized_predict(q, data), labels_of(data), data.num_classes).accuracy;
}

// ---- sweep -------------------------------------------------------------------

std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, const PreparedData& data, const SweepHooks& hooks) {
  cfg.validate();
  std::vector<ResultRow> rows;
  auto emit = [&](ResultRow row) {
    if (hooks.on_row) hooks.on_row(row);
    rows.push_back(std::move(row));
  };
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };

  for (uint64_t seed : cfg.seeds) {
    std::vector<Dataset> noisy;
    for (std::size_t e = 0; e < cfg.noise_grid.size(); ++e) {
      NoiseSpec ns;
      ns.epsilon = cfg.noise_grid[e];
      ns.seed = derive_seed(seed, 100 + e);
      noisy.push_back(corrupt(data.test, data.vocab, data.max_tokens, ns));
    }
    const TrainValSplit split = seed_split(data, cfg.data.train_fraction, seed);

    for (ModelType type : cfg.model_types) {
      ResultRow base;
      base.experiment_id = cfg.id;
      base.model_type = type;
      base.seed = seed;

      std::optional<Model> fp;
      std::string train_error;
      try {
        log("training " + to_string(type) + " seed " + std::to_string(seed));
        fp = train_model(cfg, type, data, split, seed).model;
      } catch (const std::exception& e) {
        train_error = std::string("training failed: ") + e.what();
        log(train_error);
      }

      auto cell = [&](int bits, const CalibChoice* choice) {
        ResultRow r = base;
        r.bitwidth = bits;
        r.calib_scheme = choice ? to_string(choice->scheme) : "none";
        r.coverage_k = choice ? choice->coverage_k : 0;
        return r;
      };
      auto fail_all = [&](ResultRow r, const std::string& msg) {
        for (double eps : cfg.noise_grid) {
          r.noise_eps = eps;
          r.accuracy = std::nan("");
          r.status = msg;
          emit(r);
        }
      };

      if (cfg.include_fp) {
        ResultRow r = cell(0, nullptr);
        if (!fp) {
          fail_all(r, train_error);
        } else {
          const QuantizedModel pass = make_passthrough(*fp);
          for (std::size_t e = 0; e < cfg.noise_grid.size(); ++e) {
            r.noise_eps = cfg.noise_grid[e];
            r.accuracy = evaluate(pass, noisy[e]);
            emit(r);
          }
        }
      }
      for (int bits : cfg.bitwidths) {
        for (const auto& choice : cfg.calib) {
          ResultRow r = cell(bits, &choice);
          if (!fp) {
            fail_all(r, train_error);
            continue;
          }
          try {
            PtqOptions opts = cfg.ptq;
            opts.spec.bitwidth = bits;
            const PtqResult ptq = run_ptq(*fp, split.train, choice, seed, opts);
            for (const auto& line : ptq.audit.log) log("  " + line);
            r.ks_weight = weight_shift_report(head_weights(*fp), head_weights(ptq.model.model)).statistic;
            if (ptq.audit.gpfq) {
              r.gpfq_before = ptq.audit.gpfq->objective_before;
              r.gpfq_after = ptq.audit.gpfq->objective_after;
            }
            for (std::size_t e = 0; e < cfg.noise_grid.size(); ++e) {
              r.noise_eps = cfg.noise_grid[e];
              r.accuracy = evaluate(ptq.model, noisy[e]);
              emit(r);
            }
          } catch (const std::exception& ex) {
            log(std::string("cell failed: ") + ex.what());
            fail_all(r, ex.what());
          }
        }
      }
    }
  }
  return rows;
}

// ---- persistence -------------------------------------------------------------

std::string bitwidth_label(int bitwidth) { return bitwidth == 0 ? "fp32" : std::to_string(bitwidth); }

std::string results_csv_header() {
  return "experiment_id,model_type,bitwidth,calib_scheme,coverage_k,noise_eps,seed,accuracy,ks_weight,"
         "gpfq_before,gpfq_after,status";
}

std::string to_csv(const ResultRow& r) {
  std::ostringstream os;
  os << quote_csv(r.experiment_id) << ',' << to_string(r.model_type) << ',' << bitwidth_label(r.bitwidth) << ','
     << r.calib_scheme << ',' << r.coverage_k << ',' << fmt(r.noise_eps) << ',' << r.seed << ',' << fmt(r.accuracy)
     << ',' << fmt(r.ks_weight) << ',' << fmt(r.gpfq_before) << ',' << fmt(r.gpfq_after) << ','
     << quote_csv(r.status);
  return os.str();
}

void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << results_csv_header() << "\n";
  for (const auto& r : rows) out << to_csv(r) << "\n";
}

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != results_csv_header()) throw DataError(path.string() + " is not a results file");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 12) throw DataError("malformed results row: " + line);
    ResultRow r;
    r.experiment_id = f[0];
    r.model_type = parse_model_type(f[1]);
    r.bitwidth = f[2] == "fp32" ? 0 : std::stoi(f[2]);
    r.calib_scheme = f[3];
    r.coverage_k = std::stoi(f[4]);
    r.noise_eps = std::stod(f[5]);
    r.seed = std::stoull(f[6]);
    r.accuracy = std::stod(f[7]);
    r.ks_weight = std::stod(f[8]);
    r.gpfq_before = std::stod(f[9]);
    r.gpfq_after = std::stod(f[10]);
    r.status = f[11];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string summary_markdown(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, int, std::string, double>;
  std::map<Key, std::vector<double>> cells;
  std::map<Key, int> failures;
  for (const auto& r : rows) {
    std::string scheme = r.calib_scheme;
    if (r.calib_scheme == "coverage") scheme += ":" + std::to_string(r.coverage_k);
    // fp32 first, then bitwidths descending
    const Key k{to_string(r.model_type), r.bitwidth == 0 ? 0 : 100 - r.bitwidth, scheme, r.noise_eps};
    if (r.status == "ok")
      cells[k].push_back(r.accuracy);
    else
      ++failures[k];
    cells.try_emplace(k);
  }
  std::ostringstream os;
  os << "| model | bitwidth | calibration | noise | accuracy mean | std | n | failed |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (auto it = cells.begin(); it != cells.end(); ++it) {
    const auto& [model, bits, scheme, eps] = it->first;
    const auto& v = it->second;
    double mean = 0.0, sd = 0.0;
    for (double x : v) mean += x;
    if (!v.empty()) mean /= static_cast<double>(v.size());
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
    os << "| " << model << " | " << (bits == 0 ? std::string("fp32") : std::to_string(100 - bits)) << " | " << scheme
       << " | " << eps << " | " << std::fixed << std::setprecision(4) << mean << " | " << sd
       << std::defaultfloat << " | " << v.size() << " | " << failures[it->first] << " |\n";
  }
  return os.str();
}

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,train_loss,val_accuracy,best\n";
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_accuracy) << ','
        << (e.epoch == history.best_epoch ? 1 : 0) << "\n";
}

void write_kde_csv(const std::filesystem::path& path, const KdeCurve& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "x,density\n";
  for (std::size_t i = 0; i < curve.grid.size(); ++i) out << fmt(curve.grid[i]) << ',' << fmt(curve.density[i]) << "\n";
}

}  // namespace qlab
