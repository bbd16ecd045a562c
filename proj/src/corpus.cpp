#include "qlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace qlab {

namespace {

bool kept_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Splits one CSV record (RFC 4180 quoting). Returns false on an unterminated quote.
bool parse_csv_record(std::istream& in, std::vector<std::string>& fields, std::size_t& line_no) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line_no;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      fields.push_back(std::move(field));
      return true;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (in_quotes) throw DataError("unterminated quoted field at line " + std::to_string(line_no));
  if (any) fields.push_back(std::move(field));
  return any;
}

std::string csv_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

int parse_label(const std::string& field, std::size_t line_no) {
  std::size_t pos = 0;
  int value = 0;
  try {
    value = std::stoi(field, &pos);
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line_no) + ": malformed label '" + field + "'");
  }
  if (pos != field.size())
    throw DataError("line " + std::to_string(line_no) + ": malformed label '" + field + "'");
  return value;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

Vocab::Vocab() : Vocab(std::vector<std::string>{std::string(kPadToken), std::string(kUnkToken)}) {}

Vocab::Vocab(std::vector<std::string> id_to_token) : id_to_token_(std::move(id_to_token)) {
  if (id_to_token_.size() < 2 || id_to_token_[0] != kPadToken || id_to_token_[1] != kUnkToken)
    throw DataError("vocabulary must start with <pad>, <unk>");
  token_to_id_.reserve(id_to_token_.size());
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], static_cast<int32_t>(i));
    if (!inserted) throw DataError("duplicate vocabulary token '" + id_to_token_[i] + "'");
  }
}

int32_t Vocab::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end() || it->second < 2) return kUnk;
  return it->second;
}

const std::string& Vocab::token(int32_t id) const {
  if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::calib: return "calib";
  }
  return "?";
}

void Dataset::validate() const {
  if (samples.empty()) throw DataError("empty dataset");
  if (num_classes < 1) throw DataError("dataset has no classes");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int y = samples[i].label;
    if (y < 0 || y >= num_classes)
      throw DataError("sample " + std::to_string(i) + ": label " + std::to_string(y) +
                      " outside [0, " + std::to_string(num_classes) + ")");
  }
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (const auto& s : samples)
    if (s.label >= 0 && s.label < num_classes) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

std::string to_string(CalibrationScheme scheme) {
  switch (scheme) {
    case CalibrationScheme::unconditional: return "unconditional";
    case CalibrationScheme::conditional: return "conditional";
    case CalibrationScheme::coverage: return "coverage";
  }
  return "?";
}

CalibrationScheme parse_calibration_scheme(std::string_view name) {
  if (name == "unconditional" || name == "uc") return CalibrationScheme::unconditional;
  if (name == "conditional" || name == "cc") return CalibrationScheme::conditional;
  if (name == "coverage") return CalibrationScheme::coverage;
  throw ConfigError("unknown calibration scheme '" + std::string(name) + "'");
}

std::string clean_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char ch : raw) {
    if (is_space(ch)) {
      pending_space = !out.empty();
      continue;
    }
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!kept_char(c)) continue;
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

Vocab build_vocab(const std::vector<std::string>& corpus, int max_size, int min_freq) {
  if (max_size < 2) throw ConfigError("max vocabulary size must be >= 2");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& line : corpus)
    for (auto& w : split_whitespace(line)) ++freq[w];
  freq.erase(std::string(Vocab::kPadToken));
  freq.erase(std::string(Vocab::kUnkToken));

  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  // std::map iteration is lexicographic; stable sort keeps that order among ties.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens{std::string(Vocab::kPadToken), std::string(Vocab::kUnkToken)};
  const auto room = static_cast<std::size_t>(max_size - 2);
  for (const auto& [word, count] : ranked) {
    if (tokens.size() - 2 >= room) break;
    if (count < static_cast<std::size_t>(min_freq)) break;
    tokens.push_back(word);
  }
  return Vocab(std::move(tokens));
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab) {
  TokenSequence seq;
  for (const auto& w : split_whitespace(text)) seq.ids.push_back(vocab.id(w));
  if (seq.ids.empty()) seq.ids.push_back(vocab.pad_id());
  return seq;
}

std::string inject_noise(std::string_view text, const NoiseSpec& spec, Rng& rng) {
  if (spec.epsilon < 0.0 || spec.epsilon > 1.0)
    throw ConfigError("noise epsilon must lie in [0, 1]");
  if (spec.epsilon > 0.0 && spec.alphabet.empty())
    throw ConfigError("noise alphabet is empty");
  std::string out(text);
  if (spec.epsilon == 0.0) return out;
  std::bernoulli_distribution flip(spec.epsilon);
  std::uniform_int_distribution<std::size_t> pick(0, spec.alphabet.size() - 1);
  for (char& c : out)
    if (flip(rng)) c = spec.alphabet[pick(rng)];
  return out;
}

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "csv") return DatasetFormat::csv;
  if (name == "jsonl" || name == "json-lines") return DatasetFormat::jsonl;
  throw ConfigError("unknown dataset format '" + std::string(name) + "'");
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, int num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");

  Dataset ds;
  int max_label = -1;
  if (format == DatasetFormat::csv) {
    std::vector<std::string> fields;
    std::size_t line_no = 1;
    while (true) {
      const std::size_t record_line = line_no;
      if (!parse_csv_record(in, fields, line_no)) break;
      ++line_no;
      if (fields.size() == 1 && fields[0].empty()) continue;
      if (fields.size() < 2)
        throw DataError("line " + std::to_string(record_line) + ": expected label,title,description");
      const int label_1based = parse_label(fields[0], record_line);
      if (label_1based < 1)
        throw DataError("line " + std::to_string(record_line) + ": class index " +
                        std::to_string(label_1based) + " is not 1-based");
      std::string raw = fields[1];
      for (std::size_t i = 2; i < fields.size(); ++i) raw += " " + fields[i];
      LabeledSample s;
      s.text = clean_text(raw);
      s.label = label_1based - 1;
      max_label = std::max(max_label, s.label);
      ds.samples.push_back(std::move(s));
    }
  } else {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (clean_text(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const std::exception& e) {
        throw DataError("line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!j.contains("label") || !j.contains("text") || !j["label"].is_number_integer() ||
          !j["text"].is_string())
        throw DataError("line " + std::to_string(line_no) + ": expected {\"label\": int, \"text\": str}");
      LabeledSample s;
      s.label = j["label"].get<int>();
      if (s.label < 0)
        throw DataError("line " + std::to_string(line_no) + ": negative label");
      s.text = clean_text(j["text"].get<std::string>());
      max_label = std::max(max_label, s.label);
      ds.samples.push_back(std::move(s));
    }
  }
  if (ds.samples.empty()) throw DataError("empty dataset");
  ds.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= ds.num_classes)
    throw DataError("label " + std::to_string(max_label) + " out of range for " +
                    std::to_string(ds.num_classes) + " classes");
  return ds;
}

void write_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& s : dataset.samples)
    out << (s.label + 1) << "," << csv_quote(s.text) << "," << csv_quote("") << "\n";
}

void attach_tokens(Dataset& dataset, const Vocab& vocab) {
  for (auto& s : dataset.samples) s.tokens = tokenize(s.text, vocab);
}

void truncate_tokens(Dataset& dataset, std::size_t max_len) {
  if (max_len == 0) return;
  for (auto& s : dataset.samples)
    if (s.tokens.ids.size() > max_len) s.tokens.ids.resize(max_len);
}

TrainValSplit split_dataset(const Dataset& dataset, double train_fraction, uint64_t seed) {
  const std::size_t n = dataset.size();
  if (n < 2) throw DataError("cannot split a dataset with fewer than 2 samples");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train fraction must lie in (0, 1)");
  auto n_train = static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n) - 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  TrainValSplit out;
  out.train.num_classes = out.val.num_classes = dataset.num_classes;
  out.train.split = Split::train;
  out.val.split = Split::val;
  const auto idx = shuffled_indices(n, seed);
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? out.train : out.val).samples.push_back(dataset.samples[idx[i]]);
  return out;
}

Dataset sample_calibration(const Dataset& dataset, const CalibrationPlan& plan) {
  dataset.validate();
  if (!(plan.fraction > 0.0 && plan.fraction <= 1.0))
    throw ConfigError("calibration fraction must lie in (0, 1]");
  const std::size_t n = dataset.size();
  const auto m = static_cast<std::size_t>(std::ceil(plan.fraction * static_cast<double>(n) - 1e-9));
  if (m < 1) throw ConfigError("calibration set would be empty");

  Dataset out;
  out.num_classes = dataset.num_classes;
  out.split = Split::calib;
  const auto order = shuffled_indices(n, plan.seed);

  if (plan.scheme == CalibrationScheme::unconditional) {
    for (std::size_t i = 0; i < m; ++i) out.samples.push_back(dataset.samples[order[i]]);
    return out;
  }

  const int classes = plan.scheme == CalibrationScheme::conditional ? dataset.num_classes
                                                                     : plan.coverage_k;
  if (plan.scheme == CalibrationScheme::coverage &&
      (plan.coverage_k < 1 || plan.coverage_k > dataset.num_classes))
    throw ConfigError("coverage k must lie in [1, " + std::to_string(dataset.num_classes) + "]");

  const auto k = static_cast<std::size_t>(classes);
  std::vector<std::size_t> quota(k, m / k);
  if (plan.scheme == CalibrationScheme::conditional)
    for (std::size_t c = 0; c < m % k; ++c) ++quota[c];

  std::vector<std::vector<std::size_t>> picked(k);
  for (std::size_t i : order) {
    const auto y = static_cast<std::size_t>(dataset.samples[i].label);
    if (y < k && picked[y].size() < quota[y]) picked[y].push_back(i);
  }
  for (std::size_t c = 0; c < k; ++c)
    if (picked[c].size() < quota[c])
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(picked[c].size()) +
                      " samples, calibration plan needs " + std::to_string(quota[c]));

  // Keep the shuffled order so classes interleave.
  std::vector<bool> take(n, false);
  for (const auto& v : picked)
    for (std::size_t i : v) take[i] = true;
  for (std::size_t i : order)
    if (take[i]) out.samples.push_back(dataset.samples[i]);
  return out;
}

Dataset subsample(const Dataset& dataset, std::size_t n, uint64_t seed) {
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.split = dataset.split;
  const auto idx = shuffled_indices(dataset.size(), seed);
  for (std::size_t i = 0; i < std::min(n, idx.size()); ++i)
    out.samples.push_back(dataset.samples[idx[i]]);
  return out;
}

std::vector<TokenSequence> strip_labels(const Dataset& dataset) {
  std::vector<TokenSequence> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset.samples) out.push_back(s.tokens);
  return out;
}

}  // namespace qlab
