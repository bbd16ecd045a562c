#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qlab {

using Rng = std::mt19937_64;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token <-> id mapping. Ids 0 and 1 are reserved for padding and unknown words.
class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocab();
  // Builds from an ordered token list that must start with <pad>, <unk>.
  explicit Vocab(std::vector<std::string> id_to_token);

  int32_t pad_id() const { return kPad; }
  int32_t unk_id() const { return kUnk; }
  int32_t size() const { return static_cast<int32_t>(id_to_token_.size()); }

  // Returns unk_id() for out-of-vocabulary tokens.
  int32_t id(std::string_view token) const;
  const std::string& token(int32_t id) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int32_t> token_to_id_;
};

struct TokenSequence {
  std::vector<int32_t> ids;

  std::size_t length() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

struct LabeledSample {
  std::string text;
  TokenSequence tokens;
  int label = 0;
};

enum class Split { train, val, test, calib };

std::string to_string(Split split);

struct Dataset {
  std::vector<LabeledSample> samples;
  int num_classes = 0;
  Split split = Split::train;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Throws DataError if a label is out of range or the set is empty.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
};

enum class CalibrationScheme { unconditional, conditional, coverage };

std::string to_string(CalibrationScheme scheme);
CalibrationScheme parse_calibration_scheme(std::string_view name);

struct CalibrationPlan {
  CalibrationScheme scheme = CalibrationScheme::conditional;
  int coverage_k = 0;  // only read for CalibrationScheme::coverage
  double fraction = 0.25;
  uint64_t seed = 0;
};

struct NoiseSpec {
  double epsilon = 0.0;
  std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 ";
  uint64_t seed = 0;
};

// Lowercases, keeps [a-z0-9 ], collapses whitespace, trims.
std::string clean_text(std::string_view raw);

std::vector<std::string> split_whitespace(std::string_view text);

// Tokens ranked by (frequency desc, token asc); the top max_size - 2 with
// count >= min_freq follow the two reserved ids.
Vocab build_vocab(const std::vector<std::string>& corpus, int max_size, int min_freq = 1);

// Empty text maps to a single pad id.
TokenSequence tokenize(std::string_view text, const Vocab& vocab);

// Replaces each character independently with probability spec.epsilon by a
// uniform draw from spec.alphabet. The rng is advanced; spec.seed is not read.
std::string inject_noise(std::string_view text, const NoiseSpec& spec, Rng& rng);

enum class DatasetFormat { csv, jsonl };

DatasetFormat parse_dataset_format(std::string_view name);

// CSV rows are (class_index_1based, title, description); JSON lines carry
// {"label": int (0-based), "text": str}. Text is cleaned; tokens are left empty
// until attach_tokens is called. num_classes <= 0 infers C from the max label.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     int num_classes = 0);

void write_csv(const Dataset& dataset, const std::filesystem::path& path);

void attach_tokens(Dataset& dataset, const Vocab& vocab);

// Truncates every token sequence to at most max_len ids.
void truncate_tokens(Dataset& dataset, std::size_t max_len);

struct TrainValSplit {
  Dataset train;
  Dataset val;
};

// Shuffles deterministically by seed; the first ceil(fraction * n) go to train.
TrainValSplit split_dataset(const Dataset& dataset, double train_fraction, uint64_t seed);

// Draws a (class-balanced, unbalanced or k-class) subset of the training set.
Dataset sample_calibration(const Dataset& dataset, const CalibrationPlan& plan);

// Takes the first n samples after a deterministic shuffle (class mix preserved
// in expectation).
Dataset subsample(const Dataset& dataset, std::size_t n, uint64_t seed);

// Token sequences only. Calibration and GPFQ consume this view so that labels
// cannot reach them.
std::vector<TokenSequence> strip_labels(const Dataset& dataset);

}  // namespace qlab
