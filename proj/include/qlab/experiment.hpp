#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qlab/analysis.hpp"
#include "qlab/corpus.hpp"
#include "qlab/gpfq.hpp"
#include "qlab/models.hpp"
#include "qlab/quant.hpp"
#include "qlab/synth.hpp"

namespace qlab {

// Environment variable that overrides the configured output directory.
inline constexpr const char* kOutputRootEnv = "QLAB_OUTPUT_ROOT";

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv | jsonl
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  int num_classes = 4;
  std::size_t train_samples = 2000;  // subsample size, 0 keeps everything
  std::size_t test_samples = 500;
  uint64_t subsample_seed = 11;
  int vocab_size = 5000;
  int min_freq = 1;
  std::size_t max_tokens = 64;
  double train_fraction = 0.8;  // rest is validation
  SynthCorpusSpec synth;
};

// A calibration set choice as written in configs: "conditional",
// "unconditional" or "coverage:k".
struct CalibChoice {
  CalibrationScheme scheme = CalibrationScheme::conditional;
  int coverage_k = 0;

  std::string name() const;
  static CalibChoice parse(std::string_view text);
  bool operator==(const CalibChoice&) const = default;
};

struct PtqOptions {
  QuantSpec spec;
  SiteMask sites = kDefaultSites;
  GenConditioning conditioning = GenConditioning::pseudo_label;
  bool gpfq = true;
  CollectOptions collect;
  double calib_fraction = 0.25;
};

struct ExperimentConfig {
  std::string id = "desk";
  std::filesystem::path output_dir = "runs";
  std::vector<uint64_t> seeds{1, 2, 3};
  DataConfig data;
  std::vector<ModelType> model_types{ModelType::disc, ModelType::gen};
  ModelDims dims;  // vocab_size and num_classes are filled from the data
  TrainConfig train;
  std::vector<int> bitwidths{8, 7, 6, 5, 4, 3};
  bool include_fp = true;  // adds bitwidth "fp32" rows to sweeps
  PtqOptions ptq;
  std::vector<CalibChoice> calib{CalibChoice{}};
  std::vector<double> noise_grid{0.0};
  double kde_noise = 0.1;
  int kde_bitwidth = 3;

  void validate() const;
};

// TOML text -> config. `overrides` are "section.key=value" strings whose
// value is TOML syntax (e.g. "train.max_epochs=3", "quant.bitwidths=[8,3]").
ExperimentConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
// Fully resolved config, re-parseable by parse_config.
std::string config_to_toml(const ExperimentConfig& cfg);

// Output directory after the environment override.
std::filesystem::path output_root(const ExperimentConfig& cfg);

struct PreparedData {
  Vocab vocab;
  Dataset pool;  // training pool, split per seed into train / val
  Dataset test;
  std::size_t max_tokens = 0;
};

PreparedData prepare_data(const DataConfig& cfg);

// Tokenized dataset from raw text with the given vocabulary.
Dataset tokenize_dataset(Dataset data, const Vocab& vocab, std::size_t max_tokens);

// Character noise on the raw text, then re-tokenized. epsilon 0 returns a copy.
Dataset corrupt(const Dataset& data, const Vocab& vocab, std::size_t max_tokens, const NoiseSpec& noise);

TrainValSplit seed_split(const PreparedData& data, double train_fraction, uint64_t seed);

ModelDims resolve_dims(const ExperimentConfig& cfg, const PreparedData& data);

TrainResult train_model(const ExperimentConfig& cfg, ModelType type, const PreparedData& data,
                        const TrainValSplit& split, uint64_t seed,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

struct PtqAudit {
  std::vector<std::string> log;  // one line per stage
  std::vector<std::size_t> calib_class_counts;
  std::size_t calib_size = 0;
  std::optional<GpfqReport> gpfq;
};

struct PtqResult {
  QuantizedModel model;
  PtqAudit audit;
};

// Raw quantization -> calibration -> optional GPFQ. Labels of the sampled
// calibration set feed only the audit counts; the stages see token sequences.
PtqResult run_ptq(const Model& fp, const Dataset& calib_pool, const CalibChoice& choice, uint64_t seed,
                  const PtqOptions& options);

double evaluate(const QuantizedModel& q, const Dataset& data);

// Seed for one derived stream of a run (noise draws, calibration sampling).
uint64_t derive_seed(uint64_t seed, uint64_t stream);

struct ResultRow {
  std::string experiment_id;
  ModelType model_type = ModelType::disc;
  int bitwidth = 0;  // 0 is the full-precision model
  std::string calib_scheme;
  int coverage_k = 0;
  double noise_eps = 0.0;
  uint64_t seed = 0;
  double accuracy = 0.0;
  double ks_weight = 0.0;  // head weights, FP vs quantized
  double gpfq_before = 0.0;
  double gpfq_after = 0.0;
  std::string status = "ok";
};

struct SweepHooks {
  std::function<void(const std::string&)> log;
  std::function<void(const ResultRow&)> on_row;
};

// Full grid: model type x seed x (fp32 + bitwidths) x calibration choice x
// noise level. A failing cell is recorded with its error and the sweep goes on.
std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, const PreparedData& data, const SweepHooks& hooks = {});

std::string bitwidth_label(int bitwidth);
std::string results_csv_header();
std::string to_csv(const ResultRow& row);
void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);
// Markdown table of mean and std of accuracy per cell across seeds.
std::string summary_markdown(const std::vector<ResultRow>& rows);

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);
void write_kde_csv(const std::filesystem::path& path, const KdeCurve& curve);

}  // namespace qlab
