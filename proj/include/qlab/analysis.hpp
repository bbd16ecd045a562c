#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/models.hpp"
#include "qlab/quant.hpp"

namespace qlab {

struct KsResult {
  double statistic = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
};

// Two-sample Kolmogorov-Smirnov distance sup_x |F_a(x) - F_b(x)|.
KsResult ks_statistic(std::span<const double> a, std::span<const double> b);

struct KdeCurve {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
  double max_location = 0.0;
  bool degenerate = false;  // constant sample: a narrow spike at the value
};

inline constexpr int kKdeGridPoints = 512;

// Gaussian kernel; bandwidth defaults to 1.06 * sd * n^(-1/5).
KdeCurve kde(std::span<const double> samples, std::optional<double> bandwidth = std::nullopt);

// Trapezoidal integral of the curve over its grid.
double kde_integral(const KdeCurve& curve);

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_class;       // NaN for classes absent from labels
  std::vector<std::size_t> class_counts;
  std::size_t count = 0;
};

Metrics accuracy(std::span<const int> predictions, std::span<const int> labels, int num_classes = 0);

KsResult weight_shift_report(const Matrix& before, const Matrix& after);

// Pooled activation values at one site (after any quantization the tap
// chain applies) while classifying each probe sequence. Capped at
// max_values by deterministic stride subsampling.
inline constexpr std::size_t kMaxActivationValues = 1'000'000;

std::vector<double> collect_site_values(const QuantizedModel& q, std::span<const TokenSequence> probe, Site site,
                                        std::size_t max_values = kMaxActivationValues);

// KS between site values of two (model, probe) pairs; pass the same model
// twice to compare datasets, or the same probe to compare models.
KsResult activation_shift_report(const QuantizedModel& a, std::span<const TokenSequence> probe_a,
                                 const QuantizedModel& b, std::span<const TokenSequence> probe_b, Site site);

struct TokenLossSamples {
  std::vector<double> losses;
  std::size_t skipped = 0;  // samples with fewer than two tokens
};

// Per-token generation losses conditioned on each sample's true label.
TokenLossSamples token_loss_samples(const QuantizedModel& q, const Dataset& data);

double median(std::vector<double> values);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace qlab
