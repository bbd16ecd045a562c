#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qlab/corpus.hpp"
#include "qlab/quant.hpp"

namespace qlab {

// Inputs to the final linear layer, one row per scored step. X comes from the
// full-precision model, X_tilde from the quantized one; rows are aligned.
struct CalibrationActivations {
  Eigen::MatrixXd X;
  Eigen::MatrixXd X_tilde;

  Eigen::Index m() const { return X.rows(); }
  Eigen::Index N() const { return X.cols(); }
  void validate() const;
};

// Levels step * (k - zero_point) for k in [qmin, qmax].
struct QuantAlphabet {
  double step = 1.0;
  int zero_point = 0;
  int qmin = 0;
  int qmax = 0;

  static QuantAlphabet from_params(const QuantParams& p);
  std::vector<double> levels() const;
  // Nearest level, half-to-even on midpoints, clipped to the end levels.
  double nearest(double v) const;
};

enum class ReferenceMode { fp, quantized };  // where the Xw term comes from

struct CollectOptions {
  std::size_t max_rows = 50000;  // first-come truncation
  ReferenceMode reference = ReferenceMode::fp;
};

// Runs the calibration sequences through q.fp and through q (quantized weights
// and activations). Generative models are conditioned on the labels from
// conditioning_labels(); no dataset labels are read.
CalibrationActivations collect_layer_inputs(const QuantizedModel& q, std::span<const TokenSequence> calib,
                                            const CollectOptions& options = {});

std::vector<double> msq(std::span<const double> w, const QuantAlphabet& alphabet);

// Second moments of the paired activations; all GPFQ needs.
struct GpfqGram {
  Eigen::MatrixXd XtX;    // X^T X
  Eigen::MatrixXd XqtX;   // X_tilde^T X
  Eigen::MatrixXd XqtXq;  // X_tilde^T X_tilde

  static GpfqGram from(const CalibrationActivations& acts);
  Eigen::Index N() const { return XtX.rows(); }
  // ||Xw - X_tilde q||^2
  double objective(std::span<const double> w, std::span<const double> q) const;
};

struct GpfqRowResult {
  std::vector<double> q;
  Eigen::VectorXd residual;  // Xw - X_tilde q
  double residual_norm = 0.0;
};

// Greedy path following over columns in index order: q_t is the level nearest
// <X~_t, u + w_t X_t> / ||X~_t||^2, u accumulates w_t X_t - q_t X~_t. Columns
// with ||X~_t||^2 < 1e-12 fall back to nearest rounding.
std::vector<double> gpfq_quantize_row(std::span<const double> w, const GpfqGram& gram,
                                      const QuantAlphabet& alphabet);
GpfqRowResult gpfq_quantize_row(std::span<const double> w, const CalibrationActivations& acts,
                                const QuantAlphabet& alphabet);

struct GpfqReport {
  std::string tensor;
  std::size_t rows = 0;
  std::size_t samples = 0;     // m
  double objective_before = 0.0;  // summed over rows, weights as they were in q
  double objective_after = 0.0;
};

// Re-quantizes the final linear layer row by row from its full-precision
// weights with the layer's existing alphabet. Biases and all other tensors
// are left untouched.
QuantizedModel gpfq_refine(QuantizedModel q, const CalibrationActivations& acts, GpfqReport* report = nullptr);

// Name of the layer GPFQ refines for this model type.
std::string gpfq_target(ModelType type);

}  // namespace qlab
