#include "qlab/gpfq.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qlab {

namespace {

constexpr double kDegenerateColumn = 1e-12;

// Appends the paired rows of one sequence, stopping at the row cap.
void append_rows(std::vector<Eigen::VectorXd>& fp_rows, std::vector<Eigen::VectorXd>& q_rows, const Matrix& fp,
                 const Matrix& quant, std::size_t cap) {
  for (Eigen::Index r = 0; r < fp.rows() && fp_rows.size() < cap; ++r) {
    fp_rows.push_back(fp.row(r).transpose().cast<double>());
    q_rows.push_back(quant.row(r).transpose().cast<double>());
  }
}

Eigen::MatrixXd stack(const std::vector<Eigen::VectorXd>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

}  // namespace

void CalibrationActivations::validate() const {
  if (X.rows() < 1) throw DataError("no calibration activations");
  if (X.rows() != X_tilde.rows() || X.cols() != X_tilde.cols())
    throw std::invalid_argument("X and X_tilde shapes differ");
}

QuantAlphabet QuantAlphabet::from_params(const QuantParams& p) {
  if (!(p.scale > 0.0)) throw NumericError("alphabet step must be positive");
  return {p.scale, p.zero_point, p.qmin, p.qmax};
}

std::vector<double> QuantAlphabet::levels() const {
  std::vector<double> out;
  for (int k = qmin; k <= qmax; ++k) out.push_back(step * (k - zero_point));
  return out;
}

double QuantAlphabet::nearest(double v) const {
  const double code = std::clamp(round_half_even(v / step + zero_point), static_cast<double>(qmin),
                                 static_cast<double>(qmax));
  return step * (code - zero_point);
}

std::vector<double> msq(std::span<const double> w, const QuantAlphabet& alphabet) {
  std::vector<double> q(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) q[i] = alphabet.nearest(w[i]);
  return q;
}

GpfqGram GpfqGram::from(const CalibrationActivations& acts) {
  acts.validate();
  GpfqGram g;
  g.XtX.noalias() = acts.X.transpose() * acts.X;
  g.XqtX.noalias() = acts.X_tilde.transpose() * acts.X;
  g.XqtXq.noalias() = acts.X_tilde.transpose() * acts.X_tilde;
  return g;
}

double GpfqGram::objective(std::span<const double> w, std::span<const double> q) const {
  const auto n = static_cast<Eigen::Index>(w.size());
  if (n != N() || q.size() != w.size()) throw std::invalid_argument("objective: width mismatch");
  Eigen::Map<const Eigen::VectorXd> wv(w.data(), n), qv(q.data(), n);
  const double v = wv.dot(XtX * wv) - 2.0 * qv.dot(XqtX * wv) + qv.dot(XqtXq * qv);
  return std::max(v, 0.0);
}

std::vector<double> gpfq_quantize_row(std::span<const double> w, const GpfqGram& gram,
                                      const QuantAlphabet& alphabet) {
  const Eigen::Index n = gram.N();
  if (static_cast<Eigen::Index>(w.size()) != n) throw std::invalid_argument("row width does not match activations");
  std::vector<double> q(w.size());
  // <X~_t, u_{t-1}> expands to sum_{s<t} w_s <X~_t, X_s> - q_s <X~_t, X~_s>.
  for (Eigen::Index t = 0; t < n; ++t) {
    const double norm = gram.XqtXq(t, t);
    const auto ti = static_cast<std::size_t>(t);
    if (norm < kDegenerateColumn) {
      q[ti] = alphabet.nearest(w[ti]);
      continue;
    }
    double inner = w[ti] * gram.XqtX(t, t);
    for (Eigen::Index s = 0; s < t; ++s) {
      const auto si = static_cast<std::size_t>(s);
      inner += w[si] * gram.XqtX(t, s) - q[si] * gram.XqtXq(t, s);
    }
    q[ti] = alphabet.nearest(inner / norm);
  }
  return q;
}

GpfqRowResult gpfq_quantize_row(std::span<const double> w, const CalibrationActivations& acts,
                                const QuantAlphabet& alphabet) {
  GpfqRowResult r;
  r.q = gpfq_quantize_row(w, GpfqGram::from(acts), alphabet);
  const auto n = static_cast<Eigen::Index>(w.size());
  r.residual = acts.X * Eigen::Map<const Eigen::VectorXd>(w.data(), n) -
               acts.X_tilde * Eigen::Map<const Eigen::VectorXd>(r.q.data(), n);
  r.residual_norm = r.residual.norm();
  return r;
}

std::string gpfq_target(ModelType type) { return type == ModelType::disc ? "head.weight" : "decoder.weight"; }

CalibrationActivations collect_layer_inputs(const QuantizedModel& q, std::span<const TokenSequence> calib,
                                            const CollectOptions& options) {
  if (calib.empty()) throw DataError("calibration set is empty");
  if (options.max_rows < 1) throw ConfigError("max_rows must be positive");
  QuantizingTap tap(q);
  std::vector<Eigen::VectorXd> fp_rows, q_rows;
  const bool disc = q.type() == ModelType::disc;
  const auto labels = conditioning_labels(q, calib);
  for (std::size_t i = 0; i < calib.size() && fp_rows.size() < options.max_rows; ++i) {
    const auto ids = scoring_ids(q.type(), calib[i].ids);
    if (disc) {
      const auto& fp = std::get<DiscModel>(q.fp);
      const auto& qm = std::get<DiscModel>(q.model);
      const Matrix a = disc_head_input(fp, ids).transpose();
      const Matrix b = disc_head_input(qm, ids, &tap).transpose();
      append_rows(fp_rows, q_rows, a, b, options.max_rows);
    } else {
      const auto& fp = std::get<GenModel>(q.fp);
      const auto& qm = std::get<GenModel>(q.model);
      for (int y : labels[i]) {
        const Matrix a = gen_head_inputs(fp, ids, y);
        const Matrix b = gen_head_inputs(qm, ids, y, &tap);
        append_rows(fp_rows, q_rows, a, b, options.max_rows);
      }
    }
  }
  CalibrationActivations acts{stack(fp_rows), stack(q_rows)};
  if (options.reference == ReferenceMode::quantized) acts.X = acts.X_tilde;
  return acts;
}

QuantizedModel gpfq_refine(QuantizedModel q, const CalibrationActivations& acts, GpfqReport* report) {
  const std::string name = gpfq_target(q.type());
  GpfqReport rep;
  rep.tensor = name;
  if (q.passthrough()) {
    if (report) *report = rep;
    return q;
  }
  const auto it = q.weight_params.find(name);
  if (it == q.weight_params.end()) throw std::logic_error("no quantization parameters for " + name);
  const QuantAlphabet alphabet = QuantAlphabet::from_params(it->second);

  const auto find = [&](auto tensors) {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw std::logic_error("model has no tensor " + name);
  };
  const auto fp_w = find(model_tensors(static_cast<const Model&>(q.fp)));
  auto q_w = find(model_tensors(q.model));
  if (acts.N() != fp_w.cols) throw std::invalid_argument("activation width does not match " + name);

  const GpfqGram gram = GpfqGram::from(acts);
  rep.rows = static_cast<std::size_t>(fp_w.rows);
  rep.samples = static_cast<std::size_t>(acts.m());
  const auto cols = static_cast<std::size_t>(fp_w.cols);
  std::vector<double> w(cols), before(cols);
  for (Eigen::Index r = 0; r < fp_w.rows; ++r) {
    const float* src = fp_w.data + r * fp_w.cols;
    float* dst = q_w.data + r * q_w.cols;
    for (std::size_t c = 0; c < cols; ++c) {
      w[c] = src[c];
      before[c] = dst[c];
    }
    const auto row = gpfq_quantize_row(w, gram, alphabet);
    rep.objective_before += gram.objective(w, before);
    rep.objective_after += gram.objective(w, row);
    for (std::size_t c = 0; c < cols; ++c) dst[c] = static_cast<float>(row[c]);
  }
  if (report) *report = rep;
  return q;
}

}  // namespace qlab
