#include "qlab/nn.hpp"

#include <cmath>

namespace qlab {

namespace {

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
void require_finite(const VectorT<S>& v, const char* what) {
  if (!v.allFinite()) throw NumericError(std::string("non-finite values in ") + what);
}

// Applies the gate nonlinearities to one row of pre-activations and advances
// the cell. `gates` is overwritten with [i, f, g, o] post-activation.
template <typename S, typename GateRow, typename Vec>
void lstm_cell(GateRow&& gates, Vec& c, Vec& h, int hsz) {
  for (int j = 0; j < hsz; ++j) {
    const S i = sigmoid(gates(j));
    const S f = sigmoid(gates(hsz + j));
    const S g = std::tanh(gates(2 * hsz + j));
    const S o = sigmoid(gates(3 * hsz + j));
    gates(j) = i;
    gates(hsz + j) = f;
    gates(2 * hsz + j) = g;
    gates(3 * hsz + j) = o;
    c(j) = f * c(j) + i * g;
    h(j) = o * std::tanh(c(j));
  }
}

// Shared by lstm_step, lstm_forward and lstm_forward_traced so that all three
// produce bitwise-identical states.
template <typename S>
void advance(const LstmParamsT<S>& p, const VectorT<S>& x, VectorT<S>& gates, VectorT<S>& c,
             VectorT<S>& h) {
  gates.noalias() = p.input_weights * x;
  gates += p.bias;
  gates.noalias() += p.recurrent_weights * h;
  lstm_cell<S>(gates, c, h, p.hidden_size());
}

}  // namespace

std::string to_string(Site site) {
  switch (site) {
    case Site::embedding: return "embedding";
    case Site::lstm_hidden: return "lstm_hidden";
    case Site::head_input: return "head_input";
    case Site::head_output: return "head_output";
  }
  return "?";
}

Site parse_site(std::string_view name) {
  if (name == "embedding") return Site::embedding;
  if (name == "lstm_hidden" || name == "lstm") return Site::lstm_hidden;
  if (name == "head_input" || name == "linear_input") return Site::head_input;
  if (name == "head_output" || name == "linear" || name == "linear_output") return Site::head_output;
  throw ConfigError("unknown activation site '" + std::string(name) + "'");
}

template <typename S>
LstmParamsT<S> LstmParamsT<S>::zeros(int input_size, int hidden_size) {
  return {MatrixT<S>::Zero(4 * hidden_size, input_size), MatrixT<S>::Zero(4 * hidden_size, hidden_size),
          VectorT<S>::Zero(4 * hidden_size)};
}

template <typename S>
void LstmParamsT<S>::check_shapes() const {
  const auto h = recurrent_weights.cols();
  if (recurrent_weights.rows() != 4 * h || input_weights.rows() != 4 * h || bias.size() != 4 * h)
    throw std::invalid_argument("LSTM parameter shapes are inconsistent");
}

template <typename S>
MatrixT<S> embedding_forward(const MatrixT<S>& embedding, std::span<const int32_t> ids) {
  MatrixT<S> out(static_cast<Eigen::Index>(ids.size()), embedding.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int32_t id = ids[t];
    if (id < 0 || id >= embedding.rows())
      throw std::out_of_range("token id " + std::to_string(id) + " outside embedding table of " +
                              std::to_string(embedding.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(t)) = embedding.row(id);
  }
  return out;
}

template <typename S>
LstmStateT<S> lstm_step(const LstmParamsT<S>& p, const VectorT<S>& input, const LstmStateT<S>& prev) {
  const int hsz = p.hidden_size();
  if (input.size() != p.input_size() || prev.h.size() != hsz || prev.c.size() != hsz)
    throw std::invalid_argument("lstm_step: dimension mismatch");
  require_finite(input, "LSTM input");
  require_finite(prev.h, "LSTM hidden state");
  require_finite(prev.c, "LSTM cell state");
  VectorT<S> gates(4 * hsz);
  LstmStateT<S> next = prev;
  advance(p, input, gates, next.c, next.h);
  return next;
}

template <typename S>
LstmOutputT<S> lstm_forward(const LstmParamsT<S>& p, const MatrixT<S>& inputs,
                            const LstmStateT<S>& initial, ActivationTap* tap) {
  const int hsz = p.hidden_size();
  const Eigen::Index steps = inputs.rows();
  if (steps < 1) throw std::invalid_argument("lstm_forward: empty sequence");
  if (inputs.cols() != p.input_size()) throw std::invalid_argument("lstm_forward: input width mismatch");
  if (!inputs.allFinite()) throw NumericError("non-finite values in LSTM input");

  LstmOutputT<S> out{MatrixT<S>(steps, hsz), initial};
  VectorT<S>& h = out.final_state.h;
  VectorT<S>& c = out.final_state.c;
  VectorT<S> gates(4 * hsz);
  VectorT<S> x(inputs.cols());
  for (Eigen::Index t = 0; t < steps; ++t) {
    x = inputs.row(t).transpose();
    advance(p, x, gates, c, h);
    detail::tap_values<S>(tap, Site::lstm_hidden, h.data(), h.size());
    out.hidden.row(t) = h.transpose();
  }
  return out;
}

template <typename S>
LstmTraceT<S> lstm_forward_traced(const LstmParamsT<S>& p, const MatrixT<S>& inputs,
                                  const LstmStateT<S>& initial) {
  const int hsz = p.hidden_size();
  const Eigen::Index steps = inputs.rows();
  if (steps < 1) throw std::invalid_argument("lstm_forward: empty sequence");
  LstmTraceT<S> tr;
  tr.inputs = inputs;
  tr.initial = initial;
  tr.gates.resize(steps, 4 * hsz);
  tr.cells.resize(steps, hsz);
  tr.hidden.resize(steps, hsz);
  VectorT<S> h = initial.h;
  VectorT<S> c = initial.c;
  VectorT<S> gates(4 * hsz);
  VectorT<S> x(inputs.cols());
  for (Eigen::Index t = 0; t < steps; ++t) {
    x = inputs.row(t).transpose();
    advance(p, x, gates, c, h);
    tr.gates.row(t) = gates.transpose();
    tr.cells.row(t) = c.transpose();
    tr.hidden.row(t) = h.transpose();
  }
  return tr;
}

template <typename S>
MatrixT<S> lstm_backward(const LstmParamsT<S>& p, const LstmTraceT<S>& tr, const MatrixT<S>& d_hidden,
                         LstmParamsT<S>& grads) {
  const int hsz = p.hidden_size();
  const Eigen::Index steps = tr.hidden.rows();
  MatrixT<S> d_pre(steps, 4 * hsz);
  VectorT<S> dh_next = VectorT<S>::Zero(hsz);
  VectorT<S> dc_next = VectorT<S>::Zero(hsz);
  for (Eigen::Index t = steps - 1; t >= 0; --t) {
    const auto g = tr.gates.row(t);
    const auto c_prev = t > 0 ? VectorT<S>(tr.cells.row(t - 1).transpose()) : tr.initial.c;
    auto dp = d_pre.row(t);
    for (int j = 0; j < hsz; ++j) {
      const S i = g(j), f = g(hsz + j), gg = g(2 * hsz + j), o = g(3 * hsz + j);
      const S tc = std::tanh(tr.cells(t, j));
      const S dh = d_hidden(t, j) + dh_next(j);
      const S dc = dc_next(j) + dh * o * (S(1) - tc * tc);
      dp(j) = dc * gg * i * (S(1) - i);
      dp(hsz + j) = dc * c_prev(j) * f * (S(1) - f);
      dp(2 * hsz + j) = dc * i * (S(1) - gg * gg);
      dp(3 * hsz + j) = dh * tc * o * (S(1) - o);
      dc_next(j) = dc * f;
    }
    dh_next.noalias() = p.recurrent_weights.transpose() * dp.transpose();
  }
  grads.input_weights.noalias() += d_pre.transpose() * tr.inputs;
  if (steps > 1)
    grads.recurrent_weights.noalias() += d_pre.bottomRows(steps - 1).transpose() * tr.hidden.topRows(steps - 1);
  grads.recurrent_weights.noalias() += d_pre.row(0).transpose() * tr.initial.h.transpose();
  grads.bias.noalias() += d_pre.colwise().sum().transpose();
  return d_pre * p.input_weights;
}

template <typename S>
VectorT<S> linear_forward(const MatrixT<S>& weights, const VectorT<S>& bias, const VectorT<S>& x) {
  if (weights.cols() != x.size() || weights.rows() != bias.size())
    throw std::invalid_argument("linear_forward: shape mismatch");
  return weights * x + bias;
}

template <typename S>
VectorT<S> softmax(const VectorT<S>& logits) {
  if (!logits.allFinite()) throw NumericError("softmax of non-finite logits");
  VectorT<S> e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename S>
double cross_entropy(const VectorT<S>& probs, int target) {
  if (target < 0 || target >= probs.size())
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                            std::to_string(probs.size()) + ")");
  return -std::log(std::max(static_cast<double>(probs(target)), kProbFloor));
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
}

void adam_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
               AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: tensor count mismatch");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0f);
      state.second_moment.emplace_back(p.size(), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size()) throw std::invalid_argument("adam_step: state mismatch");
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (g.size() != p.size() || m.size() != p.size()) throw std::invalid_argument("adam_step: shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] = static_cast<float>(p[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps_adam));
    }
  }
}

double clip_global_norm(std::span<const std::span<float>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (float x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (const auto& g : grads)
      for (float& x : g) x *= scale;
  }
  return norm;
}

#define QLAB_INSTANTIATE_NN(S)                                                                        \
  template struct LstmParamsT<S>;                                                                     \
  template MatrixT<S> embedding_forward<S>(const MatrixT<S>&, std::span<const int32_t>);              \
  template LstmStateT<S> lstm_step<S>(const LstmParamsT<S>&, const VectorT<S>&, const LstmStateT<S>&); \
  template LstmOutputT<S> lstm_forward<S>(const LstmParamsT<S>&, const MatrixT<S>&,                   \
                                          const LstmStateT<S>&, ActivationTap*);                      \
  template LstmTraceT<S> lstm_forward_traced<S>(const LstmParamsT<S>&, const MatrixT<S>&,             \
                                                const LstmStateT<S>&);                                \
  template MatrixT<S> lstm_backward<S>(const LstmParamsT<S>&, const LstmTraceT<S>&, const MatrixT<S>&, \
                                       LstmParamsT<S>&);                                              \
  template VectorT<S> linear_forward<S>(const MatrixT<S>&, const VectorT<S>&, const VectorT<S>&);     \
  template VectorT<S> softmax<S>(const VectorT<S>&);                                                  \
  template double cross_entropy<S>(const VectorT<S>&, int);

QLAB_INSTANTIATE_NN(float)
QLAB_INSTANTIATE_NN(double)

}  // namespace qlab
