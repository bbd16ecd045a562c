#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "qlab/corpus.hpp"

namespace qlab {

template <typename S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matrix = MatrixT<float>;
using Vector = VectorT<float>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Probability floor applied inside cross-entropy.
inline constexpr double kProbFloor = 1e-12;

// Points in the dataflow where activations can be observed or fake-quantized.
enum class Site { embedding = 0, lstm_hidden = 1, head_input = 2, head_output = 3 };
inline constexpr int kNumSites = 4;

std::string to_string(Site site);
Site parse_site(std::string_view name);

// Hook invoked on activation tensors during float32 forward passes. Implementations
// may read the values (observers) or rewrite them in place (quantizers).
class ActivationTap {
 public:
  virtual ~ActivationTap() = default;
  virtual void apply(Site site, std::span<float> values) = 0;
};

namespace detail {
template <typename S>
void tap_values(ActivationTap* hook, Site site, S* data, Eigen::Index n) {
  if (!hook) return;
  if constexpr (std::is_same_v<S, float>) {
    hook->apply(site, std::span<float>(data, static_cast<std::size_t>(n)));
  } else {
    throw std::logic_error("activation taps are only supported in float32 passes");
  }
}
}  // namespace detail

// Gate blocks are stacked [input, forget, cell, output] along the rows.
template <typename S>
struct LstmParamsT {
  MatrixT<S> input_weights;      // 4h x d
  MatrixT<S> recurrent_weights;  // 4h x h
  VectorT<S> bias;               // 4h

  int hidden_size() const { return static_cast<int>(recurrent_weights.cols()); }
  int input_size() const { return static_cast<int>(input_weights.cols()); }
  static LstmParamsT zeros(int input_size, int hidden_size);
  void check_shapes() const;
};

template <typename S>
struct LstmStateT {
  VectorT<S> h;
  VectorT<S> c;

  static LstmStateT zeros(int hidden_size) {
    return {VectorT<S>::Zero(hidden_size), VectorT<S>::Zero(hidden_size)};
  }
};

using LstmParams = LstmParamsT<float>;
using LstmState = LstmStateT<float>;

// Row t of the result is row ids[t] of the embedding matrix.
template <typename S>
MatrixT<S> embedding_forward(const MatrixT<S>& embedding, std::span<const int32_t> ids);

template <typename S>
LstmStateT<S> lstm_step(const LstmParamsT<S>& p, const VectorT<S>& input, const LstmStateT<S>& prev);

template <typename S>
struct LstmOutputT {
  MatrixT<S> hidden;  // T x h
  LstmStateT<S> final_state;
};

// Fold of lstm_step over the rows of `inputs`. When a tap is given it sees each
// hidden state (Site::lstm_hidden) and its rewrite is what the next step consumes.
template <typename S>
LstmOutputT<S> lstm_forward(const LstmParamsT<S>& p, const MatrixT<S>& inputs,
                            const LstmStateT<S>& initial, ActivationTap* tap = nullptr);

template <typename S>
VectorT<S> linear_forward(const MatrixT<S>& weights, const VectorT<S>& bias, const VectorT<S>& x);

template <typename S>
VectorT<S> softmax(const VectorT<S>& logits);

template <typename S>
double cross_entropy(const VectorT<S>& probs, int target);

// -log softmax(logits)[target], capped at -log(kProbFloor).
template <typename Derived>
double cross_entropy_from_logits(const Eigen::MatrixBase<Derived>& logits, int target) {
  const double mx = static_cast<double>(logits.maxCoeff());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < logits.size(); ++j)
    sum += std::exp(static_cast<double>(logits(j)) - mx);
  const double loss = mx + std::log(sum) - static_cast<double>(logits(target));
  return std::min(loss, -std::log(kProbFloor));
}

// Everything the backward pass needs from one LSTM forward pass.
template <typename S>
struct LstmTraceT {
  MatrixT<S> inputs;  // T x d
  MatrixT<S> gates;   // T x 4h, post-activation
  MatrixT<S> cells;   // T x h
  MatrixT<S> hidden;  // T x h
  LstmStateT<S> initial;
};

template <typename S>
LstmTraceT<S> lstm_forward_traced(const LstmParamsT<S>& p, const MatrixT<S>& inputs,
                                  const LstmStateT<S>& initial);

// Backpropagates d(loss)/d(hidden_t) for all t; accumulates parameter
// gradients into `grads` and returns d(loss)/d(inputs).
template <typename S>
MatrixT<S> lstm_backward(const LstmParamsT<S>& p, const LstmTraceT<S>& trace,
                         const MatrixT<S>& d_hidden, LstmParamsT<S>& grads);

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  int max_epochs = 10;
  int patience = 3;
  uint64_t seed = 0;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::optional<NoiseSpec> train_noise;

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  int64_t step = 0;
};

// One bias-corrected Adam update over a list of parameter tensors and their
// gradients (matched by position).
void adam_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
               AdamState& state, const TrainConfig& cfg);

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
// norm before scaling.
double clip_global_norm(std::span<const std::span<float>> grads, double max_norm);

}  // namespace qlab
