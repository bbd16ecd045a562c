#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/nn.hpp"

namespace qlab {

enum class ModelType { disc, gen };

std::string to_string(ModelType type);
ModelType parse_model_type(std::string_view name);

struct ModelDims {
  int vocab_size = 0;
  int embed_dim = 64;
  int hidden_dim = 64;
  int label_dim = 64;  // generative model only
  int num_classes = 4;

  bool operator==(const ModelDims&) const = default;
};

// Named view over one parameter tensor. Biases are 1 x n.
template <typename S>
struct TensorRefT {
  std::string name;
  S* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool is_bias = false;

  std::span<S> values() const { return {data, static_cast<std::size_t>(rows * cols)}; }
};
using TensorRef = TensorRefT<float>;

// Embedding -> LSTM -> linear head on the final hidden state.
template <typename S>
struct DiscModelT {
  MatrixT<S> embedding;  // V x d
  LstmParamsT<S> lstm;
  MatrixT<S> head;       // C x h
  VectorT<S> head_bias;  // C

  ModelDims dims() const;
  static DiscModelT zeros(const ModelDims& dims);
  std::vector<TensorRefT<S>> tensors();
  std::vector<TensorRefT<const S>> tensors() const;
};

// Class-conditional language model: next-token logits come from the decoder
// applied to [h_t ; label_embedding[y]].
template <typename S>
struct GenModelT {
  MatrixT<S> embedding;        // V x d
  MatrixT<S> label_embedding;  // C x d_label
  LstmParamsT<S> lstm;
  MatrixT<S> decoder;          // V x (h + d_label)
  VectorT<S> decoder_bias;     // V

  ModelDims dims() const;
  static GenModelT zeros(const ModelDims& dims);
  std::vector<TensorRefT<S>> tensors();
  std::vector<TensorRefT<const S>> tensors() const;
};

using DiscModel = DiscModelT<float>;
using GenModel = GenModelT<float>;
using Model = std::variant<DiscModel, GenModel>;

ModelType model_type(const Model& model);
ModelDims model_dims(const Model& model);
std::vector<TensorRef> model_tensors(Model& model);
std::vector<TensorRefT<const float>> model_tensors(const Model& model);

template <typename To, typename From>
DiscModelT<To> cast_model(const DiscModelT<From>& m);
template <typename To, typename From>
GenModelT<To> cast_model(const GenModelT<From>& m);

// uniform(-1/sqrt(h), 1/sqrt(h)) for LSTM and linear weights, N(0, 0.1) for
// embeddings, forget-gate bias +1.
DiscModel init_disc(const ModelDims& dims, uint64_t seed);
GenModel init_gen(const ModelDims& dims, uint64_t seed);
Model init_model(ModelType type, const ModelDims& dims, uint64_t seed);

// ---- discriminative -------------------------------------------------------

template <typename S>
VectorT<S> disc_logits(const DiscModelT<S>& m, std::span<const int32_t> ids, ActivationTap* tap = nullptr);

// Argmax of the logits, lowest index on ties.
int argmax_lowest(std::span<const double> values);
int argmin_lowest(std::span<const double> values);

int disc_classify(const DiscModel& m, std::span<const int32_t> ids, ActivationTap* tap = nullptr);

// Head input (h_T after the head_input tap); one row per sequence.
Vector disc_head_input(const DiscModel& m, std::span<const int32_t> ids, ActivationTap* tap = nullptr);

// ---- generative -----------------------------------------------------------

// Sum over t = 1..T-1 of -log p(x_{t+1} | x_{<=t}, y). Requires T >= 2.
template <typename S>
double gen_sequence_loss(const GenModelT<S>& m, std::span<const int32_t> ids, int label,
                         ActivationTap* tap = nullptr);

// Per-token terms of gen_sequence_loss, in order. A non-null `initial` resumes
// the LSTM from a carried state instead of zeros.
std::vector<double> gen_token_losses(const GenModel& m, std::span<const int32_t> ids, int label,
                                     ActivationTap* tap = nullptr, const LstmState* initial = nullptr);

// gen_sequence_loss for every class, sharing one LSTM pass.
std::vector<double> gen_class_losses(const GenModel& m, std::span<const int32_t> ids,
                                     ActivationTap* tap = nullptr);

// gen_sequence_loss for the listed labels only, sharing one LSTM pass.
std::vector<double> gen_label_losses(const GenModel& m, std::span<const int32_t> ids,
                                     std::span<const int> labels, ActivationTap* tap = nullptr);

// Argmin over classes of the generation loss (uniform prior), or of
// loss - log_prior[y] when a prior is supplied. Lowest index on ties.
int gen_classify(const GenModel& m, std::span<const int32_t> ids, ActivationTap* tap = nullptr,
                 std::span<const double> log_prior = {});

// Decoder inputs [h_t ; l_y] for t = 1..T-1 after the head_input tap.
Matrix gen_head_inputs(const GenModel& m, std::span<const int32_t> ids, int label,
                       ActivationTap* tap = nullptr);

// Generic dispatch: disc -> argmax logits, gen -> argmin generation loss.
int classify(const Model& m, std::span<const int32_t> ids, ActivationTap* tap = nullptr);

// Generative scoring needs two tokens; shorter sequences are right-padded
// with the pad id so every sample can still be classified.
std::vector<int32_t> scoring_ids(ModelType type, std::span<const int32_t> ids);

std::vector<int> predict(const Model& m, const Dataset& data, ActivationTap* tap = nullptr);

// ---- training -------------------------------------------------------------

// Sequences padded to the longest member with the pad id. Only the first
// lengths[i] ids of row i are consumed.
struct Batch {
  std::vector<std::vector<int32_t>> ids;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;
};

Batch make_batch(std::span<const TokenSequence> sequences, std::span<const int> labels, int32_t pad_id);

// Mean batch loss; gradients of that mean are added into `grads`.
template <typename S>
double disc_loss_and_grad(const DiscModelT<S>& m, const Batch& batch, DiscModelT<S>& grads);
template <typename S>
double gen_loss_and_grad(const GenModelT<S>& m, const Batch& batch, GenModelT<S>& grads);

// Mean batch loss only (no gradient), used by finite-difference checks.
template <typename S>
double disc_batch_loss(const DiscModelT<S>& m, const Batch& batch);
template <typename S>
double gen_batch_loss(const GenModelT<S>& m, const Batch& batch);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
};

struct TrainResult {
  Model model;  // best-validation checkpoint
  TrainHistory history;
};

struct TrainOptions {
  // Needed to re-tokenize corrupted text when cfg.train_noise is set.
  const Vocab* vocab = nullptr;
  std::size_t max_tokens = 0;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Early stopping on validation accuracy; stops once `patience` epochs pass
// without improvement (patience 0 runs exactly one epoch).
TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainOptions& options = {});

}  // namespace qlab
