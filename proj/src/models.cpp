#include "qlab/models.hpp"

#include <cmath>
#include <numeric>

namespace qlab {

namespace {

template <typename S, typename M>
void push_ref(std::vector<TensorRefT<S>>& out, std::string name, M& mat, bool is_bias) {
  out.push_back({std::move(name), mat.data(), is_bias ? 1 : mat.rows(), is_bias ? mat.size() : mat.cols(),
                 is_bias});
}

template <typename S, typename Model>
std::vector<TensorRefT<S>> lstm_refs(Model& m) {
  std::vector<TensorRefT<S>> out;
  push_ref<S>(out, "lstm.input_weights", m.lstm.input_weights, false);
  push_ref<S>(out, "lstm.recurrent_weights", m.lstm.recurrent_weights, false);
  push_ref<S>(out, "lstm.bias", m.lstm.bias, true);
  return out;
}

template <typename S>
LstmParamsT<S> init_lstm(int d, int h, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  std::uniform_real_distribution<double> u(-bound, bound);
  auto p = LstmParamsT<S>::zeros(d, h);
  for (Eigen::Index i = 0; i < p.input_weights.size(); ++i) p.input_weights.data()[i] = static_cast<S>(u(rng));
  for (Eigen::Index i = 0; i < p.recurrent_weights.size(); ++i)
    p.recurrent_weights.data()[i] = static_cast<S>(u(rng));
  p.bias.segment(h, h).setConstant(S(1));
  return p;
}

template <typename S>
void fill_uniform(MatrixT<S>& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(u(rng));
}

template <typename S>
void fill_normal(MatrixT<S>& m, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n(rng));
}

void check_dims(const ModelDims& d, ModelType type) {
  if (d.vocab_size < 2 || d.embed_dim < 1 || d.hidden_dim < 1 || d.num_classes < 1 ||
      (type == ModelType::gen && d.label_dim < 1))
    throw ConfigError("invalid model dimensions");
  if (type == ModelType::disc && d.num_classes < 2)
    throw ConfigError("discriminative model needs at least 2 classes");
}

template <typename S>
MatrixT<S> embed_tapped(const MatrixT<S>& table, std::span<const int32_t> ids, ActivationTap* tap) {
  if (ids.empty()) throw std::invalid_argument("empty token sequence");
  MatrixT<S> emb = embedding_forward(table, ids);
  detail::tap_values<S>(tap, Site::embedding, emb.data(), emb.size());
  return emb;
}

template <typename S>
MatrixT<S> gen_hidden(const GenModelT<S>& m, std::span<const int32_t> ids, ActivationTap* tap,
                      const LstmStateT<S>* initial) {
  MatrixT<S> emb = embed_tapped(m.embedding, ids, tap);
  const auto s0 = initial ? *initial : LstmStateT<S>::zeros(m.lstm.hidden_size());
  return lstm_forward(m.lstm, emb, s0, tap).hidden;
}

// Decoder logits for predicting ids[1..] under each requested label; calls
// `sink(label, logits)` with an (T-1) x V matrix.
template <typename S, typename Sink>
void gen_logits(const GenModelT<S>& m, const MatrixT<S>& hidden, std::span<const int> labels,
                ActivationTap* tap, Sink&& sink) {
  const Eigen::Index n = hidden.rows() - 1;
  const Eigen::Index h = hidden.cols();
  const Eigen::Index dl = m.label_embedding.cols();
  MatrixT<S> h_in = hidden.topRows(n);
  detail::tap_values<S>(tap, Site::head_input, h_in.data(), h_in.size());
  const MatrixT<S> shared = h_in * m.decoder.leftCols(h).transpose();
  for (int y : labels) {
    if (y < 0 || y >= m.label_embedding.rows())
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                              std::to_string(m.label_embedding.rows()) + ")");
    MatrixT<S> l_in = m.label_embedding.row(y).replicate(n, 1);
    detail::tap_values<S>(tap, Site::head_input, l_in.data(), l_in.size());
    const VectorT<S> offset = m.decoder.rightCols(dl) * l_in.row(0).transpose() + m.decoder_bias;
    MatrixT<S> logits = shared;
    logits.rowwise() += offset.transpose();
    detail::tap_values<S>(tap, Site::head_output, logits.data(), logits.size());
    sink(y, logits);
  }
}

void require_scorable(std::span<const int32_t> ids) {
  if (ids.size() < 2) throw std::invalid_argument("sequence too short for generative scoring");
}

template <typename S>
void zero_all(std::vector<TensorRefT<S>> refs) {
  for (auto& r : refs)
    for (S& v : r.values()) v = S(0);
}

template <typename S>
void scatter_rows(MatrixT<S>& table_grad, std::span<const int32_t> ids, const MatrixT<S>& d_rows) {
  for (std::size_t t = 0; t < ids.size(); ++t) table_grad.row(ids[t]) += d_rows.row(static_cast<Eigen::Index>(t));
}

template <typename S>
void softmax_rows_inplace(MatrixT<S>& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

std::span<const int32_t> row_span(const Batch& b, std::size_t i) {
  return {b.ids[i].data(), b.lengths[i]};
}

}  // namespace

std::string to_string(ModelType type) { return type == ModelType::disc ? "disc" : "gen"; }

ModelType parse_model_type(std::string_view name) {
  if (name == "disc" || name == "discriminative") return ModelType::disc;
  if (name == "gen" || name == "generative") return ModelType::gen;
  throw ConfigError("unknown model type '" + std::string(name) + "'");
}

// ---- structure ---------------------------------------------------------------

template <typename S>
ModelDims DiscModelT<S>::dims() const {
  return {static_cast<int>(embedding.rows()), static_cast<int>(embedding.cols()), lstm.hidden_size(), 0,
          static_cast<int>(head.rows())};
}

template <typename S>
DiscModelT<S> DiscModelT<S>::zeros(const ModelDims& d) {
  check_dims(d, ModelType::disc);
  return {MatrixT<S>::Zero(d.vocab_size, d.embed_dim), LstmParamsT<S>::zeros(d.embed_dim, d.hidden_dim),
          MatrixT<S>::Zero(d.num_classes, d.hidden_dim), VectorT<S>::Zero(d.num_classes)};
}

template <typename S>
std::vector<TensorRefT<S>> DiscModelT<S>::tensors() {
  std::vector<TensorRefT<S>> out;
  push_ref<S>(out, "embedding", embedding, false);
  for (auto& r : lstm_refs<S>(*this)) out.push_back(r);
  push_ref<S>(out, "head.weight", head, false);
  push_ref<S>(out, "head.bias", head_bias, true);
  return out;
}

template <typename S>
std::vector<TensorRefT<const S>> DiscModelT<S>::tensors() const {
  std::vector<TensorRefT<const S>> out;
  for (auto& r : const_cast<DiscModelT&>(*this).tensors())
    out.push_back({r.name, r.data, r.rows, r.cols, r.is_bias});
  return out;
}

template <typename S>
ModelDims GenModelT<S>::dims() const {
  return {static_cast<int>(embedding.rows()), static_cast<int>(embedding.cols()), lstm.hidden_size(),
          static_cast<int>(label_embedding.cols()), static_cast<int>(label_embedding.rows())};
}

template <typename S>
GenModelT<S> GenModelT<S>::zeros(const ModelDims& d) {
  check_dims(d, ModelType::gen);
  return {MatrixT<S>::Zero(d.vocab_size, d.embed_dim), MatrixT<S>::Zero(d.num_classes, d.label_dim),
          LstmParamsT<S>::zeros(d.embed_dim, d.hidden_dim),
          MatrixT<S>::Zero(d.vocab_size, d.hidden_dim + d.label_dim), VectorT<S>::Zero(d.vocab_size)};
}

template <typename S>
std::vector<TensorRefT<S>> GenModelT<S>::tensors() {
  std::vector<TensorRefT<S>> out;
  push_ref<S>(out, "embedding", embedding, false);
  push_ref<S>(out, "label_embedding", label_embedding, false);
  for (auto& r : lstm_refs<S>(*this)) out.push_back(r);
  push_ref<S>(out, "decoder.weight", decoder, false);
  push_ref<S>(out, "decoder.bias", decoder_bias, true);
  return out;
}

template <typename S>
std::vector<TensorRefT<const S>> GenModelT<S>::tensors() const {
  std::vector<TensorRefT<const S>> out;
  for (auto& r : const_cast<GenModelT&>(*this).tensors())
    out.push_back({r.name, r.data, r.rows, r.cols, r.is_bias});
  return out;
}

ModelType model_type(const Model& model) {
  return std::holds_alternative<DiscModel>(model) ? ModelType::disc : ModelType::gen;
}

ModelDims model_dims(const Model& model) {
  return std::visit([](const auto& m) { return m.dims(); }, model);
}

std::vector<TensorRef> model_tensors(Model& model) {
  return std::visit([](auto& m) { return m.tensors(); }, model);
}

std::vector<TensorRefT<const float>> model_tensors(const Model& model) {
  return std::visit([](const auto& m) { return m.tensors(); }, model);
}

template <typename To, typename From>
DiscModelT<To> cast_model(const DiscModelT<From>& m) {
  return {m.embedding.template cast<To>(),
          {m.lstm.input_weights.template cast<To>(), m.lstm.recurrent_weights.template cast<To>(),
           m.lstm.bias.template cast<To>()},
          m.head.template cast<To>(),
          m.head_bias.template cast<To>()};
}

template <typename To, typename From>
GenModelT<To> cast_model(const GenModelT<From>& m) {
  return {m.embedding.template cast<To>(),
          m.label_embedding.template cast<To>(),
          {m.lstm.input_weights.template cast<To>(), m.lstm.recurrent_weights.template cast<To>(),
           m.lstm.bias.template cast<To>()},
          m.decoder.template cast<To>(),
          m.decoder_bias.template cast<To>()};
}

DiscModel init_disc(const ModelDims& dims, uint64_t seed) {
  auto m = DiscModel::zeros(dims);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dims.hidden_dim));
  fill_normal(m.embedding, 0.1, rng);
  m.lstm = init_lstm<float>(dims.embed_dim, dims.hidden_dim, rng);
  fill_uniform(m.head, bound, rng);
  return m;
}

GenModel init_gen(const ModelDims& dims, uint64_t seed) {
  auto m = GenModel::zeros(dims);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dims.hidden_dim));
  fill_normal(m.embedding, 0.1, rng);
  fill_normal(m.label_embedding, 0.1, rng);
  m.lstm = init_lstm<float>(dims.embed_dim, dims.hidden_dim, rng);
  fill_uniform(m.decoder, bound, rng);
  return m;
}

Model init_model(ModelType type, const ModelDims& dims, uint64_t seed) {
  if (type == ModelType::disc) return init_disc(dims, seed);
  return init_gen(dims, seed);
}

// ---- inference -----------------------------------------------------------------

template <typename S>
VectorT<S> disc_logits(const DiscModelT<S>& m, std::span<const int32_t> ids, ActivationTap* tap) {
  MatrixT<S> emb = embed_tapped(m.embedding, ids, tap);
  auto out = lstm_forward(m.lstm, emb, LstmStateT<S>::zeros(m.lstm.hidden_size()), tap);
  VectorT<S> x = out.final_state.h;
  detail::tap_values<S>(tap, Site::head_input, x.data(), x.size());
  VectorT<S> z = linear_forward(m.head, m.head_bias, x);
  detail::tap_values<S>(tap, Site::head_output, z.data(), z.size());
  return z;
}

int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<int>(best);
}

int argmin_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmin of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] < values[best]) best = i;
  return static_cast<int>(best);
}

int disc_classify(const DiscModel& m, std::span<const int32_t> ids, ActivationTap* tap) {
  const Vector z = disc_logits(m, ids, tap);
  std::vector<double> v(z.data(), z.data() + z.size());
  return argmax_lowest(v);
}

Vector disc_head_input(const DiscModel& m, std::span<const int32_t> ids, ActivationTap* tap) {
  Matrix emb = embed_tapped(m.embedding, ids, tap);
  auto out = lstm_forward(m.lstm, emb, LstmState::zeros(m.lstm.hidden_size()), tap);
  Vector x = out.final_state.h;
  detail::tap_values<float>(tap, Site::head_input, x.data(), x.size());
  return x;
}

template <typename S>
double gen_sequence_loss(const GenModelT<S>& m, std::span<const int32_t> ids, int label, ActivationTap* tap) {
  require_scorable(ids);
  const MatrixT<S> hidden = gen_hidden(m, ids, tap, static_cast<const LstmStateT<S>*>(nullptr));
  const int labels_arr[] = {label};
  std::span<const int> labels(labels_arr);
  double total = 0.0;
  gen_logits(m, hidden, labels, tap, [&](int, const MatrixT<S>& logits) {
    for (Eigen::Index t = 0; t < logits.rows(); ++t)
      total += cross_entropy_from_logits(logits.row(t), ids[static_cast<std::size_t>(t + 1)]);
  });
  return total;
}

std::vector<double> gen_token_losses(const GenModel& m, std::span<const int32_t> ids, int label,
                                     ActivationTap* tap, const LstmState* initial) {
  require_scorable(ids);
  const Matrix hidden = gen_hidden(m, ids, tap, initial);
  const int labels_arr[] = {label};
  std::span<const int> labels(labels_arr);
  std::vector<double> out;
  gen_logits(m, hidden, labels, tap, [&](int, const Matrix& logits) {
    for (Eigen::Index t = 0; t < logits.rows(); ++t)
      out.push_back(cross_entropy_from_logits(logits.row(t), ids[static_cast<std::size_t>(t + 1)]));
  });
  return out;
}

std::vector<double> gen_label_losses(const GenModel& m, std::span<const int32_t> ids,
                                     std::span<const int> labels, ActivationTap* tap) {
  require_scorable(ids);
  const Matrix hidden = gen_hidden(m, ids, tap, static_cast<const LstmState*>(nullptr));
  std::vector<double> losses;
  losses.reserve(labels.size());
  gen_logits(m, hidden, labels, tap, [&](int, const Matrix& logits) {
    double total = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t)
      total += cross_entropy_from_logits(logits.row(t), ids[static_cast<std::size_t>(t + 1)]);
    losses.push_back(total);
  });
  return losses;
}

std::vector<double> gen_class_losses(const GenModel& m, std::span<const int32_t> ids, ActivationTap* tap) {
  std::vector<int> all(static_cast<std::size_t>(m.label_embedding.rows()));
  std::iota(all.begin(), all.end(), 0);
  return gen_label_losses(m, ids, all, tap);
}

int gen_classify(const GenModel& m, std::span<const int32_t> ids, ActivationTap* tap,
                 std::span<const double> log_prior) {
  auto losses = gen_class_losses(m, ids, tap);
  if (!log_prior.empty()) {
    if (log_prior.size() != losses.size()) throw std::invalid_argument("class prior size mismatch");
    for (std::size_t y = 0; y < losses.size(); ++y) losses[y] -= log_prior[y];
  }
  return argmin_lowest(losses);
}

Matrix gen_head_inputs(const GenModel& m, std::span<const int32_t> ids, int label, ActivationTap* tap) {
  require_scorable(ids);
  const Matrix hidden = gen_hidden(m, ids, tap, static_cast<const LstmState*>(nullptr));
  if (label < 0 || label >= m.label_embedding.rows()) throw std::out_of_range("label out of range");
  const Eigen::Index n = hidden.rows() - 1;
  const Eigen::Index h = hidden.cols();
  Matrix h_in = hidden.topRows(n);
  detail::tap_values<float>(tap, Site::head_input, h_in.data(), h_in.size());
  Matrix l_in = m.label_embedding.row(label).replicate(n, 1);
  detail::tap_values<float>(tap, Site::head_input, l_in.data(), l_in.size());
  Matrix out(n, h + l_in.cols());
  out << h_in, l_in;
  return out;
}

std::vector<int32_t> scoring_ids(ModelType type, std::span<const int32_t> ids) {
  std::vector<int32_t> out(ids.begin(), ids.end());
  if (out.empty()) out.push_back(Vocab::kPad);
  if (type == ModelType::gen && out.size() < 2) out.push_back(Vocab::kPad);
  return out;
}

int classify(const Model& m, std::span<const int32_t> ids, ActivationTap* tap) {
  if (const auto* d = std::get_if<DiscModel>(&m)) return disc_classify(*d, ids, tap);
  return gen_classify(std::get<GenModel>(m), ids, tap);
}

std::vector<int> predict(const Model& m, const Dataset& data, ActivationTap* tap) {
  std::vector<int> out;
  out.reserve(data.size());
  const ModelType type = model_type(m);
  for (const auto& s : data.samples) out.push_back(classify(m, scoring_ids(type, s.tokens.ids), tap));
  return out;
}

// ---- training --------------------------------------------------------------------

Batch make_batch(std::span<const TokenSequence> sequences, std::span<const int> labels, int32_t pad_id) {
  if (sequences.size() != labels.size()) throw std::invalid_argument("make_batch: size mismatch");
  Batch b;
  std::size_t longest = 0;
  for (const auto& s : sequences) longest = std::max(longest, s.ids.size());
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    std::vector<int32_t> row(sequences[i].ids);
    b.lengths.push_back(row.size());
    row.resize(longest, pad_id);
    b.ids.push_back(std::move(row));
    b.labels.push_back(labels[i]);
  }
  return b;
}

template <typename S>
double disc_loss_and_grad(const DiscModelT<S>& m, const Batch& batch, DiscModelT<S>& grads) {
  if (batch.ids.empty()) return 0.0;
  const S scale = S(1) / static_cast<S>(batch.ids.size());
  const int hsz = m.lstm.hidden_size();
  double total = 0.0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    const auto ids = row_span(batch, i);
    const int y = batch.labels[i];
    const MatrixT<S> emb = embedding_forward(m.embedding, ids);
    const auto trace = lstm_forward_traced(m.lstm, emb, LstmStateT<S>::zeros(hsz));
    const Eigen::Index last = trace.hidden.rows() - 1;
    const VectorT<S> h_last = trace.hidden.row(last).transpose();
    VectorT<S> p = softmax<S>(linear_forward(m.head, m.head_bias, h_last));
    total += cross_entropy<S>(p, y);
    p(y) -= S(1);
    p *= scale;
    grads.head.noalias() += p * h_last.transpose();
    grads.head_bias += p;
    MatrixT<S> d_hidden = MatrixT<S>::Zero(trace.hidden.rows(), hsz);
    d_hidden.row(last) = (m.head.transpose() * p).transpose();
    const MatrixT<S> d_emb = lstm_backward(m.lstm, trace, d_hidden, grads.lstm);
    scatter_rows(grads.embedding, ids, d_emb);
  }
  return total / static_cast<double>(batch.ids.size());
}

template <typename S>
double gen_loss_and_grad(const GenModelT<S>& m, const Batch& batch, GenModelT<S>& grads) {
  std::size_t used = 0;
  for (auto len : batch.lengths) used += len >= 2 ? 1 : 0;
  if (used == 0) return 0.0;
  const S scale = S(1) / static_cast<S>(used);
  const int hsz = m.lstm.hidden_size();
  const Eigen::Index dl = m.label_embedding.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.lengths[i] < 2) continue;
    const auto ids = row_span(batch, i);
    const int y = batch.labels[i];
    const MatrixT<S> emb = embedding_forward(m.embedding, ids);
    const auto trace = lstm_forward_traced(m.lstm, emb, LstmStateT<S>::zeros(hsz));
    const Eigen::Index n = trace.hidden.rows() - 1;
    MatrixT<S> x(n, hsz + dl);
    x << trace.hidden.topRows(n), m.label_embedding.row(y).replicate(n, 1);
    MatrixT<S> z = x * m.decoder.transpose();
    z.rowwise() += m.decoder_bias.transpose();
    for (Eigen::Index t = 0; t < n; ++t) total += cross_entropy_from_logits(z.row(t), ids[static_cast<std::size_t>(t + 1)]);
    softmax_rows_inplace(z);
    for (Eigen::Index t = 0; t < n; ++t) z(t, ids[static_cast<std::size_t>(t + 1)]) -= S(1);
    z *= scale;
    grads.decoder.noalias() += z.transpose() * x;
    grads.decoder_bias += z.colwise().sum().transpose();
    const MatrixT<S> dx = z * m.decoder;
    MatrixT<S> d_hidden = MatrixT<S>::Zero(n + 1, hsz);
    d_hidden.topRows(n) = dx.leftCols(hsz);
    grads.label_embedding.row(y) += dx.rightCols(dl).colwise().sum();
    const MatrixT<S> d_emb = lstm_backward(m.lstm, trace, d_hidden, grads.lstm);
    scatter_rows(grads.embedding, ids, d_emb);
  }
  return total / static_cast<double>(used);
}

template <typename S>
double disc_batch_loss(const DiscModelT<S>& m, const Batch& batch) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    const VectorT<S> z = disc_logits(m, row_span(batch, i));
    total += cross_entropy<S>(softmax<S>(z), batch.labels[i]);
  }
  return batch.ids.empty() ? 0.0 : total / static_cast<double>(batch.ids.size());
}

template <typename S>
double gen_batch_loss(const GenModelT<S>& m, const Batch& batch) {
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.lengths[i] < 2) continue;
    total += gen_sequence_loss(m, row_span(batch, i), batch.labels[i]);
    ++used;
  }
  return used ? total / static_cast<double>(used) : 0.0;
}

namespace {

double validation_accuracy(const Model& m, const Dataset& val) {
  if (val.empty()) return 0.0;
  const auto pred = predict(m, val);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == val.samples[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

template <typename M>
double step_batch(M& model, M& grads, const Batch& batch) {
  if constexpr (std::is_same_v<M, DiscModel>) return disc_loss_and_grad(model, batch, grads);
  else return gen_loss_and_grad(model, batch, grads);
}

template <typename M>
TrainResult train_impl(M model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                       const TrainOptions& options) {
  cfg.validate();
  train_set.validate();
  if (model.dims().num_classes != train_set.num_classes)
    throw ConfigError("model has " + std::to_string(model.dims().num_classes) + " classes, dataset has " +
                      std::to_string(train_set.num_classes));
  if (cfg.train_noise && cfg.train_noise->epsilon > 0.0 && !options.vocab)
    throw ConfigError("training-time noise needs the vocabulary to re-tokenize corrupted text");

  Rng rng(cfg.seed);
  M grads = M::zeros(model.dims());
  AdamState adam;
  TrainResult result{Model(model), {}};
  double best = -1.0;
  int since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<TokenSequence> seqs;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = train_set.samples[order[k]];
        if (cfg.train_noise && cfg.train_noise->epsilon > 0.0) {
          TokenSequence t = tokenize(inject_noise(s.text, *cfg.train_noise, rng), *options.vocab);
          if (options.max_tokens && t.ids.size() > options.max_tokens) t.ids.resize(options.max_tokens);
          seqs.push_back(std::move(t));
        } else {
          seqs.push_back(s.tokens);
        }
        labels.push_back(s.label);
      }
      const Batch batch = make_batch(seqs, labels, Vocab::kPad);
      zero_all(grads.tensors());
      const double loss = step_batch(model, grads, batch);
      if (!std::isfinite(loss))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches + 1));
      std::vector<std::span<float>> p_spans, g_spans_mut;
      std::vector<std::span<const float>> g_spans;
      for (auto& r : model.tensors()) p_spans.push_back(r.values());
      for (auto& r : grads.tensors()) {
        g_spans_mut.push_back(r.values());
        g_spans.push_back(r.values());
      }
      clip_global_norm(g_spans_mut, cfg.clip_norm);
      adam_step(p_spans, g_spans, adam, cfg);
      loss_sum += loss;
      ++batches;
    }

    EpochRecord rec{epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0,
                    validation_accuracy(Model(model), val_set)};
    result.history.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    if (rec.val_accuracy > best) {
      best = rec.val_accuracy;
      result.model = model;
      result.history.best_epoch = epoch;
      result.history.best_val_accuracy = best;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= cfg.patience) break;
  }
  return result;
}

}  // namespace

TrainResult train(Model model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainOptions& options) {
  return std::visit(
      [&](auto& m) { return train_impl(std::move(m), train_set, val_set, cfg, options); }, model);
}

#define QLAB_INSTANTIATE_MODELS(S)                                                                     \
  template struct DiscModelT<S>;                                                                       \
  template struct GenModelT<S>;                                                                        \
  template VectorT<S> disc_logits<S>(const DiscModelT<S>&, std::span<const int32_t>, ActivationTap*);  \
  template double gen_sequence_loss<S>(const GenModelT<S>&, std::span<const int32_t>, int, ActivationTap*); \
  template double disc_loss_and_grad<S>(const DiscModelT<S>&, const Batch&, DiscModelT<S>&);           \
  template double gen_loss_and_grad<S>(const GenModelT<S>&, const Batch&, GenModelT<S>&);              \
  template double disc_batch_loss<S>(const DiscModelT<S>&, const Batch&);                              \
  template double gen_batch_loss<S>(const GenModelT<S>&, const Batch&);

QLAB_INSTANTIATE_MODELS(float)
QLAB_INSTANTIATE_MODELS(double)

template DiscModelT<double> cast_model<double, float>(const DiscModelT<float>&);
template DiscModelT<float> cast_model<float, double>(const DiscModelT<double>&);
template GenModelT<double> cast_model<double, float>(const GenModelT<float>&);
template GenModelT<float> cast_model<float, double>(const GenModelT<double>&);

}  // namespace qlab
