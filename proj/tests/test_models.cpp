#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "qlab/models.hpp"

using namespace qlab;
using doctest::Approx;

namespace {

std::span<const int32_t> S(const std::vector<int32_t>& v) { return {v.data(), v.size()}; }

// Per-step oracle: decoder on [h_t ; l_y], softmax, -log p(next).
double gen_loss_oracle(const GenModelT<double>& m, const std::vector<int32_t>& ids, int y) {
  const auto emb = embedding_forward(m.embedding, S(ids));
  auto s = LstmStateT<double>::zeros(m.lstm.hidden_size());
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    s = lstm_step(m.lstm, VectorT<double>(emb.row(static_cast<Eigen::Index>(t)).transpose()), s);
    VectorT<double> in(s.h.size() + m.label_embedding.cols());
    in << s.h, m.label_embedding.row(y).transpose();
    const auto p = softmax(linear_forward(m.decoder, m.decoder_bias, in));
    total += -std::log(p(ids[t + 1]));
  }
  return total;
}

Dataset tokenized_keywords(int C, int per_class, uint64_t seed, Vocab& vocab) {
  auto d = qtest::keyword_dataset(C, per_class, seed);
  std::vector<std::string> texts;
  for (const auto& s : d.samples) texts.push_back(s.text);
  vocab = build_vocab(texts, 200);
  attach_tokens(d, vocab);
  return d;
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("disc_logits closed forms") {
  const auto dims = qtest::tiny_dims();
  const std::vector<int32_t> ids{3, 4, 5};
  auto z = DiscModel::zeros(dims);
  const auto l = disc_logits(z, S(ids));
  CHECK(l.maxCoeff() == l.minCoeff());
  CHECK(softmax(l)(0) == Approx(1.0 / 3));

  auto m = qtest::random_model<DiscModel>(dims, 1);
  m.head.setZero();
  m.head_bias << 0, 1, 0;
  const auto b = disc_logits(m, S(ids));
  CHECK(b(0) == 0.0f);
  CHECK(b(1) == 1.0f);
  CHECK(disc_classify(m, S(ids)) == 1);
  CHECK(disc_classify(z, S(ids)) == 0);
}

TEST_CASE("disc_logits is the composition of nn ops") {
  const auto dims = qtest::tiny_dims();
  std::mt19937_64 rng(3);
  for (uint64_t k = 0; k < 10; ++k) {
    const auto m = qtest::random_model<DiscModel>(dims, k);
    const auto ids = qtest::random_ids(rng, dims.vocab_size, 6);
    const auto out = lstm_forward(m.lstm, embedding_forward(m.embedding, S(ids)), LstmState::zeros(dims.hidden_dim));
    const Vector ref = linear_forward(m.head, m.head_bias, out.final_state.h);
    CHECK((disc_logits(m, S(ids)) - ref).cwiseAbs().maxCoeff() <= 1e-6f);
    // argmax of logits and of softmax agree
    const Vector p = softmax(ref);
    std::vector<double> pv(p.data(), p.data() + p.size());
    CHECK(disc_classify(m, S(ids)) == argmax_lowest(pv));
  }
}

TEST_CASE("argmax and argmin take the lowest index on ties") {
  const std::vector<double> a{0, 1, 0, 0}, b{2, 2, 2}, c{1, 0, 0};
  CHECK(argmax_lowest(a) == 1);
  CHECK(argmax_lowest(b) == 0);
  CHECK(argmin_lowest(c) == 1);
  CHECK(argmin_lowest(b) == 0);
}

TEST_CASE("gen_sequence_loss closed forms") {
  auto dims = qtest::tiny_dims(4, 3, 3, 2, 2);
  const auto z = GenModel::zeros(dims);
  const std::vector<int32_t> ids{2, 3, 1, 0, 2};
  CHECK(gen_sequence_loss(z, S(ids), 0) == Approx(4 * std::log(4.0)));
  CHECK(gen_sequence_loss(z, S(ids), 1) == Approx(4 * std::log(4.0)));

  // a decoder bias that always predicts token 2
  auto f = z;
  f.decoder_bias << -50, -50, 50, -50;
  const std::vector<int32_t> twos{2, 2, 2};
  CHECK(gen_sequence_loss(f, S(twos), 0) < 1e-6);

  const std::vector<int32_t> one{2};
  CHECK_THROWS(gen_sequence_loss(z, S(one), 0));
}

TEST_CASE("gen_sequence_loss matches the step oracle") {
  const auto dims = qtest::tiny_dims(12, 4, 5, 3, 3);
  std::mt19937_64 rng(6);
  for (uint64_t k = 0; k < 10; ++k) {
    const auto m = qtest::random_model<GenModel>(dims, k, 0.8f);
    const auto md = cast_model<double>(m);
    const auto ids = qtest::random_ids(rng, dims.vocab_size, 2 + static_cast<int>(k % 5));
    for (int y = 0; y < 3; ++y) {
      const double ref = gen_loss_oracle(md, ids, y);
      CHECK(gen_sequence_loss(md, S(ids), y) == Approx(ref).epsilon(1e-9));
      CHECK(gen_sequence_loss(m, S(ids), y) == Approx(ref).epsilon(1e-5));
    }
    const auto all = gen_class_losses(m, S(ids));
    REQUIRE(all.size() == 3);
    for (int y = 0; y < 3; ++y) CHECK(all[static_cast<std::size_t>(y)] == Approx(gen_sequence_loss(m, S(ids), y)));
    const std::vector<int> some{2, 0};
    const auto part = gen_label_losses(m, S(ids), some);
    CHECK(part[0] == Approx(all[2]));
    CHECK(part[1] == Approx(all[0]));
    CHECK(gen_classify(m, S(ids)) == argmin_lowest(all));
  }
}

TEST_CASE("gen loss is additive over a split with the carried state") {
  const auto dims = qtest::tiny_dims(12, 4, 5, 3, 3);
  const auto m = qtest::random_model<GenModel>(dims, 17, 0.8f);
  const std::vector<int32_t> ids{3, 7, 2, 9, 4, 4, 11};
  for (std::size_t cut = 2; cut + 1 < ids.size(); ++cut) {
    // prefix scores ids[1..cut-1]; suffix resumes after ids[cut-2] and scores ids[cut..]
    const std::vector<int32_t> prefix(ids.begin(), ids.begin() + static_cast<long>(cut));
    const std::vector<int32_t> suffix(ids.begin() + static_cast<long>(cut) - 1, ids.end());
    const auto emb = embedding_forward(m.embedding, S(prefix));
    const auto carried =
        lstm_forward(m.lstm, Matrix(emb.topRows(static_cast<Eigen::Index>(cut) - 1)), LstmState::zeros(5)).final_state;
    double parts = 0.0;
    for (double v : gen_token_losses(m, S(prefix), 1)) parts += v;
    for (double v : gen_token_losses(m, S(suffix), 1, nullptr, &carried)) parts += v;
    CHECK(parts == Approx(gen_sequence_loss(m, S(ids), 1)).epsilon(1e-5));
  }
}

TEST_CASE("gen_classify edge cases") {
  auto dims = qtest::tiny_dims(6, 3, 3, 1, 2);
  const auto m1 = qtest::random_model<GenModel>(dims, 2);
  const std::vector<int32_t> ids{2, 3, 4};
  CHECK(gen_classify(m1, S(ids)) == 0);

  dims.num_classes = 3;
  const auto z = GenModel::zeros(dims);
  CHECK(gen_classify(z, S(ids)) == 0);
  auto r = qtest::random_model<GenModel>(dims, 3);
  r.label_embedding.setZero();
  CHECK(gen_classify(r, S(ids)) == 0);
}

TEST_CASE("gen_classify recovers a planted class") {
  // label c pushes the decoder toward token 2 + c
  auto dims = qtest::tiny_dims(6, 2, 2, 3, 3);
  auto m = GenModel::zeros(dims);
  for (int c = 0; c < 3; ++c) {
    m.label_embedding(c, c) = 1.0f;
    m.decoder(2 + c, dims.hidden_dim + c) = 6.0f;
  }
  for (int c = 0; c < 3; ++c) {
    const std::vector<int32_t> ids(5, 2 + c);
    CHECK(gen_classify(m, S(ids)) == c);
    const std::vector<double> prior{std::log(0.98), std::log(0.01), std::log(0.01)};
    if (c == 0) CHECK(gen_classify(m, S(ids), nullptr, prior) == 0);
  }
}

TEST_CASE("gen_head_inputs shape") {
  const auto dims = qtest::tiny_dims(12, 4, 5, 3, 3);
  const auto m = qtest::random_model<GenModel>(dims, 5);
  const std::vector<int32_t> ids{2, 3, 4, 5, 6};
  const Matrix X = gen_head_inputs(m, S(ids), 2);
  CHECK(X.rows() == 4);
  CHECK(X.cols() == 8);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 3; ++j) CHECK(X(t, 5 + j) == m.label_embedding(2, j));
}

TEST_CASE("scoring_ids pads short generative inputs") {
  const std::vector<int32_t> one{7};
  CHECK(scoring_ids(ModelType::gen, one) == std::vector<int32_t>{7, Vocab::kPad});
  CHECK(scoring_ids(ModelType::disc, one) == std::vector<int32_t>{7});
  CHECK(scoring_ids(ModelType::disc, {}) == std::vector<int32_t>{Vocab::kPad});
  CHECK(scoring_ids(ModelType::gen, std::vector<int32_t>{1, 2}) == std::vector<int32_t>{1, 2});
}

TEST_CASE("initialisation") {
  const auto dims = qtest::tiny_dims(30, 6, 10, 3, 4);
  const auto m = init_disc(dims, 1);
  const float bound = 1.0f / std::sqrt(10.0f);
  CHECK(m.lstm.input_weights.cwiseAbs().maxCoeff() <= bound);
  CHECK(m.head.cwiseAbs().maxCoeff() <= bound);
  for (int j = 0; j < 10; ++j) {
    CHECK(m.lstm.bias(10 + j) == 1.0f);
    CHECK(m.lstm.bias(j) == 0.0f);
  }
  CHECK(init_disc(dims, 1).embedding == m.embedding);
  CHECK_FALSE(init_disc(dims, 2).embedding == m.embedding);
  const auto g = init_gen(dims, 1);
  CHECK(g.decoder.cols() == 14);
  CHECK(model_dims(Model(g)) == dims);
}

TEST_CASE("analytic gradients match finite differences") {
  for (uint64_t seed : {1, 2}) {
    const auto d = qtest::disc_grad_check(seed);
    CHECK_MESSAGE(d.worst <= 1e-3, d.worst_tensor);
    const auto g = qtest::gen_grad_check(seed);
    CHECK_MESSAGE(g.worst <= 1e-3, g.worst_tensor);
  }
}

TEST_CASE("padding does not change loss or gradients") {
  const auto dims = qtest::tiny_dims();
  const auto dm = cast_model<double>(qtest::random_model<DiscModel>(dims, 8));
  const auto gm = cast_model<double>(qtest::random_model<GenModel>(dims, 8));
  Batch plain;
  plain.ids = {{3, 4, 5}, {6, 7, 8, 9, 10}};
  plain.lengths = {3, 5};
  plain.labels = {0, 2};
  Batch padded = plain;
  padded.ids[0] = {3, 4, 5, 0, 0, 0, 0};
  padded.ids[1] = {6, 7, 8, 9, 10, 0, 0};

  auto ga = DiscModelT<double>::zeros(dims), gb = ga;
  CHECK(disc_loss_and_grad(dm, plain, ga) == disc_loss_and_grad(dm, padded, gb));
  for (std::size_t k = 0; k < ga.tensors().size(); ++k) {
    const auto a = ga.tensors()[k].values(), b = gb.tensors()[k].values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  auto ha = GenModelT<double>::zeros(dims), hb = ha;
  CHECK(gen_loss_and_grad(gm, plain, ha) == gen_loss_and_grad(gm, padded, hb));
  for (std::size_t k = 0; k < ha.tensors().size(); ++k) {
    const auto a = ha.tensors()[k].values(), b = hb.tensors()[k].values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("a confidently correct batch has vanishing gradients") {
  auto dims = qtest::tiny_dims();
  auto m = DiscModelT<double>::zeros(dims);
  m.head_bias << 40, 0, 0;
  Batch b;
  b.ids = {{3, 4}, {5}};
  b.lengths = {2, 1};
  b.labels = {0, 0};
  auto g = DiscModelT<double>::zeros(dims);
  CHECK(disc_loss_and_grad(m, b, g) < 1e-12);
  for (const auto& t : g.tensors())
    for (double v : t.values()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("make_batch pads to the longest member") {
  const std::vector<TokenSequence> seqs{{{2, 3}}, {{4, 5, 6}}};
  const std::vector<int> labels{1, 0};
  const auto b = make_batch(seqs, labels, Vocab::kPad);
  CHECK(b.lengths == std::vector<std::size_t>{2, 3});
  CHECK(b.ids[0] == std::vector<int32_t>{2, 3, 0});
  CHECK(b.labels == labels);
}

TEST_CASE("training separates a keyword corpus") {
  Vocab vocab;
  const auto data = tokenized_keywords(2, 60, 1, vocab);
  const auto split = split_dataset(data, 0.8, 2);
  auto dims = qtest::tiny_dims(vocab.size(), 16, 16, 2, 8);
  TrainConfig cfg;
  cfg.max_epochs = 5;
  cfg.learning_rate = 0.01;
  cfg.seed = 3;
  for (ModelType type : {ModelType::disc, ModelType::gen}) {
    const auto res = train(init_model(type, dims, 4), split.train, split.val, cfg);
    CHECK_MESSAGE(res.history.best_val_accuracy >= (type == ModelType::disc ? 0.99 : 0.9), to_string(type));
    CHECK(res.history.epochs.size() <= 5);
  }
}

TEST_CASE("training details") {
  Vocab vocab;
  const auto data = tokenized_keywords(3, 20, 5, vocab);
  const auto split = split_dataset(data, 0.8, 6);
  const auto dims = qtest::tiny_dims(vocab.size(), 8, 8, 3, 4);
  TrainConfig cfg;
  cfg.patience = 0;
  cfg.seed = 1;
  CHECK(train(init_model(ModelType::disc, dims, 1), split.train, split.val, cfg).history.epochs.size() == 1);

  cfg.patience = 2;
  cfg.max_epochs = 3;
  std::vector<EpochRecord> seen;
  TrainOptions opts;
  opts.on_epoch = [&](const EpochRecord& e) { seen.push_back(e); };
  const auto a = train(init_model(ModelType::gen, dims, 1), split.train, split.val, cfg, opts);
  const auto b = train(init_model(ModelType::gen, dims, 1), split.train, split.val, cfg);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  CHECK(seen.size() == a.history.epochs.size());
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
    CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
    CHECK(a.history.epochs[i].val_accuracy == b.history.epochs[i].val_accuracy);
  }
  const auto ta = model_tensors(a.model), tb = model_tensors(b.model);
  for (std::size_t k = 0; k < ta.size(); ++k)
    CHECK(std::equal(ta[k].values().begin(), ta[k].values().end(), tb[k].values().begin()));

  // train_noise needs the vocabulary to re-tokenize
  cfg.train_noise = NoiseSpec{0.05};
  CHECK_THROWS(train(init_model(ModelType::disc, dims, 1), split.train, split.val, cfg));
  TrainOptions with_vocab{&vocab, 0, {}};
  CHECK_NOTHROW(train(init_model(ModelType::disc, dims, 1), split.train, split.val, cfg, with_vocab));
}

TEST_CASE("loss on a fixed batch falls over the first Adam steps") {
  Vocab vocab;
  const auto data = tokenized_keywords(2, 16, 7, vocab);
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;
  for (const auto& s : data.samples) {
    seqs.push_back(s.tokens);
    labels.push_back(s.label);
  }
  const auto batch = make_batch(seqs, labels, Vocab::kPad);
  const auto dims = qtest::tiny_dims(vocab.size(), 8, 8, 2, 4);
  TrainConfig cfg;
  int falling = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    auto m = init_disc(dims, seed);
    AdamState st;
    const double first = disc_batch_loss(m, batch);
    for (int step = 0; step < 10; ++step) {
      auto g = DiscModel::zeros(dims);
      disc_loss_and_grad(m, batch, g);
      std::vector<std::span<float>> ps;
      std::vector<std::span<const float>> gs;
      auto pt = m.tensors();
      auto gt = g.tensors();
      for (std::size_t k = 0; k < pt.size(); ++k) {
        ps.push_back(pt[k].values());
        gs.push_back(gt[k].values());
      }
      adam_step(ps, gs, st, cfg);
    }
    falling += disc_batch_loss(m, batch) < first;
  }
  CHECK(falling >= 9);
}

TEST_CASE("model type names") {
  CHECK(parse_model_type("disc") == ModelType::disc);
  CHECK(parse_model_type(to_string(ModelType::gen)) == ModelType::gen);
  CHECK_THROWS_AS(parse_model_type("cnn"), ConfigError);
}

}  // TEST_SUITE
