#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "qlab/nn.hpp"

using namespace qlab;
using doctest::Approx;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain loops over the gate blocks [i, f, g, o].
LstmStateT<double> scalar_step(const LstmParamsT<double>& p, const VectorT<double>& x, const LstmStateT<double>& s) {
  const int H = p.hidden_size();
  LstmStateT<double> out = LstmStateT<double>::zeros(H);
  std::vector<double> pre(static_cast<std::size_t>(4 * H));
  for (int r = 0; r < 4 * H; ++r) {
    double a = p.bias(r);
    for (int j = 0; j < p.input_size(); ++j) a += p.input_weights(r, j) * x(j);
    for (int j = 0; j < H; ++j) a += p.recurrent_weights(r, j) * s.h(j);
    pre[static_cast<std::size_t>(r)] = a;
  }
  for (int j = 0; j < H; ++j) {
    const double i = sig(pre[j]), f = sig(pre[H + j]), g = std::tanh(pre[2 * H + j]), o = sig(pre[3 * H + j]);
    out.c(j) = f * s.c(j) + i * g;
    out.h(j) = o * std::tanh(out.c(j));
  }
  return out;
}

LstmParamsT<double> random_lstm(int d, int h, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  auto p = LstmParamsT<double>::zeros(d, h);
  for (Eigen::Index i = 0; i < p.input_weights.size(); ++i) p.input_weights.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < p.recurrent_weights.size(); ++i) p.recurrent_weights.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias(i) = u(rng);
  return p;
}

VectorT<double> random_vec(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  VectorT<double> v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("embedding_forward gathers rows") {
  const Matrix I = Matrix::Identity(3, 3);
  const std::vector<int32_t> two{2};
  const Matrix r = embedding_forward(I, std::span<const int32_t>(two));
  CHECK(r.rows() == 1);
  CHECK(r(0, 0) == 0.0f);
  CHECK(r(0, 2) == 1.0f);

  std::mt19937_64 rng(1);
  Matrix E(4, 3);
  qtest::fill_uniform(std::span<float>(E.data(), 12), rng, 1.0f);
  const std::vector<int32_t> ids{0, 2, 1, 1};
  const Matrix g = embedding_forward(E, std::span<const int32_t>(ids));
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 3; ++j) CHECK(g(t, j) == E(ids[static_cast<std::size_t>(t)], j));
  CHECK(g.row(2) == g.row(3));

  const std::vector<int32_t> bad{4};
  CHECK_THROWS(embedding_forward(E, std::span<const int32_t>(bad)));
}

TEST_CASE("lstm_step closed forms") {
  const auto p = LstmParamsT<double>::zeros(3, 2);
  const auto s = lstm_step(p, VectorT<double>(VectorT<double>::Ones(3)), LstmStateT<double>::zeros(2));
  CHECK(s.h.norm() == 0.0);
  CHECK(s.c.norm() == 0.0);

  // forget gate saturated open, nothing written: the cell carries
  auto carry = LstmParamsT<double>::zeros(1, 1);
  carry.bias(1) = 20.0;
  LstmStateT<double> prev{VectorT<double>::Zero(1), VectorT<double>::Ones(1)};
  const auto c = lstm_step(carry, VectorT<double>(VectorT<double>::Ones(1)), prev);
  CHECK(c.c(0) == Approx(1.0).epsilon(1e-6));
  CHECK(c.h(0) == Approx(0.5 * std::tanh(1.0)).epsilon(1e-6));
}

TEST_CASE("lstm_step matches scalar oracle") {
  std::mt19937_64 rng(4);
  for (uint64_t k = 0; k < 20; ++k) {
    const auto p = random_lstm(3, 2, k);
    LstmStateT<double> s{random_vec(2, rng), random_vec(2, rng)};
    const auto x = random_vec(3, rng);
    const auto a = lstm_step(p, x, s);
    const auto b = scalar_step(p, x, s);
    CHECK((a.h - b.h).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((a.c - b.c).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("lstm_forward is the fold of lstm_step") {
  const auto pf = random_lstm(4, 3, 9);
  LstmParams p = LstmParams::zeros(4, 3);
  p.input_weights = pf.input_weights.cast<float>();
  p.recurrent_weights = pf.recurrent_weights.cast<float>();
  p.bias = pf.bias.cast<float>();
  std::mt19937_64 rng(2);
  Matrix X(5, 4);
  qtest::fill_uniform(std::span<float>(X.data(), 20), rng, 1.0f);

  const auto out = lstm_forward(p, X, LstmState::zeros(3));
  auto s = LstmState::zeros(3);
  for (int t = 0; t < 5; ++t) {
    s = lstm_step(p, Vector(X.row(t).transpose()), s);
    CHECK((out.hidden.row(t).transpose() - s.h).cwiseAbs().maxCoeff() == 0.0f);
  }
  CHECK((out.final_state.c - s.c).cwiseAbs().maxCoeff() == 0.0f);

  const auto one = lstm_forward(p, Matrix(X.topRows(1)), LstmState::zeros(3));
  const auto st = lstm_step(p, Vector(X.row(0).transpose()), LstmState::zeros(3));
  CHECK((one.final_state.h - st.h).cwiseAbs().maxCoeff() == 0.0f);

  const auto zero = lstm_forward(LstmParams::zeros(4, 3), X, LstmState::zeros(3));
  CHECK(zero.hidden.cwiseAbs().maxCoeff() == 0.0f);

  CHECK_THROWS(lstm_forward(p, Matrix(0, 4), LstmState::zeros(3)));
}

TEST_CASE("lstm_forward rejects non-finite input") {
  Matrix X = Matrix::Zero(2, 1);
  X(1, 0) = std::nanf("");
  CHECK_THROWS_AS(lstm_forward(LstmParams::zeros(1, 1), X, LstmState::zeros(1)), NumericError);
}

TEST_CASE("linear_forward") {
  Vector x(3);
  x << 1, -2, 3;
  CHECK(linear_forward<float>(Matrix::Identity(3, 3), Vector::Zero(3), x) == x);
  Vector b(2);
  b << 1, 2;
  CHECK(linear_forward<float>(Matrix::Zero(2, 3), b, x) == b);

  std::mt19937_64 rng(5);
  Matrix W(2, 3);
  qtest::fill_uniform(std::span<float>(W.data(), 6), rng, 1.0f);
  const auto z = linear_forward<float>(W, b, x);
  for (int r = 0; r < 2; ++r) {
    double dot = b(r);
    for (int j = 0; j < 3; ++j) dot += W(r, j) * x(j);
    CHECK(z(r) == Approx(dot).epsilon(1e-6));
  }
  CHECK_THROWS(linear_forward<float>(W, b, Vector::Zero(2)));
}

TEST_CASE("softmax") {
  VectorT<double> z(2);
  z << 0, 0;
  CHECK(softmax(z)(0) == Approx(0.5));
  z << 1000, 0;
  const auto big = softmax(z);
  CHECK(big(0) == Approx(1.0));
  CHECK(big(1) == Approx(0.0));
  CHECK(big.allFinite());

  VectorT<double> t(3);
  t << 1, 2, 3;
  const auto p = softmax(t);
  CHECK(p(0) == Approx(0.0900).epsilon(1e-3));
  CHECK(p(1) == Approx(0.2447).epsilon(1e-3));
  CHECK(p(2) == Approx(0.6652).epsilon(1e-3));
}

TEST_CASE("softmax sums to one and ignores shifts") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-20, 20);
  for (int k = 0; k < 200; ++k) {
    Vector z(5);
    for (int i = 0; i < 5; ++i) z(i) = u(rng);
    const Vector p = softmax(z);
    CHECK(std::abs(p.sum() - 1.0f) <= 1e-6f);
    const Vector q = softmax(Vector(z.array() + 7.5f));
    CHECK((p - q).cwiseAbs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("cross_entropy") {
  VectorT<double> p(2);
  p << 1, 0;
  CHECK(cross_entropy(p, 0) == Approx(0.0));
  CHECK(cross_entropy(p, 1) <= -std::log(1e-12) + 1e-9);
  CHECK(cross_entropy(p, 1) == Approx(27.631).epsilon(1e-4));
  VectorT<double> u = VectorT<double>::Constant(4, 0.25);
  CHECK(cross_entropy(u, 3) == Approx(std::log(4.0)));
  CHECK_THROWS(cross_entropy(u, 4));

  VectorT<double> z(3);
  z << 0.3, -1.0, 2.0;
  CHECK(cross_entropy_from_logits(z, 1) == Approx(cross_entropy(softmax(z), 1)).epsilon(1e-12));
}

TEST_CASE("adam_step") {
  TrainConfig cfg;
  std::vector<float> w{1.0f, -2.0f}, g{0.0f, 0.0f};
  std::vector<std::span<float>> ps{w};
  std::vector<std::span<const float>> gs{g};
  AdamState st;
  adam_step(ps, gs, st, cfg);
  CHECK(w[0] == 1.0f);
  CHECK(w[1] == -2.0f);
  CHECK(st.step == 1);

  // first step moves by lr * sign(g)
  std::vector<float> x{0.0f}, gx{0.5f};
  std::vector<std::span<float>> px{x};
  std::vector<std::span<const float>> pgx{gx};
  AdamState sx;
  adam_step(px, pgx, sx, cfg);
  CHECK(x[0] == Approx(-0.001).epsilon(1e-4));
  const float after_one = x[0];
  adam_step(px, pgx, sx, cfg);
  CHECK(x[0] < after_one);
  CHECK(x[0] == Approx(-0.002).epsilon(1e-3));
}

TEST_CASE("clip_global_norm") {
  std::vector<float> a{3.0f}, b{4.0f};
  std::vector<std::span<float>> gs{a, b};
  CHECK(clip_global_norm(gs, 10.0) == Approx(5.0));
  CHECK(a[0] == 3.0f);
  CHECK(clip_global_norm(gs, 1.0) == Approx(5.0));
  CHECK(a[0] == Approx(0.6));
  CHECK(b[0] == Approx(0.8));
}

TEST_CASE("lstm_backward agrees with finite differences") {
  // loss = sum_t <r_t, h_t> for fixed random r
  const int d = 3, h = 4, T = 4;
  const auto p = random_lstm(d, h, 21);
  std::mt19937_64 rng(22);
  MatrixT<double> X(T, d), R(T, h);
  for (int t = 0; t < T; ++t) {
    X.row(t) = random_vec(d, rng).transpose();
    R.row(t) = random_vec(h, rng).transpose();
  }
  auto loss = [&](const LstmParamsT<double>& q, const MatrixT<double>& x) {
    return (lstm_forward(q, x, LstmStateT<double>::zeros(h)).hidden.array() * R.array()).sum();
  };
  auto grads = LstmParamsT<double>::zeros(d, h);
  const auto trace = lstm_forward_traced(p, X, LstmStateT<double>::zeros(h));
  const MatrixT<double> dx = lstm_backward(p, trace, R, grads);

  const double eps = 1e-5;
  auto fd_check = [&](MatrixT<double> LstmParamsT<double>::*member, const MatrixT<double>& grad) {
    for (Eigen::Index i = 0; i < (p.*member).size(); ++i) {
      auto q = p;
      const double keep = (q.*member).data()[i];
      (q.*member).data()[i] = keep + eps;
      const double up = loss(q, X);
      (q.*member).data()[i] = keep - eps;
      const double down = loss(q, X);
      CHECK(grad.data()[i] == Approx((up - down) / (2 * eps)).epsilon(1e-5).scale(1.0));
    }
  };
  fd_check(&LstmParamsT<double>::input_weights, grads.input_weights);
  fd_check(&LstmParamsT<double>::recurrent_weights, grads.recurrent_weights);
  for (Eigen::Index i = 0; i < p.bias.size(); ++i) {
    auto q = p;
    q.bias(i) += eps;
    const double up = loss(q, X);
    q.bias(i) -= 2 * eps;
    const double down = loss(q, X);
    CHECK(grads.bias(i) == Approx((up - down) / (2 * eps)).epsilon(1e-5).scale(1.0));
  }
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < d; ++j) {
      auto xp = X, xm = X;
      xp(t, j) += eps;
      xm(t, j) -= eps;
      CHECK(dx(t, j) == Approx((loss(p, xp) - loss(p, xm)) / (2 * eps)).epsilon(1e-5).scale(1.0));
    }
}

TEST_CASE("TrainConfig validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.patience = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sites parse") {
  for (int s = 0; s < kNumSites; ++s) CHECK(parse_site(to_string(static_cast<Site>(s))) == static_cast<Site>(s));
  CHECK_THROWS_AS(parse_site("gates"), ConfigError);
}

}  // TEST_SUITE
