#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "qlab/models.hpp"

namespace qtest {

using namespace qlab;

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("qlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void fill_uniform(std::span<float> v, std::mt19937_64& rng, float a) {
  std::uniform_real_distribution<float> u(-a, a);
  for (auto& x : v) x = u(rng);
}

// Every tensor uniform(-a, a), biases included.
template <typename M>
M random_model(const ModelDims& dims, uint64_t seed, float a = 0.5f) {
  M m = M::zeros(dims);
  std::mt19937_64 rng(seed);
  for (auto& t : m.tensors()) fill_uniform(t.values(), rng, a);
  return m;
}

inline ModelDims tiny_dims(int V = 20, int d = 8, int h = 8, int C = 3, int dl = 8) {
  ModelDims dims;
  dims.vocab_size = V;
  dims.embed_dim = d;
  dims.hidden_dim = h;
  dims.num_classes = C;
  dims.label_dim = dl;
  return dims;
}

inline std::vector<int32_t> random_ids(std::mt19937_64& rng, int V, int T) {
  std::uniform_int_distribution<int32_t> u(2, V - 1);
  std::vector<int32_t> ids(static_cast<std::size_t>(T));
  for (auto& i : ids) i = u(rng);
  return ids;
}

// Class c uses words "k<c>_<j>"; every class shares the filler words.
inline Dataset keyword_dataset(int C, int per_class, uint64_t seed, int keywords = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kw(0, keywords - 1), fill(0, 5), len(3, 7);
  Dataset d;
  d.num_classes = C;
  for (int i = 0; i < per_class; ++i) {
    for (int c = 0; c < C; ++c) {
      std::string text;
      const int n = len(rng);
      for (int t = 0; t < n; ++t) {
        if (!text.empty()) text += ' ';
        text += (t % 2 == 0) ? "k" + std::to_string(c) + "x" + std::to_string(kw(rng)) : "w" + std::to_string(fill(rng));
      }
      d.samples.push_back({text, {}, c});
    }
  }
  return d;
}

}  // namespace qtest

namespace qtest {

struct GradCheck {
  std::string worst_tensor;
  double worst = 0.0;  // max over tensors of |g - g_fd| / max(|g|, |g_fd|)
};

// Central differences (step h) on every element of every tensor, in double.
template <typename M, typename LossFn, typename GradFn>
GradCheck grad_check(M model, const Batch& batch, LossFn loss, GradFn grad, double h = 1e-3) {
  M analytic = M::zeros(model.dims());
  grad(model, batch, analytic);
  auto params = model.tensors();
  const auto g = analytic.tensors();
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values();
    const auto a = g[k].values();
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + h;
      const double up = loss(model, batch);
      p[i] = keep - h;
      const double down = loss(model, batch);
      p[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      diff += (a[i] - fd) * (a[i] - fd);
      na += a[i] * a[i];
      nn += fd * fd;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    const double rel = std::sqrt(diff) / denom;
    if (rel >= out.worst) {
      out.worst = rel;
      out.worst_tensor = params[k].name;
    }
  }
  return out;
}

// Variable-length batch on the tiny model, lengths 2..T with padding.
inline Batch tiny_batch(uint64_t seed, int V, int C, int T = 5, int n = 4) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    seqs.push_back({random_ids(rng, V, 2 + (i * (T - 2)) / std::max(1, n - 1))});
    labels.push_back(i % C);
  }
  return make_batch(seqs, labels, Vocab::kPad);
}

inline GradCheck disc_grad_check(uint64_t seed) {
  const auto dims = tiny_dims();
  auto m = cast_model<double>(random_model<DiscModel>(dims, seed));
  return grad_check(
      m, tiny_batch(seed + 1, dims.vocab_size, dims.num_classes),
      [](const DiscModelT<double>& x, const Batch& b) { return disc_batch_loss(x, b); },
      [](const DiscModelT<double>& x, const Batch& b, DiscModelT<double>& g) { disc_loss_and_grad(x, b, g); });
}

inline GradCheck gen_grad_check(uint64_t seed) {
  const auto dims = tiny_dims();
  auto m = cast_model<double>(random_model<GenModel>(dims, seed));
  return grad_check(
      m, tiny_batch(seed + 1, dims.vocab_size, dims.num_classes),
      [](const GenModelT<double>& x, const Batch& b) { return gen_batch_loss(x, b); },
      [](const GenModelT<double>& x, const Batch& b, GenModelT<double>& g) { gen_loss_and_grad(x, b, g); });
}

}  // namespace qtest
