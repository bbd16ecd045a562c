#include "qlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace qlab {

namespace {

// Keeps every stride-th value; when full, doubles the stride and thins what
// it already holds, so the kept set never depends on the total count.
class SiteCollector : public ActivationTap {
 public:
  SiteCollector(Site site, std::size_t cap) : site_(site), cap_(std::max<std::size_t>(cap, 2)) {}

  void apply(Site site, std::span<float> values) override {
    if (site != site_) return;
    for (float v : values) {
      if (seen_++ % stride_ != 0) continue;
      kept_.push_back(v);
      if (kept_.size() >= cap_) thin();
    }
  }

  std::vector<double> take() { return std::move(kept_); }

 private:
  void thin() {
    std::size_t w = 0;
    for (std::size_t r = 0; r < kept_.size(); r += 2) kept_[w++] = kept_[r];
    kept_.resize(w);
    stride_ *= 2;
  }

  Site site_;
  std::size_t cap_;
  std::size_t stride_ = 1;
  std::size_t seen_ = 0;
  std::vector<double> kept_;
};

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

KsResult ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("KS statistic needs two non-empty samples");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  for (double v : x)
    if (std::isnan(v)) throw NumericError("NaN in KS sample");
  for (double v : y)
    if (std::isnan(v)) throw NumericError("NaN in KS sample");
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double na = static_cast<double>(x.size()), nb = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return {d, x.size(), y.size()};
}

KdeCurve kde(std::span<const double> samples, std::optional<double> bandwidth) {
  if (samples.empty()) throw std::invalid_argument("KDE needs at least one sample");
  const double n = static_cast<double>(samples.size());
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("non-finite KDE sample");

  KdeCurve c;
  double bw = 0.0;
  if (bandwidth) {
    if (!(*bandwidth > 0.0)) throw std::invalid_argument("KDE bandwidth must be positive");
    bw = *bandwidth;
  } else if (samples.size() >= 2 && hi > lo) {
    const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    bw = 1.06 * sd * std::pow(n, -0.2);
  }
  if (!(bw > 0.0)) {
    // constant sample
    c.degenerate = true;
    bw = 1e-3 * std::max(1.0, std::abs(lo));
  }
  c.bandwidth = bw;

  const double start = lo - 3.0 * bw, stop = hi + 3.0 * bw;
  const double step = (stop - start) / (kKdeGridPoints - 1);
  const double norm = 1.0 / (n * bw * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  c.grid.resize(kKdeGridPoints);
  c.density.resize(kKdeGridPoints);
  for (int g = 0; g < kKdeGridPoints; ++g) {
    const double x = start + step * g;
    // kernels beyond 8 bandwidths contribute below double precision
    const auto first = std::lower_bound(sorted.begin(), sorted.end(), x - 8.0 * bw);
    const auto last = std::upper_bound(sorted.begin(), sorted.end(), x + 8.0 * bw);
    double s = 0.0;
    for (auto it = first; it != last; ++it) {
      const double z = (x - *it) / bw;
      s += std::exp(-0.5 * z * z);
    }
    c.grid[static_cast<std::size_t>(g)] = x;
    c.density[static_cast<std::size_t>(g)] = s * norm;
  }
  const auto peak = std::max_element(c.density.begin(), c.density.end()) - c.density.begin();
  c.max_location = c.grid[static_cast<std::size_t>(peak)];
  return c;
}

double kde_integral(const KdeCurve& curve) {
  double s = 0.0;
  for (std::size_t i = 1; i < curve.grid.size(); ++i)
    s += 0.5 * (curve.density[i] + curve.density[i - 1]) * (curve.grid[i] - curve.grid[i - 1]);
  return s;
}

Metrics accuracy(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("predictions and labels differ in length");
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty set");
  int classes = num_classes;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("negative label");
    classes = std::max(classes, y + 1);
  }
  Metrics m;
  m.count = labels.size();
  m.class_counts.assign(static_cast<std::size_t>(classes), 0);
  std::vector<std::size_t> hits(static_cast<std::size_t>(classes), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++m.class_counts[y];
    if (predictions[i] == labels[i]) {
      ++hits[y];
      ++correct;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  m.per_class.resize(static_cast<std::size_t>(classes));
  for (std::size_t c = 0; c < m.per_class.size(); ++c)
    m.per_class[c] = m.class_counts[c] ? static_cast<double>(hits[c]) / static_cast<double>(m.class_counts[c])
                                       : std::numeric_limits<double>::quiet_NaN();
  return m;
}

KsResult weight_shift_report(const Matrix& before, const Matrix& after) {
  if (before.rows() != after.rows() || before.cols() != after.cols())
    throw std::invalid_argument("weight shift: shape mismatch");
  std::vector<double> a(before.data(), before.data() + before.size());
  std::vector<double> b(after.data(), after.data() + after.size());
  return ks_statistic(a, b);
}

std::vector<double> collect_site_values(const QuantizedModel& q, std::span<const TokenSequence> probe, Site site,
                                        std::size_t max_values) {
  if (probe.empty()) throw DataError("probe set is empty");
  QuantizingTap quant(q);
  SiteCollector collector(site, max_values);
  TapChain chain({&quant, &collector});
  for (const auto& s : probe) classify(q.model, scoring_ids(q.type(), s.ids), &chain);
  return collector.take();
}

KsResult activation_shift_report(const QuantizedModel& a, std::span<const TokenSequence> probe_a,
                                 const QuantizedModel& b, std::span<const TokenSequence> probe_b, Site site) {
  const auto va = collect_site_values(a, probe_a, site);
  const auto vb = collect_site_values(b, probe_b, site);
  if (va.empty() || vb.empty()) throw DataError("site " + to_string(site) + " produced no values");
  return ks_statistic(va, vb);
}

TokenLossSamples token_loss_samples(const QuantizedModel& q, const Dataset& data) {
  const auto* gen = std::get_if<GenModel>(&q.model);
  if (!gen) throw std::invalid_argument("token losses need a generative model");
  QuantizingTap tap(q);
  TokenLossSamples out;
  for (const auto& s : data.samples) {
    if (s.tokens.ids.size() < 2) {
      ++out.skipped;
      continue;
    }
    const auto l = gen_token_losses(*gen, s.tokens.ids, s.label, q.passthrough() ? nullptr : &tap);
    out.losses.insert(out.losses.end(), l.begin(), l.end());
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs paired samples, n >= 2");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace qlab
