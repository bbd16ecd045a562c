#include "qlab/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qlab {

namespace {

// Feeds every activation into the per-site observers; values are not modified.
class ObservingTap : public ActivationTap {
 public:
  explicit ObservingTap(const SiteMask& mask) : mask_(mask) {
    for (int s = 0; s < kNumSites; ++s) observers_[static_cast<std::size_t>(s)] = ActivationObserver(static_cast<Site>(s));
  }
  void apply(Site site, std::span<float> values) override {
    const auto i = static_cast<std::size_t>(site);
    if (mask_[i]) observers_[i].observe(values);
  }
  void freeze() {
    for (auto& o : observers_) o.freeze();
  }
  const ActivationObserver& observer(Site s) const { return observers_[static_cast<std::size_t>(s)]; }

 private:
  SiteMask mask_;
  std::array<ActivationObserver, kNumSites> observers_;
};

void run_forward(const Model& model, std::span<const int32_t> ids, std::span<const int> labels,
                 ActivationTap* tap) {
  const auto scored = scoring_ids(model_type(model), ids);
  if (const auto* d = std::get_if<DiscModel>(&model)) {
    disc_logits(*d, scored, tap);
  } else {
    gen_label_losses(std::get<GenModel>(model), scored, labels, tap);
  }
}

}  // namespace

std::string to_string(ScaleMethod method) { return method == ScaleMethod::minmax ? "minmax" : "percentile"; }

ScaleMethod parse_scale_method(std::string_view name) {
  if (name == "minmax") return ScaleMethod::minmax;
  if (name == "percentile") return ScaleMethod::percentile;
  throw ConfigError("unknown scale method '" + std::string(name) + "'");
}

std::string to_string(GenConditioning mode) {
  return mode == GenConditioning::pseudo_label ? "pseudo_label" : "all_labels";
}

GenConditioning parse_gen_conditioning(std::string_view name) {
  if (name == "pseudo_label") return GenConditioning::pseudo_label;
  if (name == "all_labels") return GenConditioning::all_labels;
  throw ConfigError("unknown generative conditioning '" + std::string(name) + "'");
}

void QuantSpec::validate() const {
  if (bitwidth < 2 || bitwidth > 8) throw ConfigError("bitwidth must lie in [2, 8]");
  if (!(percentile > 50.0 && percentile < 100.0)) throw ConfigError("percentile must lie in (50, 100)");
}

std::pair<int, int> quant_range(const QuantSpec& spec) {
  const int b = spec.bitwidth;
  if (b < 2) throw ConfigError("bitwidth must be >= 2");
  if (b > 30) throw ConfigError("bitwidth too large");
  if (!spec.is_signed) return {0, (1 << b) - 1};
  const int half = 1 << (b - 1);
  if (spec.symmetric) return {-(half - 1), half - 1};
  return {-half, half - 1};
}

double round_half_even(double x) {
  const double lo = std::floor(x);
  const double diff = x - lo;
  if (diff > 0.5) return lo + 1.0;
  if (diff < 0.5) return lo;
  return std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
}

QuantParams params_from_range(double lo, double hi, const QuantSpec& spec) {
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) throw NumericError("invalid quantization range");
  const auto [qmin, qmax] = quant_range(spec);
  QuantParams p{1.0, 0, qmin, qmax, spec.bitwidth};
  if (spec.symmetric) {
    const double amax = std::max(std::abs(lo), std::abs(hi));
    if (amax > 0.0) p.scale = amax / qmax;
    return p;
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  if (hi - lo <= 0.0) return p;
  p.scale = (hi - lo) / (qmax - qmin);
  p.zero_point = std::clamp(qmin + static_cast<int>(round_half_even(-lo / p.scale)), qmin, qmax);
  return p;
}

QuantParams compute_scale_minmax(std::span<const float> values, const QuantSpec& spec) {
  if (values.empty()) throw NumericError("cannot compute a scale for an empty tensor");
  double lo = values[0], hi = values[0];
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor");
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  return params_from_range(lo, hi, spec);
}

int quantize_code(float value, const QuantParams& p) {
  const double code = round_half_even(static_cast<double>(value) / p.scale + p.zero_point);
  return static_cast<int>(std::clamp(code, static_cast<double>(p.qmin), static_cast<double>(p.qmax)));
}

float fake_quantize_value(float value, const QuantParams& p) {
  return static_cast<float>((quantize_code(value, p) - p.zero_point) * p.scale);
}

void fake_quantize_inplace(std::span<float> values, const QuantParams& p) {
  if (!(p.scale > 0.0)) throw NumericError("quantization scale must be positive");
  for (float& v : values) v = fake_quantize_value(v, p);
}

std::vector<float> fake_quantize(std::span<const float> values, const QuantParams& p) {
  std::vector<float> out(values.begin(), values.end());
  fake_quantize_inplace(out, p);
  return out;
}

ActivationObserver::ActivationObserver(Site site, int bins) : site_(site), bins_(bins) {
  if (bins < 1) throw ConfigError("observer needs at least one bin");
}

void ActivationObserver::observe(std::span<const float> values) {
  if (!frozen_) {
    for (float v : values) {
      if (!std::isfinite(v)) throw NumericError("non-finite activation at site " + to_string(site_));
      if (range_count_ == 0) {
        min_ = max_ = v;
      } else {
        min_ = std::min<double>(min_, v);
        max_ = std::max<double>(max_, v);
      }
      ++range_count_;
    }
    return;
  }
  const double width = (max_ - min_) / bins_;
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation at site " + to_string(site_));
    int b = 0;
    if (width > 0.0) b = static_cast<int>(std::floor((v - min_) / width));
    b = std::clamp(b, 0, bins_ - 1);
    ++hist_[static_cast<std::size_t>(b)];
    ++hist_count_;
  }
}

void ActivationObserver::freeze() {
  if (frozen_) return;
  frozen_ = true;
  hist_.assign(static_cast<std::size_t>(bins_), 0);
}

void ActivationObserver::merge(const ActivationObserver& other) {
  if (other.frozen_ != frozen_ || other.bins_ != bins_) throw std::logic_error("observer phase mismatch");
  if (!frozen_) {
    if (other.range_count_ == 0) return;
    if (range_count_ == 0) {
      min_ = other.min_;
      max_ = other.max_;
    } else {
      min_ = std::min(min_, other.min_);
      max_ = std::max(max_, other.max_);
    }
    range_count_ += other.range_count_;
    return;
  }
  if (other.min_ != min_ || other.max_ != max_) throw std::logic_error("observer histogram edges differ");
  for (std::size_t i = 0; i < hist_.size(); ++i) hist_[i] += other.hist_[i];
  hist_count_ += other.hist_count_;
}

double ActivationObserver::percentile(double p) const {
  if (!frozen_ || hist_count_ == 0)
    throw std::logic_error("site " + to_string(site_) + ": percentile needs a filled histogram");
  if (p <= 0.0) return min_;
  if (p >= 100.0) return max_;
  const double width = (max_ - min_) / bins_;
  const double rank = p / 100.0 * static_cast<double>(hist_count_);
  double cum = 0.0;
  for (std::size_t b = 0; b < hist_.size(); ++b) {
    const auto mass = static_cast<double>(hist_[b]);
    if (mass > 0.0 && cum + mass >= rank) {
      const double frac = std::clamp((rank - cum) / mass, 0.0, 1.0);
      return min_ + (static_cast<double>(b) + frac) * width;
    }
    cum += mass;
  }
  return max_;
}

QuantParams compute_scale_percentile(const ActivationObserver& observer, const QuantSpec& spec) {
  if (!observer.fed()) throw DataError("activation site " + to_string(observer.site()) + " was never observed");
  const double lo = observer.percentile(100.0 - spec.percentile);
  const double hi = observer.percentile(spec.percentile);
  return params_from_range(lo, hi, spec);
}

bool QuantizedModel::calibrated() const {
  if (passthrough()) return true;
  for (int s = 0; s < kNumSites; ++s)
    if (sites[static_cast<std::size_t>(s)] && !activation_params[static_cast<std::size_t>(s)]) return false;
  return true;
}

QuantizedModel quantize_weights(const Model& fp, const QuantSpec& spec, const SiteMask& sites) {
  QuantizedModel q{fp, fp, spec, {}, sites, {}, GenConditioning::pseudo_label};
  if (!spec.enabled) {
    q.sites = {false, false, false, false};
    return q;
  }
  spec.validate();
  for (auto& t : model_tensors(q.model)) {
    if (t.is_bias) continue;
    const QuantParams p = compute_scale_minmax(t.values(), spec);
    fake_quantize_inplace(t.values(), p);
    q.weight_params.emplace(t.name, p);
  }
  return q;
}

QuantizedModel make_passthrough(const Model& fp) {
  QuantSpec spec;
  spec.enabled = false;
  return quantize_weights(fp, spec);
}

std::vector<std::vector<int>> conditioning_labels(const QuantizedModel& q, std::span<const TokenSequence> data) {
  std::vector<std::vector<int>> out(data.size());
  const auto* gen = std::get_if<GenModel>(&q.fp);
  if (!gen) return out;
  const int classes = static_cast<int>(gen->label_embedding.rows());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (q.conditioning == GenConditioning::all_labels) {
      out[i].resize(static_cast<std::size_t>(classes));
      std::iota(out[i].begin(), out[i].end(), 0);
    } else {
      out[i] = {gen_classify(*gen, scoring_ids(ModelType::gen, data[i].ids))};
    }
  }
  return out;
}

QuantizedModel calibrate(QuantizedModel q, std::span<const TokenSequence> calib) {
  if (calib.empty()) throw DataError("calibration set is empty");
  if (q.passthrough()) return q;
  const auto labels = conditioning_labels(q, calib);
  ObservingTap observers(q.sites);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < calib.size(); ++i) run_forward(q.model, calib[i].ids, labels[i], &observers);
    if (pass == 0) observers.freeze();
  }
  for (int s = 0; s < kNumSites; ++s) {
    const auto idx = static_cast<std::size_t>(s);
    if (!q.sites[idx]) continue;
    const auto& obs = observers.observer(static_cast<Site>(s));
    if (!obs.fed()) throw DataError("activation site " + to_string(static_cast<Site>(s)) + " saw no calibration data");
    q.activation_params[idx] = q.spec.scale_method == ScaleMethod::percentile
                                   ? compute_scale_percentile(obs, q.spec)
                                   : params_from_range(obs.min(), obs.max(), q.spec);
  }
  return q;
}

QuantizingTap::QuantizingTap(const QuantizedModel& q) : params_(q.activation_params) {
  if (!q.passthrough()) active_ = q.sites;
}

void QuantizingTap::apply(Site site, std::span<float> values) {
  const auto i = static_cast<std::size_t>(site);
  if (!active_[i]) return;
  if (!params_[i]) throw std::logic_error("activation site " + to_string(site) + " used before calibration");
  fake_quantize_inplace(values, *params_[i]);
}

Vector quantized_disc_logits(const QuantizedModel& q, std::span<const int32_t> ids) {
  const auto& m = std::get<DiscModel>(q.model);
  if (q.passthrough()) return disc_logits(m, ids);
  QuantizingTap tap(q);
  return disc_logits(m, ids, &tap);
}

double quantized_gen_loss(const QuantizedModel& q, std::span<const int32_t> ids, int label) {
  const auto& m = std::get<GenModel>(q.model);
  if (q.passthrough()) return gen_sequence_loss(m, ids, label);
  QuantizingTap tap(q);
  return gen_sequence_loss(m, ids, label, &tap);
}

int quantized_classify(const QuantizedModel& q, std::span<const int32_t> ids) {
  if (q.passthrough()) return classify(q.model, ids);
  QuantizingTap tap(q);
  return classify(q.model, ids, &tap);
}

std::vector<int> quantized_predict(const QuantizedModel& q, const Dataset& data) {
  if (q.passthrough()) return predict(q.model, data);
  QuantizingTap tap(q);
  return predict(q.model, data, &tap);
}

}  // namespace qlab
