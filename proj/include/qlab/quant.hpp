#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qlab/corpus.hpp"
#include "qlab/models.hpp"
#include "qlab/nn.hpp"

namespace qlab {

enum class ScaleMethod { minmax, percentile };

std::string to_string(ScaleMethod method);
ScaleMethod parse_scale_method(std::string_view name);

struct QuantSpec {
  int bitwidth = 8;
  bool is_signed = true;
  bool symmetric = true;
  ScaleMethod scale_method = ScaleMethod::percentile;  // activations; weights always use min-max
  double percentile = 99.99;
  bool enabled = true;  // false: passthrough, model runs in full precision

  void validate() const;
};

struct QuantParams {
  double scale = 1.0;
  int zero_point = 0;
  int qmin = 0;
  int qmax = 0;
  int bitwidth = 0;

  bool operator==(const QuantParams&) const = default;
};

// Signed symmetric: [-(2^(b-1) - 1), 2^(b-1) - 1]; signed asymmetric:
// [-2^(b-1), 2^(b-1) - 1]; unsigned: [0, 2^b - 1].
std::pair<int, int> quant_range(const QuantSpec& spec);

// Scale and zero point covering [lo, hi]. Symmetric: scale = max(|lo|,|hi|)/qmax,
// z = 0. Asymmetric: the range is widened to contain 0, scale = (hi-lo)/(qmax-qmin),
// z = qmin + round(-lo/scale). A range of all zeros yields scale 1.
QuantParams params_from_range(double lo, double hi, const QuantSpec& spec);

QuantParams compute_scale_minmax(std::span<const float> values, const QuantSpec& spec);

// Round half to even.
double round_half_even(double x);

int quantize_code(float value, const QuantParams& p);
float fake_quantize_value(float value, const QuantParams& p);
void fake_quantize_inplace(std::span<float> values, const QuantParams& p);
std::vector<float> fake_quantize(std::span<const float> values, const QuantParams& p);

// Running min/max on the first pass; after freeze() a fixed-edge histogram over
// that range is filled on the second pass.
class ActivationObserver {
 public:
  static constexpr int kDefaultBins = 2048;

  explicit ActivationObserver(Site site = Site::embedding, int bins = kDefaultBins);

  void observe(std::span<const float> values);
  // Ends the min/max pass and fixes the histogram edges.
  void freeze();
  // Combines two observers in the same phase (and, if frozen, same edges).
  void merge(const ActivationObserver& other);

  Site site() const { return site_; }
  bool fed() const { return range_count_ > 0; }
  bool frozen() const { return frozen_; }
  double min() const { return min_; }
  double max() const { return max_; }
  std::size_t range_count() const { return range_count_; }
  std::size_t histogram_mass() const { return hist_count_; }
  const std::vector<std::size_t>& histogram() const { return hist_; }

  // p in (0, 100]; linear interpolation inside the bin that crosses rank p% of the mass.
  double percentile(double p) const;

 private:
  Site site_;
  int bins_;
  bool frozen_ = false;
  double min_ = 0.0;
  double max_ = 0.0;
  std::size_t range_count_ = 0;
  std::size_t hist_count_ = 0;
  std::vector<std::size_t> hist_;
};

// Range [P_(100-p), P_p] from the observer's histogram, then as params_from_range.
QuantParams compute_scale_percentile(const ActivationObserver& observer, const QuantSpec& spec);

using SiteMask = std::array<bool, kNumSites>;
inline constexpr SiteMask kAllSites{true, true, true, true};
// Logits stay in float by default: quantizing them costs far more than any
// other site at low bitwidths.
inline constexpr SiteMask kDefaultSites{true, true, true, false};

// How a generative model is conditioned when its activations are gathered
// without labels.
enum class GenConditioning { pseudo_label, all_labels };

std::string to_string(GenConditioning mode);
GenConditioning parse_gen_conditioning(std::string_view name);

struct QuantizedModel {
  Model fp;     // full-precision reference
  Model model;  // fake-quantized weights, biases copied verbatim
  QuantSpec spec;
  std::map<std::string, QuantParams> weight_params;
  SiteMask sites = kAllSites;
  std::array<std::optional<QuantParams>, kNumSites> activation_params;
  GenConditioning conditioning = GenConditioning::pseudo_label;

  bool passthrough() const { return !spec.enabled; }
  bool calibrated() const;
  ModelType type() const { return model_type(model); }
};

// Fake-quantizes every weight tensor per-tensor with min-max scales and installs
// uncalibrated activation sites. With spec.enabled == false the model is
// copied unchanged and no sites are active.
QuantizedModel quantize_weights(const Model& fp, const QuantSpec& spec, const SiteMask& sites = kAllSites);

QuantizedModel make_passthrough(const Model& fp);

// Labels the generative model is conditioned on for each calibration sequence
// (pseudo-labels come from the full-precision model). Empty for disc models.
std::vector<std::vector<int>> conditioning_labels(const QuantizedModel& q, std::span<const TokenSequence> data);

// Two gradient-free passes (min/max, then histogram) over the calibration
// sequences with quantized weights and unquantized activations; sets every
// enabled site's parameters. Takes token sequences only.
QuantizedModel calibrate(QuantizedModel q, std::span<const TokenSequence> calib);

// Rewrites activations at calibrated sites; errors on an enabled site that was
// never calibrated.
class QuantizingTap : public ActivationTap {
 public:
  explicit QuantizingTap(const QuantizedModel& q);
  void apply(Site site, std::span<float> values) override;

 private:
  std::array<std::optional<QuantParams>, kNumSites> params_;
  SiteMask active_{};
};

// Forwards every call to the given taps in order.
class TapChain : public ActivationTap {
 public:
  explicit TapChain(std::vector<ActivationTap*> taps) : taps_(std::move(taps)) {}
  void apply(Site site, std::span<float> values) override {
    for (auto* t : taps_)
      if (t) t->apply(site, values);
  }

 private:
  std::vector<ActivationTap*> taps_;
};

// Quantized inference. Passthrough models run the plain float path.
Vector quantized_disc_logits(const QuantizedModel& q, std::span<const int32_t> ids);
double quantized_gen_loss(const QuantizedModel& q, std::span<const int32_t> ids, int label);
int quantized_classify(const QuantizedModel& q, std::span<const int32_t> ids);
std::vector<int> quantized_predict(const QuantizedModel& q, const Dataset& data);

}  // namespace qlab
