#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rcal/dataset.hpp"
#include "rcal/error.hpp"
#include "rcal/lowess.hpp"

namespace rcal {

enum class Method { original, penalty, rc_mean, rc_lwr, rc_lwr_penalty };

inline Method parse_method(std::string_view name) {
  if (name == "original") return Method::original;
  if (name == "penalty") return Method::penalty;
  if (name == "rc-mean") return Method::rc_mean;
  if (name == "rc-lwr") return Method::rc_lwr;
  if (name == "rc-lwr-penalty") return Method::rc_lwr_penalty;
  throw ConfigError("unknown calibration method '" + std::string(name) + "'");
}

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::original: return "original";
    case Method::penalty: return "penalty";
    case Method::rc_mean: return "rc-mean";
    case Method::rc_lwr: return "rc-lwr";
    case Method::rc_lwr_penalty: return "rc-lwr-penalty";
  }
  return "unknown";
}

// Dataset size at which the LOWESS defaults switch to the narrow bandwidth.
inline constexpr std::size_t kLargeDatasetSize = 10'000;
// Above this size a non-zero delta is used unless one is given explicitly.
inline constexpr std::size_t kDeltaDatasetSize = 50'000;

struct CalibrationConfig {
  Method method = Method::rc_lwr;
  std::vector<std::string> characteristics{"length"};
  double alpha = 0.001;
  std::optional<double> d;
  int min_neighbors = 10;
  double gamma = 1.0;
  // Unset LOWESS knobs resolve from the dataset via lowess_for().
  std::optional<double> bandwidth;
  std::optional<int> iterations;
  std::optional<double> delta;

  void validate() const {
    if (characteristics.empty()) throw ConfigError("at least one characteristic is required");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
    if (min_neighbors < 1) throw ConfigError("min_neighbors must be >= 1");
    if (!std::isfinite(gamma)) throw ConfigError("gamma must be finite");
    if (d && !(*d > 0.0 && std::isfinite(*d))) throw ConfigError("d must be positive");
    if (method == Method::rc_mean && characteristics.size() != 1) {
      throw ConfigError("rc-mean calibrates exactly one characteristic");
    }
    lowess_for(std::span<const double>{}).validate();
  }

  // f = 1/3 for large datasets and 0.9 otherwise, k = 3, and delta equal to
  // 1% of the characteristic range above kDeltaDatasetSize samples.
  LowessConfig lowess_for(std::span<const double> characteristic) const {
    const std::size_t n = characteristic.size();
    LowessConfig cfg;
    cfg.bandwidth = bandwidth.value_or(n >= kLargeDatasetSize ? 1.0 / 3.0 : 0.9);
    cfg.iterations = iterations.value_or(3);
    if (delta) {
      cfg.delta = *delta;
    } else if (n > kDeltaDatasetSize) {
      auto [lo, hi] = std::minmax_element(characteristic.begin(), characteristic.end());
      cfg.delta = 0.01 * (*hi - *lo);
    }
    return cfg;
  }
};

struct CalibratedSample {
  std::string id;
  double raw_reward = 0.0;
  double bias_estimate = 0.0;
  double calibrated_reward = 0.0;
  // False when rc-mean found too few neighbors; calibrated equals raw then.
  bool calibrated_flag = true;

  bool operator==(const CalibratedSample&) const = default;
};

// Calibrated samples in dataset order with an id index.
class Calibration {
 public:
  Calibration() = default;
  explicit Calibration(std::vector<CalibratedSample> samples) : samples_(std::move(samples)) {
    index_.reserve(samples_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      if (!index_.emplace(samples_[i].id, i).second) {
        throw DataError("duplicate calibrated sample id '" + samples_[i].id + "'");
      }
    }
  }

  std::size_t size() const { return samples_.size(); }
  const CalibratedSample& operator[](std::size_t i) const { return samples_[i]; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }
  const std::vector<CalibratedSample>& samples() const { return samples_; }

  const CalibratedSample& at(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) throw DataError("unknown sample id '" + std::string(id) + "'");
    return samples_[it->second];
  }

  std::vector<double> calibrated_rewards() const {
    std::vector<double> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.calibrated_reward);
    return out;
  }

  std::vector<double> raw_rewards() const {
    std::vector<double> out;
    out.reserve(samples_.size());
    for (const auto& s : samples_) out.push_back(s.raw_reward);
    return out;
  }

  bool operator==(const Calibration& other) const { return samples_ == other.samples_; }

 private:
  std::vector<CalibratedSample> samples_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline Calibration assemble(const SampleSet& set, std::span<const double> bias, double gamma,
                            std::span<const std::uint8_t> flags = {}) {
  std::vector<CalibratedSample> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    CalibratedSample c;
    c.id = set[i].id;
    c.raw_reward = set[i].reward;
    c.calibrated_flag = flags.empty() || flags[i] != 0;
    c.bias_estimate = bias[i];
    c.calibrated_reward = c.calibrated_flag ? c.raw_reward - gamma * c.bias_estimate : c.raw_reward;
    out.push_back(std::move(c));
  }
  return Calibration(std::move(out));
}

// LOWESS bias estimates of `rewards` against the named characteristics.
inline std::vector<double> lwr_bias(const SampleSet& set, std::span<const double> rewards,
                                    const CalibrationConfig& cfg, unsigned threads,
                                    FittedCurve* curve_out) {
  if (set.size() < 2) throw DataError("rc-lwr needs at least 2 samples");
  if (cfg.characteristics.size() == 1) {
    const auto c = extract_characteristic(set, cfg.characteristics.front());
    auto curve = lowess_fit(c, rewards, cfg.lowess_for(c), threads);
    std::vector<double> bias(set.size());
    for (std::size_t i = 0; i < c.size(); ++i) bias[i] = predict(curve, c[i]);
    if (curve_out) *curve_out = std::move(curve);
    return bias;
  }
  const auto z = zscore_normalize(extract_characteristics(set, cfg.characteristics));
  auto lowess_cfg = cfg.lowess_for(z.column(0));
  // the delta skip rule is defined on a sorted line only
  lowess_cfg.delta = 0.0;
  return lowess_fit_multi(z, rewards, lowess_cfg, threads);
}

}  // namespace detail

// d = mean |c(better) - c(worse)| / 4 over the labelled pairs.
inline double auto_threshold(std::span<const PreferencePair> pairs, const SampleSet& set,
                             const std::string& characteristic) {
  if (pairs.empty()) throw DataError("auto threshold needs at least one pair");
  double total = 0.0;
  for (const auto& p : pairs) {
    total += std::abs(characteristic_of(set.at(p.better_id), characteristic) -
                      characteristic_of(set.at(p.worse_id), characteristic));
  }
  return total / static_cast<double>(pairs.size()) / 4.0;
}

// reward - alpha * length, with alpha * length reported as the bias.
inline Calibration calibrate_penalty(const SampleSet& set, double alpha, double gamma = 1.0) {
  std::vector<double> bias(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) bias[i] = alpha * characteristic_of(set[i], "length");
  return detail::assemble(set, bias, gamma);
}

// Bias is the mean reward over samples with |c_j - c_i| < d (self included).
// Samples with fewer than min_neighbors such samples stay uncalibrated.
inline Calibration calibrate_mean(const SampleSet& set, const std::string& characteristic,
                                  double d, int min_neighbors, double gamma = 1.0) {
  if (!(d > 0.0)) throw ConfigError("rc-mean threshold d must be positive");
  const std::size_t n = set.size();
  const auto c = extract_characteristic(set, characteristic);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return c[a] < c[b]; });
  std::vector<double> sorted_c(n), prefix(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    sorted_c[k] = c[order[k]];
    prefix[k + 1] = prefix[k] + set[order[k]].reward;
  }

  std::vector<double> bias(n, 0.0);
  std::vector<std::uint8_t> flags(n, 0);
  std::size_t lo = 0, hi = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double ck = sorted_c[k];
    while (ck - sorted_c[lo] >= d) ++lo;
    if (hi < k + 1) hi = k + 1;
    while (hi < n && sorted_c[hi] - ck < d) ++hi;
    const std::size_t count = hi - lo;
    if (count >= static_cast<std::size_t>(min_neighbors)) {
      bias[order[k]] = (prefix[hi] - prefix[lo]) / static_cast<double>(count);
      flags[order[k]] = 1;
    }
  }
  return detail::assemble(set, bias, gamma, flags);
}

// LOWESS of reward against one characteristic (or several, z-scored) with
// the fit subtracted, scaled by gamma. `curve_out` receives the 1-D curve.
inline Calibration calibrate_lwr(const SampleSet& set, const CalibrationConfig& cfg,
                                 unsigned threads = 1, FittedCurve* curve_out = nullptr) {
  cfg.validate();
  const auto rewards = set.rewards();
  const auto bias = detail::lwr_bias(set, rewards, cfg, threads, curve_out);
  return detail::assemble(set, bias, cfg.gamma);
}

// Length penalty first, then RC-LWR on the penalised rewards.
inline Calibration calibrate_lwr_penalty(const SampleSet& set, const CalibrationConfig& cfg,
                                         unsigned threads = 1, FittedCurve* curve_out = nullptr) {
  cfg.validate();
  std::vector<double> penalty(set.size()), penalised(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    penalty[i] = cfg.alpha * characteristic_of(set[i], "length");
    penalised[i] = set[i].reward - cfg.gamma * penalty[i];
  }
  auto bias = detail::lwr_bias(set, penalised, cfg, threads, curve_out);
  for (std::size_t i = 0; i < set.size(); ++i) bias[i] += penalty[i];
  return detail::assemble(set, bias, cfg.gamma);
}

inline Calibration calibrate(const SampleSet& set, const CalibrationConfig& cfg,
                             std::optional<std::span<const PreferencePair>> pairs = std::nullopt,
                             unsigned threads = 1, FittedCurve* curve_out = nullptr) {
  cfg.validate();
  switch (cfg.method) {
    case Method::original:
      return detail::assemble(set, std::vector<double>(set.size(), 0.0), cfg.gamma);
    case Method::penalty:
      return calibrate_penalty(set, cfg.alpha, cfg.gamma);
    case Method::rc_mean: {
      double d = 0.0;
      if (cfg.d) {
        d = *cfg.d;
      } else {
        if (!pairs) throw ConfigError("rc-mean needs either d or preference pairs");
        d = auto_threshold(*pairs, set, cfg.characteristics.front());
        if (!(d > 0.0)) throw DataError("automatic rc-mean threshold is zero");
      }
      return calibrate_mean(set, cfg.characteristics.front(), d, cfg.min_neighbors, cfg.gamma);
    }
    case Method::rc_lwr:
      return calibrate_lwr(set, cfg, threads, curve_out);
    case Method::rc_lwr_penalty:
      return calibrate_lwr_penalty(set, cfg, threads, curve_out);
  }
  throw ConfigError("unknown calibration method");
}

enum class Preference { better, worse, tie };

struct PairOutcome {
  double margin = 0.0;
  Preference preferred = Preference::tie;
};

// Margin of better over worse. If either side was left uncalibrated, both
// sides fall back to raw rewards.
inline PairOutcome pair_margin(const Calibration& calibration, const PreferencePair& pair) {
  const auto& better = calibration.at(pair.better_id);
  const auto& worse = calibration.at(pair.worse_id);
  PairOutcome out;
  if (better.calibrated_flag && worse.calibrated_flag) {
    out.margin = better.calibrated_reward - worse.calibrated_reward;
  } else {
    out.margin = better.raw_reward - worse.raw_reward;
  }
  out.preferred = out.margin > 0.0   ? Preference::better
                  : out.margin < 0.0 ? Preference::worse
                                     : Preference::tie;
  return out;
}

inline constexpr double kProbabilityClamp = 1e-6;

// Inverse sigmoid of a judge's preference probability, clamped to
// [1e-6, 1 - 1e-6].
inline double margin_from_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DataError("probability must lie in [0, 1]");
  const double c = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return std::log(c / (1.0 - c));
}

inline ordered_json calibrated_to_json(const ScoredSample& sample, const CalibratedSample& cal) {
  auto obj = sample_to_json(sample);
  obj["bias_estimate"] = cal.bias_estimate;
  obj["calibrated_reward"] = cal.calibrated_reward;
  obj["calibrated_flag"] = cal.calibrated_flag;
  return obj;
}

inline void write_calibrated_jsonl(std::ostream& out, const SampleSet& set, const Calibration& cal) {
  for (std::size_t i = 0; i < set.size(); ++i) out << calibrated_to_json(set[i], cal[i]).dump() << '\n';
}

struct CalibratedFile {
  SampleSet samples;
  Calibration calibration;
};

// Reads calibrated JSONL. Plain sample records (no calibration fields) are
// read as uncalibrated: bias 0 and calibrated reward equal to reward.
inline CalibratedFile parse_calibrated_jsonl(std::istream& in) {
  CalibratedFile file;
  std::vector<CalibratedSample> cal;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    const json obj = detail::parse_json_line(line, line_no);
    auto sample = detail::sample_from_json(obj, line_no);
    CalibratedSample c;
    c.id = sample.id;
    c.raw_reward = sample.reward;
    c.calibrated_reward = sample.reward;
    if (auto it = obj.find("bias_estimate"); it != obj.end()) {
      c.bias_estimate = detail::finite_number(*it, "bias_estimate", line_no);
    }
    if (auto it = obj.find("calibrated_reward"); it != obj.end()) {
      c.calibrated_reward = detail::finite_number(*it, "calibrated_reward", line_no);
    }
    if (auto it = obj.find("calibrated_flag"); it != obj.end()) {
      if (!it->is_boolean()) throw DataError("calibrated_flag must be a boolean" + detail::at_line(line_no));
      c.calibrated_flag = it->get<bool>();
    }
    try {
      file.samples.add(std::move(sample));
    } catch (const DataError& e) {
      throw DataError(e.what() + detail::at_line(line_no));
    }
    cal.push_back(std::move(c));
  }
  file.calibration = Calibration(std::move(cal));
  return file;
}

}  // namespace rcal
