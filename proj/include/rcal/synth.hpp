#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rcal/calibrate.hpp"
#include "rcal/dataset.hpp"
#include "rcal/error.hpp"
#include "rcal/metrics.hpp"

namespace rcal {

// SplitMix64. The state advances by the golden-ratio increment and each
// output is the finalised state:
//   state += 0x9E3779B97F4A7C15
//   z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
// uniform() takes the top 53 bits as a double in [0, 1). normal() is one
// Box-Muller draw, sqrt(-2 ln(1 - u1)) * cos(2 pi u2), consuming exactly two
// outputs.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

struct CharacteristicDistribution {
  enum class Kind { uniform, lognormal };
  Kind kind = Kind::uniform;
  // uniform: [a, b); lognormal: mu = a, sigma = b
  double a = 100.0;
  double b = 3000.0;

  void validate() const {
    if (!std::isfinite(a) || !std::isfinite(b)) throw ConfigError("distribution parameters must be finite");
    if (kind == Kind::uniform && !(a < b)) throw ConfigError("uniform(lo, hi) needs lo < hi");
    if (kind == Kind::lognormal && !(b > 0.0)) throw ConfigError("lognormal sigma must be positive");
  }

  double draw(SplitMix64& rng) const {
    if (kind == Kind::uniform) return rng.uniform(a, b);
    return std::exp(a + b * rng.normal());
  }
};

struct BiasShape {
  enum class Kind { none, linear, logistic, sine };
  Kind kind = Kind::none;
  // linear: slope = p1
  // logistic: scale = p1, midpoint = p2, width = p3
  // sine: amplitude = p1, period = p2
  double p1 = 0.0;
  double p2 = 0.0;
  double p3 = 1.0;

  void validate() const {
    if (!std::isfinite(p1) || !std::isfinite(p2) || !std::isfinite(p3)) {
      throw ConfigError("bias parameters must be finite");
    }
    if (kind == Kind::sine && !(p2 > 0.0)) throw ConfigError("sine period must be positive");
    if (kind == Kind::logistic && !(p3 > 0.0)) throw ConfigError("logistic width must be positive");
  }

  double operator()(double c) const {
    switch (kind) {
      case Kind::none: return 0.0;
      case Kind::linear: return p1 * c;
      case Kind::logistic: return p1 * logistic((c - p2) / p3);
      case Kind::sine: return p1 * std::sin(2.0 * std::numbers::pi * c / p2);
    }
    return 0.0;
  }

  // Global Lipschitz constant of the bias over any characteristic range.
  double lipschitz() const {
    switch (kind) {
      case Kind::none: return 0.0;
      case Kind::linear: return std::abs(p1);
      case Kind::logistic: return std::abs(p1) / (4.0 * p3);
      case Kind::sine: return 2.0 * std::numbers::pi * std::abs(p1) / p2;
    }
    return 0.0;
  }
};

namespace detail {

inline std::vector<double> parse_number_list(std::string_view text, std::string_view what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    auto piece = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    try {
      std::size_t used = 0;
      std::string s(piece);
      out.push_back(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("invalid number '" + std::string(piece) + "' in " + std::string(what));
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline std::pair<std::string_view, std::vector<double>> split_spec(std::string_view spec,
                                                                   std::string_view what) {
  auto colon = spec.find(':');
  if (colon == std::string_view::npos) return {spec, {}};
  return {spec.substr(0, colon), parse_number_list(spec.substr(colon + 1), what)};
}

}  // namespace detail

// "uniform:LO,HI" or "lognormal:MU,SIGMA".
inline CharacteristicDistribution parse_distribution(std::string_view spec) {
  auto [name, args] = detail::split_spec(spec, "distribution");
  CharacteristicDistribution d;
  if (name == "uniform") d.kind = CharacteristicDistribution::Kind::uniform;
  else if (name == "lognormal") d.kind = CharacteristicDistribution::Kind::lognormal;
  else throw ConfigError("unknown distribution '" + std::string(name) + "'");
  if (args.size() != 2) throw ConfigError(std::string(name) + " takes two parameters");
  d.a = args[0];
  d.b = args[1];
  d.validate();
  return d;
}

// "none", "linear:SLOPE", "logistic:SCALE,MIDPOINT[,WIDTH]" or
// "sine:AMPLITUDE,PERIOD".
inline BiasShape parse_bias_shape(std::string_view spec) {
  auto [name, args] = detail::split_spec(spec, "bias shape");
  BiasShape b;
  if (name == "none") {
    if (!args.empty()) throw ConfigError("bias 'none' takes no parameters");
    return b;
  }
  if (name == "linear") {
    b.kind = BiasShape::Kind::linear;
    if (args.size() != 1) throw ConfigError("linear bias takes one parameter");
    b.p1 = args[0];
  } else if (name == "logistic") {
    b.kind = BiasShape::Kind::logistic;
    if (args.size() != 2 && args.size() != 3) throw ConfigError("logistic bias takes two or three parameters");
    b.p1 = args[0];
    b.p2 = args[1];
    if (args.size() == 3) b.p3 = args[2];
  } else if (name == "sine") {
    b.kind = BiasShape::Kind::sine;
    if (args.size() != 2) throw ConfigError("sine bias takes two parameters");
    b.p1 = args[0];
    b.p2 = args[1];
  } else {
    throw ConfigError("unknown bias shape '" + std::string(name) + "'");
  }
  b.validate();
  return b;
}

struct SynthConfig {
  std::size_t n_samples = 10'000;
  std::size_t n_groups = 1;
  // responses per prompt; response j belongs to group j mod n_groups
  std::size_t n_responses = 2;
  std::uint64_t seed = 0;
  CharacteristicDistribution c_distribution;
  BiasShape bias;
  // per-group mean of the true reward; empty means all zero
  std::vector<double> quality_means;
  double noise_std = 1.0;
  std::string characteristic = "length";

  void validate() const {
    if (n_samples < 2) throw ConfigError("n_samples must be >= 2");
    if (n_groups < 1) throw ConfigError("n_groups must be >= 1");
    if (n_responses < 2) throw ConfigError("n_responses must be >= 2");
    if (n_groups > n_responses) throw ConfigError("n_groups must not exceed n_responses");
    if (n_samples % n_responses != 0) throw ConfigError("n_samples must be a multiple of n_responses");
    if (!quality_means.empty() && quality_means.size() != n_groups) {
      throw ConfigError("quality_means must have one entry per group");
    }
    for (double q : quality_means) {
      if (!std::isfinite(q)) throw ConfigError("quality means must be finite");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be finite and >= 0");
    c_distribution.validate();
    bias.validate();
  }
};

// Latent decomposition of every generated sample, aligned to the sample set.
struct SynthTruth {
  std::vector<std::string> ids;
  std::vector<double> characteristic;
  std::vector<double> true_reward;
  std::vector<double> bias_value;
  std::vector<double> observed;
};

struct SynthData {
  SampleSet samples;
  std::vector<PreferencePair> pairs;
  SynthTruth truth;
};

// Prompts are generated in order; for each response j the draws are, in
// order, the characteristic and one normal for the true reward. One pair
// per prompt: with two responses the pair itself, otherwise the best and
// worst response by true reward. Prompts whose extremes tie get no pair.
inline SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed);
  SynthData out;
  const std::size_t n_prompts = cfg.n_samples / cfg.n_responses;
  auto& t = out.truth;
  t.ids.reserve(cfg.n_samples);
  for (std::size_t p = 0; p < n_prompts; ++p) {
    const std::string prompt = "q" + std::to_string(p);
    std::size_t best = 0, worst = 0;
    const std::size_t first = t.ids.size();
    for (std::size_t j = 0; j < cfg.n_responses; ++j) {
      const std::size_t g = j % cfg.n_groups;
      const double c = cfg.c_distribution.draw(rng);
      const double quality = cfg.quality_means.empty() ? 0.0 : cfg.quality_means[g];
      const double r_true = quality + cfg.noise_std * rng.normal();
      const double b = cfg.bias(c);

      ScoredSample s;
      s.id = "s" + std::to_string(first + j);
      s.group = "g" + std::to_string(g);
      s.prompt_id = prompt;
      s.characteristics[cfg.characteristic] = c;
      s.reward = r_true + b;

      t.ids.push_back(s.id);
      t.characteristic.push_back(c);
      t.true_reward.push_back(r_true);
      t.bias_value.push_back(b);
      t.observed.push_back(s.reward);
      out.samples.add(std::move(s));

      if (r_true > t.true_reward[first + best]) best = j;
      if (r_true < t.true_reward[first + worst]) worst = j;
    }
    if (t.true_reward[first + best] == t.true_reward[first + worst]) continue;
    out.pairs.push_back({prompt, t.ids[first + best], t.ids[first + worst]});
  }
  return out;
}

inline void write_truth_jsonl(std::ostream& out, const SynthTruth& t) {
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    ordered_json j;
    j["id"] = t.ids[i];
    j["characteristic"] = t.characteristic[i];
    j["true_reward"] = t.true_reward[i];
    j["bias_value"] = t.bias_value[i];
    j["observed"] = t.observed[i];
    out << j.dump() << '\n';
  }
}

struct RecoveryReport {
  // mean |calibrated margin - true margin| over pairs
  double margin_mae = 0.0;
  // same for the raw (uncalibrated) margins
  double raw_margin_mae = 0.0;
  // agreement of calibrated preferences with true-reward preferences
  double accuracy = 0.0;
  // Spearman(calibrated reward, characteristic), absent when undefined
  std::optional<double> residual_spearman;
};

inline RecoveryReport recovery_report(const SynthTruth& truth, std::span<const PreferencePair> pairs,
                                      const Calibration& calibration) {
  if (truth.ids.size() != calibration.size()) throw DataError("truth and calibration differ in size");
  if (pairs.empty()) throw DataError("recovery report needs at least one pair");
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < truth.ids.size(); ++i) {
    pos.emplace(truth.ids[i], i);
    calibration.at(truth.ids[i]);  // throws on misaligned ids
  }
  auto truth_index = [&](const std::string& id) {
    auto it = pos.find(id);
    if (it == pos.end()) throw DataError("pair references id '" + id + "' absent from truth");
    return it->second;
  };

  RecoveryReport r;
  double agree = 0.0;
  for (const auto& p : pairs) {
    const double true_margin =
        truth.true_reward[truth_index(p.better_id)] - truth.true_reward[truth_index(p.worse_id)];
    const auto outcome = pair_margin(calibration, p);
    const double raw_margin = calibration.at(p.better_id).raw_reward - calibration.at(p.worse_id).raw_reward;
    r.margin_mae += std::abs(outcome.margin - true_margin);
    r.raw_margin_mae += std::abs(raw_margin - true_margin);
    const auto truth_pref = true_margin > 0.0   ? Preference::better
                            : true_margin < 0.0 ? Preference::worse
                                                : Preference::tie;
    if (outcome.preferred == truth_pref) agree += 1.0;
    else if (outcome.preferred == Preference::tie || truth_pref == Preference::tie) agree += 0.5;
  }
  const auto n = static_cast<double>(pairs.size());
  r.margin_mae /= n;
  r.raw_margin_mae /= n;
  r.accuracy = agree / n;

  std::vector<double> rewards(truth.ids.size());
  for (std::size_t i = 0; i < truth.ids.size(); ++i) rewards[i] = calibration.at(truth.ids[i]).calibrated_reward;
  try {
    r.residual_spearman = spearman(rewards, truth.characteristic);
  } catch (const DataError&) {
    r.residual_spearman.reset();
  }
  return r;
}

}  // namespace rcal
