#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcal/calibrate.hpp"
#include "rcal/dataset.hpp"
#include "rcal/error.hpp"

namespace rcal {

// 1 when the better side wins, 0 when the worse side does, 0.5 for ties.
inline double pairwise_accuracy(std::span<const PreferencePair> pairs, const Calibration& calibration) {
  if (pairs.empty()) throw DataError("pairwise accuracy needs at least one pair");
  double score = 0.0;
  for (const auto& p : pairs) {
    switch (pair_margin(calibration, p).preferred) {
      case Preference::better: score += 1.0; break;
      case Preference::tie: score += 0.5; break;
      case Preference::worse: break;
    }
  }
  return score / static_cast<double>(pairs.size());
}

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  const auto n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DataError("undefined correlation: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Spearman's rho: Pearson correlation of average ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DataError("spearman: inputs differ in length");
  if (xs.size() < 2) throw DataError("spearman: need at least 2 observations");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Mean Bradley-Terry probability that `rewards` beat the aligned baseline.
inline double bt_win_rate(std::span<const double> rewards, std::span<const double> baseline) {
  if (rewards.size() != baseline.size()) throw DataError("bt_win_rate: length mismatch");
  if (rewards.empty()) throw DataError("bt_win_rate: no prompts");
  double total = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) total += logistic(rewards[i] - baseline[i]);
  return total / static_cast<double>(rewards.size());
}

// Win rates for the normal, detailed and concise variants of one model.
using VariantWinRates = std::array<double, 3>;

// Coefficient of variation (sample std / mean) of each model's three win
// rates, averaged over models.
inline double gameability(const std::map<std::string, VariantWinRates>& by_model) {
  if (by_model.empty()) throw DataError("gameability needs at least one model");
  double total = 0.0;
  for (const auto& [model, rates] : by_model) {
    for (double r : rates) {
      if (!(r > 0.0 && r <= 1.0)) throw DataError("win rate of '" + model + "' outside (0, 1]");
    }
    const double mean = (rates[0] + rates[1] + rates[2]) / 3.0;
    if (!(mean > 0.0)) throw DataError("zero mean win rate for '" + model + "'");
    double ss = 0.0;
    for (double r : rates) ss += (r - mean) * (r - mean);
    total += std::sqrt(ss / 2.0) / mean;
  }
  return total / static_cast<double>(by_model.size());
}

// Fraction of pairs whose outcome (better/worse/tie) differs between two
// calibrations.
inline double overturn_fraction(std::span<const PreferencePair> pairs, const Calibration& before,
                                const Calibration& after) {
  if (pairs.empty()) throw DataError("overturn fraction needs at least one pair");
  std::size_t changed = 0;
  for (const auto& p : pairs) {
    if (pair_margin(before, p).preferred != pair_margin(after, p).preferred) ++changed;
  }
  return static_cast<double>(changed) / static_cast<double>(pairs.size());
}

// Calibration whose calibrated rewards are the raw rewards.
inline Calibration raw_calibration(const Calibration& calibration) {
  std::vector<CalibratedSample> raw;
  raw.reserve(calibration.size());
  for (const auto& c : calibration) raw.push_back({c.id, c.raw_reward, 0.0, c.raw_reward, true});
  return Calibration(std::move(raw));
}

struct GroupWinRate {
  std::string group;
  double win_rate = 0.0;

  bool operator==(const GroupWinRate&) const = default;
};

namespace detail {

// group -> prompt_id -> mean calibrated reward. Samples without a group are
// skipped.
inline std::map<std::string, std::map<std::string, double>> group_prompt_rewards(
    const SampleSet& set, const Calibration& calibration) {
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> sums;
  for (const auto& s : set) {
    if (!s.group) continue;
    if (!s.prompt_id) throw DataError("sample '" + s.id + "' has a group but no prompt_id");
    auto& slot = sums[*s.group][*s.prompt_id];
    slot.first += calibration.at(s.id).calibrated_reward;
    slot.second += 1;
  }
  std::map<std::string, std::map<std::string, double>> out;
  for (const auto& [group, prompts] : sums) {
    auto& dst = out[group];
    for (const auto& [prompt, acc] : prompts) dst[prompt] = acc.first / static_cast<double>(acc.second);
  }
  return out;
}

inline std::string list_ids(const std::vector<std::string>& ids) {
  std::string out;
  const std::size_t shown = std::min<std::size_t>(ids.size(), 10);
  for (std::size_t i = 0; i < shown; ++i) out += (i ? ", " : "") + ids[i];
  if (ids.size() > shown) out += ", ... (" + std::to_string(ids.size()) + " total)";
  return out;
}

}  // namespace detail

// Every group's Bradley-Terry win rate against `baseline_group`, aligned by
// prompt_id, sorted by descending win rate then group name. A group with
// several samples for one prompt contributes their mean reward.
inline std::vector<GroupWinRate> rank_models(const SampleSet& set, const Calibration& calibration,
                                             const std::string& baseline_group) {
  const auto table = detail::group_prompt_rewards(set, calibration);
  auto base_it = table.find(baseline_group);
  if (base_it == table.end()) throw DataError("baseline group '" + baseline_group + "' not found");
  const auto& base = base_it->second;

  std::vector<GroupWinRate> out;
  for (const auto& [group, prompts] : table) {
    std::vector<std::string> missing, extra;
    for (const auto& [prompt, _] : base) {
      if (!prompts.contains(prompt)) missing.push_back(prompt);
    }
    for (const auto& [prompt, _] : prompts) {
      if (!base.contains(prompt)) extra.push_back(prompt);
    }
    if (!missing.empty()) {
      throw DataError("group '" + group + "' is missing prompt_ids: " + detail::list_ids(missing));
    }
    if (!extra.empty()) {
      throw DataError("group '" + group + "' has prompt_ids absent from baseline: " +
                      detail::list_ids(extra));
    }
    std::vector<double> r, rb;
    r.reserve(base.size());
    rb.reserve(base.size());
    for (const auto& [prompt, value] : base) {
      r.push_back(prompts.at(prompt));
      rb.push_back(value);
    }
    out.push_back({group, bt_win_rate(r, rb)});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.win_rate != b.win_rate) return a.win_rate > b.win_rate;
    return a.group < b.group;
  });
  return out;
}

struct MetricsReport {
  double accuracy = 0.0;
  std::optional<double> spearman_vs_characteristic;
  std::map<std::string, double> win_rates;
  std::optional<double> gameability;
  std::optional<double> overturn_fraction;
  std::optional<double> spearman_vs_external;
  std::size_t n_pairs = 0;
  std::size_t n_samples = 0;
};

struct EvaluationInputs {
  const SampleSet* samples = nullptr;
  const Calibration* calibration = nullptr;
  std::span<const PreferencePair> pairs;
  std::string characteristic = "length";
  std::optional<std::string> baseline_group;
  // model -> {normal, detailed, concise} group names
  std::map<std::string, std::array<std::string, 3>> variants;
  // group -> external quality score (higher is better)
  std::map<std::string, double> external_scores;
};

inline MetricsReport evaluate(const EvaluationInputs& in) {
  if (!in.samples || !in.calibration) throw DataError("evaluate: samples and calibration required");
  const auto& set = *in.samples;
  const auto& cal = *in.calibration;
  validate_pairs(in.pairs, set);

  MetricsReport report;
  report.n_pairs = in.pairs.size();
  report.n_samples = set.size();
  report.accuracy = pairwise_accuracy(in.pairs, cal);
  report.overturn_fraction = overturn_fraction(in.pairs, raw_calibration(cal), cal);

  const auto c = extract_characteristic(set, in.characteristic);
  std::vector<double> rewards(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) rewards[i] = cal.at(set[i].id).calibrated_reward;
  try {
    report.spearman_vs_characteristic = spearman(rewards, c);
  } catch (const DataError&) {
    report.spearman_vs_characteristic.reset();
  }

  if (in.baseline_group) {
    for (const auto& gw : rank_models(set, cal, *in.baseline_group)) report.win_rates[gw.group] = gw.win_rate;
  }
  if (!in.variants.empty()) {
    if (!in.baseline_group) throw ConfigError("gameability needs a baseline group");
    std::map<std::string, VariantWinRates> by_model;
    for (const auto& [model, groups] : in.variants) {
      VariantWinRates rates{};
      for (std::size_t v = 0; v < 3; ++v) {
        auto it = report.win_rates.find(groups[v]);
        if (it == report.win_rates.end()) throw DataError("variant group '" + groups[v] + "' not found");
        rates[v] = it->second;
      }
      by_model[model] = rates;
    }
    report.gameability = gameability(by_model);
  }
  if (!in.external_scores.empty()) {
    if (!in.baseline_group) throw ConfigError("external ranking comparison needs a baseline group");
    std::vector<double> ours, theirs;
    for (const auto& [group, score] : in.external_scores) {
      auto it = report.win_rates.find(group);
      if (it == report.win_rates.end()) throw DataError("ranked group '" + group + "' not found");
      ours.push_back(it->second);
      theirs.push_back(score);
    }
    report.spearman_vs_external = spearman(ours, theirs);
  }
  return report;
}

inline ordered_json report_to_json(const MetricsReport& r) {
  ordered_json j;
  j["accuracy"] = r.accuracy;
  j["spearman_vs_characteristic"] =
      r.spearman_vs_characteristic ? ordered_json(*r.spearman_vs_characteristic) : ordered_json(nullptr);
  ordered_json wr = ordered_json::object();
  for (const auto& [g, v] : r.win_rates) wr[g] = v;
  j["win_rates"] = std::move(wr);
  j["gameability"] = r.gameability ? ordered_json(*r.gameability) : ordered_json(nullptr);
  j["overturn_fraction"] = r.overturn_fraction ? ordered_json(*r.overturn_fraction) : ordered_json(nullptr);
  if (r.spearman_vs_external) j["spearman_vs_external"] = *r.spearman_vs_external;
  j["n_pairs"] = r.n_pairs;
  j["n_samples"] = r.n_samples;
  return j;
}

}  // namespace rcal
