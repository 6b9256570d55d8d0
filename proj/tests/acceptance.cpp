// Acceptance checks, one PASS/FAIL line each. Usage: acceptance <path-to-rcal>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cli_support.hpp"
#include "oracles.hpp"
#include "rcal/rcal.hpp"

using namespace rcal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

SynthData linear_scenario(std::size_t n, std::uint64_t seed, const std::string& bias = "linear:0.002") {
  SynthConfig cfg;
  cfg.n_samples = n;
  cfg.seed = seed;
  cfg.c_distribution = parse_distribution("uniform:100,3000");
  cfg.bias = parse_bias_shape(bias);
  cfg.noise_std = 1.0;
  return generate(cfg);
}

Outcome lowess_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(5, 50);
  std::uniform_real_distribution<double> u(-10, 10);
  const double fs[] = {0.3, 0.5, 1.0};
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = size(rng);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = u(rng);
      y[i] = std::sin(x[i]) + 0.3 * u(rng);
    }
    const double f = fs[trial % 3];
    const auto curve = lowess_fit(x, y, {f, 0, 0.0});
    const auto expected = oracle::lowess(x, y, f, 0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(curve.fitted[i] - expected[order[i]]));
    }
  }
  const double t = seconds_since(start);
  return {worst <= 1e-9 && t < 1.0, "max |diff| = " + num(worst) + ", " + num(t) + " s"};
}

Outcome exact_line() {
  std::vector<double> x(100), y(100);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 50);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = u(rng);
    y[i] = 2 * x[i] + 1;
  }
  double worst = 0.0;
  for (double f : {0.3, 0.6, 1.0}) {
    for (int k : {0, 3}) {
      const auto curve = lowess_fit(x, y, {f, k, 0.0});
      for (std::size_t i = 0; i < curve.xs.size(); ++i) {
        worst = std::max(worst, std::abs(curve.fitted[i] - (2 * curve.xs[i] + 1)));
      }
    }
  }
  return {worst <= 1e-9, "max |fitted - observed| = " + num(worst)};
}

Outcome decorrelation() {
  const auto data = linear_scenario(10'000, 11);
  const auto start = Clock::now();
  const auto cal = calibrate(data.samples, CalibrationConfig{});
  const double t = seconds_since(start);
  const auto c = extract_characteristic(data.samples, "length");
  const double raw = std::abs(oracle::spearman(data.samples.rewards(), c));
  const double after = std::abs(oracle::spearman(cal.calibrated_rewards(), c));
  return {raw > 0.8 && after < 0.05 && t < 30.0,
          "raw |rho| = " + num(raw) + ", calibrated |rho| = " + num(after) + ", " +
              num(t) + " s"};
}

// Fraction of pairs whose sign under `rewards` agrees with the true-reward
// label; ties count one half.
double agreement(const SynthData& data, const std::vector<double>& rewards) {
  double score = 0.0;
  for (const auto& p : data.pairs) {
    const double m = rewards[*data.samples.index_of(p.better_id)] - rewards[*data.samples.index_of(p.worse_id)];
    score += m > 0 ? 1.0 : m == 0 ? 0.5 : 0.0;
  }
  return score / static_cast<double>(data.pairs.size());
}

Outcome accuracy_recovery() {
  const auto data = linear_scenario(10'000, 12);
  const auto cal = calibrate(data.samples, CalibrationConfig{});
  const double raw = agreement(data, data.samples.rewards());
  const double after = agreement(data, cal.calibrated_rewards());
  return {data.pairs.size() == 5000 && raw < 0.75 && after > 0.90,
          std::to_string(data.pairs.size()) + " pairs, raw = " + num(raw) +
              ", rc-lwr = " + num(after)};
}

Outcome gamma_linearity() {
  const auto data = linear_scenario(2000, 13);
  std::vector<std::vector<double>> margins;
  for (double g : {0.0, 0.5, 1.0}) {
    CalibrationConfig cfg;
    cfg.gamma = g;
    const auto cal = calibrate(data.samples, cfg);
    std::vector<double> m;
    for (const auto& p : data.pairs) m.push_back(pair_margin(cal, p).margin);
    margins.push_back(std::move(m));
  }
  bool identity = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < data.pairs.size(); ++i) {
    const auto& p = data.pairs[i];
    const double raw = data.samples.at(p.better_id).reward - data.samples.at(p.worse_id).reward;
    identity = identity && margins[0][i] == raw;
    worst = std::max(worst, std::abs(margins[1][i] - 0.5 * (margins[0][i] + margins[2][i])));
  }
  return {identity && worst <= 1e-10,
          std::string("gamma=0 bit-exact: ") + (identity ? "yes" : "no") + ", collinearity error = " +
              num(worst)};
}

Outcome rc_mean_invariance() {
  const auto data = linear_scenario(2000, 14);
  const auto c = extract_characteristic(data.samples, "length");
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  CalibrationConfig cfg;
  cfg.method = Method::rc_mean;
  cfg.d = (*hi - *lo) * 1.01;
  const auto global = calibrate(data.samples, cfg);
  double worst = 0.0;
  for (const auto& p : data.pairs) {
    const double raw = data.samples.at(p.better_id).reward - data.samples.at(p.worse_id).reward;
    worst = std::max(worst, std::abs(pair_margin(global, p).margin - raw));
  }

  // an isolated sample far from the bulk has |N| < 10
  SampleSet sparse = data.samples;
  ScoredSample lonely;
  lonely.id = "lonely";
  lonely.characteristics["length"] = 1e6;
  lonely.reward = 0.25;
  sparse.add(lonely);
  cfg.d = 50.0;
  const auto local = calibrate(sparse, cfg);
  const PreferencePair pair{"x", data.samples[0].id, "lonely"};
  const double raw = data.samples[0].reward - 0.25;
  const bool fallback = !local.at("lonely").calibrated_flag && pair_margin(local, pair).margin == raw;
  return {worst <= 1e-12 && fallback,
          "max margin drift = " + num(worst) + ", sparse fallback: " + (fallback ? "yes" : "no")};
}

Outcome low_bias_stability() {
  const auto data = linear_scenario(10'000, 15, "none");
  const auto cal = calibrate(data.samples, CalibrationConfig{});
  const double overturned = overturn_fraction(data.pairs, raw_calibration(cal), cal);
  return {data.pairs.size() == 5000 && overturned < 0.05,
          std::to_string(data.pairs.size()) + " pairs, overturned = " + num(overturned)};
}

// A baseline group plus one model's normal/detailed/concise variants. The
// variants share the true reward per prompt and differ only in length.
Outcome gameability_reduction() {
  SplitMix64 rng(16);
  const BiasShape bias = parse_bias_shape("linear:0.002");
  const std::size_t prompts = 1000;
  const std::pair<const char*, double> variants[] = {{"normal", 1.0}, {"detailed", 1.4}, {"concise", 0.6}};
  SampleSet set;
  for (std::size_t p = 0; p < prompts; ++p) {
    const std::string prompt = "q" + std::to_string(p);
    auto add = [&](const std::string& group, double length, double r_true) {
      ScoredSample s;
      s.id = group + "-" + prompt;
      s.group = group;
      s.prompt_id = prompt;
      s.characteristics["length"] = length;
      s.reward = r_true + bias(length);
      set.add(std::move(s));
    };
    add("baseline", rng.uniform(100, 3000), rng.normal());
    const double length = rng.uniform(300, 2000);
    const double r_star = 0.3 + rng.normal();
    for (const auto& [name, scale] : variants) add(name, length * scale, r_star);
  }
  auto game = [&](const Calibration& cal) {
    std::map<std::string, double> rates;
    for (const auto& gw : rank_models(set, cal, "baseline")) rates[gw.group] = gw.win_rate;
    return gameability({{"model", {rates.at("normal"), rates.at("detailed"), rates.at("concise")}}});
  };
  const auto cal = calibrate(set, CalibrationConfig{});
  const double biased = game(raw_calibration(cal));
  const double calibrated = game(cal);
  return {biased > 5.0 * calibrated,
          "biased = " + num(biased) + ", calibrated = " + num(calibrated)};
}

Outcome metric_oracles() {
  bool spearman_exact = true;
  std::size_t checked = 0;
  for (int n = 2; n <= 6; ++n) {
    std::vector<int> base(static_cast<std::size_t>(n));
    std::iota(base.begin(), base.end(), 1);
    std::vector<double> x(base.begin(), base.end());
    std::vector<int> perm = base;
    do {
      std::vector<double> y(perm.begin(), perm.end());
      spearman_exact = spearman_exact && spearman(x, y) == oracle::spearman_no_ties(base, perm);
      ++checked;
    } while (std::next_permutation(perm.begin(), perm.end()));
  }

  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0, 2);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> r(50), rb(50);
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] = g(rng);
      rb[i] = g(rng);
    }
    worst = std::max(worst, std::abs(bt_win_rate(r, rb) + bt_win_rate(rb, r) - 1.0));
  }
  const double game = gameability({{"m", {0.4, 0.5, 0.6}}});
  return {spearman_exact && worst <= 1e-12 && std::abs(game - 0.2) <= 1e-12,
          std::to_string(checked) + " permutations exact: " + (spearman_exact ? "yes" : "no") +
              ", bt complement error = " + num(worst) + ", gameability = " + num(game)};
}

Outcome performance() {
  const auto data = linear_scenario(300'000, 18);
  const auto start = Clock::now();
  const auto cal = calibrate(data.samples, CalibrationConfig{});
  const double t = seconds_since(start);
  return {cal.size() == 300'000 && t < 60.0, num(t) + " s for 300000 samples"};
}

Outcome determinism(const std::string& exe) {
  const auto dir = cli::fresh_dir("acceptance");
  auto p = [&](const std::string& name) { return cli::quote((dir / name).string()); };
  std::vector<std::string> failures;
  auto run = [&](const std::string& args) {
    const auto r = cli::run(exe, args, dir);
    if (r.code != 0) failures.push_back("exit " + std::to_string(r.code) + ": " + args + "\n" + r.err);
  };
  auto same = [&](const std::string& a, const std::string& b) {
    if (cli::slurp(dir / a) != cli::slurp(dir / b) || cli::slurp(dir / a).empty()) {
      failures.push_back(a + " differs from " + b);
    }
  };

  for (const char* tag : {"a", "b"}) {
    run(std::string("synth --n 4000 --groups 2 --responses 2 --seed 3 --out-dir ") + p(tag));
  }
  for (const char* f : {"samples.jsonl", "pairs.jsonl", "truth.jsonl"}) {
    same(std::string("a/") + f, std::string("b/") + f);
  }

  const std::string samples = p("a/samples.jsonl"), pairs = p("a/pairs.jsonl");
  const std::vector<std::string> methods = {"rc-lwr", "rc-lwr-penalty", "rc-mean", "penalty", "original"};
  for (const auto& m : methods) {
    for (const char* threads : {"1", "2", "4"}) {
      run("calibrate --method " + m + " --threads " + threads + " --input " + samples + " --pairs " + pairs +
          " --output " + p(m + "-" + threads + ".jsonl"));
    }
    run("calibrate --method " + m + " --threads 4 --input " + samples + " --pairs " + pairs + " --output " +
        p(m + "-rerun.jsonl"));
    same(m + "-1.jsonl", m + "-2.jsonl");
    same(m + "-1.jsonl", m + "-4.jsonl");
    same(m + "-4.jsonl", m + "-rerun.jsonl");
  }

  std::string texts;
  for (int i = 0; i < 50; ++i) {
    std::string body = i % 3 ? "## Item " + std::to_string(i) + "\\n- **bold** point" : "plain answer";
    texts += "{\"id\":\"t" + std::to_string(i) + "\",\"reward\":" + std::to_string(i % 7) + ",\"text\":\"" +
             body + "\"}\n";
  }
  cli::spit(dir / "texts.jsonl", texts);

  for (const char* tag : {"1", "2"}) {
    run("evaluate --input " + p("rc-lwr-1.jsonl") + " --pairs " + pairs + " --baseline g0 --output " +
        p(std::string("report-") + tag + ".json"));
    run("features --input " + p("texts.jsonl") + " --output " + p(std::string("features-") + tag + ".jsonl"));
    run("winrate --input " + p("rc-lwr-1.jsonl") + " --baseline g0 --output " +
        p(std::string("winrate-") + tag + ".json"));
  }
  same("report-1.json", "report-2.json");
  same("features-1.jsonl", "features-2.jsonl");
  same("winrate-1.json", "winrate-2.json");

  std::filesystem::remove_all(dir);
  if (failures.empty()) return {true, "synth, calibrate (5 methods x threads 1/2/4), evaluate, features, winrate"};
  return {false, failures.front()};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <path-to-rcal>\n", argv[0]);
    return 2;
  }
  const std::string exe = argv[1];
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"1 lowess matches brute-force oracle", lowess_oracle},
      {"2 exact line reproduced", exact_line},
      {"3 linear bias decorrelated", decorrelation},
      {"4 pairwise accuracy recovered", accuracy_recovery},
      {"5 gamma identity and linearity", gamma_linearity},
      {"6 rc-mean global-d invariance and sparse fallback", rc_mean_invariance},
      {"7 low-bias stability", low_bias_stability},
      {"8 gameability reduction", gameability_reduction},
      {"9 metric oracles", metric_oracles},
      {"10 rc-lwr on 300k samples under 60 s", performance},
      {"11 cli determinism", [&] { return determinism(exe); }},
  };
  int failed = 0;
  for (const auto& [name, check] : checks) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s (%s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(checks.size()) - failed, checks.size());
  return failed == 0 ? 0 : 1;
}
