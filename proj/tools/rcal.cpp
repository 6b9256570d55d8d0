// rcal: post-hoc reward calibration pipeline.
//
// Exit codes: 0 success, 1 data error, 2 usage error.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rcal/rcal.hpp"

namespace fs = std::filesystem;
using rcal::ordered_json;

namespace {

constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw rcal::DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw rcal::DataError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw rcal::DataError("write failed for '" + path.string() + "'");
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw rcal::DataError("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

rcal::SampleFormat format_for(const std::string& path, const std::string& requested) {
  if (!requested.empty()) return rcal::parse_sample_format(requested);
  return fs::path(path).extension() == ".csv" ? rcal::SampleFormat::csv : rcal::SampleFormat::jsonl;
}

rcal::SampleSet load_samples(const std::string& path, const std::string& format) {
  std::istringstream in(read_file(path));
  return rcal::parse_samples(in, format_for(path, format));
}

std::vector<rcal::PreferencePair> load_pairs(const std::string& path) {
  std::istringstream in(read_file(path));
  return rcal::parse_pairs(in);
}

// Thread count from --threads, then REWARD_CALIB_THREADS, then 1.
unsigned resolve_threads(int flag) {
  if (flag > 0) return static_cast<unsigned>(flag);
  if (const char* env = std::getenv("REWARD_CALIB_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
    throw rcal::ConfigError("REWARD_CALIB_THREADS must be a positive integer");
  }
  return 1;
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  ordered_json config = ordered_json::object();
  std::vector<std::string> inputs;

  // Writes <stem>.manifest.json and the timestamp to <stem>.timestamp.
  void write(const fs::path& stem) const {
    ordered_json j;
    j["tool"] = "rcal";
    j["version"] = rcal::kVersion;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    ordered_json digests = ordered_json::object();
    for (const auto& path : inputs) digests[path] = sha256_hex(read_file(path));
    j["input_sha256"] = std::move(digests);
    write_file(stem.string() + ".manifest.json", j.dump(2) + "\n");
    write_file(stem.string() + ".timestamp", utc_timestamp() + "\n");
  }
};

struct CalibrateArgs {
  std::string input, format, pairs, output, method = "rc-lwr", curve;
  std::vector<std::string> characteristics{"length"};
  std::optional<double> bandwidth, gamma, alpha, d, delta;
  std::optional<int> iterations, min_neighbors;
  int threads = 0;
};

int run_calibrate(const CalibrateArgs& a, const std::vector<std::string>& argv) {
  rcal::CalibrationConfig cfg;
  cfg.method = rcal::parse_method(a.method);
  cfg.characteristics = a.characteristics;
  if (a.alpha) cfg.alpha = *a.alpha;
  if (a.gamma) cfg.gamma = *a.gamma;
  if (a.min_neighbors) cfg.min_neighbors = *a.min_neighbors;
  cfg.d = a.d;
  cfg.bandwidth = a.bandwidth;
  cfg.iterations = a.iterations;
  cfg.delta = a.delta;
  cfg.validate();
  if (cfg.method == rcal::Method::rc_mean && !cfg.d && a.pairs.empty()) {
    throw rcal::ConfigError("--method rc-mean requires --d or --pairs");
  }
  const unsigned threads = resolve_threads(a.threads);

  const auto set = load_samples(a.input, a.format);
  std::vector<rcal::PreferencePair> pairs;
  if (!a.pairs.empty()) {
    pairs = load_pairs(a.pairs);
    rcal::validate_pairs(pairs, set);
  }
  std::optional<std::span<const rcal::PreferencePair>> pair_view;
  if (!a.pairs.empty()) pair_view = std::span<const rcal::PreferencePair>(pairs);

  rcal::FittedCurve curve;
  const auto cal = rcal::calibrate(set, cfg, pair_view, threads, &curve);

  std::ostringstream out;
  rcal::write_calibrated_jsonl(out, set, cal);
  write_file(a.output, out.str());
  const bool has_curve = !curve.xs.empty();
  if (!a.curve.empty()) {
    if (!has_curve) throw rcal::ConfigError("--curve needs a single-characteristic LOWESS method");
    write_file(a.curve, rcal::curve_to_json(curve).dump() + "\n");
  }

  Manifest m;
  m.command = "calibrate";
  m.argv = argv;
  m.inputs.push_back(a.input);
  if (!a.pairs.empty()) m.inputs.push_back(a.pairs);
  auto& c = m.config;
  c["method"] = std::string(rcal::method_name(cfg.method));
  c["characteristics"] = cfg.characteristics;
  c["alpha"] = cfg.alpha;
  c["gamma"] = cfg.gamma;
  c["d"] = cfg.d ? ordered_json(*cfg.d) : ordered_json(nullptr);
  c["min_neighbors"] = cfg.min_neighbors;
  if (has_curve) {
    c["lowess"] = {{"f", curve.config.bandwidth}, {"k", curve.config.iterations}, {"delta", curve.config.delta}};
  }
  m.write(a.output);
  return 0;
}

struct EvaluateArgs {
  std::string input, pairs, characteristic = "length", baseline, variants, ranking, output;
};

int run_evaluate(const EvaluateArgs& a, const std::vector<std::string>& argv) {
  std::istringstream in(read_file(a.input));
  const auto file = rcal::parse_calibrated_jsonl(in);
  const auto pairs = load_pairs(a.pairs);

  rcal::EvaluationInputs inputs;
  inputs.samples = &file.samples;
  inputs.calibration = &file.calibration;
  inputs.pairs = pairs;
  inputs.characteristic = a.characteristic;
  if (!a.baseline.empty()) inputs.baseline_group = a.baseline;
  try {
    if (!a.variants.empty()) {
      const auto j = rcal::json::parse(read_file(a.variants));
      for (const auto& [model, groups] : j.items()) {
        const auto g = groups.get<std::vector<std::string>>();
        if (g.size() != 3) throw rcal::DataError("variants of '" + model + "' must list three groups");
        inputs.variants[model] = {g[0], g[1], g[2]};
      }
    }
    if (!a.ranking.empty()) {
      // either {"group": score, ...} or ["best", "second", ...]
      const auto j = rcal::json::parse(read_file(a.ranking));
      if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
          inputs.external_scores[j[i].get<std::string>()] = -static_cast<double>(i);
        }
      } else {
        for (const auto& [group, score] : j.items()) inputs.external_scores[group] = score.get<double>();
      }
    }
  } catch (const rcal::json::exception& e) {
    throw rcal::DataError(std::string("invalid JSON side file: ") + e.what());
  }

  const auto report = rcal::evaluate(inputs);
  const std::string text = rcal::report_to_json(report).dump(2) + "\n";
  if (a.output.empty()) {
    std::cout << text;
    return 0;
  }
  write_file(a.output, text);
  Manifest m;
  m.command = "evaluate";
  m.argv = argv;
  m.inputs = {a.input, a.pairs};
  if (!a.variants.empty()) m.inputs.push_back(a.variants);
  if (!a.ranking.empty()) m.inputs.push_back(a.ranking);
  m.config = {{"characteristic", a.characteristic}, {"baseline", a.baseline}};
  m.write(a.output);
  return 0;
}

struct SynthArgs {
  long long n = 10'000;
  long long groups = 1;
  long long responses = 2;
  std::uint64_t seed = 0;
  std::string c_dist = "uniform:100,3000";
  std::string bias = "linear:0.002";
  std::vector<double> quality;
  double noise = 1.0;
  std::string out_dir;
};

int run_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
  if (a.n < 2) throw rcal::ConfigError("--n must be >= 2");
  if (a.groups < 1 || a.responses < 2) throw rcal::ConfigError("--groups must be >= 1 and --responses >= 2");
  rcal::SynthConfig cfg;
  cfg.n_samples = static_cast<std::size_t>(a.n);
  cfg.n_groups = static_cast<std::size_t>(a.groups);
  cfg.n_responses = static_cast<std::size_t>(a.responses);
  cfg.seed = a.seed;
  cfg.c_distribution = rcal::parse_distribution(a.c_dist);
  cfg.bias = rcal::parse_bias_shape(a.bias);
  cfg.quality_means = a.quality;
  cfg.noise_std = a.noise;
  cfg.validate();
  const auto data = rcal::generate(cfg);

  const fs::path dir(a.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw rcal::DataError("cannot create '" + dir.string() + "': " + ec.message());
  std::ostringstream samples, pairs, truth;
  rcal::write_samples_jsonl(samples, data.samples);
  rcal::write_pairs_jsonl(pairs, data.pairs);
  rcal::write_truth_jsonl(truth, data.truth);
  write_file(dir / "samples.jsonl", samples.str());
  write_file(dir / "pairs.jsonl", pairs.str());
  write_file(dir / "truth.jsonl", truth.str());

  Manifest m;
  m.command = "synth";
  m.argv = argv;
  m.config = {{"n", a.n},
              {"groups", a.groups},
              {"responses", a.responses},
              {"seed", a.seed},
              {"c_dist", a.c_dist},
              {"bias", a.bias},
              {"quality", a.quality},
              {"noise", a.noise}};
  m.write(dir / "synth");
  return 0;
}

struct FeaturesArgs {
  std::string input, format, output;
};

int run_features(const FeaturesArgs& a, const std::vector<std::string>& argv) {
  const auto set = load_samples(a.input, a.format);
  rcal::SampleSet annotated;
  for (auto s : set) {
    for (const char* name : {"length", "markdown"}) {
      if (s.characteristics.contains(name)) continue;
      if (!s.text) throw rcal::DataError("sample '" + s.id + "' has no text to extract '" + name + "' from");
      s.characteristics[name] = *rcal::text_characteristic(name, *s.text);
    }
    annotated.add(std::move(s));
  }
  std::ostringstream out;
  rcal::write_samples_jsonl(out, annotated);
  write_file(a.output, out.str());
  Manifest m;
  m.command = "features";
  m.argv = argv;
  m.inputs = {a.input};
  m.config = {{"characteristics", {"length", "markdown"}}};
  m.write(a.output);
  return 0;
}

struct WinrateArgs {
  std::string input, baseline, output;
};

int run_winrate(const WinrateArgs& a, const std::vector<std::string>& argv) {
  std::istringstream in(read_file(a.input));
  const auto file = rcal::parse_calibrated_jsonl(in);
  const auto ranking = rcal::rank_models(file.samples, file.calibration, a.baseline);
  ordered_json j = ordered_json::array();
  for (const auto& gw : ranking) j.push_back({{"group", gw.group}, {"win_rate", gw.win_rate}});
  const std::string text = j.dump(2) + "\n";
  if (a.output.empty()) {
    std::cout << text;
    return 0;
  }
  write_file(a.output, text);
  Manifest m;
  m.command = "winrate";
  m.argv = argv;
  m.inputs = {a.input};
  m.config = {{"baseline", a.baseline}};
  m.write(a.output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Post-hoc reward calibration: remove characteristic-dependent bias from reward scores"};
  app.set_version_flag("--version", std::string(rcal::kVersion));
  app.require_subcommand(1);

  CalibrateArgs cal;
  auto* c = app.add_subcommand("calibrate", "Calibrate rewards and write calibrated JSONL");
  c->add_option("--input", cal.input, "Samples file (JSONL or CSV)")->required()->check(CLI::ExistingFile);
  c->add_option("--format", cal.format, "Input format: jsonl or csv (default: by extension)")
      ->check(CLI::IsMember({"jsonl", "csv"}));
  c->add_option("--method", cal.method, "original | penalty | rc-mean | rc-lwr | rc-lwr-penalty")
      ->check(CLI::IsMember({"original", "penalty", "rc-mean", "rc-lwr", "rc-lwr-penalty"}));
  c->add_option("--characteristic", cal.characteristics, "Characteristic name(s); repeat or comma-separate")
      ->delimiter(',');
  c->add_option("--pairs", cal.pairs, "Preference pairs JSONL")->check(CLI::ExistingFile);
  c->add_option("--bandwidth", cal.bandwidth, "LOWESS bandwidth f in (0, 1]");
  c->add_option("--iters", cal.iterations, "LOWESS robustifying iterations");
  c->add_option("--gamma", cal.gamma, "Calibration constant");
  c->add_option("--alpha", cal.alpha, "Length penalty weight");
  c->add_option("--d", cal.d, "RC-Mean neighborhood radius");
  c->add_option("--min-neighbors", cal.min_neighbors, "RC-Mean minimum neighborhood size");
  c->add_option("--delta", cal.delta, "LOWESS interpolation distance");
  c->add_option("--curve", cal.curve, "Also write the fitted LOWESS curve as JSON");
  c->add_option("--output", cal.output, "Calibrated JSONL output")->required();
  c->add_option("--threads", cal.threads, "Worker threads for LOWESS fits");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compute the metrics report for calibrated samples");
  e->add_option("--input", ev.input, "Calibrated JSONL")->required()->check(CLI::ExistingFile);
  e->add_option("--pairs", ev.pairs, "Preference pairs JSONL")->required()->check(CLI::ExistingFile);
  e->add_option("--characteristic", ev.characteristic, "Characteristic for the residual correlation");
  e->add_option("--baseline", ev.baseline, "Baseline group for win rates");
  e->add_option("--variants", ev.variants, "JSON: model -> [normal, detailed, concise] groups")
      ->check(CLI::ExistingFile);
  e->add_option("--ranking", ev.ranking, "JSON external ranking of groups")->check(CLI::ExistingFile);
  e->add_option("--output", ev.output, "Report file (default: stdout)");

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset with known bias");
  s->add_option("--n", sy.n, "Number of samples");
  s->add_option("--groups", sy.groups, "Number of groups");
  s->add_option("--responses", sy.responses, "Responses per prompt");
  s->add_option("--seed", sy.seed, "PRNG seed");
  s->add_option("--c-dist", sy.c_dist, "uniform:LO,HI or lognormal:MU,SIGMA");
  s->add_option("--bias", sy.bias, "none | linear:S | logistic:SCALE,MID[,WIDTH] | sine:AMP,PERIOD");
  s->add_option("--quality", sy.quality, "Per-group true reward means")->delimiter(',');
  s->add_option("--noise", sy.noise, "True reward noise std");
  s->add_option("--out-dir", sy.out_dir, "Output directory")->required();

  FeaturesArgs fe;
  auto* f = app.add_subcommand("features", "Annotate samples with length and markdown characteristics");
  f->add_option("--input", fe.input, "Samples file (JSONL or CSV)")->required()->check(CLI::ExistingFile);
  f->add_option("--format", fe.format, "Input format: jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));
  f->add_option("--output", fe.output, "Annotated JSONL output")->required();

  WinrateArgs wr;
  auto* w = app.add_subcommand("winrate", "Rank groups by Bradley-Terry win rate against a baseline");
  w->add_option("--input", wr.input, "Samples or calibrated JSONL")->required()->check(CLI::ExistingFile);
  w->add_option("--baseline", wr.baseline, "Baseline group")->required();
  w->add_option("--output", wr.output, "Ranking file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitUsage;
  }

  try {
    if (*c) return run_calibrate(cal, args);
    if (*e) return run_evaluate(ev, args);
    if (*s) return run_synth(sy, args);
    if (*f) return run_features(fe, args);
    if (*w) return run_winrate(wr, args);
  } catch (const rcal::ConfigError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const rcal::DataError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
