#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcal/error.hpp"
#include "rcal/matrix.hpp"
#include "rcal/parallel.hpp"

namespace rcal {

struct LowessConfig {
  // Fraction of the data used for each local fit.
  double bandwidth = 1.0 / 3.0;
  // Robustifying passes after the initial fit.
  int iterations = 3;
  // Points closer than this to the previous anchor are interpolated, not fit.
  double delta = 0.0;

  void validate() const {
    if (!(bandwidth > 0.0 && bandwidth <= 1.0)) {
      throw ConfigError("bandwidth must lie in (0, 1], got " + std::to_string(bandwidth));
    }
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (!(delta >= 0.0) || !std::isfinite(delta)) throw ConfigError("delta must be finite and >= 0");
  }

  bool operator==(const LowessConfig&) const = default;
};

// Smoothed bias estimates at sorted characteristic values.
struct FittedCurve {
  std::vector<double> xs;
  std::vector<double> fitted;
  LowessConfig config;
};

inline double tricube_weight(double d, double d_max) {
  if (!(d_max > 0.0)) throw ConfigError("tricube d_max must be positive");
  if (d >= d_max) return 0.0;
  const double u = d / d_max;
  const double t = 1.0 - u * u * u;
  return t * t * t;
}

inline double bisquare(double u) {
  const double t = std::max(0.0, 1.0 - u * u);
  return t * t;
}

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;

  double operator()(double x) const { return intercept + slope * x; }
};

namespace detail {

// Weighted line fit over parallel arrays; weights may be
// zero. Returns false when every weight is zero.
inline bool fit_line(std::span<const double> xs, std::span<const double> ys,
                     std::span<const double> ws, LinearFit& out) {
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    sw += ws[j];
    sx += ws[j] * xs[j];
    sy += ws[j] * ys[j];
  }
  if (!(sw > 0.0)) return false;
  const double xbar = sx / sw;
  const double ybar = sy / sw;
  double sxx = 0.0, sxy = 0.0, sx2 = 0.0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const double dx = xs[j] - xbar;
    sxx += ws[j] * dx * dx;
    sxy += ws[j] * dx * (ys[j] - ybar);
    sx2 += ws[j] * xs[j] * xs[j];
  }
  if (sxx / sw < 1e-12 * (sx2 / sw + 1.0)) {
    out = {ybar, 0.0};
    return true;
  }
  out.slope = sxy / sxx;
  out.intercept = ybar - out.slope * xbar;
  return true;
}

inline double lower_median(std::vector<double> values) {
  const auto mid = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  return values[mid];
}

inline std::size_t neighbor_count(double bandwidth, std::size_t n, std::size_t floor_count) {
  auto q = static_cast<std::size_t>(std::ceil(bandwidth * static_cast<double>(n) - 1e-9));
  return std::min(n, std::max(q, floor_count));
}

// Robustness weights from absolute residuals. Returns false when the median
// absolute residual is zero (the fit is already exact).
inline bool robustness_weights(std::span<const double> ys, std::span<const double> fitted,
                               std::vector<double>& out) {
  std::vector<double> residuals(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) residuals[i] = std::abs(ys[i] - fitted[i]);
  const double s = lower_median(residuals);
  if (!(s > 0.0)) return false;
  out.resize(ys.size());
  for (std::size_t i = 0; i < ys.size(); ++i) out[i] = bisquare(residuals[i] / (6.0 * s));
  return true;
}

// Anchor positions in sorted xs under the delta skip rule. Points between
// consecutive anchors are interpolated; exact ties of an anchor copy it.
inline std::vector<std::size_t> lowess_anchors(std::span<const double> xs, double delta) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> anchors;
  if (delta <= 0.0) {
    anchors.resize(n);
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    return anchors;
  }
  std::size_t i = 0;
  while (true) {
    anchors.push_back(i);
    if (i + 1 >= n) break;
    const double cut = xs[i] + delta;
    std::size_t last = i;
    std::size_t j = i + 1;
    for (; j < n; ++j) {
      if (xs[j] > cut) break;
      if (xs[j] == xs[i]) last = j;
    }
    // ties of the anchor are filled by copy; the next anchor is the last
    // point still within delta, or the first one beyond it
    if (last + 1 >= n) break;
    i = std::max(last + 1, j - 1);
  }
  return anchors;
}

// One full pass of local fits over sorted data.
class SortedLowess {
 public:
  SortedLowess(std::span<const double> xs, std::span<const double> ys, std::size_t q)
      : xs_(xs), ys_(ys), q_(q) {}

  // Fitted value at sorted position i, given robustness weights (empty means
  // all ones).
  double fit_at(std::size_t i, std::span<const double> robust) const {
    const double xi = xs_[i];
    // q nearest neighbors form a contiguous window in sorted order
    std::size_t lo = window_start(i);
    std::size_t hi = lo + q_;  // exclusive
    const double d_max = std::max(xi - xs_[lo], xs_[hi - 1] - xi);

    std::vector<double> w;
    if (d_max <= 0.0) {
      // every neighbor sits at xi: uniform weights over the exact-match set
      lo = static_cast<std::size_t>(std::lower_bound(xs_.begin(), xs_.end(), xi) - xs_.begin());
      hi = static_cast<std::size_t>(std::upper_bound(xs_.begin(), xs_.end(), xi) - xs_.begin());
      w.assign(hi - lo, 1.0);
    } else {
      w.resize(hi - lo);
      for (std::size_t j = lo; j < hi; ++j) w[j - lo] = tricube_weight(std::abs(xs_[j] - xi), d_max);
    }
    if (!robust.empty()) {
      for (std::size_t j = lo; j < hi; ++j) w[j - lo] *= robust[j];
    }
    LinearFit line;
    if (!fit_line(xs_.subspan(lo, hi - lo), ys_.subspan(lo, hi - lo), w, line)) return ys_[i];
    return line(xi);
  }

  std::vector<double> pass(std::span<const std::size_t> anchors, std::span<const double> robust,
                           unsigned threads) const {
    const std::size_t n = xs_.size();
    std::vector<double> fitted(n, 0.0);
    parallel_for(anchors.size(), threads,
                 [&](std::size_t a) { fitted[anchors[a]] = fit_at(anchors[a], robust); });
    fill_between_anchors(anchors, fitted);
    return fitted;
  }

 private:
  // Leftmost window of q points that are the q nearest to xs[i]. Ties go to
  // the lower index.
  std::size_t window_start(std::size_t i) const {
    const std::size_t n = xs_.size();
    const double xi = xs_[i];
    std::size_t lo = i + 1 >= q_ ? i + 1 - q_ : 0;
    lo = std::min(lo, n - q_);
    // advance while the point after the window is strictly closer than the
    // window's leftmost point
    std::size_t left = lo;
    std::size_t right = std::min(n - q_, i);
    while (left < right) {
      const std::size_t mid = left + (right - left) / 2;
      if (xs_[mid + q_] - xi < xi - xs_[mid]) left = mid + 1;
      else right = mid;
    }
    return left;
  }

  void fill_between_anchors(std::span<const std::size_t> anchors, std::vector<double>& fitted) const {
    for (std::size_t a = 0; a + 1 < anchors.size(); ++a) {
      const std::size_t i = anchors[a];
      const std::size_t k = anchors[a + 1];
      for (std::size_t j = i + 1; j < k; ++j) {
        if (xs_[j] == xs_[i]) {
          fitted[j] = fitted[i];
        } else {
          const double t = (xs_[j] - xs_[i]) / (xs_[k] - xs_[i]);
          fitted[j] = t * fitted[k] + (1.0 - t) * fitted[i];
        }
      }
    }
    if (!anchors.empty()) {
      for (std::size_t j = anchors.back() + 1; j < xs_.size(); ++j) fitted[j] = fitted[anchors.back()];
    }
  }

  std::span<const double> xs_;
  std::span<const double> ys_;
  std::size_t q_;
};

}  // namespace detail

// Weighted least-squares line. Falls back to slope 0 and the weighted mean
// of ys when the weighted spread of xs is negligible.
inline LinearFit weighted_linear_fit(std::span<const double> xs, std::span<const double> ys,
                                     std::span<const double> ws) {
  if (xs.empty() || xs.size() != ys.size() || xs.size() != ws.size()) {
    throw DataError("weighted_linear_fit: inputs must be non-empty and of equal length");
  }
  for (double w : ws) {
    if (!(w >= 0.0)) throw DataError("weighted_linear_fit: weights must be non-negative");
  }
  LinearFit fit;
  if (!detail::fit_line(xs, ys, ws, fit)) throw DataError("weighted_linear_fit: all weights are zero");
  return fit;
}

// Robust LOWESS over (xs, ys). The returned curve holds xs sorted ascending
// (stable, so ties keep input order) with the fitted value at each point.
inline FittedCurve lowess_fit(std::span<const double> xs, std::span<const double> ys,
                              const LowessConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  if (xs.size() != ys.size()) throw DataError("lowess_fit: xs and ys differ in length");
  const std::size_t n = xs.size();
  if (n < 2) throw DataError("lowess_fit: need at least 2 points");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw DataError("lowess_fit: non-finite input");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  FittedCurve curve;
  curve.config = cfg;
  curve.xs.resize(n);
  std::vector<double> sorted_ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    curve.xs[i] = xs[order[i]];
    sorted_ys[i] = ys[order[i]];
  }

  const std::size_t q = detail::neighbor_count(cfg.bandwidth, n, 2);
  const detail::SortedLowess smoother(curve.xs, sorted_ys, q);
  const auto anchors = detail::lowess_anchors(curve.xs, cfg.delta);

  curve.fitted = smoother.pass(anchors, {}, threads);
  std::vector<double> robust;
  for (int t = 0; t < cfg.iterations; ++t) {
    if (!detail::robustness_weights(sorted_ys, curve.fitted, robust)) break;
    curve.fitted = smoother.pass(anchors, robust, threads);
  }
  return curve;
}

// Fitted value at x: exact hit returns the first matching point, interior
// values interpolate linearly, outside the range clamps to the endpoints.
inline double predict(const FittedCurve& curve, double x) {
  if (curve.xs.empty()) throw DataError("predict: empty curve");
  const auto& xs = curve.xs;
  if (x <= xs.front()) return curve.fitted.front();
  if (x > xs.back()) return curve.fitted.back();
  auto it = std::lower_bound(xs.begin(), xs.end(), x);
  const auto k = static_cast<std::size_t>(it - xs.begin());
  if (*it == x) return curve.fitted[k];
  // x lies strictly between xs[k-1] and xs[k]; use the last point of the
  // left tie block
  const std::size_t left = k - 1;
  const double t = (x - xs[left]) / (xs[k] - xs[left]);
  return curve.fitted[left] + t * (curve.fitted[k] - curve.fitted[left]);
}

inline nlohmann::ordered_json curve_to_json(const FittedCurve& curve) {
  nlohmann::ordered_json j;
  j["xs"] = curve.xs;
  j["fitted"] = curve.fitted;
  j["config"] = {{"f", curve.config.bandwidth},
                 {"k", curve.config.iterations},
                 {"delta", curve.config.delta}};
  return j;
}

inline FittedCurve curve_from_json(const nlohmann::json& j) {
  FittedCurve curve;
  try {
    curve.xs = j.at("xs").get<std::vector<double>>();
    curve.fitted = j.at("fitted").get<std::vector<double>>();
    const auto& cfg = j.at("config");
    curve.config.bandwidth = cfg.at("f").get<double>();
    curve.config.iterations = cfg.at("k").get<int>();
    curve.config.delta = cfg.at("delta").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid curve JSON: ") + e.what());
  }
  if (curve.xs.empty() || curve.xs.size() != curve.fitted.size()) {
    throw DataError("invalid curve JSON: xs and fitted must be non-empty and aligned");
  }
  if (!std::is_sorted(curve.xs.begin(), curve.xs.end())) {
    throw DataError("invalid curve JSON: xs must be non-decreasing");
  }
  return curve;
}

namespace detail {

// Cholesky factorisation of a small symmetric matrix in place. A pivot below
// tol[k] marks the local design as degenerate.
inline bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t p,
                           std::span<const double> tol) {
  for (std::size_t k = 0; k < p; ++k) {
    double pivot = a[k * p + k];
    for (std::size_t m = 0; m < k; ++m) pivot -= a[k * p + m] * a[k * p + m];
    if (!(pivot >= tol[k]) || pivot <= 0.0) return false;
    const double l = std::sqrt(pivot);
    a[k * p + k] = l;
    for (std::size_t r = k + 1; r < p; ++r) {
      double v = a[r * p + k];
      for (std::size_t m = 0; m < k; ++m) v -= a[r * p + m] * a[k * p + m];
      a[r * p + k] = v / l;
    }
  }
  for (std::size_t k = 0; k < p; ++k) {
    double v = b[k];
    for (std::size_t m = 0; m < k; ++m) v -= a[k * p + m] * b[m];
    b[k] = v / a[k * p + k];
  }
  for (std::size_t k = p; k-- > 0;) {
    double v = b[k];
    for (std::size_t m = k + 1; m < p; ++m) v -= a[m * p + k] * b[m];
    b[k] = v / a[k * p + k];
  }
  return true;
}

// Weighted affine fit evaluated at `at`. Weights of zero are skipped.
inline bool fit_affine_at(const Matrix& x, std::span<const double> ys, std::span<const double> ws,
                          std::span<const double> at, double& out) {
  const std::size_t n = x.rows();
  const std::size_t p = x.cols();
  double sw = 0.0, sy = 0.0;
  std::vector<double> mean(p, 0.0), sq(p, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (ws[j] == 0.0) continue;
    sw += ws[j];
    sy += ws[j] * ys[j];
    for (std::size_t c = 0; c < p; ++c) {
      mean[c] += ws[j] * x(j, c);
      sq[c] += ws[j] * x(j, c) * x(j, c);
    }
  }
  if (!(sw > 0.0)) return false;
  const double ybar = sy / sw;
  for (auto& m : mean) m /= sw;

  std::vector<double> cov(p * p, 0.0), rhs(p, 0.0), tol(p);
  for (std::size_t j = 0; j < n; ++j) {
    if (ws[j] == 0.0) continue;
    for (std::size_t r = 0; r < p; ++r) {
      const double dr = x(j, r) - mean[r];
      rhs[r] += ws[j] * dr * (ys[j] - ybar);
      for (std::size_t c = 0; c <= r; ++c) cov[r * p + c] += ws[j] * dr * (x(j, c) - mean[c]);
    }
  }
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c <= r; ++c) {
      cov[r * p + c] /= sw;
      cov[c * p + r] = cov[r * p + c];
    }
    rhs[r] /= sw;
    tol[r] = 1e-12 * (sq[r] / sw + 1.0);
  }
  if (!cholesky_solve(cov, rhs, p, tol)) {
    out = ybar;
    return true;
  }
  out = ybar;
  for (std::size_t c = 0; c < p; ++c) out += rhs[c] * (at[c] - mean[c]);
  return true;
}

}  // namespace detail

// LOWESS with Euclidean neighborhoods in p dimensions and a local affine
// fit. Returns fitted values aligned to the input rows. Columns should be on
// comparable scales (see zscore_normalize).
inline std::vector<double> lowess_fit_multi(const Matrix& x, std::span<const double> ys,
                                            const LowessConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  const std::size_t n = x.rows();
  const std::size_t p = x.cols();
  if (p == 0) throw DataError("lowess_fit_multi: need at least one column");
  if (ys.size() != n) throw DataError("lowess_fit_multi: row count differs from ys length");
  if (n <= p + 1) {
    throw DataError("lowess_fit_multi: need more than " + std::to_string(p + 1) + " points");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(ys[i])) throw DataError("lowess_fit_multi: non-finite input");
    for (double v : x.row(i)) {
      if (!std::isfinite(v)) throw DataError("lowess_fit_multi: non-finite input");
    }
  }
  const std::size_t q = detail::neighbor_count(cfg.bandwidth, n, std::max<std::size_t>(2, p + 1));

  auto fit_at = [&](std::size_t i, std::span<const double> robust) {
    const auto xi = x.row(i);
    std::vector<double> dist(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      const auto xj = x.row(j);
      for (std::size_t c = 0; c < p; ++c) s += (xj[c] - xi[c]) * (xj[c] - xi[c]);
      dist[j] = std::sqrt(s);
    }
    std::vector<double> scratch = dist;
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(q - 1),
                     scratch.end());
    const double d_max = scratch[q - 1];
    std::vector<double> w(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (d_max <= 0.0) w[j] = dist[j] == 0.0 ? 1.0 : 0.0;
      else w[j] = tricube_weight(dist[j], d_max);
      if (!robust.empty()) w[j] *= robust[j];
    }
    double out = 0.0;
    if (!detail::fit_affine_at(x, ys, w, xi, out)) return ys[i];
    return out;
  };

  auto pass = [&](std::span<const double> robust) {
    std::vector<double> fitted(n);
    parallel_for(n, threads, [&](std::size_t i) { fitted[i] = fit_at(i, robust); });
    return fitted;
  };

  auto fitted = pass({});
  std::vector<double> robust;
  for (int t = 0; t < cfg.iterations; ++t) {
    if (!detail::robustness_weights(ys, fitted, robust)) break;
    fitted = pass(robust);
  }
  return fitted;
}

}  // namespace rcal
