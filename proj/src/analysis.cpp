#include "vecinfer/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vecinfer/transform.hpp"

namespace vecinfer {

namespace {

double percentile_sorted(const std::vector<float>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (double(sorted[hi]) - double(sorted[lo]));
}

struct Moments {
  double max_abs = 0.0;
  double rms = 0.0;
  double excess_kurtosis = 0.0;
};

Moments moments(const HeadMatrix& x) {
  const auto n = static_cast<double>(x.size());
  const double mean = x.cast<double>().sum() / n;
  double m2 = 0.0;
  double m4 = 0.0;
  double sq = 0.0;
  double max_abs = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const double c = v - mean;
    const double c2 = c * c;
    m2 += c2;
    m4 += c2 * c2;
    sq += v * v;
    max_abs = std::max(max_abs, std::abs(v));
  }
  m2 /= n;
  m4 /= n;
  if (!(m2 > 0.0)) throw DegenerateInputError("kurtosis undefined for constant input");
  return {max_abs, std::sqrt(sq / n), m4 / (m2 * m2) - 3.0};
}

}  // namespace

DistributionReport distribution_report(const HeadMatrix& keys) {
  if (keys.rows() < 2) throw ShapeError("distribution_report: need at least two rows");
  if (!keys.allFinite()) throw ShapeError("distribution_report: non-finite input");
  const Index n = keys.rows();
  const Index d = keys.cols();

  DistributionReport rep;
  const Moments mom = moments(keys);
  rep.global_outlier_ratio = mom.max_abs / mom.rms;
  rep.excess_kurtosis = mom.excess_kurtosis;

  rep.per_channel_max = keys.cwiseAbs().colwise().maxCoeff().transpose();
  rep.per_channel_p99.resize(d);
  std::vector<float> column(static_cast<std::size_t>(n));
  for (Index c = 0; c < d; ++c) {
    for (Index r = 0; r < n; ++r) column[r] = std::abs(keys(r, c));
    std::sort(column.begin(), column.end());
    rep.per_channel_p99[c] = static_cast<float>(percentile_sorted(column, 0.99));
  }

  const HeadMatrix rotated = hadamard_apply(keys);
  double worst = 0.0;
  for (Index r = 0; r < n; ++r) {
    const double expected = keys.row(r).cast<double>().squaredNorm() / double(d);
    const double got = rotated.row(r).cast<double>().squaredNorm() / double(d);
    const double err = std::abs(got - expected);
    worst = std::max(worst, expected > 0.0 ? err / expected : err);
  }
  rep.row_ms_error = worst;
  return rep;
}

Lemma1Check lemma1_check(const HeadMatrix& keys) {
  if (!is_power_of_two(keys.cols())) throw ShapeError("lemma1_check: head dimension must be a power of two");
  const Moments before = moments(keys);
  const Moments after = moments(hadamard_apply(keys));
  Lemma1Check out;
  out.kurtosis_before = before.excess_kurtosis;
  out.kurtosis_after = after.excess_kurtosis;
  out.outlier_ratio_before = before.max_abs / before.rms;
  out.outlier_ratio_after = after.max_abs / after.rms;
  out.heavy_tailed = out.kurtosis_before > 1.0;
  out.holds = !out.heavy_tailed || (out.kurtosis_after < out.kurtosis_before &&
                                    out.outlier_ratio_after < out.outlier_ratio_before);
  return out;
}

TransformMode parse_transform_mode(std::string_view name) {
  if (name == "none") return TransformMode::None;
  if (name == "s" || name == "S") return TransformMode::Smooth;
  if (name == "h" || name == "H") return TransformMode::Hadamard;
  if (name == "hs" || name == "H+S") return TransformMode::HadamardSmooth;
  if (name == "sh" || name == "S+H") return TransformMode::SmoothHadamard;
  throw ShapeError("unknown transform mode '" + std::string(name) + "'");
}

std::string_view transform_mode_name(TransformMode mode) {
  switch (mode) {
    case TransformMode::None: return "none";
    case TransformMode::Smooth: return "s";
    case TransformMode::Hadamard: return "h";
    case TransformMode::HadamardSmooth: return "hs";
    case TransformMode::SmoothHadamard: return "sh";
  }
  return "none";
}

AblationResult transform_ablation(const HeadMatrix& keys, const HeadMatrix& queries, const VQConfig& cfg,
                                  TransformMode mode, const AblationOptions& opts) {
  if (keys.cols() != queries.cols() || keys.cols() != cfg.head_dim) {
    throw ShapeError("transform_ablation: keys, queries and config disagree on head_dim");
  }
  const TransformConfig tcfg{cfg.head_dim};
  HeadMatrix k_t;
  HeadMatrix q_t;
  SmoothingFactors s = SmoothingFactors::identity(cfg.head_dim);
  switch (mode) {
    case TransformMode::None:
      k_t = keys;
      q_t = queries;
      break;
    case TransformMode::Smooth:
      s = calibrate_smoothing(keys, tcfg);
      k_t = smooth_keys(keys, s);
      q_t = smooth_query(queries, s);
      break;
    case TransformMode::Hadamard:
      k_t = hadamard_apply(keys);
      q_t = hadamard_apply(queries);
      break;
    case TransformMode::SmoothHadamard:
      s = calibrate_smoothing(keys, tcfg);
      k_t = transform_keys(keys, s);
      q_t = transform_query(queries, s);
      break;
    case TransformMode::HadamardSmooth:
      s = calibrate_smoothing(hadamard_apply(keys), tcfg);
      k_t = transform_keys_rotate_first(keys, s);
      q_t = transform_query_rotate_first(queries, s);
      break;
  }

  KMeansResult km;
  const Codebook cb = kmeans_train(to_subvectors(k_t, cfg.d), cfg, {opts.kmeans_iters, opts.seed, {}}, &km);
  const HeadMatrix k_hat_t = decode(encode(k_t, cb), cb);

  // Undo the key transform so reconstruction error is comparable across modes.
  HeadMatrix k_hat;
  switch (mode) {
    case TransformMode::None:
      k_hat = k_hat_t;
      break;
    case TransformMode::Smooth:
      k_hat = smooth_query(k_hat_t, s);
      break;
    case TransformMode::Hadamard:
      k_hat = hadamard_apply(k_hat_t);
      break;
    case TransformMode::SmoothHadamard:
      k_hat = smooth_query(hadamard_apply(k_hat_t), s);
      break;
    case TransformMode::HadamardSmooth:
      k_hat = hadamard_apply(smooth_query(k_hat_t, s));
      break;
  }

  AblationResult out;
  out.mse = (keys - k_hat).cast<double>().squaredNorm() / static_cast<double>(keys.size());
  const RowMatrix<double> exact = queries.cast<double>() * keys.cast<double>().transpose();
  const RowMatrix<double> approx = q_t.cast<double>() * k_hat_t.cast<double>().transpose();
  const double denom = exact.norm();
  out.score_error = denom > 0.0 ? (approx - exact).norm() / denom : (approx - exact).norm();
  out.codebook_objective = km.final_objective();
  return out;
}

}  // namespace vecinfer
