#pragma once

// Distribution diagnostics for key caches: channel maxima, tail weight, and
// how much a Hadamard rotation flattens them.

#include <cstdint>
#include <string_view>

#include "vecinfer/vq.hpp"

namespace vecinfer {

struct DistributionReport {
  Vector<float> per_channel_max;  // max |K[:, c]|
  Vector<float> per_channel_p99;  // 99th percentile of |K[:, c]|, linear interpolation
  double global_outlier_ratio = 0.0;  // max |K| / RMS(K)
  double excess_kurtosis = 0.0;       // population estimator over all entries
  // Max over rows of |mean(row(K H)^2) - |K_i|^2 / D|, divided by |K_i|^2 / D.
  // Zero in exact arithmetic for any K.
  double row_ms_error = 0.0;
};

/// Requires N >= 2 and a power-of-two head dimension. Throws
/// DegenerateInputError when every entry is identical.
DistributionReport distribution_report(const HeadMatrix& keys);

struct Lemma1Check {
  double kurtosis_before = 0.0;
  double kurtosis_after = 0.0;
  double outlier_ratio_before = 0.0;
  double outlier_ratio_after = 0.0;
  bool heavy_tailed = false;  // excess kurtosis before > 1
  // For heavy-tailed inputs both statistics must drop; otherwise vacuous.
  bool holds = true;
};

Lemma1Check lemma1_check(const HeadMatrix& keys);

enum class TransformMode { None, Smooth, Hadamard, HadamardSmooth, SmoothHadamard };

/// Accepts none, s, h, hs, sh (and S, H, H+S, S+H).
TransformMode parse_transform_mode(std::string_view name);
std::string_view transform_mode_name(TransformMode mode);

struct AblationOptions {
  int kmeans_iters = 30;
  std::uint64_t seed = 0;
};

struct AblationResult {
  double mse = 0.0;          // key reconstruction error, mapped back to the raw key domain
  double score_error = 0.0;  // |q K^^T - q K^T|_F / |q K^T|_F
  double codebook_objective = 0.0;
};

/// Transforms keys and queries per `mode` (smoothing calibrated on the keys
/// being transformed), trains a codebook on the transformed keys and measures
/// how well quantized scores track exact ones.
AblationResult transform_ablation(const HeadMatrix& keys, const HeadMatrix& queries, const VQConfig& cfg,
                                  TransformMode mode, const AblationOptions& opts = {});

}  // namespace vecinfer
