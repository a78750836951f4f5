#pragma once

// Dual equivalent transformation of queries and keys.
//
//   q~ = q . diag(lambda) . H_D
//   K~ = K . diag(lambda)^-1 . H_D
//
// H_D is the orthonormal Walsh-Hadamard matrix, so q~ K~^T = q K^T exactly.
// lambda_i = sqrt(max_t |K[t, i]|) flattens per-channel outliers in the keys;
// the rotation then spreads what is left across all channels.

#include <cmath>
#include <vector>

#include "vecinfer/types.hpp"

namespace vecinfer {

struct TransformConfig {
  Index head_dim = 128;
  float epsilon_floor = 1e-6f;
  // Informational: how many calibration tokens the caller intends to pool.
  Index calibration_token_budget = 256 * 512;
};

class SmoothingFactors {
 public:
  SmoothingFactors() = default;
  SmoothingFactors(Vector<float> lambda, float epsilon_floor);

  static SmoothingFactors identity(Index head_dim);

  const Vector<float>& lambda() const { return lambda_; }
  float epsilon_floor() const { return epsilon_floor_; }
  Index size() const { return lambda_.size(); }

 private:
  Vector<float> lambda_;
  float epsilon_floor_ = 1e-6f;
};

/// Dense orthonormal Walsh-Hadamard matrix of size 2^k, built by the
/// recursive block construction. Throws SizeError for k > 16.
template <typename Scalar = float>
RowMatrix<Scalar> walsh_hadamard_matrix(int k) {
  if (k < 0 || k > 16) throw SizeError("walsh_hadamard_matrix: k must be in [0, 16]");
  RowMatrix<Scalar> h(1, 1);
  h(0, 0) = Scalar(1);
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  for (int level = 0; level < k; ++level) {
    const Index n = h.rows();
    RowMatrix<Scalar> next(2 * n, 2 * n);
    next.topLeftCorner(n, n) = h;
    next.topRightCorner(n, n) = h;
    next.bottomLeftCorner(n, n) = h;
    next.bottomRightCorner(n, n) = -h;
    h = next * inv_sqrt2;
  }
  return h;
}

/// In-place normalized fast Walsh-Hadamard transform of one contiguous row:
/// row <- row . H_n. The butterflies run unscaled and the 1/sqrt(2) per level
/// is applied once at the end, which is exact when log2(n) is even.
template <typename Scalar>
void fwht_inplace(Scalar* row, Index n) {
  int levels = 0;
  for (Index h = 1; h < n; h *= 2, ++levels) {
    for (Index i = 0; i < n; i += 2 * h) {
      for (Index j = i; j < i + h; ++j) {
        const Scalar x = row[j];
        const Scalar y = row[j + h];
        row[j] = x + y;
        row[j + h] = x - y;
      }
    }
  }
  Scalar scale = std::ldexp(Scalar(1), -(levels / 2));
  if (levels % 2) scale /= std::sqrt(Scalar(2));
  for (Index j = 0; j < n; ++j) row[j] *= scale;
}

/// Right-multiplies every row of X by H_D in place. D must be a power of two.
template <typename Scalar>
void hadamard_rows_inplace(RowMatrix<Scalar>& x) {
  if (!is_power_of_two(x.cols())) {
    throw ShapeError("hadamard: head dimension must be a power of two");
  }
  for (Index r = 0; r < x.rows(); ++r) fwht_inplace(x.row(r).data(), x.cols());
}

/// Returns X . H_D using the O(N D log D) butterfly.
template <typename Derived>
RowMatrix<typename Derived::Scalar> hadamard_apply(const Eigen::MatrixBase<Derived>& x) {
  RowMatrix<typename Derived::Scalar> out = x;
  hadamard_rows_inplace(out);
  return out;
}

/// lambda[i] = sqrt(max over all pooled tokens of |samples[:, i]|), floored at
/// cfg.epsilon_floor. Channels that hit the floor are reported through
/// `floored_channels` when non-null.
SmoothingFactors calibrate_smoothing(const HeadMatrix& samples, const TransformConfig& cfg,
                                     std::vector<Index>* floored_channels = nullptr);

/// K . diag(lambda)^-1 . H_D
HeadMatrix transform_keys(const HeadMatrix& keys, const SmoothingFactors& s);

/// q . diag(lambda) . H_D
HeadMatrix transform_query(const HeadMatrix& query, const SmoothingFactors& s);

// Rotate-then-smooth ordering, used only for ablations. Here lambda must be
// calibrated on K . H_D.
HeadMatrix transform_keys_rotate_first(const HeadMatrix& keys, const SmoothingFactors& s);
HeadMatrix transform_query_rotate_first(const HeadMatrix& query, const SmoothingFactors& s);

// Smoothing alone, without rotation.
HeadMatrix smooth_keys(const HeadMatrix& keys, const SmoothingFactors& s);
HeadMatrix smooth_query(const HeadMatrix& query, const SmoothingFactors& s);

}  // namespace vecinfer
