#include "vecinfer/transform.hpp"

#include <string>

namespace vecinfer {

SmoothingFactors::SmoothingFactors(Vector<float> lambda, float epsilon_floor)
    : lambda_(std::move(lambda)), epsilon_floor_(epsilon_floor) {
  if (!(epsilon_floor_ > 0.0f)) throw CalibrationError("epsilon_floor must be positive");
  for (Index i = 0; i < lambda_.size(); ++i) {
    if (!std::isfinite(lambda_[i]) || lambda_[i] < epsilon_floor_) {
      throw CalibrationError("smoothing factor " + std::to_string(i) +
                             " is not finite or below epsilon_floor");
    }
  }
}

SmoothingFactors SmoothingFactors::identity(Index head_dim) {
  return SmoothingFactors(Vector<float>::Ones(head_dim), 1e-6f);
}

SmoothingFactors calibrate_smoothing(const HeadMatrix& samples, const TransformConfig& cfg,
                                     std::vector<Index>* floored_channels) {
  if (samples.rows() == 0) throw CalibrationError("calibrate_smoothing: empty sample set");
  if (samples.cols() != cfg.head_dim) {
    throw ShapeError("calibrate_smoothing: sample width " + std::to_string(samples.cols()) +
                     " does not match head_dim " + std::to_string(cfg.head_dim));
  }
  if (!samples.allFinite()) throw CalibrationError("calibrate_smoothing: non-finite sample");

  // std::sqrt is correctly rounded; Eigen's packet sqrt may be off by an ulp.
  Vector<float> lambda =
      samples.cwiseAbs().colwise().maxCoeff().transpose().unaryExpr([](float m) { return std::sqrt(m); });
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda[i] < cfg.epsilon_floor) {
      lambda[i] = cfg.epsilon_floor;
      if (floored_channels) floored_channels->push_back(i);
    }
  }
  return SmoothingFactors(std::move(lambda), cfg.epsilon_floor);
}

namespace {

void check_width(const HeadMatrix& x, const SmoothingFactors& s, const char* what) {
  if (x.cols() != s.size()) {
    throw ShapeError(std::string(what) + ": width " + std::to_string(x.cols()) +
                     " does not match smoothing factors of length " + std::to_string(s.size()));
  }
}

}  // namespace

HeadMatrix smooth_keys(const HeadMatrix& keys, const SmoothingFactors& s) {
  check_width(keys, s, "smooth_keys");
  return keys.array().rowwise() / s.lambda().transpose().array();
}

HeadMatrix smooth_query(const HeadMatrix& query, const SmoothingFactors& s) {
  check_width(query, s, "smooth_query");
  return query.array().rowwise() * s.lambda().transpose().array();
}

HeadMatrix transform_keys(const HeadMatrix& keys, const SmoothingFactors& s) {
  HeadMatrix out = smooth_keys(keys, s);
  hadamard_rows_inplace(out);
  return out;
}

HeadMatrix transform_query(const HeadMatrix& query, const SmoothingFactors& s) {
  HeadMatrix out = smooth_query(query, s);
  hadamard_rows_inplace(out);
  return out;
}

HeadMatrix transform_keys_rotate_first(const HeadMatrix& keys, const SmoothingFactors& s) {
  check_width(keys, s, "transform_keys_rotate_first");
  return smooth_keys(hadamard_apply(keys), s);
}

HeadMatrix transform_query_rotate_first(const HeadMatrix& query, const SmoothingFactors& s) {
  check_width(query, s, "transform_query_rotate_first");
  return smooth_query(hadamard_apply(query), s);
}

}  // namespace vecinfer
