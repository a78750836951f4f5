#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace vecinfer {

// Row-major dense storage: one token per row, head channels along columns.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using HeadMatrix = RowMatrix<float>;
using HeadRow = RowVector<float>;

// Centroid indices, one column per sub-vector. b <= 16 so uint16 always fits.
using CodeMatrix = RowMatrix<std::uint16_t>;

using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

inline bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

inline int log2_exact(Index n) {
  int k = 0;
  while ((Index{1} << k) < n) ++k;
  return k;
}

}  // namespace vecinfer
