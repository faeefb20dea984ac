#pragma once

// Thin Eigen views over raw row-major buffers. Private to the implementation.

#include <Eigen/Core>

namespace cifs::linalg {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using MatrixView = Eigen::Map<RowMatrix<Real>>;

template <typename Real>
using ConstMatrixView = Eigen::Map<const RowMatrix<Real>>;

template <typename Real>
MatrixView<Real> view(Real* data, Eigen::Index rows, Eigen::Index cols) {
  return MatrixView<Real>(data, rows, cols);
}

template <typename Real>
ConstMatrixView<Real> view(const Real* data, Eigen::Index rows, Eigen::Index cols) {
  return ConstMatrixView<Real>(data, rows, cols);
}

}  // namespace cifs::linalg
