#pragma once

#include <Eigen/Core>

namespace gpca {

using Index = Eigen::Index;

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = DenseMatrix<double>;
using Vector = DenseVector<double>;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

}  // namespace gpca
