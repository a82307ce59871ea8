#pragma once

#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "hice/common.hpp"

// Closed-form ridge regression W = (FᵀF + λI)⁻¹ FᵀY and its dual
// W = Fᵀ(FFᵀ + λI)⁻¹Y. The two are algebraically identical; the dual only
// factors an n×n system, which is what makes M = 10000 projections cheap
// when there are fewer rows than projected features.

namespace hice::ridge {

enum class Form { Auto, Primal, Dual };

template <typename Scalar>
bool all_finite(const Matrix<Scalar>& m) {
  return m.allFinite();
}

template <typename Scalar>
Matrix<Scalar> solve_primal(const Matrix<Scalar>& features, const Matrix<Scalar>& targets,
                            Scalar lambda) {
  const Eigen::Index m = features.cols();
  Matrix<Scalar> gram = features.transpose() * features;
  gram.diagonal().array() += lambda;
  Eigen::LLT<Matrix<Scalar>> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw SolverError("ridge: primal Cholesky factorization failed (M=" + std::to_string(m) + ")");
  }
  const Matrix<Scalar> rhs = features.transpose() * targets;
  Matrix<Scalar> weights = llt.solve(rhs);
  // One step of iterative refinement.
  weights += llt.solve(rhs - (features.transpose() * (features * weights) + lambda * weights));
  return weights;
}

template <typename Scalar>
Matrix<Scalar> solve_dual(const Matrix<Scalar>& features, const Matrix<Scalar>& targets,
                          Scalar lambda) {
  const Eigen::Index n = features.rows();
  Matrix<Scalar> kernel = features * features.transpose();
  kernel.diagonal().array() += lambda;
  Eigen::LLT<Matrix<Scalar>> llt(kernel);
  if (llt.info() != Eigen::Success) {
    throw SolverError("ridge: dual Cholesky factorization failed (n=" + std::to_string(n) + ")");
  }
  Matrix<Scalar> alpha = llt.solve(targets);
  alpha += llt.solve(targets - (features * (features.transpose() * alpha) + lambda * alpha));
  return features.transpose() * alpha;
}

// ‖(FᵀF + λI)W − FᵀY‖_F / ‖FᵀY‖_F without materializing FᵀF.
template <typename Scalar>
Scalar normal_equation_residual(const Matrix<Scalar>& features, const Matrix<Scalar>& targets,
                                const Matrix<Scalar>& weights, Scalar lambda) {
  const Matrix<Scalar> rhs = features.transpose() * targets;
  const Matrix<Scalar> lhs =
      features.transpose() * (features * weights) + lambda * weights;
  const Scalar denom = rhs.norm();
  const Scalar num = (lhs - rhs).norm();
  return denom > Scalar(0) ? num / denom : num;
}

template <typename Scalar>
Matrix<Scalar> fit(const Matrix<Scalar>& features, const Matrix<Scalar>& targets, Scalar lambda,
                   Form form = Form::Auto) {
  if (!(lambda > Scalar(0)) || !std::isfinite(static_cast<double>(lambda))) {
    throw ValidationError("ridge: lambda must be positive and finite");
  }
  if (features.rows() != targets.rows()) {
    throw DimensionError("ridge: features and targets have different row counts");
  }
  if (features.rows() == 0 || features.cols() == 0) {
    throw DimensionError("ridge: empty design matrix");
  }
  if (!features.allFinite() || !targets.allFinite()) {
    throw ValidationError("ridge: non-finite input");
  }
  if (form == Form::Auto) {
    form = features.rows() < features.cols() ? Form::Dual : Form::Primal;
  }
  Matrix<Scalar> weights = form == Form::Dual ? solve_dual(features, targets, lambda)
                                              : solve_primal(features, targets, lambda);
  if (!weights.allFinite()) throw SolverError("ridge: solution is not finite");
  return weights;
}

}  // namespace hice::ridge
