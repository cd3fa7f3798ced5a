#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace ngkf {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Precondition violated by the caller: wrong dimensions, out-of-range rates.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain (boundary means, bad outcomes).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A matrix that must be factorized is singular or not positive-definite.
class SingularityError : public std::runtime_error {
 public:
  SingularityError(const std::string& what, double condition)
      : std::runtime_error(what + " (condition estimate " + std::to_string(condition) + ")"),
        condition_(condition) {}

  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

// Block decomposition of a covariance could not be reassembled.
class DecompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ContractError(message);
}

inline std::string dims(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace detail

// Max-row-sum norm; zero for empty matrices.
template <typename Derived>
typename Derived::RealScalar inf_norm(const Eigen::MatrixBase<Derived>& m) {
  using Real = typename Derived::RealScalar;
  if (m.size() == 0) return Real(0);
  return m.cwiseAbs().rowwise().sum().maxCoeff();
}

template <typename Derived>
typename Derived::RealScalar max_abs(const Eigen::MatrixBase<Derived>& m) {
  using Real = typename Derived::RealScalar;
  if (m.size() == 0) return Real(0);
  return m.cwiseAbs().maxCoeff();
}

template <typename Scalar>
Matrix<Scalar> symmetrized(const Matrix<Scalar>& m) {
  return (m + m.transpose()) / Scalar(2);
}

// Spectral condition number of a symmetric matrix; infinity when it is
// singular or indefinite.
template <typename Scalar>
Scalar spd_condition(const Matrix<Scalar>& m) {
  if (m.size() == 0) return Scalar(1);
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(m, Eigen::EigenvaluesOnly);
  const Scalar lo = eig.eigenvalues().minCoeff();
  const Scalar hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (!(lo > Scalar(0))) return std::numeric_limits<Scalar>::infinity();
  return hi / lo;
}

// Cholesky factorization that reports failure instead of returning garbage.
template <typename Scalar>
Eigen::LLT<Matrix<Scalar>> spd_factor(const Matrix<Scalar>& m, const std::string& what) {
  Eigen::LLT<Matrix<Scalar>> llt(m);
  if (llt.info() != Eigen::Success || !m.allFinite()) {
    throw SingularityError(what + " is not positive-definite",
                           static_cast<double>(spd_condition<Scalar>(m)));
  }
  // LLT succeeds on some numerically singular matrices; reject those too.
  const Vector<Scalar> diag = llt.matrixLLT().diagonal();
  if (diag.size() > 0) {
    const Scalar ratio = diag.cwiseAbs().minCoeff() / diag.cwiseAbs().maxCoeff();
    if (!(ratio * ratio > Scalar(16) * std::numeric_limits<Scalar>::epsilon())) {
      throw SingularityError(what + " is numerically singular",
                             static_cast<double>(spd_condition<Scalar>(m)));
    }
  }
  return llt;
}

template <typename Scalar>
Matrix<Scalar> spd_inverse(const Matrix<Scalar>& m, const std::string& what) {
  auto llt = spd_factor<Scalar>(m, what);
  return symmetrized<Scalar>(llt.solve(Matrix<Scalar>::Identity(m.rows(), m.cols())));
}

}  // namespace ngkf
