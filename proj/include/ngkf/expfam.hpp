#pragma once

// Output-noise models: exponential families in mean parameterization.
//
// Observations are passed as vectors:
//   GaussianKnownCov  y in R^d
//   Bernoulli         y = (0) or (1)
//   Categorical(K)    y = (k) with k in {1, ..., K}
// The mean parameter has stat_dim() entries; for Categorical it holds the
// probabilities of classes 1..K-1 and class K is the reference.

#include "ngkf/rng.hpp"
#include "ngkf/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ngkf {

enum class FamilyKind { GaussianKnownCov, Bernoulli, Categorical };

inline const char* to_string(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::GaussianKnownCov: return "gaussian";
    case FamilyKind::Bernoulli: return "bernoulli";
    case FamilyKind::Categorical: return "categorical";
  }
  return "?";
}

template <typename Scalar>
class ExpFamModel {
 public:
  // Means closer than this to the simplex boundary are rejected.
  static constexpr double kBoundaryGuard = 1e-9;

  static ExpFamModel gaussian(Matrix<Scalar> fixed_cov) {
    detail::require(fixed_cov.rows() == fixed_cov.cols() && fixed_cov.rows() > 0,
                    "gaussian covariance must be square and non-empty, got " +
                        detail::dims(fixed_cov.rows(), fixed_cov.cols()));
    detail::require(max_abs(Matrix<Scalar>(fixed_cov - fixed_cov.transpose())) <=
                        Scalar(1e-12) * (Scalar(1) + max_abs(fixed_cov)),
                    "gaussian covariance must be symmetric");
    ExpFamModel m(FamilyKind::GaussianKnownCov, fixed_cov.rows());
    m.cov_factor_ = spd_factor<Scalar>(fixed_cov, "gaussian covariance");
    m.log_det_cov_ = Scalar(2) * m.cov_factor_->matrixLLT().diagonal().array().log().sum();
    m.fixed_cov_ = std::move(fixed_cov);
    return m;
  }

  static ExpFamModel gaussian_identity(Eigen::Index dim) {
    return gaussian(Matrix<Scalar>::Identity(dim, dim));
  }

  static ExpFamModel bernoulli() { return ExpFamModel(FamilyKind::Bernoulli, 1); }

  static ExpFamModel categorical(int classes) {
    detail::require(classes >= 2, "categorical family needs K >= 2 classes");
    ExpFamModel m(FamilyKind::Categorical, classes - 1);
    m.classes_ = classes;
    return m;
  }

  FamilyKind kind() const { return kind_; }
  Eigen::Index stat_dim() const { return stat_dim_; }
  int classes() const { return classes_; }
  const Matrix<Scalar>& fixed_cov() const { return fixed_cov_; }
  bool is_discrete() const { return kind_ != FamilyKind::GaussianKnownCov; }

  // Throws DomainError unless mean is a valid interior mean parameter. With
  // boundary_is_singular, means on the closed boundary raise SingularityError
  // instead (the statistic covariance degenerates there).
  void check_mean(const Vector<Scalar>& mean, bool boundary_is_singular = false) const {
    if (mean.size() != stat_dim_) {
      throw ContractError("mean parameter has dimension " + std::to_string(mean.size()) +
                          ", family expects " + std::to_string(stat_dim_));
    }
    if (!mean.allFinite()) throw DomainError("mean parameter is not finite");
    const Scalar guard(kBoundaryGuard);
    auto fail = [&](bool on_closed_boundary, const std::string& msg) {
      if (boundary_is_singular && on_closed_boundary) throw SingularityError(msg, std::numeric_limits<double>::infinity());
      throw DomainError(msg);
    };
    switch (kind_) {
      case FamilyKind::GaussianKnownCov: return;
      case FamilyKind::Bernoulli:
        if (!(mean(0) > guard && mean(0) < Scalar(1) - guard))
          fail(mean(0) >= Scalar(0) && mean(0) <= Scalar(1),
               "bernoulli mean must lie in (0,1), got " + std::to_string(double(mean(0))));
        return;
      case FamilyKind::Categorical:
        if (!(mean.minCoeff() > guard && Scalar(1) - mean.sum() > guard))
          fail(mean.minCoeff() >= Scalar(0) && mean.sum() <= Scalar(1),
               "categorical mean must lie in the open probability simplex");
        return;
    }
  }

  // Support check; returns the class index for discrete families.
  int check_observation(const Vector<Scalar>& y) const {
    switch (kind_) {
      case FamilyKind::GaussianKnownCov:
        if (y.size() != stat_dim_)
          throw DomainError("gaussian observation has dimension " + std::to_string(y.size()) +
                            ", expected " + std::to_string(stat_dim_));
        if (!y.allFinite()) throw DomainError("gaussian observation is not finite");
        return 0;
      case FamilyKind::Bernoulli:
        if (y.size() != 1 || !(y(0) == Scalar(0) || y(0) == Scalar(1)))
          throw DomainError("bernoulli observation must be 0 or 1");
        return static_cast<int>(y(0));
      case FamilyKind::Categorical: {
        if (y.size() != 1) throw DomainError("categorical observation must be a single class index");
        const Scalar k = y(0);
        if (!(k >= Scalar(1) && k <= Scalar(classes_) && k == std::floor(k)))
          throw DomainError("categorical observation must be a class index in 1.." +
                            std::to_string(classes_));
        return static_cast<int>(k);
      }
    }
    return 0;
  }

 private:
  ExpFamModel(FamilyKind kind, Eigen::Index stat_dim) : kind_(kind), stat_dim_(stat_dim) {}

  FamilyKind kind_;
  Eigen::Index stat_dim_;
  int classes_ = 0;
  Matrix<Scalar> fixed_cov_;
  std::optional<Eigen::LLT<Matrix<Scalar>>> cov_factor_;
  Scalar log_det_cov_ = Scalar(0);

  template <typename S>
  friend S log_likelihood(const ExpFamModel<S>&, const Vector<S>&, const Vector<S>&);
  template <typename S>
  friend RowVector<S> loss_grad_mean(const ExpFamModel<S>&, const Vector<S>&, const Vector<S>&);
};

template <typename Scalar>
Vector<Scalar> sufficient_stats(const ExpFamModel<Scalar>& model, const Vector<Scalar>& y) {
  const int k = model.check_observation(y);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: return y;
    case FamilyKind::Bernoulli: return Vector<Scalar>::Constant(1, Scalar(k));
    case FamilyKind::Categorical: {
      Vector<Scalar> t = Vector<Scalar>::Zero(model.stat_dim());
      if (k < model.classes()) t(k - 1) = Scalar(1);
      return t;
    }
  }
  return {};
}

// Loss l(y) = -ln p(y | mean), normalization constants included.
template <typename Scalar>
Scalar log_likelihood(const ExpFamModel<Scalar>& model, const Vector<Scalar>& y,
                      const Vector<Scalar>& mean) {
  model.check_mean(mean);
  const int k = model.check_observation(y);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: {
      const Vector<Scalar> r = y - mean;
      const Scalar quad = r.dot(model.cov_factor_->solve(r));
      const Scalar d = static_cast<Scalar>(model.stat_dim());
      return quad / Scalar(2) + d / Scalar(2) * std::log(Scalar(2) * std::numbers::pi_v<Scalar>) +
             model.log_det_cov_ / Scalar(2);
    }
    case FamilyKind::Bernoulli:
      return k == 1 ? -std::log(mean(0)) : -std::log1p(-mean(0));
    case FamilyKind::Categorical:
      return k < model.classes() ? -std::log(mean(k - 1)) : -std::log(Scalar(1) - mean.sum());
  }
  return Scalar(0);
}

// Covariance R of the sufficient statistics at the given mean.
template <typename Scalar>
Matrix<Scalar> stat_covariance(const ExpFamModel<Scalar>& model, const Vector<Scalar>& mean) {
  model.check_mean(mean, true);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: return model.fixed_cov();
    case FamilyKind::Bernoulli: return Matrix<Scalar>::Constant(1, 1, mean(0) * (Scalar(1) - mean(0)));
    case FamilyKind::Categorical: {
      Matrix<Scalar> r = -mean * mean.transpose();
      r.diagonal() += mean;
      return r;
    }
  }
  return {};
}

// Row vector dl/dmean from the closed-form density. Satisfies
// T(y) - mean = -R * grad^T.
template <typename Scalar>
RowVector<Scalar> loss_grad_mean(const ExpFamModel<Scalar>& model, const Vector<Scalar>& y,
                                 const Vector<Scalar>& mean) {
  model.check_mean(mean);
  const int k = model.check_observation(y);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov:
      return model.cov_factor_->solve(Vector<Scalar>(mean - y)).transpose();
    case FamilyKind::Bernoulli: {
      const Scalar p = mean(0);
      return RowVector<Scalar>::Constant(1, k == 1 ? -Scalar(1) / p : Scalar(1) / (Scalar(1) - p));
    }
    case FamilyKind::Categorical: {
      if (k < model.classes()) {
        RowVector<Scalar> g = RowVector<Scalar>::Zero(model.stat_dim());
        g(k - 1) = -Scalar(1) / mean(k - 1);
        return g;
      }
      return RowVector<Scalar>::Constant(model.stat_dim(), Scalar(1) / (Scalar(1) - mean.sum()));
    }
  }
  return {};
}

// Fisher matrix of y with respect to the mean parameter: R(mean)^{-1}.
template <typename Scalar>
Matrix<Scalar> fisher_wrt_mean(const ExpFamModel<Scalar>& model, const Vector<Scalar>& mean) {
  model.check_mean(mean, true);
  return spd_inverse<Scalar>(stat_covariance(model, mean), "statistic covariance");
}

template <typename Scalar>
struct NaturalRoundTrip {
  Vector<Scalar> natural;
  Vector<Scalar> recovered_mean;
};

// Natural parameter of the mean via the closed-form link, and back.
template <typename Scalar>
Vector<Scalar> mean_to_natural(const ExpFamModel<Scalar>& model, const Vector<Scalar>& mean) {
  model.check_mean(mean);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: {
      auto llt = spd_factor<Scalar>(model.fixed_cov(), "gaussian covariance");
      return llt.solve(mean);
    }
    case FamilyKind::Bernoulli:
      return Vector<Scalar>::Constant(1, std::log(mean(0)) - std::log1p(-mean(0)));
    case FamilyKind::Categorical:
      return (mean.array().log() - std::log(Scalar(1) - mean.sum())).matrix();
  }
  return {};
}

template <typename Scalar>
Vector<Scalar> natural_to_mean(const ExpFamModel<Scalar>& model, const Vector<Scalar>& natural) {
  detail::require(natural.size() == model.stat_dim(), "natural parameter has wrong dimension");
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: return model.fixed_cov() * natural;
    case FamilyKind::Bernoulli:
      return Vector<Scalar>::Constant(1, Scalar(1) / (Scalar(1) + std::exp(-natural(0))));
    case FamilyKind::Categorical: {
      // Reference class K has natural parameter 0.
      const Scalar shift = std::max(Scalar(0), natural.maxCoeff());
      const Vector<Scalar> e = (natural.array() - shift).exp().matrix();
      const Scalar z = e.sum() + std::exp(-shift);
      return e / z;
    }
  }
  return {};
}

template <typename Scalar>
NaturalRoundTrip<Scalar> mean_natural_roundtrip(const ExpFamModel<Scalar>& model,
                                                const Vector<Scalar>& mean) {
  Vector<Scalar> natural = mean_to_natural(model, mean);
  Vector<Scalar> recovered = natural_to_mean(model, natural);
  return {std::move(natural), std::move(recovered)};
}

// Draw y ~ p(. | mean). Gaussian draws use the Cholesky factor of the fixed
// covariance.
template <typename Scalar>
Vector<Scalar> sample(const ExpFamModel<Scalar>& model, const Vector<Scalar>& mean, Rng& rng) {
  model.check_mean(mean);
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov: {
      Eigen::LLT<Matrix<Scalar>> llt(model.fixed_cov());
      return mean + llt.matrixL() * rng.normal_vector<Scalar>(model.stat_dim());
    }
    case FamilyKind::Bernoulli:
      return Vector<Scalar>::Constant(1, Scalar(rng.uniform()) < mean(0) ? Scalar(1) : Scalar(0));
    case FamilyKind::Categorical: {
      const Scalar u(rng.uniform());
      Scalar acc(0);
      for (Eigen::Index k = 0; k < mean.size(); ++k) {
        acc += mean(k);
        if (u < acc) return Vector<Scalar>::Constant(1, Scalar(k + 1));
      }
      return Vector<Scalar>::Constant(1, Scalar(model.classes()));
    }
  }
  return {};
}

// All outcomes of a discrete family with their probabilities.
template <typename Scalar>
std::vector<std::pair<Vector<Scalar>, Scalar>> enumerate_outcomes(const ExpFamModel<Scalar>& model,
                                                                 const Vector<Scalar>& mean) {
  model.check_mean(mean);
  std::vector<std::pair<Vector<Scalar>, Scalar>> out;
  switch (model.kind()) {
    case FamilyKind::GaussianKnownCov:
      throw ContractError("gaussian family has no finite outcome set");
    case FamilyKind::Bernoulli:
      out.emplace_back(Vector<Scalar>::Constant(1, Scalar(0)), Scalar(1) - mean(0));
      out.emplace_back(Vector<Scalar>::Constant(1, Scalar(1)), mean(0));
      break;
    case FamilyKind::Categorical:
      for (int k = 1; k < model.classes(); ++k)
        out.emplace_back(Vector<Scalar>::Constant(1, Scalar(k)), mean(k - 1));
      out.emplace_back(Vector<Scalar>::Constant(1, Scalar(model.classes())), Scalar(1) - mean.sum());
      break;
  }
  return out;
}

}  // namespace ngkf
