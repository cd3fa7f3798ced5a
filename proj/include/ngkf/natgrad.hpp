#pragma once

// Online natural gradient: Fisher estimate update, preconditioned parameter
// step, learning-rate schedules and their fading-memory counterparts, and the
// prior-regularized step.

#include "ngkf/expfam.hpp"
#include "ngkf/models.hpp"
#include "ngkf/rng.hpp"
#include "ngkf/types.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>

namespace ngkf {

template <typename Scalar>
struct NatGradState {
  Vector<Scalar> theta;
  Matrix<Scalar> J;
  int t = 0;  // completed steps; the next update is step t + 1
};

enum class ScheduleKind { OneOverTPlusC, Constant, PowerLaw };

// Learning rates eta_t for t >= 0. The metric decay rate gamma_t equals eta_t
// unless set independently by the caller.
template <typename Scalar>
class RateSchedule {
 public:
  // eta_t = 1 / (t + c)
  static RateSchedule one_over_t_plus_c(Scalar c) {
    detail::require(c >= Scalar(1), "1/(t+c) schedule needs c >= 1 so that eta_0 <= 1");
    return RateSchedule(ScheduleKind::OneOverTPlusC, c, Scalar(1));
  }
  static RateSchedule constant(Scalar eta) {
    detail::require(eta > Scalar(0) && eta <= Scalar(1), "constant rate must lie in (0,1]");
    return RateSchedule(ScheduleKind::Constant, eta, Scalar(0));
  }
  // eta_t = (t + c)^(-alpha)
  static RateSchedule power_law(Scalar alpha, Scalar c) {
    detail::require(alpha > Scalar(0) && alpha <= Scalar(1), "power-law exponent must lie in (0,1]");
    detail::require(c >= Scalar(1), "power-law schedule needs c >= 1 so that eta_0 <= 1");
    return RateSchedule(ScheduleKind::PowerLaw, c, alpha);
  }

  // Same rates for t >= 1 with eta_0 replaced.
  RateSchedule with_eta0(Scalar eta0) const {
    detail::require(eta0 > Scalar(0) && eta0 <= Scalar(1), "eta_0 must lie in (0,1]");
    RateSchedule s = *this;
    s.eta0_ = eta0;
    return s;
  }

  ScheduleKind kind() const { return kind_; }
  Scalar parameter() const { return param_; }
  Scalar exponent() const { return alpha_; }
  // True when eta_0 was replaced by a value different from the formula's.
  bool eta0_overridden() const { return eta0_.has_value() && *eta0_ != base_eta(0); }

  Scalar eta(int t) const {
    detail::require(t >= 0, "schedule index must be >= 0");
    if (t == 0 && eta0_) return *eta0_;
    return base_eta(t);
  }

 private:
  Scalar base_eta(int t) const {
    switch (kind_) {
      case ScheduleKind::OneOverTPlusC: return Scalar(1) / (Scalar(t) + param_);
      case ScheduleKind::Constant: return param_;
      case ScheduleKind::PowerLaw: return std::pow(Scalar(t) + param_, -alpha_);
    }
    return Scalar(0);
  }

  RateSchedule(ScheduleKind kind, Scalar param, Scalar alpha)
      : kind_(kind), param_(param), alpha_(alpha) {}

  ScheduleKind kind_;
  Scalar param_;
  Scalar alpha_;
  std::optional<Scalar> eta0_;
};

// Fading factor lambda_t with 1 - lambda_t = eta_{t-1}/eta_t - eta_{t-1}.
// The 1/(t+c) and constant schedules use their exact closed forms.
template <typename Scalar>
Scalar rate_to_decay(const RateSchedule<Scalar>& schedule, int t) {
  detail::require(t >= 1, "decay factors are defined for t >= 1");
  if (t >= 2 || !schedule.eta0_overridden()) {
    if (schedule.kind() == ScheduleKind::OneOverTPlusC) return Scalar(0);
    if (schedule.kind() == ScheduleKind::Constant) return schedule.parameter();
  }
  const Scalar prev = schedule.eta(t - 1), cur = schedule.eta(t);
  const Scalar keep = prev / cur - prev;
  if (!(keep > Scalar(0)))
    throw ContractError("schedule decays too fast at t=" + std::to_string(t) +
                        ": 1 - lambda = " + std::to_string(double(keep)));
  return Scalar(1) - keep;
}

// eta_t from decay factors lambda_1..lambda_t via S_0 = 1/eta_0,
// S_k = (1 - lambda_k) S_{k-1} + 1, eta_t = 1/S_t.
template <typename Scalar>
Scalar decay_to_rate(std::span<const Scalar> lambdas, Scalar eta0, int t) {
  detail::require(eta0 > Scalar(0) && eta0 <= Scalar(1), "eta_0 must lie in (0,1]");
  detail::require(t >= 0 && static_cast<std::size_t>(t) <= lambdas.size(),
                  "need lambda_1..lambda_t to compute eta_t");
  Scalar weight = Scalar(1) / eta0;
  for (int k = 0; k < t; ++k) weight = (Scalar(1) - lambdas[k]) * weight + Scalar(1);
  return Scalar(1) / weight;
}

template <typename Scalar>
struct PriorSpec {
  Vector<Scalar> theta_prior;
  Matrix<Scalar> sigma0;
  Scalar n_prior = Scalar(0);

  void check(Eigen::Index dim) const {
    detail::require(theta_prior.size() == dim && sigma0.rows() == dim && sigma0.cols() == dim,
                    "prior dimensions do not match the parameter (" + std::to_string(dim) + ")");
    detail::require(n_prior >= Scalar(0), "prior weight n_prior must be >= 0");
    spd_factor<Scalar>(sigma0, "prior covariance");
  }
};

enum class EstimatorKind { ExactExpectation, MonteCarloOne, OuterProduct };

// How E_y[(dl/dtheta)^T (dl/dtheta)] is estimated. MonteCarloOne draws one
// synthetic y per update from its own stream.
template <typename Scalar>
class FisherEstimator {
 public:
  static FisherEstimator exact() { return FisherEstimator(EstimatorKind::ExactExpectation); }
  static FisherEstimator outer_product() { return FisherEstimator(EstimatorKind::OuterProduct); }
  static FisherEstimator monte_carlo(std::uint64_t seed) {
    FisherEstimator e(EstimatorKind::MonteCarloOne);
    e.rng_.emplace(seed, Stream::MonteCarloFisher);
    return e;
  }

  EstimatorKind kind() const { return kind_; }

  // Fisher term for prediction y_hat with Jacobian `jac` (dy_hat/dtheta).
  Matrix<Scalar> term(const ExpFamModel<Scalar>& family, const Vector<Scalar>& y_hat,
                      const Matrix<Scalar>& jac, const Vector<Scalar>& y_observed) {
    switch (kind_) {
      case EstimatorKind::ExactExpectation: {
        const auto llt = spd_factor<Scalar>(stat_covariance(family, y_hat), "statistic covariance");
        return symmetrized<Scalar>(jac.transpose() * llt.solve(jac));
      }
      case EstimatorKind::MonteCarloOne: {
        const Vector<Scalar> draw = sample(family, y_hat, *rng_);
        const RowVector<Scalar> g = loss_grad_mean(family, draw, y_hat) * jac;
        return g.transpose() * g;
      }
      case EstimatorKind::OuterProduct: {
        const RowVector<Scalar> g = loss_grad_mean(family, y_observed, y_hat) * jac;
        return g.transpose() * g;
      }
    }
    return {};
  }

 private:
  explicit FisherEstimator(EstimatorKind kind) : kind_(kind) {}

  EstimatorKind kind_;
  std::optional<Rng> rng_;
};

// J0 recommendation: identity for linear models, diag(fan-in) for networks.
template <typename Scalar>
Matrix<Scalar> default_fisher_init(const StaticModel<Scalar>& model) {
  if (model.kind() == StaticKind::Linear)
    return Matrix<Scalar>::Identity(model.param_dim(), model.param_dim());
  return model.fan_in().asDiagonal();
}

// J <- (1 - gamma) J + gamma * E_y[(dl/dtheta)^{x2}] at the current theta.
template <typename Scalar>
NatGradState<Scalar> fisher_update(NatGradState<Scalar> state, const StaticModel<Scalar>& model,
                                   const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                                   const Vector<Scalar>& y, Scalar gamma,
                                   FisherEstimator<Scalar>& estimator) {
  if (!(gamma > Scalar(0) && gamma <= Scalar(1)))
    throw ContractError("metric decay rate must lie in (0,1], got " + std::to_string(double(gamma)));
  const Vector<Scalar> y_hat = predict(model, state.theta, u);
  const Matrix<Scalar> jac = jacobian_theta(model, state.theta, u);
  detail::require(state.J.rows() == jac.cols() && state.J.cols() == jac.cols(),
                  "Fisher estimate has wrong dimensions");
  state.J = symmetrized<Scalar>((Scalar(1) - gamma) * state.J +
                                gamma * estimator.term(family, y_hat, jac, y));
  return state;
}

namespace detail {

template <typename Scalar>
RowVector<Scalar> loss_gradient(const StaticModel<Scalar>& model,
                                const ExpFamModel<Scalar>& family, const Vector<Scalar>& theta,
                                const Vector<Scalar>& u, const Vector<Scalar>& y) {
  const Vector<Scalar> y_hat = predict(model, theta, u);
  return loss_grad_mean(family, y, y_hat) * jacobian_theta(model, theta, u);
}

}  // namespace detail

// theta <- theta - eta J^{-1} (dl/dtheta)^T; advances t.
template <typename Scalar>
NatGradState<Scalar> param_update(NatGradState<Scalar> state, const StaticModel<Scalar>& model,
                                  const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                                  const Vector<Scalar>& y, Scalar eta) {
  const RowVector<Scalar> grad = detail::loss_gradient(model, family, state.theta, u, y);
  Eigen::LLT<Matrix<Scalar>> llt;
  try {
    llt = spd_factor<Scalar>(state.J, "Fisher estimate");
  } catch (const SingularityError& e) {
    throw SingularityError(std::string(e.what()) + "; use a prior-regularized step",
                           e.condition());
  }
  state.theta -= eta * llt.solve(Vector<Scalar>(grad.transpose()));
  state.t += 1;
  return state;
}

// One full step in the required order: metric first, then parameter.
template <typename Scalar>
NatGradState<Scalar> natgrad_step(NatGradState<Scalar> state, const StaticModel<Scalar>& model,
                                  const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                                  const Vector<Scalar>& y, Scalar eta, Scalar gamma,
                                  FisherEstimator<Scalar>& estimator) {
  state = fisher_update(std::move(state), model, family, u, y, gamma, estimator);
  return param_update(std::move(state), model, family, u, y, eta);
}

// Parameter step with the prior-regularized preconditioner
// (J + eta n_prior Sigma0^{-1}) and the weight-decay pull
// lambda n_prior Sigma0^{-1} (theta - theta_prior). Assumes J is already
// updated for this step. n_prior = 0 is exactly param_update.
template <typename Scalar>
NatGradState<Scalar> regularized_param_update(NatGradState<Scalar> state,
                                              const StaticModel<Scalar>& model,
                                              const ExpFamModel<Scalar>& family,
                                              const Vector<Scalar>& u, const Vector<Scalar>& y,
                                              Scalar eta, Scalar lambda,
                                              const PriorSpec<Scalar>& prior) {
  if (prior.n_prior == Scalar(0)) return param_update(std::move(state), model, family, u, y, eta);
  prior.check(state.theta.size());
  const Matrix<Scalar> prior_info = spd_inverse<Scalar>(prior.sigma0, "prior covariance");
  const RowVector<Scalar> grad = detail::loss_gradient(model, family, state.theta, u, y);
  const Matrix<Scalar> precond = symmetrized<Scalar>(state.J + eta * prior.n_prior * prior_info);
  const Vector<Scalar> direction =
      grad.transpose() + lambda * prior.n_prior * (prior_info * (state.theta - prior.theta_prior));
  state.theta -= eta * spd_factor<Scalar>(precond, "regularized Fisher estimate").solve(direction);
  state.t += 1;
  return state;
}

// Full regularized step at t = state.t + 1 with gamma_t = eta_t.
template <typename Scalar>
NatGradState<Scalar> regularized_step(NatGradState<Scalar> state, const StaticModel<Scalar>& model,
                                      const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                                      const Vector<Scalar>& y, const RateSchedule<Scalar>& schedule,
                                      const PriorSpec<Scalar>& prior,
                                      FisherEstimator<Scalar>& estimator) {
  const int t = state.t + 1;
  const Scalar eta = schedule.eta(t);
  const Scalar lambda = rate_to_decay(schedule, t);
  state = fisher_update(std::move(state), model, family, u, y, eta, estimator);
  return regularized_param_update(std::move(state), model, family, u, y, eta, lambda, prior);
}

}  // namespace ngkf
