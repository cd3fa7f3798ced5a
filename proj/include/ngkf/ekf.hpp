#pragma once

// Extended Kalman filter with exponential-family observation noise.
//
// A step is transition() followed by observe(). The transition evaluates the
// prediction and its Jacobian at the predicted state, so observe() only needs
// the partial trace it returns. Processes supply
//   Vector advance(s, u)       Matrix advance_jacobian(s, u)
//   Vector measure(s, u)       Matrix measure_jacobian(s, u)

#include "ngkf/expfam.hpp"
#include "ngkf/models.hpp"
#include "ngkf/types.hpp"

#include <optional>
#include <string>
#include <utility>

namespace ngkf {

enum class FilterMode { Static, Recurrent };

template <typename Scalar>
struct EkfState {
  Vector<Scalar> s;
  Matrix<Scalar> P;
  Matrix<Scalar> Q;  // empty means zero process noise
  FilterMode mode = FilterMode::Static;
};

template <typename Scalar>
struct StepTrace {
  Matrix<Scalar> F;
  Matrix<Scalar> H;
  Vector<Scalar> E;
  Matrix<Scalar> R;
  Matrix<Scalar> K;
  Vector<Scalar> y_hat;
  Vector<Scalar> s_pred;
  Matrix<Scalar> P_pred;
  Scalar innovation_condition = Scalar(1);
};

// Solves above this innovation condition estimate are flagged; equivalence
// tolerances assume well-conditioned steps.
inline constexpr double kConditionWarning = 1e12;

// f = Id and h = the static model: the filter estimates a fixed parameter.
template <typename Scalar>
class StaticProcess {
 public:
  static constexpr FilterMode kMode = FilterMode::Static;

  explicit StaticProcess(const StaticModel<Scalar>& model) : model_(&model) {}

  Eigen::Index state_dim() const { return model_->param_dim(); }
  Vector<Scalar> advance(const Vector<Scalar>& s, const Vector<Scalar>&) const { return s; }
  Matrix<Scalar> advance_jacobian(const Vector<Scalar>& s, const Vector<Scalar>&) const {
    return Matrix<Scalar>::Identity(s.size(), s.size());
  }
  Vector<Scalar> measure(const Vector<Scalar>& s, const Vector<Scalar>& u) const {
    return predict(*model_, s, u);
  }
  Matrix<Scalar> measure_jacobian(const Vector<Scalar>& s, const Vector<Scalar>& u) const {
    return jacobian_theta(*model_, s, u);
  }

 private:
  const StaticModel<Scalar>* model_;
};

// Stacked state s = (theta, yhat) with f = (Id, Phi) and h reading the
// observed slice of yhat.
template <typename Scalar>
class JointProcess {
 public:
  static constexpr FilterMode kMode = FilterMode::Recurrent;

  explicit JointProcess(const RecurrentModel<Scalar>& model) : model_(&model) {}

  const RecurrentModel<Scalar>& model() const { return *model_; }
  Eigen::Index param_dim() const { return model_->param_dim(); }
  Eigen::Index state_dim() const { return model_->param_dim() + model_->state_dim(); }

  Vector<Scalar> theta(const Vector<Scalar>& s) const { return s.head(param_dim()); }
  Vector<Scalar> y(const Vector<Scalar>& s) const { return s.tail(model_->state_dim()); }

  Vector<Scalar> advance(const Vector<Scalar>& s, const Vector<Scalar>& u) const {
    check(s);
    Vector<Scalar> next(s.size());
    next << theta(s), step_recurrent(*model_, y(s), theta(s), u);
    return next;
  }

  Matrix<Scalar> advance_jacobian(const Vector<Scalar>& s, const Vector<Scalar>& u) const {
    check(s);
    const Eigen::Index p = param_dim(), n = model_->state_dim();
    const auto jac = jacobians_recurrent(*model_, y(s), theta(s), u);
    Matrix<Scalar> F = Matrix<Scalar>::Zero(p + n, p + n);
    F.topLeftCorner(p, p).setIdentity();
    F.bottomLeftCorner(n, p) = jac.d_theta;
    F.bottomRightCorner(n, n) = jac.d_state;
    return F;
  }

  Vector<Scalar> measure(const Vector<Scalar>& s, const Vector<Scalar>&) const {
    check(s);
    return model_->observed(y(s));
  }

  Matrix<Scalar> measure_jacobian(const Vector<Scalar>& s, const Vector<Scalar>&) const {
    check(s);
    Matrix<Scalar> H = Matrix<Scalar>::Zero(model_->observed_length(), s.size());
    H.rightCols(model_->state_dim()) = model_->selector();
    return H;
  }

 private:
  void check(const Vector<Scalar>& s) const {
    if (s.size() != state_dim())
      throw ContractError("joint state has size " + std::to_string(s.size()) + ", expected " +
                          std::to_string(state_dim()));
  }

  const RecurrentModel<Scalar>* model_;
};

// Extra linear-Gaussian measurement z = H s + N(0, noise), stacked under the
// family observation in the same update.
template <typename Scalar>
struct LinearMeasurement {
  Matrix<Scalar> H;
  Vector<Scalar> value;
  Matrix<Scalar> noise;
};

template <typename Scalar>
struct FilterStep {
  EkfState<Scalar> state;
  StepTrace<Scalar> trace;
};

namespace detail {

template <typename Scalar>
void check_state(const EkfState<Scalar>& state) {
  const Eigen::Index n = state.s.size();
  if (state.P.rows() != n || state.P.cols() != n)
    throw ContractError("covariance is " + dims(state.P.rows(), state.P.cols()) +
                        " for a state of size " + std::to_string(n));
  if (state.Q.size() != 0 && (state.Q.rows() != n || state.Q.cols() != n))
    throw ContractError("process noise is " + dims(state.Q.rows(), state.Q.cols()) +
                        " for a state of size " + std::to_string(n));
}

// Observation-side quantities, optionally stacked with a linear measurement.
template <typename Scalar>
struct Innovation {
  Matrix<Scalar> H;
  Vector<Scalar> E;
  Matrix<Scalar> R;
  RowVector<Scalar> loss_grad_state;  // d(loss)/ds at the predicted state
};

template <typename Scalar>
Innovation<Scalar> innovation(const StepTrace<Scalar>& trace, const ExpFamModel<Scalar>& family,
                              const Vector<Scalar>& y,
                              const std::optional<LinearMeasurement<Scalar>>& extra) {
  const Vector<Scalar> e = sufficient_stats(family, y) - trace.y_hat;
  const Matrix<Scalar> r = stat_covariance(family, trace.y_hat);
  const RowVector<Scalar> g = loss_grad_mean(family, y, trace.y_hat) * trace.H;
  if (!extra) return {trace.H, e, r, g};

  const auto& m = *extra;
  const Eigen::Index k = e.size(), q = m.value.size(), n = trace.H.cols();
  require(m.H.rows() == q && m.H.cols() == n && m.noise.rows() == q && m.noise.cols() == q,
          "linear measurement dimensions do not match the state");
  Innovation<Scalar> out;
  out.H.resize(k + q, n);
  out.H << trace.H, m.H;
  out.E.resize(k + q);
  out.E << e, m.value - m.H * trace.s_pred;
  out.R = Matrix<Scalar>::Zero(k + q, k + q);
  out.R.topLeftCorner(k, k) = r;
  out.R.bottomRightCorner(q, q) = m.noise;
  const auto noise_llt = spd_factor<Scalar>(m.noise, "linear measurement noise");
  const Vector<Scalar> pull = noise_llt.solve(Vector<Scalar>(-out.E.tail(q)));
  out.loss_grad_state = g + (m.H.transpose() * pull).transpose();
  return out;
}

}  // namespace detail

// s <- f(s, u); P <- F P F^T + Q; yhat <- h(s, u) and H at the predicted state.
template <typename Scalar, typename Process>
FilterStep<Scalar> transition(const EkfState<Scalar>& state, const Process& process,
                              const Vector<Scalar>& u) {
  detail::check_state(state);
  FilterStep<Scalar> out;
  out.trace.F = process.advance_jacobian(state.s, u);
  out.state.s = process.advance(state.s, u);
  Matrix<Scalar> P = out.trace.F * state.P * out.trace.F.transpose();
  if (state.Q.size() != 0) P += state.Q;
  out.state.P = symmetrized<Scalar>(P);
  out.state.Q = state.Q;
  out.state.mode = Process::kMode;
  out.trace.P_pred = out.state.P;
  out.trace.s_pred = out.state.s;
  out.trace.y_hat = process.measure(out.state.s, u);
  out.trace.H = process.measure_jacobian(out.state.s, u);
  return out;
}

// Covariance-form update: K = P H^T (H P H^T + R)^{-1}, P <- (Id - K H) P,
// s <- s + K E.
template <typename Scalar>
FilterStep<Scalar> observe(const FilterStep<Scalar>& predicted, const ExpFamModel<Scalar>& family,
                           const Vector<Scalar>& y,
                           const std::optional<LinearMeasurement<Scalar>>& extra = std::nullopt) {
  const auto& pred = predicted.state;
  detail::check_state(pred);
  auto inn = detail::innovation(predicted.trace, family, y, extra);
  const Matrix<Scalar> S = symmetrized<Scalar>(inn.H * pred.P * inn.H.transpose() + inn.R);

  FilterStep<Scalar> out{pred, predicted.trace};
  out.trace.innovation_condition = spd_condition<Scalar>(S);
  const auto llt = spd_factor<Scalar>(S, "innovation covariance");
  out.trace.K = llt.solve(Matrix<Scalar>(inn.H * pred.P)).transpose();
  const Eigen::Index n = pred.s.size();
  out.state.P = symmetrized<Scalar>(
      (Matrix<Scalar>::Identity(n, n) - out.trace.K * inn.H) * pred.P);
  out.state.s = pred.s + out.trace.K * inn.E;
  out.trace.H = std::move(inn.H);
  out.trace.E = std::move(inn.E);
  out.trace.R = std::move(inn.R);
  return out;
}

// Information-form update: P^{-1} <- P_pred^{-1} + H^T R^{-1} H, then the
// preconditioned gradient step s <- s_pred - P (dl/ds)^T.
template <typename Scalar>
FilterStep<Scalar> observe_information_form(
    const FilterStep<Scalar>& predicted, const ExpFamModel<Scalar>& family,
    const Vector<Scalar>& y,
    const std::optional<LinearMeasurement<Scalar>>& extra = std::nullopt) {
  const auto& pred = predicted.state;
  detail::check_state(pred);
  auto inn = detail::innovation(predicted.trace, family, y, extra);
  const Matrix<Scalar> info_pred = spd_inverse<Scalar>(pred.P, "predicted covariance");
  const auto r_llt = spd_factor<Scalar>(inn.R, "statistic covariance");
  const Matrix<Scalar> info =
      info_pred + inn.H.transpose() * r_llt.solve(inn.H);

  FilterStep<Scalar> out{pred, predicted.trace};
  out.state.P = spd_inverse<Scalar>(symmetrized<Scalar>(info), "posterior information");
  out.state.s = pred.s - out.state.P * inn.loss_grad_state.transpose();
  out.trace.H = std::move(inn.H);
  out.trace.E = std::move(inn.E);
  out.trace.R = std::move(inn.R);
  out.trace.K = out.state.P * out.trace.H.transpose() *
                r_llt.solve(Matrix<Scalar>::Identity(out.trace.R.rows(), out.trace.R.cols()));
  return out;
}

// Fading memory: P <- P / (1 - lambda), applied before the transition.
template <typename Scalar>
EkfState<Scalar> fade(EkfState<Scalar> state, Scalar lambda) {
  if (!(lambda < Scalar(1)))
    throw ContractError("fading factor must be < 1, got " + std::to_string(double(lambda)));
  if (lambda != Scalar(0)) state.P /= (Scalar(1) - lambda);
  return state;
}

// Residual of the gradient form of the mean update,
// |(s_after - s_pred) + P_after (dl/ds)^T|_inf / (1 + |P_after (dl/ds)^T|_inf).
template <typename Scalar>
Scalar grad_form_check(const StepTrace<Scalar>& trace, const EkfState<Scalar>& after,
                       const ExpFamModel<Scalar>& family, const Vector<Scalar>& y,
                       const std::optional<LinearMeasurement<Scalar>>& extra = std::nullopt) {
  StepTrace<Scalar> data_trace = trace;
  data_trace.H = trace.H.topRows(trace.y_hat.size());
  const auto inn = detail::innovation(data_trace, family, y, extra);
  const Vector<Scalar> step = after.P * inn.loss_grad_state.transpose();
  return max_abs(Vector<Scalar>(after.s - trace.s_pred + step)) / (Scalar(1) + max_abs(step));
}

// Residual of K R = P H^T, scaled by 1 + |P|_inf |H|_inf.
template <typename Scalar>
Scalar gain_identity_residual(const StepTrace<Scalar>& trace, const EkfState<Scalar>& after) {
  const Matrix<Scalar> diff = trace.K * trace.R - after.P * trace.H.transpose();
  return inf_norm(diff) / (Scalar(1) + inf_norm(after.P) * inf_norm(trace.H));
}

}  // namespace ngkf
