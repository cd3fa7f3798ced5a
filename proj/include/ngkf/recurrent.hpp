#pragma once

// Recurrent models: RTRL, natural-gradient RTRL with state correction, the
// joint filter over (theta, yhat), and the block view of its covariance
//
//   P = [ Ptheta        (G Ptheta)^T          ]
//       [ G Ptheta      W + G Ptheta G^T      ]
//
// with the block-wise transition and observation updates.

#include "ngkf/ekf.hpp"
#include "ngkf/expfam.hpp"
#include "ngkf/models.hpp"
#include "ngkf/natgrad.hpp"
#include "ngkf/types.hpp"

#include <string>
#include <utility>

namespace ngkf {

template <typename Scalar>
struct RtrlState {
  Vector<Scalar> theta;
  Vector<Scalar> y_state;
  Matrix<Scalar> G;  // estimate of d yhat / d theta, state_dim x param_dim
  Matrix<Scalar> J;  // Fisher estimate; unused by plain RTRL
  int t = 0;
};

template <typename Scalar>
RtrlState<Scalar> make_rtrl_state(const RecurrentModel<Scalar>& model, Vector<Scalar> theta,
                                  Vector<Scalar> y0, Matrix<Scalar> J = {}) {
  RtrlState<Scalar> s{std::move(theta), std::move(y0),
                      Matrix<Scalar>::Zero(model.state_dim(), model.param_dim()), std::move(J), 0};
  detail::require(s.theta.size() == model.param_dim() && s.y_state.size() == model.state_dim(),
                  "RTRL state dimensions do not match the model");
  return s;
}

// d(loss)/d(yhat) over the full state, zero outside the observed slice.
template <typename Scalar>
RowVector<Scalar> state_loss_gradient(const RecurrentModel<Scalar>& model,
                                      const ExpFamModel<Scalar>& family,
                                      const Vector<Scalar>& y_state, const Vector<Scalar>& y) {
  RowVector<Scalar> g = RowVector<Scalar>::Zero(model.state_dim());
  g.segment(model.observed_offset(), model.observed_length()) =
      loss_grad_mean(family, y, model.observed(y_state));
  return g;
}

namespace detail {

// yhat <- Phi(yhat, theta, u); G <- dPhi/dtheta + dPhi/dyhat G, both at the
// pre-step point.
template <typename Scalar>
void rtrl_advance(RtrlState<Scalar>& state, const RecurrentModel<Scalar>& model,
                  const Vector<Scalar>& u) {
  detail::require(state.G.rows() == model.state_dim() && state.G.cols() == model.param_dim(),
                  "RTRL sensitivity has wrong dimensions");
  const auto jac = jacobians_recurrent(model, state.y_state, state.theta, u);
  state.y_state = step_recurrent(model, state.y_state, state.theta, u);
  state.G = jac.d_theta + jac.d_state * state.G;
}

}  // namespace detail

// Plain RTRL: advance, then theta <- theta - eta g^T with g = (dl/dyhat) G.
template <typename Scalar>
RtrlState<Scalar> rtrl_step(RtrlState<Scalar> state, const RecurrentModel<Scalar>& model,
                            const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                            const Vector<Scalar>& y, Scalar eta) {
  detail::rtrl_advance(state, model, u);
  const RowVector<Scalar> g = state_loss_gradient(model, family, state.y_state, y) * state.G;
  state.theta -= eta * g.transpose();
  state.t += 1;
  return state;
}

// Natural-gradient RTRL with state correction, in order: transition, G update,
// J <- (1 - eta) J + eta E_y[g(y)^{x2}], dtheta = J^{-1} g(y_t)^T,
// theta -= eta dtheta, yhat -= eta G dtheta. The correction applies to the
// post-transition state.
template <typename Scalar>
RtrlState<Scalar> natgrad_rtrl_step(RtrlState<Scalar> state, const RecurrentModel<Scalar>& model,
                                    const ExpFamModel<Scalar>& family, const Vector<Scalar>& u,
                                    const Vector<Scalar>& y, Scalar eta,
                                    FisherEstimator<Scalar>& estimator) {
  if (!(eta > Scalar(0) && eta <= Scalar(1)))
    throw ContractError("learning rate must lie in (0,1], got " + std::to_string(double(eta)));
  detail::require(state.J.rows() == model.param_dim() && state.J.cols() == model.param_dim(),
                  "Fisher estimate has wrong dimensions");
  detail::rtrl_advance(state, model, u);
  const Matrix<Scalar> g_obs = model.selector() * state.G;
  const Vector<Scalar> y_obs = model.observed(state.y_state);
  state.J = symmetrized<Scalar>((Scalar(1) - eta) * state.J +
                                eta * estimator.term(family, y_obs, g_obs, y));
  const RowVector<Scalar> g = loss_grad_mean(family, y, y_obs) * g_obs;
  const Vector<Scalar> dtheta =
      spd_factor<Scalar>(state.J, "Fisher estimate").solve(Vector<Scalar>(g.transpose()));
  state.theta -= eta * dtheta;
  state.y_state -= eta * (state.G * dtheta);
  state.t += 1;
  return state;
}

template <typename Scalar>
struct BlockCovariance {
  Matrix<Scalar> P_theta;
  Matrix<Scalar> G;
  Matrix<Scalar> W;
};

template <typename Scalar>
Matrix<Scalar> assemble(const BlockCovariance<Scalar>& b) {
  const Eigen::Index p = b.P_theta.rows(), n = b.W.rows();
  detail::require(b.P_theta.cols() == p && b.W.cols() == n && b.G.rows() == n && b.G.cols() == p,
                  "block covariance dimensions are inconsistent");
  Matrix<Scalar> P(p + n, p + n);
  const Matrix<Scalar> cross = b.G * b.P_theta;
  P.topLeftCorner(p, p) = b.P_theta;
  P.bottomLeftCorner(n, p) = cross;
  P.topRightCorner(p, n) = cross.transpose();
  P.bottomRightCorner(n, n) = b.W + cross * b.G.transpose();
  return symmetrized<Scalar>(P);
}

// Splits P into (Ptheta, G, W) with G = Ptheta_y Ptheta^+ and W the Schur
// complement. The pseudo-inverse drops eigenvalues below 1e-12 |Ptheta|.
template <typename Scalar>
BlockCovariance<Scalar> decompose_covariance(const Matrix<Scalar>& P, Eigen::Index dim_theta) {
  detail::require(P.rows() == P.cols() && dim_theta >= 0 && dim_theta <= P.rows(),
                  "cannot split a " + detail::dims(P.rows(), P.cols()) + " covariance at " +
                      std::to_string(dim_theta));
  const Eigen::Index p = dim_theta, n = P.rows() - dim_theta;
  const Matrix<Scalar> p_theta = symmetrized<Scalar>(P.topLeftCorner(p, p));
  const Matrix<Scalar> cross = P.bottomLeftCorner(n, p);

  Matrix<Scalar> pinv = Matrix<Scalar>::Zero(p, p);
  if (p > 0) {
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(p_theta);
    const Vector<Scalar>& values = eig.eigenvalues();
    const Scalar cutoff = Scalar(1e-12) * values.cwiseAbs().maxCoeff();
    Vector<Scalar> inv = Vector<Scalar>::Zero(p);
    for (Eigen::Index i = 0; i < p; ++i)
      if (std::abs(values(i)) > cutoff) inv(i) = Scalar(1) / values(i);
    pinv = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  }

  BlockCovariance<Scalar> b;
  b.P_theta = p_theta;
  b.G = cross * pinv;
  b.W = symmetrized<Scalar>(Matrix<Scalar>(P.bottomRightCorner(n, n) - b.G * cross.transpose()));

  const Scalar scale = inf_norm(P);
  const Scalar mismatch = inf_norm(Matrix<Scalar>(assemble(b) - P));
  if (mismatch > Scalar(1e-10) * scale)
    throw DecompositionError("covariance is not Schur-consistent: reassembly mismatch " +
                             std::to_string(double(mismatch)) + " vs norm " +
                             std::to_string(double(scale)));
  if (n > 0) {
    Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(b.W, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -Scalar(1e-10) * scale)
      throw DecompositionError("Schur complement W is not positive-semidefinite");
  }
  return b;
}

// Transition with no process noise: Ptheta unchanged, W <- A W A^T,
// G <- dPhi/dtheta + A G, where A = dPhi/dyhat.
template <typename Scalar>
BlockCovariance<Scalar> block_transition(BlockCovariance<Scalar> b, const Matrix<Scalar>& d_theta,
                                         const Matrix<Scalar>& d_state) {
  detail::require(d_state.rows() == b.W.rows() && d_state.cols() == b.W.rows() &&
                      d_theta.rows() == b.W.rows() && d_theta.cols() == b.P_theta.rows(),
                  "transition Jacobians do not match the block covariance");
  b.W = symmetrized<Scalar>(d_state * b.W * d_state.transpose());
  b.G = d_theta + d_state * b.G;
  return b;
}

// Observation of the full state yhat with statistic covariance R, applied in
// the order Ptheta, W, G. The G update uses the updated W:
// G <- (Id - W_new R^{-1}) G.
template <typename Scalar>
BlockCovariance<Scalar> block_observe(BlockCovariance<Scalar> b, const Matrix<Scalar>& R) {
  const Eigen::Index n = b.W.rows();
  detail::require(R.rows() == n && R.cols() == n, "R must match the state dimension");
  const Matrix<Scalar> GP = b.G * b.P_theta;
  const auto s_llt = spd_factor<Scalar>(
      symmetrized<Scalar>(b.W + R + GP * b.G.transpose()), "W + R + G Ptheta G^T");
  b.P_theta = symmetrized<Scalar>(b.P_theta - GP.transpose() * s_llt.solve(GP));
  const auto wr_llt = spd_factor<Scalar>(symmetrized<Scalar>(b.W + R), "W + R");
  b.W = symmetrized<Scalar>(b.W - b.W * wr_llt.solve(b.W));
  const auto r_llt = spd_factor<Scalar>(R, "statistic covariance");
  b.G = b.G - b.W * r_llt.solve(b.G);
  return b;
}

// Same update through the inverse blocks: Ptheta^{-1} += G^T (W + R)^{-1} G
// and W^{-1} += R^{-1}. Needs Ptheta and W invertible.
template <typename Scalar>
BlockCovariance<Scalar> block_observe_information(BlockCovariance<Scalar> b,
                                                  const Matrix<Scalar>& R) {
  const Eigen::Index n = b.W.rows();
  detail::require(R.rows() == n && R.cols() == n, "R must match the state dimension");
  const auto wr_llt = spd_factor<Scalar>(symmetrized<Scalar>(b.W + R), "W + R");
  const Matrix<Scalar> info_theta =
      spd_inverse<Scalar>(b.P_theta, "Ptheta") + b.G.transpose() * wr_llt.solve(b.G);
  const Matrix<Scalar> info_w = spd_inverse<Scalar>(b.W, "W") + spd_inverse<Scalar>(R, "R");
  const Matrix<Scalar> w_new = spd_inverse<Scalar>(symmetrized<Scalar>(info_w), "W^{-1} + R^{-1}");
  b.G = b.G - w_new * spd_factor<Scalar>(R, "R").solve(b.G);
  b.P_theta = spd_inverse<Scalar>(symmetrized<Scalar>(info_theta), "Ptheta^{-1} + G^T (W+R)^{-1} G");
  b.W = w_new;
  return b;
}

// Joint filter state s = (theta, y0) with covariance built from (Ptheta, G0, 0).
template <typename Scalar>
EkfState<Scalar> build_joint(const RecurrentModel<Scalar>& model, const Vector<Scalar>& theta0,
                             const Vector<Scalar>& y0, const Matrix<Scalar>& P0_theta,
                             const Matrix<Scalar>& G0 = {}) {
  const Eigen::Index p = model.param_dim(), n = model.state_dim();
  detail::require(theta0.size() == p && y0.size() == n,
                  "joint filter needs theta of size " + std::to_string(p) + " and state of size " +
                      std::to_string(n));
  detail::require(P0_theta.rows() == p && P0_theta.cols() == p,
                  "parameter covariance must be " + detail::dims(p, p));
  BlockCovariance<Scalar> blocks{P0_theta, G0.size() ? G0 : Matrix<Scalar>::Zero(n, p),
                                 Matrix<Scalar>::Zero(n, n)};
  EkfState<Scalar> state;
  state.s.resize(p + n);
  state.s << theta0, y0;
  state.P = assemble(blocks);
  state.mode = FilterMode::Recurrent;
  return state;
}

template <typename Scalar>
struct AugmentedInit {
  Vector<Scalar> theta_plus;
  Matrix<Scalar> G0;
};

// theta+ = (theta, y0) with G0 = d y0 / d theta+ = (0, Id). Use with
// model.with_initial_state_parameters().
template <typename Scalar>
AugmentedInit<Scalar> augment_init_state(const RecurrentModel<Scalar>& model,
                                         const Vector<Scalar>& theta, const Vector<Scalar>& y0) {
  const Eigen::Index p = theta.size(), n = model.state_dim();
  detail::require(y0.size() == n, "initial state must have size " + std::to_string(n));
  AugmentedInit<Scalar> out;
  out.theta_plus.resize(p + n);
  out.theta_plus << theta, y0;
  out.G0 = Matrix<Scalar>::Zero(n, p + n);
  out.G0.rightCols(n).setIdentity();
  return out;
}

}  // namespace ngkf
