#pragma once

// Prediction maps with exact Jacobians.
//
// Parameter vectors are flattened row-major over each weight matrix, matrices
// in declaration order, each bias right after its matrix:
//   Linear            (A[out x in], b[out] if bias)
//   OneHiddenLayerNet (W1[hidden x in], b1, W2[out x hidden], b2)
//   LinearRNN         (A[n x n], B[n x m])
//   TanhRNN           (A[n x n], B[n x m], c[n])
// A recurrent model with initial-state parameters carries n extra trailing
// parameter entries (the trainable initial state) that the step map ignores.

#include "ngkf/types.hpp"

#include <string>
#include <utility>

namespace ngkf {

enum class StaticKind { Linear, OneHiddenLayerNet };
enum class RecurrentKind { LinearRNN, TanhRNN };

template <typename Scalar>
class StaticModel {
 public:
  static StaticModel linear(Eigen::Index input_dim, Eigen::Index output_dim, bool bias = false) {
    detail::require(input_dim > 0 && output_dim > 0, "linear model dimensions must be positive");
    return StaticModel(StaticKind::Linear, input_dim, output_dim, 0, bias);
  }

  static StaticModel one_hidden_layer(Eigen::Index input_dim, Eigen::Index hidden,
                                      Eigen::Index output_dim) {
    detail::require(input_dim > 0 && hidden > 0 && output_dim > 0,
                    "network dimensions must be positive");
    return StaticModel(StaticKind::OneHiddenLayerNet, input_dim, output_dim, hidden, true);
  }

  StaticKind kind() const { return kind_; }
  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index output_dim() const { return output_dim_; }
  Eigen::Index hidden() const { return hidden_; }
  bool bias() const { return bias_; }

  Eigen::Index param_dim() const {
    if (kind_ == StaticKind::Linear) return output_dim_ * input_dim_ + (bias_ ? output_dim_ : 0);
    return hidden_ * input_dim_ + hidden_ + output_dim_ * hidden_ + output_dim_;
  }

  // Number of incoming weights of the unit each parameter feeds.
  Vector<Scalar> fan_in() const {
    Vector<Scalar> f(param_dim());
    if (kind_ == StaticKind::Linear) {
      f.setConstant(Scalar(input_dim_));
      return f;
    }
    const Eigen::Index first = hidden_ * input_dim_ + hidden_;
    f.head(first).setConstant(Scalar(input_dim_));
    f.tail(param_dim() - first).setConstant(Scalar(hidden_));
    return f;
  }

  void check(const Vector<Scalar>& theta, const Vector<Scalar>& u) const {
    if (theta.size() != param_dim() || u.size() != input_dim_) {
      throw ContractError("static model expects theta of size " + std::to_string(param_dim()) +
                          " and input of size " + std::to_string(input_dim_) + ", got " +
                          std::to_string(theta.size()) + " and " + std::to_string(u.size()));
    }
  }

 private:
  StaticModel(StaticKind kind, Eigen::Index in, Eigen::Index out, Eigen::Index hidden, bool bias)
      : kind_(kind), input_dim_(in), output_dim_(out), hidden_(hidden), bias_(bias) {}

  StaticKind kind_;
  Eigen::Index input_dim_;
  Eigen::Index output_dim_;
  Eigen::Index hidden_;
  bool bias_;
};

namespace detail {

template <typename Scalar>
using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Scalar>
RowMajorMap<Scalar> weights(const Vector<Scalar>& theta, Eigen::Index offset, Eigen::Index rows,
                            Eigen::Index cols) {
  return RowMajorMap<Scalar>(theta.data() + offset, rows, cols);
}

// Columns of d(W x)/d vec_row(W) for W[rows x cols], written at `offset`.
template <typename Scalar, typename Out>
void put_weight_jacobian(Out& jac, Eigen::Index offset, Eigen::Index rows,
                         const Vector<Scalar>& x) {
  const Eigen::Index cols = x.size();
  for (Eigen::Index i = 0; i < rows; ++i) jac.row(i).segment(offset + i * cols, cols) = x.transpose();
}

}  // namespace detail

template <typename Scalar>
Vector<Scalar> predict(const StaticModel<Scalar>& model, const Vector<Scalar>& theta,
                       const Vector<Scalar>& u) {
  model.check(theta, u);
  const Eigen::Index in = model.input_dim(), out = model.output_dim();
  if (model.kind() == StaticKind::Linear) {
    Vector<Scalar> y = detail::weights(theta, 0, out, in) * u;
    if (model.bias()) y += theta.segment(out * in, out);
    return y;
  }
  const Eigen::Index hid = model.hidden();
  Eigen::Index at = 0;
  const auto w1 = detail::weights(theta, at, hid, in);
  at += hid * in;
  const Vector<Scalar> a = (w1 * u + theta.segment(at, hid)).array().tanh().matrix();
  at += hid;
  const auto w2 = detail::weights(theta, at, out, hid);
  at += out * hid;
  return w2 * a + theta.segment(at, out);
}

// H = dh/dtheta, output_dim x param_dim.
template <typename Scalar>
Matrix<Scalar> jacobian_theta(const StaticModel<Scalar>& model, const Vector<Scalar>& theta,
                              const Vector<Scalar>& u) {
  model.check(theta, u);
  const Eigen::Index in = model.input_dim(), out = model.output_dim();
  Matrix<Scalar> jac = Matrix<Scalar>::Zero(out, model.param_dim());
  if (model.kind() == StaticKind::Linear) {
    detail::put_weight_jacobian<Scalar>(jac, 0, out, u);
    if (model.bias()) jac.block(0, out * in, out, out).setIdentity();
    return jac;
  }
  const Eigen::Index hid = model.hidden();
  const auto w1 = detail::weights(theta, 0, hid, in);
  const Eigen::Index b1_at = hid * in;
  const Vector<Scalar> a = (w1 * u + theta.segment(b1_at, hid)).array().tanh().matrix();
  const Eigen::Index w2_at = b1_at + hid;
  const auto w2 = detail::weights(theta, w2_at, out, hid);
  const Eigen::Index b2_at = w2_at + out * hid;

  // d y / d a = W2; d a / d pre = diag(1 - a^2).
  const Matrix<Scalar> dy_dpre = w2 * (Scalar(1) - a.array().square()).matrix().asDiagonal();
  for (Eigen::Index j = 0; j < hid; ++j) {
    jac.block(0, j * in, out, in) = dy_dpre.col(j) * u.transpose();
    jac.col(b1_at + j) = dy_dpre.col(j);
  }
  detail::put_weight_jacobian<Scalar>(jac, w2_at, out, a);
  jac.block(0, b2_at, out, out).setIdentity();
  return jac;
}

template <typename Scalar>
class RecurrentModel {
 public:
  static RecurrentModel linear_rnn(Eigen::Index state_dim, Eigen::Index input_dim,
                                   Eigen::Index observed_offset, Eigen::Index observed_length) {
    return RecurrentModel(RecurrentKind::LinearRNN, state_dim, input_dim, observed_offset,
                          observed_length);
  }

  static RecurrentModel tanh_rnn(Eigen::Index state_dim, Eigen::Index input_dim,
                                 Eigen::Index observed_offset, Eigen::Index observed_length) {
    return RecurrentModel(RecurrentKind::TanhRNN, state_dim, input_dim, observed_offset,
                          observed_length);
  }

  // Same dynamics, with the initial state appended to the parameter vector.
  RecurrentModel with_initial_state_parameters() const {
    RecurrentModel m = *this;
    m.init_params_ = state_dim_;
    return m;
  }

  RecurrentKind kind() const { return kind_; }
  Eigen::Index state_dim() const { return state_dim_; }
  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index observed_offset() const { return observed_offset_; }
  Eigen::Index observed_length() const { return observed_length_; }
  Eigen::Index initial_state_params() const { return init_params_; }

  // Parameters the step map depends on.
  Eigen::Index dynamic_param_dim() const {
    return state_dim_ * state_dim_ + state_dim_ * input_dim_ +
           (kind_ == RecurrentKind::TanhRNN ? state_dim_ : 0);
  }
  Eigen::Index param_dim() const { return dynamic_param_dim() + init_params_; }

  Vector<Scalar> observed(const Vector<Scalar>& state) const {
    return state.segment(observed_offset_, observed_length_);
  }

  // Row selector of the observed slice, observed_length x state_dim.
  Matrix<Scalar> selector() const {
    Matrix<Scalar> s = Matrix<Scalar>::Zero(observed_length_, state_dim_);
    s.block(0, observed_offset_, observed_length_, observed_length_).setIdentity();
    return s;
  }

  void check(const Vector<Scalar>& y_prev, const Vector<Scalar>& theta,
             const Vector<Scalar>& u) const {
    if (y_prev.size() != state_dim_ || theta.size() != param_dim() || u.size() != input_dim_) {
      throw ContractError("recurrent model expects (state, theta, input) sizes (" +
                          std::to_string(state_dim_) + ", " + std::to_string(param_dim()) + ", " +
                          std::to_string(input_dim_) + "), got (" + std::to_string(y_prev.size()) +
                          ", " + std::to_string(theta.size()) + ", " + std::to_string(u.size()) +
                          ")");
    }
  }

 private:
  RecurrentModel(RecurrentKind kind, Eigen::Index n, Eigen::Index m, Eigen::Index offset,
                 Eigen::Index length)
      : kind_(kind), state_dim_(n), input_dim_(m), observed_offset_(offset),
        observed_length_(length) {
    detail::require(n > 0 && m >= 0, "recurrent model dimensions must be positive");
    detail::require(offset >= 0 && length > 0 && offset + length <= n,
                    "observed slice must be a non-empty range inside the state");
  }

  RecurrentKind kind_;
  Eigen::Index state_dim_;
  Eigen::Index input_dim_;
  Eigen::Index observed_offset_;
  Eigen::Index observed_length_;
  Eigen::Index init_params_ = 0;
};

namespace detail {

template <typename Scalar>
Vector<Scalar> rnn_preactivation(const RecurrentModel<Scalar>& model, const Vector<Scalar>& y_prev,
                                 const Vector<Scalar>& theta, const Vector<Scalar>& u) {
  const Eigen::Index n = model.state_dim(), m = model.input_dim();
  Vector<Scalar> z = weights(theta, 0, n, n) * y_prev;
  if (m > 0) z += weights(theta, n * n, n, m) * u;
  if (model.kind() == RecurrentKind::TanhRNN) z += theta.segment(n * n + n * m, n);
  return z;
}

}  // namespace detail

template <typename Scalar>
Vector<Scalar> step_recurrent(const RecurrentModel<Scalar>& model, const Vector<Scalar>& y_prev,
                              const Vector<Scalar>& theta, const Vector<Scalar>& u) {
  model.check(y_prev, theta, u);
  Vector<Scalar> z = detail::rnn_preactivation(model, y_prev, theta, u);
  if (model.kind() == RecurrentKind::TanhRNN) z = z.array().tanh().matrix();
  return z;
}

template <typename Scalar>
struct RecurrentJacobians {
  Matrix<Scalar> d_theta;  // state_dim x param_dim
  Matrix<Scalar> d_state;  // state_dim x state_dim
};

template <typename Scalar>
RecurrentJacobians<Scalar> jacobians_recurrent(const RecurrentModel<Scalar>& model,
                                               const Vector<Scalar>& y_prev,
                                               const Vector<Scalar>& theta,
                                               const Vector<Scalar>& u) {
  model.check(y_prev, theta, u);
  const Eigen::Index n = model.state_dim(), m = model.input_dim();
  Matrix<Scalar> d_theta = Matrix<Scalar>::Zero(n, model.param_dim());
  detail::put_weight_jacobian<Scalar>(d_theta, 0, n, y_prev);
  if (m > 0) detail::put_weight_jacobian<Scalar>(d_theta, n * n, n, u);
  Matrix<Scalar> d_state = detail::weights(theta, 0, n, n);
  if (model.kind() == RecurrentKind::TanhRNN) {
    d_theta.block(0, n * n + n * m, n, n).setIdentity();
    const Vector<Scalar> a =
        detail::rnn_preactivation(model, y_prev, theta, u).array().tanh().matrix();
    const auto slope = (Scalar(1) - a.array().square()).matrix().asDiagonal();
    d_theta = slope * d_theta;
    d_state = slope * d_state;
  }
  return {std::move(d_theta), std::move(d_state)};
}

// Central-difference Jacobian of f at x, column by column.
template <typename Scalar, typename F>
Matrix<Scalar> fd_jacobian(F&& f, const Vector<Scalar>& x, Scalar h = Scalar(1e-6)) {
  detail::require(h > Scalar(0), "finite-difference step must be positive");
  Vector<Scalar> probe = x;
  Matrix<Scalar> jac;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const Vector<Scalar> up = f(probe);
    probe(i) = x(i) - h;
    const Vector<Scalar> down = f(probe);
    probe(i) = x(i);
    if (i == 0) jac.resize(up.size(), x.size());
    jac.col(i) = (up - down) / (Scalar(2) * h);
  }
  return jac;
}

}  // namespace ngkf
