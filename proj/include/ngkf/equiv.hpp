#pragma once

// Lockstep harness: runs the filter view and the natural-gradient view on the
// same data and records per-step deviations between them, together with the
// filter identities (gain identity, gradient form, information form).
//
// Deviations are relative with a +1 floor, except the covariance structure
// and Schur residual of recurrent runs which are relative to |P|.

#include "ngkf/ekf.hpp"
#include "ngkf/expfam.hpp"
#include "ngkf/models.hpp"
#include "ngkf/natgrad.hpp"
#include "ngkf/recurrent.hpp"
#include "ngkf/rng.hpp"
#include "ngkf/types.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ngkf {

// A run aborted by a numerical failure on either side.
class LockstepAbort : public std::runtime_error {
 public:
  LockstepAbort(int step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

template <typename Scalar>
struct DataStream {
  std::vector<Vector<Scalar>> u;
  std::vector<Vector<Scalar>> y;
  Vector<Scalar> y0;  // recurrent streams: true initial state
  std::size_t size() const { return u.size(); }
};

struct StepDeviation {
  int t = 0;
  double eta = 0;
  double lambda = 0;
  double loss = 0;
  double theta_dev = 0;
  double metric_dev = 0;
  double state_dev = 0;
  double structure_dev = 0;
  double schur_ratio = 0;
  double rtrl_dev = 0;
  double gain_identity = 0;
  double gradient_form = 0;
  double information_form = 0;
};

struct EquivReport {
  int steps = 0;
  double max_theta_dev = 0;
  double max_metric_dev = 0;
  double max_state_dev = 0;
  double max_structure_dev = 0;
  double max_schur_ratio = 0;
  double max_rtrl_dev = 0;
  std::map<std::string, double> probe_devs{
      {"gain_identity", 0.0}, {"gradient_form", 0.0}, {"information_form", 0.0}};
  std::vector<StepDeviation> per_step;

  void record(const StepDeviation& d) {
    ++steps;
    max_theta_dev = std::max(max_theta_dev, d.theta_dev);
    max_metric_dev = std::max(max_metric_dev, d.metric_dev);
    max_state_dev = std::max(max_state_dev, d.state_dev);
    max_structure_dev = std::max(max_structure_dev, d.structure_dev);
    max_schur_ratio = std::max(max_schur_ratio, d.schur_ratio);
    max_rtrl_dev = std::max(max_rtrl_dev, d.rtrl_dev);
    probe_devs["gain_identity"] = std::max(probe_devs["gain_identity"], d.gain_identity);
    probe_devs["gradient_form"] = std::max(probe_devs["gradient_form"], d.gradient_form);
    probe_devs["information_form"] = std::max(probe_devs["information_form"], d.information_form);
    per_step.push_back(d);
  }
};

// ---------------------------------------------------------------------------
// Data generation

namespace detail {

template <typename Scalar>
bool comfortably_interior(const ExpFamModel<Scalar>& family, const Vector<Scalar>& mean,
                          Scalar margin) {
  switch (family.kind()) {
    case FamilyKind::GaussianKnownCov: return true;
    case FamilyKind::Bernoulli: return mean(0) > margin && mean(0) < Scalar(1) - margin;
    case FamilyKind::Categorical: return mean.minCoeff() > margin && Scalar(1) - mean.sum() > margin;
  }
  return false;
}

}  // namespace detail

// Inputs u ~ N(0, I), outputs y ~ p(. | h(theta_star, u)). For discrete
// families, inputs whose true mean lies within 0.05 of the boundary are
// redrawn.
template <typename Scalar>
DataStream<Scalar> generate_static_data(const StaticModel<Scalar>& model,
                                        const ExpFamModel<Scalar>& family,
                                        const Vector<Scalar>& theta_star, int steps,
                                        std::uint64_t seed) {
  detail::require(steps >= 0, "steps must be >= 0");
  detail::require(model.output_dim() == family.stat_dim(),
                  "model output dimension does not match the family");
  Rng inputs(seed, Stream::Inputs), outputs(seed, Stream::Observations);
  DataStream<Scalar> data;
  for (int t = 0; t < steps; ++t) {
    Vector<Scalar> u, mean;
    for (int attempt = 0;; ++attempt) {
      u = inputs.normal_vector<Scalar>(model.input_dim());
      mean = predict(model, theta_star, u);
      if (detail::comfortably_interior(family, mean, Scalar(0.05))) break;
      if (attempt > 1000) throw DomainError("true parameter keeps predictions on the boundary");
    }
    data.y.push_back(sample(family, mean, outputs));
    data.u.push_back(std::move(u));
  }
  return data;
}

template <typename Scalar>
struct InputSpec {
  Scalar scale = Scalar(1);
  bool constant_first = false;  // first input coordinate fixed to 1
};

// Inputs per InputSpec, trajectory of the true model from y0, outputs from
// the observed slice.
template <typename Scalar>
DataStream<Scalar> generate_recurrent_data(const RecurrentModel<Scalar>& model,
                                           const ExpFamModel<Scalar>& family,
                                           const Vector<Scalar>& theta_star,
                                           const Vector<Scalar>& y0, int steps,
                                           std::uint64_t seed, InputSpec<Scalar> spec = {}) {
  detail::require(steps >= 0, "steps must be >= 0");
  detail::require(model.observed_length() == family.stat_dim(),
                  "observed slice does not match the family");
  Rng inputs(seed, Stream::Inputs), outputs(seed, Stream::Observations);
  DataStream<Scalar> data;
  data.y0 = y0;
  Vector<Scalar> state = y0;
  for (int t = 0; t < steps; ++t) {
    Vector<Scalar> u = spec.scale * inputs.normal_vector<Scalar>(model.input_dim());
    if (spec.constant_first && u.size() > 0) u(0) = Scalar(1);
    state = step_recurrent(model, state, theta_star, u);
    data.y.push_back(sample(family, model.observed(state), outputs));
    data.u.push_back(std::move(u));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Probes

template <typename Scalar>
struct FilterRecord {
  StepTrace<Scalar> trace;
  EkfState<Scalar> after;
  std::optional<EkfState<Scalar>> info_after;  // same step through the information form
  Vector<Scalar> y;
  std::optional<LinearMeasurement<Scalar>> extra;
};

struct ProbeReport {
  double gain_identity = 0;
  double gradient_form = 0;
  double information_form = 0;
};

namespace detail {

template <typename Scalar>
double information_route_dev(const EkfState<Scalar>& cov, const EkfState<Scalar>& info) {
  const double p_dev = double(inf_norm(Matrix<Scalar>(cov.P - info.P)) /
                              std::max(inf_norm(cov.P), std::numeric_limits<Scalar>::min()));
  const double s_dev =
      double(max_abs(Vector<Scalar>(cov.s - info.s)) / (Scalar(1) + max_abs(cov.s)));
  return std::max(p_dev, s_dev);
}

}  // namespace detail

// Per-run maxima of the three filter identities.
template <typename Scalar>
ProbeReport invariant_probe(const std::vector<FilterRecord<Scalar>>& records,
                            const ExpFamModel<Scalar>& family) {
  ProbeReport r;
  for (const auto& rec : records) {
    r.gain_identity = std::max(r.gain_identity, double(gain_identity_residual(rec.trace, rec.after)));
    r.gradient_form =
        std::max(r.gradient_form, double(grad_form_check(rec.trace, rec.after, family, rec.y, rec.extra)));
    if (rec.info_after)
      r.information_form =
          std::max(r.information_form, detail::information_route_dev(rec.after, *rec.info_after));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Static lockstep runs

template <typename Scalar>
struct StaticLockstepOptions {
  RateSchedule<Scalar> schedule = RateSchedule<Scalar>::one_over_t_plus_c(Scalar(1));
  std::optional<PriorSpec<Scalar>> prior;
  bool keep_records = false;
};

template <typename Scalar>
struct StaticLockstepRun {
  EquivReport report;
  NatGradState<Scalar> natgrad;
  EkfState<Scalar> filter;
  std::vector<FilterRecord<Scalar>> records;
};

namespace detail {

template <typename Scalar>
StaticLockstepRun<Scalar> run_static_lockstep(const StaticModel<Scalar>& model,
                                              const ExpFamModel<Scalar>& family,
                                              const DataStream<Scalar>& data,
                                              const Vector<Scalar>& theta0,
                                              const Matrix<Scalar>& J0, int steps,
                                              const StaticLockstepOptions<Scalar>& opt) {
  require(steps >= 0 && static_cast<std::size_t>(steps) <= data.size(),
          "requested " + std::to_string(steps) + " steps from a stream of " +
              std::to_string(data.size()));
  require(theta0.size() == model.param_dim(), "theta0 has wrong dimension");
  require(J0.rows() == model.param_dim() && J0.cols() == model.param_dim(), "J0 has wrong dimension");

  const auto& schedule = opt.schedule;
  const bool regularized = opt.prior && opt.prior->n_prior != Scalar(0);
  Matrix<Scalar> prior_info;
  if (opt.prior) {
    opt.prior->check(model.param_dim());
    prior_info = spd_inverse<Scalar>(opt.prior->sigma0, "prior covariance");
  }

  StaticLockstepRun<Scalar> run;
  run.natgrad = {theta0, J0, 0};
  const Scalar eta0 = schedule.eta(0);
  run.filter.s = theta0;
  try {
    if (regularized) {
      // J0 = eta0 P0^{-1} - eta0 n_prior Sigma0^{-1}
      run.filter.P = spd_inverse<Scalar>(
          symmetrized<Scalar>(Matrix<Scalar>(J0 / eta0 + opt.prior->n_prior * prior_info)),
          "initial information");
    } else {
      run.filter.P = eta0 * spd_inverse<Scalar>(J0, "J0");
    }
  } catch (const SingularityError& e) {
    throw LockstepAbort(0, e.what());
  }
  run.filter.mode = FilterMode::Static;

  const StaticProcess<Scalar> process(model);
  auto estimator = FisherEstimator<Scalar>::exact();

  for (int t = 1; t <= steps; ++t) {
    const auto& u = data.u[t - 1];
    const auto& y = data.y[t - 1];
    StepDeviation d;
    d.t = t;
    try {
      const Scalar eta = schedule.eta(t);
      const Scalar lambda = rate_to_decay(schedule, t);
      d.eta = double(eta);
      d.lambda = double(lambda);
      d.loss = double(log_likelihood(family, y, predict(model, run.natgrad.theta, u)));

      // Natural gradient side.
      run.natgrad = fisher_update(std::move(run.natgrad), model, family, u, y, eta, estimator);
      if (opt.prior)
        run.natgrad = regularized_param_update(std::move(run.natgrad), model, family, u, y, eta,
                                               lambda, *opt.prior);
      else
        run.natgrad = param_update(std::move(run.natgrad), model, family, u, y, eta);

      // Filter side: fade, transition, observe (with the prior pseudo-measurement).
      std::optional<LinearMeasurement<Scalar>> extra;
      if (regularized && lambda != Scalar(0)) {
        const Eigen::Index p = model.param_dim();
        extra = LinearMeasurement<Scalar>{Matrix<Scalar>::Identity(p, p), opt.prior->theta_prior,
                                          opt.prior->sigma0 / (lambda * opt.prior->n_prior)};
      }
      const auto predicted = transition(fade(run.filter, lambda), process, u);
      auto post = observe(predicted, family, y, extra);
      const auto info = observe_information_form(predicted, family, y, extra);
      run.filter = post.state;

      d.gain_identity = double(gain_identity_residual(post.trace, post.state));
      d.gradient_form = double(grad_form_check(post.trace, post.state, family, y, extra));
      d.information_form = detail::information_route_dev(post.state, info.state);

      const Matrix<Scalar> info_post = spd_inverse<Scalar>(run.filter.P, "posterior covariance");
      Matrix<Scalar> metric_target = eta * info_post;
      if (regularized) metric_target -= eta * opt.prior->n_prior * prior_info;
      d.theta_dev = double(max_abs(Vector<Scalar>(run.natgrad.theta - run.filter.s)) /
                           (Scalar(1) + max_abs(run.filter.s)));
      d.metric_dev = double(inf_norm(Matrix<Scalar>(run.natgrad.J - metric_target)) /
                            (Scalar(1) + eta * inf_norm(info_post)));
      if (opt.keep_records)
        run.records.push_back({std::move(post.trace), post.state, info.state, y, extra});
    } catch (const std::exception& e) {
      throw LockstepAbort(t, e.what());
    }
    run.report.record(d);
  }
  return run;
}

}  // namespace detail

// Static filter vs natural gradient with eta_t = gamma_t = 1/(t+1),
// s0 = theta0, P0 = J0^{-1}.
template <typename Scalar>
EquivReport lockstep_static(const StaticModel<Scalar>& model, const ExpFamModel<Scalar>& family,
                            const DataStream<Scalar>& data, const Vector<Scalar>& theta0,
                            const Matrix<Scalar>& J0, int steps) {
  return detail::run_static_lockstep(model, family, data, theta0, J0, steps,
                                     StaticLockstepOptions<Scalar>{})
      .report;
}

// Fading-memory filter vs natural gradient with the given schedule,
// P0 = eta0 J0^{-1}.
template <typename Scalar>
EquivReport lockstep_fading(const StaticModel<Scalar>& model, const ExpFamModel<Scalar>& family,
                            const DataStream<Scalar>& data, const Vector<Scalar>& theta0,
                            const Matrix<Scalar>& J0, const RateSchedule<Scalar>& schedule,
                            int steps) {
  StaticLockstepOptions<Scalar> opt;
  opt.schedule = schedule;
  return detail::run_static_lockstep(model, family, data, theta0, J0, steps, opt).report;
}

// Prior-regularized natural gradient vs the fading filter that keeps the
// prior at constant weight. J0 = Sigma0^{-1}, eta_0 := eta_1, and
// P0 = eta_1 / (1 + n_prior eta_1) Sigma0.
template <typename Scalar>
EquivReport lockstep_regularized(const StaticModel<Scalar>& model,
                                 const ExpFamModel<Scalar>& family, const DataStream<Scalar>& data,
                                 const Vector<Scalar>& theta0, const PriorSpec<Scalar>& prior,
                                 const RateSchedule<Scalar>& schedule, int steps) {
  StaticLockstepOptions<Scalar> opt;
  opt.schedule = schedule.with_eta0(schedule.eta(1));
  opt.prior = prior;
  prior.check(model.param_dim());
  const Matrix<Scalar> J0 = spd_inverse<Scalar>(prior.sigma0, "prior covariance");
  return detail::run_static_lockstep(model, family, data, theta0, J0, steps, opt).report;
}

// ---------------------------------------------------------------------------
// Recurrent lockstep

template <typename Scalar>
struct RecurrentLockstepOptions {
  RateSchedule<Scalar> schedule = RateSchedule<Scalar>::one_over_t_plus_c(Scalar(1));
  // Train the initial state as extra parameters; P0_theta then covers
  // (theta, y0).
  bool augment_initial_state = false;
  // Initial state estimate; defaults to the stream's true y0.
  std::optional<Vector<Scalar>> y0_estimate;
};

template <typename Scalar>
struct RecurrentLockstepRun {
  EquivReport report;
  RtrlState<Scalar> natgrad;
  EkfState<Scalar> filter;
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> structure_target(const Matrix<Scalar>& J, const Matrix<Scalar>& G, Scalar eta) {
  BlockCovariance<Scalar> b{spd_inverse<Scalar>(J, "Fisher estimate"), G,
                            Matrix<Scalar>::Zero(G.rows(), G.rows())};
  return eta * assemble(b);
}

}  // namespace detail

template <typename Scalar>
RecurrentLockstepRun<Scalar> run_recurrent_lockstep(
    const RecurrentModel<Scalar>& base_model, const ExpFamModel<Scalar>& family,
    const DataStream<Scalar>& data, const Vector<Scalar>& theta0,
    const Matrix<Scalar>& P0_theta, int steps, const RecurrentLockstepOptions<Scalar>& opt = {}) {
  detail::require(steps >= 0 && static_cast<std::size_t>(steps) <= data.size(),
                  "requested " + std::to_string(steps) + " steps from a stream of " +
                      std::to_string(data.size()));
  const RecurrentModel<Scalar> model =
      opt.augment_initial_state ? base_model.with_initial_state_parameters() : base_model;
  const Eigen::Index p = model.param_dim();
  const Vector<Scalar> y0 = opt.y0_estimate ? *opt.y0_estimate : data.y0;

  Vector<Scalar> theta = theta0;
  Matrix<Scalar> G0 = Matrix<Scalar>::Zero(model.state_dim(), p);
  if (opt.augment_initial_state) {
    auto aug = augment_init_state(base_model, theta0, y0);
    theta = std::move(aug.theta_plus);
    G0 = std::move(aug.G0);
  }
  detail::require(P0_theta.rows() == p && P0_theta.cols() == p,
                  "parameter covariance must be " + detail::dims(p, p));

  const Scalar eta0 = opt.schedule.eta(0);
  RecurrentLockstepRun<Scalar> run;
  Matrix<Scalar> J0;
  try {
    J0 = eta0 * spd_inverse<Scalar>(P0_theta, "P0_theta");
  } catch (const SingularityError& e) {
    throw LockstepAbort(0, e.what());
  }
  run.natgrad = make_rtrl_state(model, theta, y0, std::move(J0));
  run.natgrad.G = G0;
  run.filter = build_joint(model, theta, y0, P0_theta, G0);

  const JointProcess<Scalar> process(model);
  auto estimator = FisherEstimator<Scalar>::exact();
  const Matrix<Scalar> sel = model.selector();

  for (int t = 1; t <= steps; ++t) {
    const auto& u = data.u[t - 1];
    const auto& y = data.y[t - 1];
    StepDeviation d;
    d.t = t;
    try {
      const Scalar eta = opt.schedule.eta(t);
      const Scalar lambda = rate_to_decay(opt.schedule, t);
      d.eta = double(eta);
      d.lambda = double(lambda);

      run.natgrad = natgrad_rtrl_step(std::move(run.natgrad), model, family, u, y, eta, estimator);

      const auto predicted = transition(fade(run.filter, lambda), process, u);
      d.loss = double(log_likelihood(family, y, predicted.trace.y_hat));
      auto post = observe(predicted, family, y);
      run.filter = post.state;

      d.gain_identity = double(gain_identity_residual(post.trace, post.state));
      d.gradient_form = double(grad_form_check(post.trace, post.state, family, y));

      // The joint covariance is singular, so the information route is taken
      // on the parameter block: Ptheta^{-1} += G_obs^T (Sel W Sel^T + R)^{-1} G_obs.
      const auto pred_blocks = decompose_covariance(predicted.state.P, p);
      const auto post_blocks = decompose_covariance(run.filter.P, p);
      const Matrix<Scalar> g_obs = sel * pred_blocks.G;
      const auto noise = spd_factor<Scalar>(
          symmetrized<Scalar>(Matrix<Scalar>(sel * pred_blocks.W * sel.transpose() + post.trace.R)),
          "observed W + R");
      const Matrix<Scalar> info_theta =
          spd_inverse<Scalar>(pred_blocks.P_theta, "predicted Ptheta") + g_obs.transpose() * noise.solve(g_obs);
      const Matrix<Scalar> p_theta_info = spd_inverse<Scalar>(symmetrized<Scalar>(info_theta), "Ptheta information");
      d.information_form = double(inf_norm(Matrix<Scalar>(p_theta_info - post_blocks.P_theta)) /
                                  inf_norm(post_blocks.P_theta));

      const Scalar p_norm = inf_norm(run.filter.P);
      const Vector<Scalar> f_theta = process.theta(run.filter.s);
      const Vector<Scalar> f_y = process.y(run.filter.s);
      d.theta_dev = double(max_abs(Vector<Scalar>(run.natgrad.theta - f_theta)) /
                           (Scalar(1) + max_abs(f_theta)));
      d.state_dev = double(max_abs(Vector<Scalar>(run.natgrad.y_state - f_y)) /
                           (Scalar(1) + max_abs(f_y)));
      d.structure_dev = double(
          inf_norm(Matrix<Scalar>(run.filter.P - detail::structure_target(run.natgrad.J, run.natgrad.G, eta))) /
          p_norm);
      d.schur_ratio = double(inf_norm(post_blocks.W) / p_norm);
      d.rtrl_dev = double(inf_norm(Matrix<Scalar>(post_blocks.G - run.natgrad.G)) /
                          (Scalar(1) + inf_norm(run.natgrad.G)));
      const Matrix<Scalar> info_post = spd_inverse<Scalar>(post_blocks.P_theta, "posterior Ptheta");
      d.metric_dev = double(inf_norm(Matrix<Scalar>(run.natgrad.J - eta * info_post)) /
                            (Scalar(1) + eta * inf_norm(info_post)));
    } catch (const std::exception& e) {
      throw LockstepAbort(t, e.what());
    }
    run.report.record(d);
  }
  return run;
}

// Joint filter over (theta, yhat) vs natural-gradient RTRL with state
// correction, eta_t = 1/(t+1), J0 = P0_theta^{-1}, G0 = 0.
template <typename Scalar>
EquivReport lockstep_recurrent(const RecurrentModel<Scalar>& model,
                               const ExpFamModel<Scalar>& family, const DataStream<Scalar>& data,
                               const Vector<Scalar>& theta0, const Matrix<Scalar>& P0_theta,
                               int steps, const RecurrentLockstepOptions<Scalar>& opt = {}) {
  return run_recurrent_lockstep(model, family, data, theta0, P0_theta, steps, opt).report;
}

}  // namespace ngkf
