// Acceptance suite: one PASS/FAIL line per criterion. `acceptance N` runs
// criterion N only. Configs are read from $NGKF_CONFIG_DIR (default ./configs).

#include "config.hpp"
#include "experiments.hpp"
#include "output.hpp"

#include "ngkf/expfam.hpp"
#include "ngkf/models.hpp"
#include "ngkf/natgrad.hpp"
#include "ngkf/recurrent.hpp"
#include "ngkf/rng.hpp"

#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace ngkf;
using namespace ngkf::app;
using oracle::M;
using oracle::V;
using Fam = ExpFamModel<double>;
using Clock = std::chrono::steady_clock;

namespace {

std::string config_dir() {
  const char* env = std::getenv("NGKF_CONFIG_DIR");
  return env && *env ? env : "configs";
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Collects named maxima against their bounds.
class Verdict {
 public:
  void bound(const std::string& what, double value, double limit) {
    const bool ok = std::isfinite(value) && value <= limit;
    pass_ = pass_ && ok;
    std::ostringstream s;
    s.precision(3);
    s << what << "=" << value << (ok ? "" : " (limit " + format_limit(limit) + ")");
    notes_.push_back(s.str());
  }
  void require(const std::string& what, bool ok) {
    pass_ = pass_ && ok;
    if (!ok) notes_.push_back(what + " failed");
  }
  bool pass() const { return pass_; }
  std::string detail() const {
    std::string out;
    for (const auto& n : notes_) out += (out.empty() ? "" : "; ") + n;
    return out;
  }

 private:
  static std::string format_limit(double x) {
    std::ostringstream s;
    s << x;
    return s.str();
  }
  bool pass_ = true;
  std::vector<std::string> notes_;
};

// Lockstep runs are shared between criteria and computed once.
class Runs {
 public:
  const RunOutput& get(const std::string& stem) {
    auto it = cache_.find(stem);
    if (it != cache_.end()) return it->second;
    const auto c = load_config(config_dir() + "/" + stem + ".json");
    return cache_.emplace(stem, run_experiment(c)).first->second;
  }

 private:
  std::map<std::string, RunOutput> cache_;
};

const std::vector<std::string> kStatic = {"static_linear", "static_net", "fading_constant",
                                          "fading_power_law", "regularized"};
const std::vector<std::string> kJoint = {
    "joint_linear_gaussian",          "joint_linear_bernoulli",
    "joint_tanh_gaussian",            "joint_tanh_bernoulli",
    "joint_linear_gaussian_augmented", "joint_linear_bernoulli_augmented",
    "joint_tanh_gaussian_augmented",  "joint_tanh_bernoulli_augmented"};

double metric(const RunOutput& r, const char* key) { return r.report["metrics"][key].get<double>(); }
double probe(const RunOutput& r, const char* key) {
  return r.report["metrics"]["probe_devs"][key].get<double>();
}

void static_bounds(Verdict& v, Runs& runs, const std::string& stem, double tol) {
  const auto& r = runs.get(stem);
  v.bound(stem + ".theta", metric(r, "max_theta_dev"), tol);
  v.bound(stem + ".metric", metric(r, "max_metric_dev"), tol);
  v.require(stem + " steps", r.report["metrics"]["steps"].get<int>() == r.report["steps"].get<int>());
}

Verdict criterion_1(Runs& runs) {
  Verdict v;
  const auto start = Clock::now();
  static_bounds(v, runs, "static_linear", 1e-8);
  v.bound("seconds", seconds_since(start), 1.0);
  return v;
}

Verdict criterion_2(Runs& runs) {
  Verdict v;
  static_bounds(v, runs, "static_net", 1e-8);
  return v;
}

Verdict criterion_3(Runs& runs) {
  Verdict v;
  static_bounds(v, runs, "fading_constant", 1e-8);
  static_bounds(v, runs, "fading_power_law", 1e-8);

  double worst = 0;
  for (const auto& s : {RateSchedule<double>::constant(0.1), RateSchedule<double>::power_law(0.5, 1),
                        RateSchedule<double>::one_over_t_plus_c(3)}) {
    std::vector<double> lambdas;
    for (int t = 1; t <= 1000; ++t) {
      lambdas.push_back(rate_to_decay(s, t));
      const double back = decay_to_rate<double>(lambdas, s.eta(0), t);
      worst = std::max(worst, std::abs(back - s.eta(t)) / s.eta(t));
    }
  }
  v.bound("round_trip", worst, 1e-12);
  return v;
}

Verdict criterion_4(Runs& runs) {
  Verdict v;
  static_bounds(v, runs, "regularized", 1e-8);
  // With zero prior weight the regularized run is the fading run, bit for bit.
  auto c = load_config(config_dir() + "/regularized.json");
  v.require("prior weight 1", c.prior && c.prior->n_prior == 1.0);
  c.prior->n_prior = 0.0;
  const auto zero = run_experiment(c);
  const auto& fading = runs.get("fading_constant");
  v.require("n_prior=0 trace identical to constant-rate fading",
            to_csv(zero.trace) == to_csv(fading.trace));
  v.require("n_prior=0 metrics identical", zero.report["metrics"].dump() == fading.report["metrics"].dump());
  return v;
}

Verdict criterion_5(Runs& runs) {
  Verdict v;
  double theta = 0, state = 0, structure = 0, schur = 0;
  for (const auto& stem : kJoint) {
    const auto& r = runs.get(stem);
    theta = std::max(theta, metric(r, "max_theta_dev"));
    state = std::max(state, metric(r, "max_state_dev"));
    structure = std::max(structure, metric(r, "max_structure_dev"));
    schur = std::max(schur, metric(r, "max_schur_ratio"));
    v.require(stem + " exit", r.exit_code == kExitOk);
  }
  v.bound("theta", theta, 1e-9);
  v.bound("state", state, 1e-9);
  v.bound("structure", structure, 1e-9);
  v.bound("W/|P|", schur, 1e-10);
  return v;
}

Verdict criterion_6(Runs& runs) {
  Verdict v;
  double gain = 0, grad = 0, info = 0;
  std::vector<std::string> all = kStatic;
  all.insert(all.end(), kJoint.begin(), kJoint.end());
  for (const auto& stem : all) {
    const auto& r = runs.get(stem);
    gain = std::max(gain, probe(r, "gain_identity"));
    grad = std::max(grad, probe(r, "gradient_form"));
    info = std::max(info, probe(r, "information_form"));
  }
  v.bound("gain_identity", gain, 1e-10);
  v.bound("gradient_form", grad, 1e-10);
  v.bound("information_form", info, 1e-9);
  return v;
}

double block_dev(const BlockCovariance<double>& a, const oracle::Blocks& b) {
  return std::max({oracle::rel_err(a.P_theta, b.Pt), oracle::rel_err(a.G, b.G), oracle::rel_err(a.W, b.W)});
}

Verdict criterion_7(Runs&) {
  Verdict v;
  Rng rng(7, Stream::Tests);
  double trans = 0, obs = 0, obs_info = 0, zero_w = 0;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Index p = 2 + i % 4, n = 1 + i % 3;
    const BlockCovariance<double> blk{oracle::random_spd(rng, p), rng.normal_matrix(n, p),
                                      oracle::random_spd(rng, n, 0.2)};
    const M d_theta = rng.normal_matrix(n, p), d_state = 0.8 * rng.normal_matrix(n, n);
    const M R = oracle::random_spd(rng, n);

    M F = M::Zero(p + n, p + n);
    F.topLeftCorner(p, p).setIdentity();
    F.bottomLeftCorner(n, p) = d_theta;
    F.bottomRightCorner(n, n) = d_state;
    const M P = oracle::assemble(blk.P_theta, blk.G, blk.W);
    trans = std::max(trans, block_dev(block_transition(blk, d_theta, d_state), oracle::split(F * P * F.transpose(), p)));

    M H = M::Zero(n, p + n);
    H.rightCols(n).setIdentity();
    const auto want = oracle::split(oracle::kalman_update({V::Zero(p + n), P}, H, V::Zero(n), R).P, p);
    obs = std::max(obs, block_dev(block_observe(blk, R), want));
    obs_info = std::max(obs_info, block_dev(block_observe_information(blk, R), want));

    // W = 0: Ptheta <- (Ptheta^{-1} + G^T R^{-1} G)^{-1}, G and W unchanged.
    const BlockCovariance<double> flat{blk.P_theta, blk.G, M::Zero(n, n)};
    const auto out = block_observe(flat, R);
    const M info = blk.P_theta.inverse() + blk.G.transpose() * R.inverse() * blk.G;
    zero_w = std::max({zero_w, oracle::rel_err(out.P_theta, info.inverse()), oracle::rel_err(out.G, blk.G),
                       max_abs(out.W)});
  }
  v.bound("transition", trans, 1e-9);
  v.bound("observe", obs, 1e-9);
  v.bound("observe_information", obs_info, 1e-9);
  v.bound("W=0", zero_w, 1e-9);
  return v;
}

Verdict criterion_8(Runs&) {
  Verdict v;
  Rng rng(8, Stream::Tests);
  M cov(2, 2);
  cov << 1.5, -0.4, -0.4, 0.8;
  const std::vector<Fam> fams = {Fam::gaussian(cov), Fam::bernoulli(), Fam::categorical(3)};
  const auto draw_mean = [&](const Fam& f) -> V {
    if (f.kind() == FamilyKind::GaussianKnownCov) return rng.normal_vector(2);
    if (f.kind() == FamilyKind::Bernoulli) return V::Constant(1, oracle::random_probability(rng, 1e-3));
    return oracle::random_simplex_interior(rng, f.stat_dim(), 1e-3);
  };
  const auto draw_obs = [&](const Fam& f, const V& mean) -> V {
    if (f.kind() == FamilyKind::GaussianKnownCov) return mean + rng.normal_vector(2);
    if (f.kind() == FamilyKind::Bernoulli) return V::Constant(1, rng.uniform() < 0.5 ? 0 : 1);
    return V::Constant(1, 1 + std::floor(3 * rng.uniform()));
  };

  double innovation = 0, fisher = 0, grad = 0, score = 0;
  for (const auto& f : fams) {
    for (int i = 0; i < 100; ++i) {
      const V mean = draw_mean(f), y = draw_obs(f, mean);
      const V e = sufficient_stats(f, y) - mean;
      const V r = e + stat_covariance(f, mean) * loss_grad_mean(f, y, mean).transpose();
      innovation = std::max(innovation, max_abs(r) / (1 + max_abs(e)));

      const V fd = oracle::central_gradient([&](const V& m) { return log_likelihood(f, y, m); }, mean);
      grad = std::max(grad, oracle::fd_rel_err(loss_grad_mean(f, y, mean).transpose(), fd));

      if (f.is_discrete()) {
        V s = V::Zero(mean.size());
        for (const auto& [outcome, prob] : enumerate_outcomes(f, mean))
          s += prob * loss_grad_mean(f, outcome, mean).transpose();
        score = std::max(score, max_abs(s));
        const M want = f.kind() == FamilyKind::Bernoulli ? oracle::enumerated_fisher_bernoulli(mean(0))
                                                         : oracle::enumerated_fisher_categorical(mean);
        fisher = std::max(fisher, oracle::rel_err(fisher_wrt_mean(f, mean), want));
      }
    }
  }

  // Cov(f(y), T) = J^{-1} dE[f]/dmean for a Bernoulli with f(y) = y^2 + 3y.
  double cov_identity = 0;
  const auto fn = [](double y) { return y * y + 3 * y; };
  for (int i = 0; i < 100; ++i) {
    const double p = oracle::random_probability(rng, 0.01);
    const double ef = p * fn(1) + (1 - p) * fn(0);
    const double cov_fT = p * fn(1) - ef * p;
    const double dEf = oracle::central_derivative([&](double q) { return q * fn(1) + (1 - q) * fn(0); }, p);
    const double J = fisher_wrt_mean(Fam::bernoulli(), V(V::Constant(1, p)))(0, 0);
    cov_identity = std::max(cov_identity, std::abs(cov_fT - dEf / J));
  }

  v.bound("innovation_identity", innovation, 1e-12);
  v.bound("fisher_enumeration", fisher, 1e-12);
  v.bound("loss_grad_fd", grad, 1e-5);
  v.bound("covariance_identity", cov_identity, 1e-6);
  v.bound("score_mean", score, 1e-12);
  return v;
}

Verdict criterion_9(Runs&) {
  Verdict v;
  Rng rng(9, Stream::Tests);
  double traj = 0, jac = 0;
  const auto fam = Fam::gaussian_identity(1);
  for (int rep = 0; rep < 50; ++rep) {
    for (const auto& model : {RecurrentModel<double>::linear_rnn(3, 2, 0, 1),
                              RecurrentModel<double>::tanh_rnn(2, 2, 0, 1)}) {
      const V theta = 0.4 * rng.normal_vector(model.param_dim());
      const V y0 = rng.normal_vector(model.state_dim());
      std::vector<V> inputs;
      auto st = make_rtrl_state(model, theta, y0);
      for (int t = 0; t < 20; ++t) {
        inputs.push_back(rng.normal_vector(model.input_dim()));
        st = rtrl_step(st, model, fam, inputs.back(), V(V::Zero(1)), 0.0);
      }
      const M fd = oracle::central_jacobian(
          [&](const V& th) {
            V y = y0;
            for (const auto& u : inputs) y = step_recurrent(model, y, th, u);
            return y;
          },
          theta);
      traj = std::max(traj, oracle::fd_rel_err(st.G, fd));

      const V y = rng.normal_vector(model.state_dim()), u = rng.normal_vector(model.input_dim());
      const auto j = jacobians_recurrent(model, y, theta, u);
      jac = std::max(jac, oracle::fd_rel_err(j.d_theta, oracle::central_jacobian(
                                                            [&](const V& x) { return step_recurrent(model, y, x, u); }, theta)));
      jac = std::max(jac, oracle::fd_rel_err(j.d_state, oracle::central_jacobian(
                                                            [&](const V& x) { return step_recurrent(model, x, theta, u); }, y)));
    }
  }
  v.bound("G_vs_fd", traj, 1e-5);
  v.bound("jacobian_vs_fd", jac, 1e-5);
  return v;
}

Verdict criterion_10(Runs&) {
  Verdict v;
  const auto start = Clock::now();
  std::vector<std::string> all = kStatic;
  all.insert(all.end(), kJoint.begin(), kJoint.end());
  for (const auto& stem : all) {
    const auto c = load_config(config_dir() + "/" + stem + ".json");
    const auto a = run_experiment(c), b = run_experiment(c);
    v.require(stem + " csv", to_csv(a.trace) == to_csv(b.trace));
    v.require(stem + " json", to_report_text(a.report) == to_report_text(b.report));
  }
  v.bound("seconds", seconds_since(start), 60.0);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Verdict(Runs&)>> criteria = {
      criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
      criterion_6, criterion_7, criterion_8, criterion_9, criterion_10};
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (only < 1 || only > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "usage: acceptance [criterion 1-%zu]\n", criteria.size());
      return 1;
    }
  }

  Runs runs;
  bool all_pass = true;
  const auto start = Clock::now();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i) + 1 != only) continue;
    Verdict v;
    try {
      v = criteria[i](runs);
    } catch (const std::exception& e) {
      v.require(std::string("run (") + e.what() + ")", false);
    }
    all_pass = all_pass && v.pass();
    std::printf("%s criterion %zu: %s\n", v.pass() ? "PASS" : "FAIL", i + 1, v.detail().c_str());
  }
  std::printf("total %.2f s\n", seconds_since(start));
  return all_pass ? 0 : 1;
}
