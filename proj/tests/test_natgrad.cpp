#include "ngkf/ekf.hpp"
#include "ngkf/natgrad.hpp"
#include "ngkf/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

using namespace ngkf;
using oracle::M;
using oracle::V;
using Fam = ExpFamModel<double>;
using Est = FisherEstimator<double>;
using Sched = RateSchedule<double>;
using NG = NatGradState<double>;

namespace {

V vec(std::initializer_list<double> xs) {
  V v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

V one(double x) { return vec({x}); }

M scalar(double x) { return M::Constant(1, 1, x); }

std::vector<double> decays(const Sched& s, int steps) {
  std::vector<double> out;
  for (int t = 1; t <= steps; ++t) out.push_back(rate_to_decay(s, t));
  return out;
}

}  // namespace

TEST_SUITE("natgrad") {
  TEST_CASE("Fisher update examples") {
    const auto model = StaticModel<double>::linear(1, 1);
    auto est = Est::exact();
    const NG st{one(0), scalar(1)};
    CHECK(fisher_update(st, model, Fam::gaussian_identity(1), one(1), one(1), 0.5, est).J(0, 0) == 1.0);

    // gamma = 1 forgets the past entirely.
    const NG far{one(0.3), scalar(123)};
    CHECK(fisher_update(far, model, Fam::gaussian_identity(1), one(2), one(0), 1.0, est).J(0, 0) ==
          doctest::Approx(4.0).epsilon(1e-15));

    CHECK_THROWS_AS(fisher_update(st, model, Fam::gaussian_identity(1), one(1), one(1), 0.0, est),
                    ContractError);
    CHECK_THROWS_AS(fisher_update(st, model, Fam::gaussian_identity(1), one(1), one(1), 1.5, est),
                    ContractError);
  }

  TEST_CASE("exact Fisher matches enumeration and the Gaussian closed form") {
    Rng rng(31, Stream::Tests);
    auto est = Est::exact();
    for (int i = 0; i < 50; ++i) {
      // Bernoulli: mean = theta . u kept inside (0.1, 0.9).
      const auto lin = StaticModel<double>::linear(2, 1);
      const V u = vec({0.5 + rng.uniform(), 0.5 + rng.uniform()});
      const double p = oracle::random_probability(rng, 0.1);
      const V theta = vec({p / (2 * u(0)), p / (2 * u(1))});
      const NG st{theta, M::Zero(2, 2)};
      const M H = jacobian_theta(lin, theta, u);
      const M want = H.transpose() * oracle::enumerated_fisher_bernoulli(p) * H;
      const M got = fisher_update(st, lin, Fam::bernoulli(), u, one(1), 1.0, est).J;
      CHECK(oracle::rel_err(got, want) <= 1e-12);

      // Categorical with three classes through a 1-input linear model.
      const auto cat_model = StaticModel<double>::linear(1, 2);
      const V mean = oracle::random_simplex_interior(rng, 2, 0.1);
      const NG cst{mean, M::Zero(2, 2)};
      const M Hc = jacobian_theta(cat_model, mean, one(1));
      const M want_c = Hc.transpose() * oracle::enumerated_fisher_categorical(mean) * Hc;
      CHECK(oracle::rel_err(fisher_update(cst, cat_model, Fam::categorical(3), one(1), one(2), 1.0, est).J,
                            want_c) <= 1e-12);

      // Gaussian: H^T R^{-1} H with an explicit inverse.
      const auto net = StaticModel<double>::one_hidden_layer(2, 3, 2);
      const M cov = oracle::random_spd(rng, 2);
      const V th = rng.normal_vector(net.param_dim()), un = rng.normal_vector(2);
      const M Hn = jacobian_theta(net, th, un);
      const NG gst{th, M::Zero(net.param_dim(), net.param_dim())};
      CHECK(oracle::rel_err(fisher_update(gst, net, Fam::gaussian(cov), un, vec({0, 0}), 1.0, est).J,
                            Hn.transpose() * cov.inverse() * Hn) <= 1e-12);
    }
  }

  TEST_CASE("single-sample Monte Carlo Fisher is unbiased") {
    const auto lin = StaticModel<double>::linear(2, 1);
    const V u = vec({0.7, 1.3}), theta = vec({0.2, 0.1});
    const NG st{theta, M::Zero(2, 2)};
    auto exact = Est::exact();
    const M want = fisher_update(st, lin, Fam::bernoulli(), u, one(0), 1.0, exact).J;

    auto mc = Est::monte_carlo(5);
    const int n = 100000;
    M sum = M::Zero(2, 2), sum_sq = M::Zero(2, 2);
    for (int i = 0; i < n; ++i) {
      const M draw = fisher_update(st, lin, Fam::bernoulli(), u, one(0), 1.0, mc).J;
      sum += draw;
      sum_sq += draw.cwiseProduct(draw);
    }
    const M mean = sum / n;
    const M var = sum_sq / n - mean.cwiseProduct(mean);
    const M se = (var / n).cwiseSqrt();
    for (Eigen::Index i = 0; i < 2; ++i)
      for (Eigen::Index j = 0; j < 2; ++j) CHECK(std::abs(mean(i, j) - want(i, j)) <= 3 * se(i, j));
  }

  TEST_CASE("outer-product Fisher uses the observed outcome") {
    const auto model = StaticModel<double>::linear(1, 1);
    auto est = Est::outer_product();
    // loss gradient (yhat - y) u = (0.5 - 2) * 3.
    const NG st{one(0.5), scalar(0)};
    CHECK(fisher_update(st, model, Fam::gaussian_identity(1), one(1), one(2), 1.0, est).J(0, 0) ==
          doctest::Approx(2.25));
  }

  TEST_CASE("parameter update examples") {
    const auto model = StaticModel<double>::linear(1, 1);
    const Fam fam = Fam::gaussian_identity(1);
    const NG st{one(0), scalar(1)};
    const NG next = param_update(st, model, fam, one(1), one(1), 0.5);
    CHECK(next.theta(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(next.J == st.J);
    CHECK(next.t == 1);
    CHECK(param_update(st, model, fam, one(1), one(0), 0.5).theta(0) == 0.0);
    CHECK(param_update(st, model, fam, one(1), one(1), 0.0).theta(0) == 0.0);

    const NG flat{one(0), scalar(0)};
    CHECK_THROWS_AS(param_update(flat, model, fam, one(1), one(1), 0.5), SingularityError);
    try {
      param_update(flat, model, fam, one(1), one(1), 0.5);
    } catch (const SingularityError& e) {
      CHECK(std::string(e.what()).find("prior-regularized") != std::string::npos);
    }
  }

  TEST_CASE("metric before parameter reproduces the filter") {
    // u = 2 so that the fresh Fisher term (4) differs from J0 = 1.
    const auto model = StaticModel<double>::linear(1, 1);
    const Fam fam = Fam::gaussian_identity(1);
    const NG st{one(0), scalar(1)};
    auto est = Est::exact();
    const double eta = 0.5;

    const NG documented = natgrad_step(st, model, fam, one(2), one(1), eta, eta, est);
    const NG swapped = fisher_update(param_update(st, model, fam, one(2), one(1), eta), model, fam,
                                     one(2), one(1), eta, est);

    // Filter with P0 = eta0 / J0 = 1 and eta0 = 1/(0+1).
    EkfState<double> filt{one(0), scalar(1), M(), FilterMode::Static};
    const auto post = observe(transition(filt, StaticProcess<double>(model), one(2)), fam, one(1));

    CHECK(documented.theta(0) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(post.state.s(0) == doctest::Approx(documented.theta(0)).epsilon(1e-15));
    CHECK(swapped.theta(0) == doctest::Approx(1.0));
    CHECK(std::abs(swapped.theta(0) - post.state.s(0)) > 0.5);
  }

  TEST_CASE("schedules and decay factors") {
    const auto harmonic = Sched::one_over_t_plus_c(1);
    CHECK(harmonic.eta(1) == 0.5);
    for (int t = 1; t <= 50; ++t) CHECK(rate_to_decay(harmonic, t) == 0.0);
    for (int t = 1; t <= 50; ++t) CHECK(rate_to_decay(Sched::constant(0.1), t) == 0.1);

    // (t+1)^{-1/2} at t = 1 is the t^{-1/2} schedule at t = 2.
    const auto root = Sched::power_law(0.5, 1);
    CHECK(1 - rate_to_decay(root, 1) == doctest::Approx(std::sqrt(2.0) - 1).epsilon(1e-14));
    CHECK(rate_to_decay(root, 1) == doctest::Approx(0.585786).epsilon(1e-6));

    // eta_0 := eta_1 for the prior-regularized runs.
    const auto reg = Sched::constant(0.1).with_eta0(0.1);
    CHECK(!reg.eta0_overridden());
    const auto shifted = Sched::one_over_t_plus_c(1).with_eta0(0.5);
    CHECK(shifted.eta0_overridden());
    CHECK(rate_to_decay(shifted, 1) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(rate_to_decay(shifted, 2) == 0.0);

    CHECK_THROWS_AS(rate_to_decay(harmonic, 0), ContractError);
    CHECK_THROWS_AS(Sched::one_over_t_plus_c(0.5), ContractError);
    CHECK_THROWS_AS(Sched::constant(0.0), ContractError);
    CHECK_THROWS_AS(Sched::constant(1.5), ContractError);
    // eta_1 = 1 after eta_0 = 0.5 leaves 1 - lambda = 0.
    CHECK_THROWS_AS(rate_to_decay(Sched::constant(1.0).with_eta0(0.5), 1), ContractError);
  }

  TEST_CASE("decay factors back to rates") {
    const std::vector<double> zeros(20, 0.0);
    for (const double c : {1.0, 2.0, 7.0})
      for (int t = 0; t <= 20; ++t)
        CHECK(decay_to_rate<double>(zeros, 1 / c, t) == doctest::Approx(1 / (t + c)).epsilon(1e-14));

    const std::vector<double> fixed(30, 0.25);
    for (int t = 0; t <= 30; ++t) CHECK(decay_to_rate<double>(fixed, 0.25, t) == doctest::Approx(0.25));

    const std::vector<double> half{0.5};
    CHECK(decay_to_rate<double>(half, 1.0, 1) == doctest::Approx(2.0 / 3).epsilon(1e-15));
    CHECK_THROWS_AS(decay_to_rate<double>(half, 1.0, 2), ContractError);
  }

  TEST_CASE("property: rates survive the round trip over 10^3 steps") {
    for (const auto& s : {Sched::one_over_t_plus_c(1), Sched::one_over_t_plus_c(5), Sched::constant(0.1),
                          Sched::power_law(0.5, 1), Sched::power_law(0.7, 3),
                          Sched::constant(0.1).with_eta0(0.2)}) {
      const auto lambdas = decays(s, 1000);
      double worst = 0;
      for (int t = 0; t <= 1000; ++t)
        worst = std::max(worst, std::abs(decay_to_rate<double>(lambdas, s.eta(0), t) - s.eta(t)));
      CHECK(worst <= 1e-12);
    }
  }

  TEST_CASE("regularized step examples") {
    const auto model = StaticModel<double>::linear(2, 1);
    const Fam fam = Fam::gaussian_identity(1);
    Rng rng(32, Stream::Tests);
    const M J = oracle::random_spd(rng, 2);
    const NG st{vec({0.4, -0.3}), J};
    const V u = vec({1.0, 2.0}), y = one(0.7);

    PriorSpec<double> none{vec({0, 0}), M::Identity(2, 2), 0.0};
    const NG a = regularized_param_update(st, model, fam, u, y, 0.2, 0.3, none);
    const NG b = param_update(st, model, fam, u, y, 0.2);
    CHECK(a.theta == b.theta);

    // lambda = 0: only the Fisher regularization remains.
    const M sigma0 = oracle::random_spd(rng, 2);
    PriorSpec<double> prior{vec({1, 1}), sigma0, 3.0};
    const double eta = 0.2;
    const NG r = regularized_param_update(st, model, fam, u, y, eta, 0.0, prior);
    const V grad = (u.dot(st.theta) - y(0)) * u;
    const V want = st.theta - eta * (J + eta * 3.0 * sigma0.inverse()).inverse() * grad;
    CHECK(oracle::rel_err(r.theta, want) <= 1e-12);

    // Zero data gradient: a pure pull toward the prior mean.
    const auto scalar_model = StaticModel<double>::linear(1, 1);
    const NG s1{one(1), scalar(1)};
    PriorSpec<double> unit{one(0), scalar(1), 1.0};
    const NG pulled = regularized_param_update(s1, scalar_model, fam, one(0), one(5), 0.1, 0.1, unit);
    CHECK(pulled.theta(0) == doctest::Approx(1 - 0.01 / 1.1).epsilon(1e-15));

    const NG multi = regularized_param_update(NG{vec({2, -1}), J}, model, fam, vec({0, 0}), one(3), 0.1,
                                              0.2, prior);
    CHECK((multi.theta - prior.theta_prior).norm() < (vec({2, -1}) - prior.theta_prior).norm());

    PriorSpec<double> bad{one(0), scalar(-1), 1.0};
    CHECK_THROWS_AS(regularized_param_update(s1, scalar_model, fam, one(1), one(1), 0.1, 0.1, bad),
                    SingularityError);
    PriorSpec<double> wrong{vec({0, 0}), M::Identity(2, 2), 1.0};
    CHECK_THROWS_AS(regularized_param_update(s1, scalar_model, fam, one(1), one(1), 0.1, 0.1, wrong),
                    ContractError);
  }

  TEST_CASE("regularized step uses eta_t as the metric rate") {
    const auto model = StaticModel<double>::linear(1, 1);
    const Fam fam = Fam::gaussian_identity(1);
    const auto sched = Sched::constant(0.1);
    PriorSpec<double> prior{one(0), scalar(2), 1.0};
    auto est = Est::exact();
    const NG st{one(0.5), scalar(0.5)};
    const NG out = regularized_step(st, model, fam, one(1), one(1), sched, prior, est);
    CHECK(out.t == 1);
    CHECK(out.J(0, 0) == doctest::Approx(0.9 * 0.5 + 0.1));
    const double grad = 0.5 - 1, pull = 0.1 * 1.0 * 0.5 * (0.5 - 0);
    CHECK(out.theta(0) == doctest::Approx(0.5 - 0.1 * (grad + pull) / (out.J(0, 0) + 0.1 * 0.5)));
  }

  TEST_CASE("default metric initialization") {
    CHECK(default_fisher_init(StaticModel<double>::linear(2, 2)) == M::Identity(4, 4));
    const auto net = StaticModel<double>::one_hidden_layer(3, 2, 1);
    CHECK(default_fisher_init(net) == M(net.fan_in().asDiagonal()));
  }

  TEST_CASE("property: the metric stays positive-semidefinite") {
    Rng rng(33, Stream::Tests);
    const auto net = StaticModel<double>::one_hidden_layer(2, 3, 1);
    for (auto est : {Est::exact(), Est::outer_product(), Est::monte_carlo(9)}) {
      NG st{V(0.5 * rng.normal_vector(net.param_dim())), default_fisher_init(net)};
      for (int t = 1; t <= 100; ++t) {
        st = fisher_update(st, net, Fam::gaussian_identity(1), rng.normal_vector(2), rng.normal_vector(1),
                           1.0 / (t + 1), est);
        CHECK(max_abs(M(st.J - st.J.transpose())) <= 1e-10);
        CHECK(Eigen::SelfAdjointEigenSolver<M>(st.J).eigenvalues().minCoeff() >= -1e-12);
      }
    }
  }
}
