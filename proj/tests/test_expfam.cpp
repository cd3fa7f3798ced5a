#include "ngkf/expfam.hpp"
#include "ngkf/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace ngkf;
using oracle::M;
using oracle::V;
using Fam = ExpFamModel<double>;

namespace {

V vec(std::initializer_list<double> xs) {
  V v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

V one(double x) { return vec({x}); }

}  // namespace

TEST_SUITE("expfam") {
  TEST_CASE("sufficient statistics") {
    CHECK(sufficient_stats(Fam::bernoulli(), one(1))(0) == 1.0);
    CHECK(sufficient_stats(Fam::bernoulli(), one(0))(0) == 0.0);
    CHECK(sufficient_stats(Fam::categorical(3), one(3)) == V::Zero(2));
    CHECK(sufficient_stats(Fam::categorical(3), one(2)) == vec({0, 1}));
    CHECK(sufficient_stats(Fam::gaussian_identity(2), vec({1.5, -2})) == vec({1.5, -2}));

    CHECK_THROWS_AS(sufficient_stats(Fam::bernoulli(), one(2)), DomainError);
    CHECK_THROWS_AS(sufficient_stats(Fam::bernoulli(), one(0.5)), DomainError);
    CHECK_THROWS_AS(sufficient_stats(Fam::categorical(3), one(0)), DomainError);
    CHECK_THROWS_AS(sufficient_stats(Fam::categorical(3), one(4)), DomainError);
  }

  TEST_CASE("log likelihood includes normalization") {
    CHECK(log_likelihood(Fam::bernoulli(), one(1), one(0.5)) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    const double gauss = 0.5 + std::log(2 * std::numbers::pi);
    CHECK(log_likelihood(Fam::gaussian_identity(2), vec({1, 0}), vec({0, 0})) ==
          doctest::Approx(gauss).epsilon(1e-14));
    CHECK(log_likelihood(Fam::categorical(3), one(2), vec({0.2, 0.3})) ==
          doctest::Approx(-std::log(0.3)).epsilon(1e-14));

    // Full density against the written-out oracle, non-identity covariance.
    M cov(2, 2);
    cov << 2, 0.3, 0.3, 1;
    const V y = vec({0.4, -1.2}), mean = vec({-0.1, 0.5});
    CHECK(log_likelihood(Fam::gaussian(cov), y, mean) ==
          doctest::Approx(-oracle::gaussian_logp(y, mean, cov)).epsilon(1e-13));

    CHECK_THROWS_AS(log_likelihood(Fam::bernoulli(), one(1), one(0.0)), DomainError);
    CHECK_THROWS_AS(log_likelihood(Fam::bernoulli(), one(1), one(1.0)), DomainError);
    CHECK_THROWS_AS(log_likelihood(Fam::categorical(3), one(1), vec({0.6, 0.4})), DomainError);
    CHECK_THROWS_AS(log_likelihood(Fam::categorical(3), one(1), vec({0.2})), ContractError);
  }

  TEST_CASE("statistic covariance") {
    CHECK(stat_covariance(Fam::bernoulli(), one(0.5))(0, 0) == 0.25);
    // Two-outcome covariance sum: E[T^2] - E[T]^2 with T in {0, 1}.
    CHECK(stat_covariance(Fam::bernoulli(), one(0.3))(0, 0) == doctest::Approx(0.3 - 0.09).epsilon(1e-15));

    M want(2, 2);
    want << 0.16, -0.06, -0.06, 0.21;
    const M got = stat_covariance(Fam::categorical(3), vec({0.2, 0.3}));
    CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK((got - oracle::enumerated_stat_cov_categorical(vec({0.2, 0.3}))).cwiseAbs().maxCoeff() <= 1e-15);

    M diag = M::Zero(2, 2);
    diag.diagonal() << 2, 3;
    CHECK(stat_covariance(Fam::gaussian(diag), vec({7, 8})) == diag);

    CHECK_THROWS_AS(stat_covariance(Fam::bernoulli(), one(0.0)), SingularityError);
    CHECK_THROWS_AS(stat_covariance(Fam::categorical(3), vec({0.5, 0.5})), SingularityError);
  }

  TEST_CASE("gaussian construction checks its covariance") {
    M asym(2, 2);
    asym << 1, 0.1, 0, 1;
    CHECK_THROWS_AS(Fam::gaussian(asym), ContractError);
    M indefinite(2, 2);
    indefinite << 1, 2, 2, 1;
    CHECK_THROWS_AS(Fam::gaussian(indefinite), SingularityError);
    CHECK_THROWS_AS(Fam::categorical(1), ContractError);
  }

  TEST_CASE("loss gradient with respect to the mean") {
    CHECK(loss_grad_mean(Fam::bernoulli(), one(1), one(0.5))(0) == -2.0);
    const auto g = loss_grad_mean(Fam::gaussian_identity(2), vec({1, 0}), vec({0, 0}));
    CHECK(g(0) == -1.0);
    CHECK(g(1) == 0.0);
    // T(y) = yhat gives a zero row.
    CHECK(loss_grad_mean(Fam::gaussian_identity(2), vec({0.3, 0.4}), vec({0.3, 0.4})).isZero(0));
    // Bernoulli finite-difference check.
    const double fd = oracle::central_derivative(
        [](double p) { return -oracle::bernoulli_logp(1, p); }, 0.5);
    CHECK(std::abs(fd - (-2.0)) / 2.0 <= 1e-5);
  }

  TEST_CASE("Fisher with respect to the mean") {
    CHECK(fisher_wrt_mean(Fam::bernoulli(), one(0.5))(0, 0) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(fisher_wrt_mean(Fam::gaussian_identity(3), V(V::Zero(3))) == M::Identity(3, 3));
    const V mean = vec({0.2, 0.3});
    const M want = oracle::enumerated_fisher_categorical(mean);
    CHECK(oracle::rel_err(fisher_wrt_mean(Fam::categorical(3), mean), want) <= 1e-12);
  }

  TEST_CASE("mean / natural round trip") {
    auto r = mean_natural_roundtrip(Fam::bernoulli(), one(0.5));
    CHECK(r.natural(0) == 0.0);
    CHECK(r.recovered_mean(0) == 0.5);

    const double s1 = 1 / (1 + std::exp(-1.0));
    r = mean_natural_roundtrip(Fam::bernoulli(), one(s1));
    CHECK(r.natural(0) == doctest::Approx(1.0).epsilon(1e-12));

    r = mean_natural_roundtrip(Fam::categorical(3), vec({1.0 / 3, 1.0 / 3}));
    CHECK(r.natural.cwiseAbs().maxCoeff() <= 1e-15);

    CHECK_THROWS_AS(mean_natural_roundtrip(Fam::bernoulli(), one(1.0)), DomainError);
  }

  TEST_CASE("property: round trip and d(mean)/d(natural) = Cov(T)") {
    Rng rng(101, Stream::Tests);
    M cov(2, 2);
    cov << 1.5, -0.4, -0.4, 0.8;
    const std::vector<Fam> fams = {Fam::gaussian(cov), Fam::bernoulli(), Fam::categorical(3),
                                   Fam::categorical(5)};
    for (const auto& fam : fams) {
      for (int i = 0; i < 30; ++i) {
        V mean;
        if (fam.kind() == FamilyKind::GaussianKnownCov) mean = rng.normal_vector(2);
        else if (fam.kind() == FamilyKind::Bernoulli) mean = one(oracle::random_probability(rng));
        else mean = oracle::random_simplex_interior(rng, fam.stat_dim());
        const auto r = mean_natural_roundtrip(fam, mean);
        CHECK((r.recovered_mean - mean).cwiseAbs().maxCoeff() <= 1e-12);
        const M jac = oracle::central_jacobian(
            [&](const V& beta) { return natural_to_mean(fam, beta); }, r.natural);
        CHECK((jac - stat_covariance(fam, mean)).cwiseAbs().maxCoeff() <= 1e-6);
      }
    }
  }

  TEST_CASE("property: covariance symmetric positive-definite") {
    Rng rng(102, Stream::Tests);
    for (int K : {2, 3, 6}) {
      for (int i = 0; i < 50; ++i) {
        const V mean = oracle::random_simplex_interior(rng, K - 1, 1e-3);
        const M R = stat_covariance(Fam::categorical(K), mean);
        CHECK((R - R.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(Eigen::LLT<M>(R).info() == Eigen::Success);
      }
    }
  }

  TEST_CASE("property: innovation equals -R times the loss gradient") {
    Rng rng(103, Stream::Tests);
    M cov(2, 2);
    cov << 2.0, 0.5, 0.5, 1.0;
    for (int i = 0; i < 100; ++i) {
      {
        const V mean = rng.normal_vector(2), y = rng.normal_vector(2);
        const V r = y - mean + cov * loss_grad_mean(Fam::gaussian(cov), y, mean).transpose();
        CHECK(r.cwiseAbs().maxCoeff() <= 1e-12 * (1 + cov.cwiseAbs().maxCoeff() * (y - mean).cwiseAbs().maxCoeff()));
      }
      {
        const double p = oracle::random_probability(rng, 1e-3);
        const V y = one(rng.uniform() < 0.5 ? 0 : 1);
        const auto fam = Fam::bernoulli();
        const V r = sufficient_stats(fam, y) - one(p) +
                    stat_covariance(fam, one(p)) * loss_grad_mean(fam, y, one(p)).transpose();
        CHECK(std::abs(r(0)) <= 1e-12);
      }
      {
        const auto fam = Fam::categorical(4);
        const V mean = oracle::random_simplex_interior(rng, 3, 1e-3);
        const V y = one(1 + static_cast<int>(rng.uniform() * 4));
        const V r = sufficient_stats(fam, y) - mean +
                    stat_covariance(fam, mean) * loss_grad_mean(fam, y, mean).transpose();
        CHECK(r.cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }

  TEST_CASE("property: loss gradient matches finite differences") {
    Rng rng(104, Stream::Tests);
    M cov(2, 2);
    cov << 1.0, 0.2, 0.2, 0.5;
    for (int i = 0; i < 50; ++i) {
      const V y = rng.normal_vector(2), mean = rng.normal_vector(2);
      const V fd = oracle::central_gradient(
          [&](const V& m) { return -oracle::gaussian_logp(y, m, cov); }, mean);
      CHECK(oracle::fd_rel_err(loss_grad_mean(Fam::gaussian(cov), y, mean).transpose(), fd) <= 1e-5);

      const V cm = oracle::random_simplex_interior(rng, 2);
      const int k = 1 + static_cast<int>(rng.uniform() * 3);
      CHECK(oracle::fd_rel_err(loss_grad_mean(Fam::categorical(3), one(k), cm).transpose(),
                               -oracle::categorical_score(k, cm)) <= 1e-5);
    }
  }

  TEST_CASE("property: score has zero mean and enumerated Fisher") {
    Rng rng(105, Stream::Tests);
    for (int i = 0; i < 50; ++i) {
      const double p = oracle::random_probability(rng);
      const auto fam = Fam::bernoulli();
      V mean_score = V::Zero(1);
      for (const auto& [y, prob] : enumerate_outcomes(fam, one(p)))
        mean_score += prob * loss_grad_mean(fam, y, one(p)).transpose();
      CHECK(std::abs(mean_score(0)) <= 1e-12);
      CHECK(oracle::rel_err(fisher_wrt_mean(fam, one(p)), oracle::enumerated_fisher_bernoulli(p)) <= 1e-12);

      const auto cat = Fam::categorical(3);
      const V cm = oracle::random_simplex_interior(rng, 2);
      V cat_score = V::Zero(2);
      for (const auto& [y, prob] : enumerate_outcomes(cat, cm))
        cat_score += prob * loss_grad_mean(cat, y, cm).transpose();
      CHECK(cat_score.cwiseAbs().maxCoeff() <= 1e-12);
      CHECK(oracle::rel_err(fisher_wrt_mean(cat, cm), oracle::enumerated_fisher_categorical(cm)) <= 1e-12);
    }
  }

  TEST_CASE("covariance identity Cov(f, T) = J^{-1} dE[f]/dmean") {
    // Bernoulli with f(y) = y^2 + 3y: Cov(f, T) by enumeration vs the
    // natural-gradient form with a finite-difference derivative of E[f].
    const auto f = [](double y) { return y * y + 3 * y; };
    for (double p : {0.1, 0.35, 0.5, 0.8}) {
      const double ef = p * f(1) + (1 - p) * f(0);
      const double cov_fT = p * f(1) * 1 - ef * p;
      const double dEf = oracle::central_derivative([&](double q) { return q * f(1) + (1 - q) * f(0); }, p);
      const double nat = fisher_wrt_mean(Fam::bernoulli(), one(p))(0, 0);
      CHECK(std::abs(cov_fT - dEf / nat) <= 1e-6);
    }
  }

  TEST_CASE("sampling frequencies") {
    Rng rng(106, Stream::Tests);
    const auto fam = Fam::categorical(3);
    const V mean = vec({0.2, 0.3});
    std::vector<int> count(4, 0);
    const int n = 20000;
    for (int i = 0; i < n; ++i) count[static_cast<int>(sample(fam, mean, rng)(0))]++;
    CHECK(std::abs(count[1] / double(n) - 0.2) < 0.015);
    CHECK(std::abs(count[2] / double(n) - 0.3) < 0.015);
    CHECK(std::abs(count[3] / double(n) - 0.5) < 0.015);
  }
}
