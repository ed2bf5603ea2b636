// Unit tests for the square-root EKF0 ODE filter (module odefilter).

#include "pnsmc/odefilter.hpp"
#include "reference.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace pnsmc;
namespace ref = pnsmc::reference;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.begin(), static_cast<Eigen::Index>(v.size()));
}

/// Random square-root state of dimension n with a well-conditioned covariance.
GaussianState random_state(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  GaussianState s;
  s.mean = Eigen::VectorXd::NullaryExpr(n, [&] { return N(rng); });
  Eigen::MatrixXd M = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return N(rng); });
  s.cov_sqrt = detail::qr_r(M);
  return s;
}

double rel_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(InitState, DuffingEquilibrium) {
  const ModelSpec m = duffing_model();
  const auto s = init_state(m, vec({0, 0}), 0.0, {1, 0.5, 100, 1000}, {2, 1}, 100.0);
  EXPECT_TRUE(s.mean.isZero(0.0));
  EXPECT_EQ(s.mean.size(), 4);
}

TEST(InitState, BoucWenDerivativeBlock) {
  const ModelSpec m = bouc_wen_model();
  const auto s = init_state(m, vec({0, 0, 0}), 2.1, {2.1, 8.8, 5.9e4, 4.4e4, 8.6e2, 0.93, 1.3}, {3, 2}, 100.0);
  EXPECT_EQ(s.mean.segment(3, 3), vec({0, 1, 0}));
  EXPECT_TRUE(s.mean.tail(3).isZero(0.0));
  EXPECT_NEAR(s.variance(8), 100.0, 1e-9);
}

TEST(InitState, JitterLowerBoundsDiagonal) {
  const auto s = init_state(duffing_model(), vec({0.1, 0}), 0.0, {1, 0.5, 100, 1000}, {2, 2}, 100.0, 1e-12);
  EXPECT_GE(s.cov_sqrt.diagonal().minCoeff(), std::sqrt(1e-12) * (1 - 1e-12));
  EXPECT_THROW(init_state(duffing_model(), vec({NAN, 0}), 0.0, {1, 0.5, 100, 1000}, {2, 1}, 100.0),
               std::invalid_argument);
}

TEST(Predict, ZeroStepLeavesStateUnchanged) {
  std::mt19937_64 rng(1);
  const auto s = random_state(6, rng);
  const auto out = predict(s, build_transition(0.0, {2, 2}));
  EXPECT_TRUE(out.mean.isApprox(s.mean, 0.0));
  EXPECT_LT(rel_diff(out.covariance(), s.covariance()), 1e-14);
}

TEST(Predict, ZeroCovarianceAndNoiseStayZero) {
  GaussianState s{vec({1, 2}), Eigen::MatrixXd::Zero(2, 2)};
  auto tr = build_transition(0.3, {1, 1});
  tr.Q_sqrt.setZero();
  EXPECT_TRUE(predict(s, tr).cov_sqrt.isZero(0.0));
}

TEST(Predict, MatchesDenseArithmetic) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    const StateLayout L{rep % 2 ? 1 : 3, 1 + rep % 3};
    const auto s = random_state(L.size(), rng);
    const auto tr = build_transition(0.1, L, 0.5 + rep * 0.1);
    const auto out = predict(s, tr);
    const auto dense = ref::predict({s.mean, s.covariance()}, tr.A, tr.Q);
    EXPECT_LT((out.mean - dense.m).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(rel_diff(out.covariance(), dense.P), 1e-12);
    EXPECT_TRUE(out.cov_sqrt.isUpperTriangular());
  }
}

TEST(PseudoUpdate, ZeroInnovationLeavesMean) {
  ModelSpec zero = reference::decay_model();
  zero.rhs = [](const Eigen::VectorXd& x, double, const ParameterVector&, double) {
    return Eigen::VectorXd::Zero(x.size()).eval();
  };
  std::mt19937_64 rng(3);
  auto s = random_state(3, rng);
  s.mean[1] = 0.0;  // Cdot mu = 0 = f
  const auto r = pseudo_update(s, zero, 0.0, 0.0, {}, 0.0, {1, 2}, vec({1.0}));
  EXPECT_DOUBLE_EQ(r.z_hat[0], 0.0);
  EXPECT_LT((r.state.mean - s.mean).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PseudoUpdate, ExactInterpolationWithZeroNoise) {
  std::mt19937_64 rng(4);
  const ModelSpec m = bouc_wen_model();
  const ParameterVector th{2.0, 10.0, 5e4, 5e4, 1e3, 0.8, 1.1};
  for (int rep = 0; rep < 50; ++rep) {
    auto s = random_state(9, rng);
    s.mean.head(3) *= 1e-3;
    const auto r = pseudo_update(s, m, 10.0, 0.0, th, 0.0, {3, 2}, Eigen::VectorXd::Ones(3));
    const Eigen::VectorXd f = m(s.mean.head(3), 10.0, th);
    EXPECT_LT((r.state.mean.segment(3, 3) - f).cwiseAbs().maxCoeff(), 1e-10 * (1 + f.cwiseAbs().maxCoeff()));
    EXPECT_LT(r.residual, 1e-10 * (1 + f.cwiseAbs().maxCoeff()));
  }
}

TEST(PseudoUpdate, MatchesDenseEkf0) {
  std::mt19937_64 rng(5);
  const ModelSpec m = linear_oscillator_model();
  const ParameterVector th{1.3, 0.4, 25.0};
  const StateLayout L{2, 2};
  const auto P = projections(L);
  for (double R : {0.0, 1e-3}) {
    for (int rep = 0; rep < 100; ++rep) {
      const auto s = random_state(L.size(), rng);
      const Eigen::Vector2d g(0.7, 2.5);
      const auto r = pseudo_update(s, m, 0.3, 0.0, th, R, L, g);
      const Eigen::VectorXd f = m(s.mean.head(2), 0.3, th);
      const auto dense = ref::ekf0_update({s.mean, s.covariance()}, f, P.Cdot, R);
      EXPECT_LT((r.state.mean - dense.m).cwiseAbs().maxCoeff(), 1e-10 * (1 + dense.m.cwiseAbs().maxCoeff()));
      EXPECT_LT((r.state.covariance() - dense.P).cwiseAbs().maxCoeff(), 1e-9 * s.covariance().cwiseAbs().maxCoeff());
      const Eigen::MatrixXd S = P.Cdot * s.covariance() * P.Cdot.transpose() + R * Eigen::Matrix2d::Identity();
      EXPECT_NEAR(r.s_breve, 0.5 * (S(0, 0) / g[0] + S(1, 1) / g[1]), 1e-10 * S.diagonal().maxCoeff());
    }
  }
}

TEST(PseudoUpdate, SingularInnovationFailsSoftly) {
  GaussianState s{vec({0.0, 1.0}), Eigen::MatrixXd::Zero(2, 2)};
  EXPECT_THROW(pseudo_update(s, reference::decay_model(), 0.0, 0.0, {}, 0.0, {1, 1}, vec({1.0}), 0.0), FilterFailure);
}

TEST(DataUpdate, PredictedObservationLeavesMean) {
  std::mt19937_64 rng(6);
  const auto s = random_state(4, rng);
  const auto r = data_update(s, s.mean[2], 2, 0.1);
  EXPECT_DOUBLE_EQ(r.v, 0.0);
  EXPECT_LT((r.state.mean - s.mean).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DataUpdate, HugeNoiseLeavesState) {
  std::mt19937_64 rng(7);
  const auto s = random_state(4, rng);
  const auto r = data_update(s, s.mean[0] + 3.0, 0, 1e12);
  EXPECT_LT((r.state.mean - s.mean).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((r.state.covariance() - s.covariance()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(DataUpdate, MatchesTextbookKalman) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 100; ++rep) {
    const auto s = random_state(6, rng);
    const int idx = rep % 6;
    const auto r = data_update(s, 0.7, idx, 0.05);
    const auto k = ref::kalman_update({s.mean, s.covariance()}, 0.7, idx, 0.05);
    EXPECT_NEAR(r.v, k.v, 1e-12);
    EXPECT_NEAR(r.S_y, k.S, 1e-12 * k.S);
    EXPECT_LT((r.state.mean - k.state.m).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((r.state.covariance() - k.state.P).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(DataUpdate, InvalidInputs) {
  std::mt19937_64 rng(9);
  const auto s = random_state(2, rng);
  EXPECT_THROW(data_update(s, 1.0, 0, 0.0), std::invalid_argument);
  EXPECT_THROW(data_update(s, NAN, 0, 1.0), std::invalid_argument);
}

TEST(Calibration, AllZeroInnovationsGiveFloor) {
  std::vector<FilterStepRecord> recs(5);
  for (auto& r : recs) {
    r.z_hat = Eigen::VectorXd::Zero(2);
    r.s_breve = 1.0;
  }
  EXPECT_EQ(calibrate_gamma(recs, 1e-12), Eigen::VectorXd::Constant(2, 1e-12));
  std::vector<FilterStepRecord> none(3);
  for (auto& r : none) r.z_hat = Eigen::VectorXd::Ones(2);
  EXPECT_EQ(calibrate_gamma(none, 1e-12), Eigen::VectorXd::Constant(2, 1e-12));
}

TEST(Calibration, SingleRecord) {
  FilterStepRecord r;
  r.z_hat = vec({2.0});
  r.s_breve = 1.0;
  EXPECT_DOUBLE_EQ(calibrate_gamma({r})[0], 4.0);
}

TEST(Calibration, MonteCarloConsistency) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.1, 10.0);
  const Eigen::Vector3d sigma2(0.5, 3.0, 40.0);
  std::vector<FilterStepRecord> recs(10000);
  for (auto& r : recs) {
    r.s_breve = U(rng);
    r.z_hat = Eigen::VectorXd(3);
    for (int i = 0; i < 3; ++i) r.z_hat[i] = std::sqrt(sigma2[i] * r.s_breve) * N(rng);
  }
  const auto g = calibrate_gamma(recs);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(g[i] / sigma2[i], 1.0, 0.05);
}

TEST(LogLik, Examples) {
  EXPECT_NEAR(log_lik_increment(0.0, 1.0 / (2 * std::numbers::pi)), 0.0, 1e-15);
  EXPECT_NEAR(-log_lik_increment(0.0, 1.0), 0.9189385332046727, 1e-15);
  EXPECT_GT(-log_lik_increment(0.5, 4.0), -log_lik_increment(0.5, 1.0));
  EXPECT_THROW(log_lik_increment(0.0, 0.0), std::invalid_argument);
}

TEST(SolveAndScore, EmptyDatasetReturnsInitialState) {
  TimeSeriesDataset ds;
  ds.rate_hz = 10.0;
  SolverConfig cfg;
  cfg.x0 = vec({0.5, 0.0});
  const ParameterVector th{1, 0.5, 100, 1000};
  const auto r = solve_and_score(duffing_model(), th, ds, cfg);
  EXPECT_TRUE(r.ok);
  EXPECT_EQ(r.log_lik, 0.0);
  const auto s0 = init_state(duffing_model(), cfg.x0, 0.0, th, {2, 1}, cfg.sigma0_extra, cfg.eps_chol);
  EXPECT_EQ(r.state.mean, s0.mean);
}

TEST(SolveAndScore, LikelihoodIsSumOfIncrements) {
  TimeSeriesDataset ds = reference::unobserved_grid(200, 50.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.u[i] = std::sin(3.0 * ds.t[i]);
    ds.y[i] = i % 7 == 3 ? std::nan("") : 0.01 * std::sin(2.0 * ds.t[i]);
  }
  SolverConfig cfg;
  cfg.q = 2;
  cfg.n_sub = 2;
  cfg.R_y = 1e-4;
  const auto r = solve_and_score(duffing_model(), {1, 0.5, 100, 1000}, ds, cfg, std::nullopt, {true, false, true});
  ASSERT_TRUE(r.ok);
  double sum = 0.0;
  std::size_t with_data = 0;
  for (const auto& rec : r.records) {
    sum += rec.log_lik_increment;
    with_data += rec.has_data;
    if (rec.has_data) {
      EXPECT_GT(rec.S_y, 0.0);
    }
  }
  EXPECT_EQ(sum, r.log_lik);
  EXPECT_EQ(with_data, ds.size() - ds.size() / 7 - (ds.size() % 7 > 3));
  EXPECT_EQ(r.records.size(), 1 + (ds.size() - 1) * 2);
  EXPECT_EQ(r.gamma_trace.size(), ds.size());
}

TEST(SolveAndScore, TrueParametersScoreHigher) {
  // Closed-form free response of the undamped oscillator x'' = -(k/m) x.
  const double m = 1.0, k = 40.0, w = std::sqrt(k / m);
  TimeSeriesDataset ds = reference::unobserved_grid(300, 100.0);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.y[i] = std::cos(w * ds.t[i]);
  SolverConfig cfg;
  cfg.q = 2;
  cfg.n_sub = 4;
  cfg.R_y = 1e-8;
  cfg.x0 = vec({1.0, 0.0});
  const ModelSpec model = linear_oscillator_model();
  const double ll_true = solve_and_score(model, {m, 0.0, k}, ds, cfg).log_lik;
  const double ll_bad = solve_and_score(model, {m, 0.0, 2 * k}, ds, cfg).log_lik;
  EXPECT_GT(ll_true, ll_bad);
}

TEST(SolveAndScore, FailureGivesMinusInfinity) {
  TimeSeriesDataset ds = reference::unobserved_grid(100, 10.0);
  SolverConfig cfg;
  cfg.x0 = vec({1.0, 0.0});
  // A huge cubic stiffness blows the state up within a few steps.
  const auto r = solve_and_score(duffing_model(), {1e-6, 0.0, 0.0, 1e200}, ds, cfg);
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.log_lik, -std::numeric_limits<double>::infinity());
  EXPECT_FALSE(r.failure.empty());
}

TEST(SolveAndScore, OnlineCalibrationTracksDiffusion) {
  TimeSeriesDataset ds = reference::unobserved_grid(100, 10.0);
  SolverConfig cfg;
  cfg.x0 = vec({1.0});
  cfg.q = 2;
  const auto r = solve_and_score(reference::decay_model(), {}, ds, cfg, std::nullopt, {true, false, true});
  ASSERT_TRUE(r.ok);
  // Gamma after step t equals the estimator over the records so far.
  std::vector<FilterStepRecord> so_far;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    so_far.push_back(r.records[i]);
    if (i == 0) continue;
    EXPECT_NEAR(r.gamma_trace[i][0], calibrate_gamma(so_far)[0], 1e-12 * r.gamma_trace[i][0]);
  }
}

TEST(SolverConfig, Validation) {
  SolverConfig c;
  c.n_sub = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.R_y = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.R = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.eps_chol = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
