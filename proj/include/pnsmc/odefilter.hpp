#pragma once

// Probabilistic ODE solver: an EKF0 filter over the derivative-stacked state
// with an IWP prior, conditioned on the ODE residual at every grid point and
// on scalar measurements at observation times. Covariances are carried as
// upper-triangular square-root factors S with Sigma = S^T S.

#include "pnsmc/dataset.hpp"
#include "pnsmc/iwp.hpp"
#include "pnsmc/models.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnsmc {

struct GaussianState {
  Eigen::VectorXd mean;
  /// Upper-triangular, nonnegative diagonal.
  Eigen::MatrixXd cov_sqrt;

  Eigen::MatrixXd covariance() const { return cov_sqrt.transpose() * cov_sqrt; }
  double variance(Eigen::Index i) const { return cov_sqrt.col(i).squaredNorm(); }
  bool finite() const { return mean.allFinite() && cov_sqrt.allFinite(); }
};

enum class Calibration { online, fixed };

struct SolverConfig {
  /// Number of modelled derivatives; the state holds q+1 blocks.
  int q = 1;
  /// Integration substeps per observation interval.
  int n_sub = 1;
  /// Pseudo-measurement noise variance.
  double R = 0.0;
  /// Measurement noise variance.
  double R_y = 1e-6;
  Calibration calibration = Calibration::online;
  /// Diffusion used before the first calibration record, and throughout in fixed mode.
  double gamma_init = 1.0;
  double gamma_min = 1e-12;
  double eps_chol = 1e-12;
  /// Prior variance of derivative blocks beyond X(2).
  double sigma0_extra = 1e2;
  /// Disables the ODE conditioning; leaves a linear-Gaussian IWP + data filter.
  bool pseudo_updates = true;
  /// Initial state x1; empty means zeros.
  Eigen::VectorXd x0;

  void validate() const {
    if (q < 1 || q > 4) throw std::invalid_argument("solver.q must lie in [1, 4]");
    if (n_sub < 1) throw std::invalid_argument("solver.n_sub must be >= 1");
    if (!(R >= 0.0)) throw std::invalid_argument("solver.R must be >= 0");
    if (!(R_y > 0.0) || !std::isfinite(R_y)) throw std::invalid_argument("solver.R_y must be > 0");
    if (!(eps_chol >= 0.0)) throw std::invalid_argument("solver.eps_chol must be >= 0");
    if (!(gamma_min > 0.0)) throw std::invalid_argument("solver.gamma_min must be > 0");
    if (!(gamma_init > 0.0)) throw std::invalid_argument("solver.gamma_init must be > 0");
    if (!(sigma0_extra >= 0.0)) throw std::invalid_argument("solver.sigma0_extra must be >= 0");
  }
};

/// One grid point of a filter run. Pseudo fields are zero at the first
/// observation (no integration step precedes it); data fields are set only
/// when a measurement was assimilated at this grid point.
struct FilterStepRecord {
  std::size_t index = 0;
  Eigen::VectorXd z_hat;
  double s_breve = 0.0;
  bool has_data = false;
  double v = 0.0;
  double S_y = 0.0;
  double log_lik_increment = 0.0;
};

/// Thrown by the step primitives when a factorization cannot be rescued.
struct FilterFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

/// R factor of a Householder QR with rows flipped to a nonnegative diagonal.
inline Eigen::MatrixXd qr_r(const Eigen::MatrixXd& M) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
  const Eigen::Index n = M.cols();
  Eigen::MatrixXd R = qr.matrixQR().topRows(std::min(M.rows(), n)).triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < R.rows(); ++i)
    if (R(i, i) < 0.0) R.row(i) *= -1.0;
  return R;
}

}  // namespace detail

/// Initial moments: X(1) = x1, X(2) = f(x1, u1), higher blocks zero with
/// variance sigma0_extra. X(1) and X(2) carry only jitter variance eps_chol.
inline GaussianState init_state(const ModelSpec& model, const Eigen::VectorXd& x1, double u1,
                                const ParameterVector& theta, const StateLayout& layout, double sigma0_extra,
                                double eps_chol = 1e-12) {
  if (x1.size() != model.dim || layout.d != model.dim) throw std::invalid_argument("init_state: dimension mismatch");
  if (!x1.allFinite()) throw std::invalid_argument("init_state: non-finite initial state");
  const int d = layout.d;
  GaussianState s;
  s.mean = Eigen::VectorXd::Zero(layout.size());
  s.mean.head(d) = x1;
  if (layout.q >= 1) s.mean.segment(d, d) = model(x1, u1, theta, 0.0);
  s.cov_sqrt = Eigen::MatrixXd::Zero(layout.size(), layout.size());
  const double jitter = std::sqrt(eps_chol);
  for (int i = 0; i < layout.size(); ++i) s.cov_sqrt(i, i) = i < 2 * d ? jitter : std::sqrt(sigma0_extra + eps_chol);
  return s;
}

/// mean <- A mean + xi; S <- R factor of [S A^T; Q_sqrt].
inline GaussianState predict(const GaussianState& state, const Eigen::MatrixXd& A, const Eigen::VectorXd& xi,
                             const Eigen::MatrixXd& Q_sqrt) {
  const Eigen::Index n = state.mean.size();
  if (A.rows() != n || A.cols() != n || Q_sqrt.rows() != n || state.cov_sqrt.rows() != n)
    throw std::invalid_argument("predict: dimension mismatch");
  GaussianState out;
  out.mean = A * state.mean;
  if (xi.size() == n) out.mean += xi;
  Eigen::MatrixXd pre(2 * n, n);
  pre.topRows(n) = state.cov_sqrt * A.transpose();
  pre.bottomRows(n) = Q_sqrt;
  out.cov_sqrt = detail::qr_r(pre);
  return out;
}

inline GaussianState predict(const GaussianState& state, const GaussMarkovTransition& trans) {
  return predict(state, trans.A, trans.xi, trans.Q_sqrt);
}

struct PseudoUpdateResult {
  GaussianState state;
  Eigen::VectorXd z_hat;
  double s_breve = 0.0;
  /// max |Cdot mu_F - f(C mu_P)| after the update.
  double residual = 0.0;
  bool jittered = false;
};

/// EKF0 conditioning on Cdot X - f(C X) = 0. The observation matrix is Cdot
/// (no Jacobian of f). s_breve is the innovation scale with the diffusion
/// factored out: mean_i S_ii / gamma_i.
inline PseudoUpdateResult pseudo_update(const GaussianState& state, const ModelSpec& model, double u, double t,
                                        const ParameterVector& theta, double R, const StateLayout& layout,
                                        const Eigen::VectorXd& gamma_used, double eps_chol = 1e-12) {
  const int d = layout.d, n = layout.size();
  if (layout.q < 1) throw std::invalid_argument("pseudo_update: q must be >= 1");
  const Eigen::VectorXd x = state.mean.head(d);
  const Eigen::VectorXd f = model(x, u, theta, t);
  PseudoUpdateResult res;
  res.z_hat = state.mean.segment(d, d) - f;

  // Pre-array [[sqrt(R) I, 0], [S Cdot^T, S]]; its R factor is
  // [[S_t^{1/2}, K-bar^T], [0, S_F]].
  auto factor = [&](double r_total) {
    Eigen::MatrixXd pre = Eigen::MatrixXd::Zero(n + d, d + n);
    pre.topLeftCorner(d, d).diagonal().setConstant(std::sqrt(r_total));
    pre.bottomLeftCorner(n, d) = state.cov_sqrt.middleCols(d, d);
    pre.bottomRightCorner(n, n) = state.cov_sqrt;
    return detail::qr_r(pre);
  };
  auto degenerate = [&](const Eigen::MatrixXd& U) {
    const Eigen::VectorXd diag = U.topLeftCorner(d, d).diagonal().cwiseAbs();
    if (!diag.allFinite()) return true;
    const double top = diag.maxCoeff();
    return !(top > 0.0) || !(diag.minCoeff() > 1e-14 * top) || !(diag.minCoeff() > 1e-150);
  };

  Eigen::MatrixXd U = factor(R);
  if (degenerate(U)) {
    const double tr = state.cov_sqrt.middleCols(d, d).squaredNorm() / d;
    const double jitter = eps_chol * (tr > 0.0 ? tr : 1.0);
    U = factor(R + jitter);
    res.jittered = true;
    if (jitter <= 0.0 || degenerate(U)) throw FilterFailure("pseudo_update: singular innovation covariance");
  }
  const Eigen::MatrixXd U11 = U.topLeftCorner(d, d);
  const Eigen::MatrixXd U12 = U.topRightCorner(d, n);

  const Eigen::VectorXd w = U11.transpose().triangularView<Eigen::Lower>().solve(res.z_hat);
  res.state.mean = state.mean - U12.transpose() * w;
  res.state.cov_sqrt = U.bottomRightCorner(n, n);

  double s = 0.0;
  for (int i = 0; i < d; ++i) s += U11.col(i).squaredNorm() / std::max(gamma_used[i], 1e-300);
  res.s_breve = s / d;
  res.residual = (res.state.mean.segment(d, d) - f).cwiseAbs().maxCoeff();
  if (!res.state.finite()) throw FilterFailure("pseudo_update: non-finite result");
  return res;
}

struct DataUpdateResult {
  GaussianState state;
  double v = 0.0;
  double S_y = 0.0;
};

/// Linear Kalman update on the scalar measurement y = X[obs_flat] + noise.
inline DataUpdateResult data_update(const GaussianState& state, double y, int obs_flat, double R_y) {
  const Eigen::Index n = state.mean.size();
  if (!(R_y > 0.0)) throw std::invalid_argument("data_update: R_y must be > 0");
  if (obs_flat < 0 || obs_flat >= n) throw std::invalid_argument("data_update: observation index out of range");
  if (!std::isfinite(y)) throw std::invalid_argument("data_update: non-finite measurement");
  Eigen::MatrixXd pre = Eigen::MatrixXd::Zero(n + 1, n + 1);
  pre(0, 0) = std::sqrt(R_y);
  pre.bottomLeftCorner(n, 1) = state.cov_sqrt.col(obs_flat);
  pre.bottomRightCorner(n, n) = state.cov_sqrt;
  const Eigen::MatrixXd U = detail::qr_r(pre);
  const double u11 = U(0, 0);

  DataUpdateResult res;
  res.v = y - state.mean[obs_flat];
  res.S_y = u11 * u11;
  res.state.mean = state.mean + U.row(0).tail(n).transpose() * (res.v / u11);
  res.state.cov_sqrt = U.bottomRightCorner(n, n);
  return res;
}

inline DataUpdateResult data_update(const GaussianState& state, double y, const ObsIndex& obs,
                                    const StateLayout& layout, double R_y) {
  return data_update(state, y, layout.index(obs.block, obs.component), R_y);
}

/// Incremental log-likelihood -phi of a scalar innovation,
/// phi = 0.5 log(2 pi S_y) + v^2 / (2 S_y).
inline double log_lik_increment(double v, double S_y) {
  if (!(S_y > 0.0)) throw std::invalid_argument("log_lik_increment: S_y must be > 0");
  return -(0.5 * std::log(2.0 * std::numbers::pi * S_y) + 0.5 * v * v / S_y);
}

/// Running sums for the quasi-maximum-likelihood diffusion estimate
/// Gamma_ii = (1/T) sum_t z_i^2 / s_t.
struct CalibrationAccumulator {
  Eigen::VectorXd sum;
  std::size_t count = 0;

  explicit CalibrationAccumulator(int d = 0) : sum(Eigen::VectorXd::Zero(d)) {}

  void add(const Eigen::VectorXd& z_hat, double s_breve) {
    if (!(s_breve > 0.0) || !std::isfinite(s_breve)) return;
    sum += z_hat.cwiseAbs2() / s_breve;
    ++count;
  }

  Eigen::VectorXd estimate(double gamma_min) const {
    if (count == 0) return Eigen::VectorXd::Constant(sum.size(), gamma_min);
    return (sum / static_cast<double>(count)).cwiseMax(gamma_min);
  }
};

/// Diffusion estimate from a record sequence. Records with s_breve <= 0 are
/// skipped; if none remain the floor is returned.
inline Eigen::VectorXd calibrate_gamma(const std::vector<FilterStepRecord>& records, double gamma_min = 1e-12) {
  int d = 0;
  for (const auto& r : records) d = std::max<int>(d, static_cast<int>(r.z_hat.size()));
  CalibrationAccumulator acc(d);
  for (const auto& r : records)
    if (r.z_hat.size() == d) acc.add(r.z_hat, r.s_breve);
  return acc.estimate(gamma_min);
}

// ---------------------------------------------------------------------------
// Sequential driver

/// Everything a filter needs to resume at the next observation.
struct FilterCarry {
  GaussianState state;
  CalibrationAccumulator calib;
  double log_lik = 0.0;
  std::size_t assimilated = 0;
  bool failed = false;
  std::string failure;
  double max_residual = 0.0;
};

/// Filtered moments at one observation time.
struct TrajectoryPoint {
  double t = 0.0;
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
};

/// Per-run options controlling what is collected besides the likelihood.
struct SolveOptions {
  bool collect_records = false;
  bool collect_trajectory = false;
  bool collect_gamma = false;
};

/// Runs the PN filter for one parameter vector over a uniformly sampled
/// series. Each observation interval consists of n_sub predict/pseudo-update
/// pairs followed by a data update at the observation time.
class OdeFilter {
 public:
  OdeFilter(const ModelSpec& model, const SolverConfig& config, double obs_dt)
      : model_(&model), config_(config), layout_{model.dim, config.q}, cache_(layout_, obs_dt / config.n_sub) {
    config_.validate();
    if (!(obs_dt > 0.0)) throw std::invalid_argument("OdeFilter: observation interval must be positive");
    if (config_.x0.size() != 0 && config_.x0.size() != model.dim)
      throw std::invalid_argument("OdeFilter: initial state has wrong dimension");
  }

  const StateLayout& layout() const { return layout_; }
  const SolverConfig& config() const { return config_; }
  const ModelSpec& model() const { return *model_; }

  FilterCarry start(const ParameterVector& theta, double u1) const {
    FilterCarry c;
    c.calib = CalibrationAccumulator(layout_.d);
    const Eigen::VectorXd x1 = config_.x0.size() == 0 ? Eigen::VectorXd::Zero(model_->dim) : config_.x0;
    try {
      model_->check_parameters(theta);
      c.state = init_state(*model_, x1, u1, theta, layout_, config_.sigma0_extra, config_.eps_chol);
    } catch (const std::exception& e) {
      c.failed = true;
      c.failure = e.what();
      c.log_lik = -std::numeric_limits<double>::infinity();
    }
    return c;
  }

  /// Diffusion for the next predict.
  Eigen::VectorXd gamma(const FilterCarry& c) const {
    if (config_.calibration == Calibration::online && c.calib.count > 0) return c.calib.estimate(config_.gamma_min);
    return Eigen::VectorXd::Constant(layout_.d, config_.gamma_init);
  }

  /// Assimilates record `index` of the series. For index > 0 the state is
  /// first integrated across the interval from the previous record, holding
  /// u at the previous sample and switching to the current one at the
  /// interval end. Failures are absorbed into the carry.
  void advance(FilterCarry& c, const ParameterVector& theta, const TimeSeriesDataset& data, std::size_t index,
               std::vector<FilterStepRecord>* records = nullptr) const {
    if (c.failed) return;
    try {
      advance_impl(c, theta, data, index, records);
      if (!c.state.finite() || !std::isfinite(c.log_lik)) throw FilterFailure("non-finite filter state");
    } catch (const std::exception& e) {
      c.failed = true;
      c.failure = e.what();
      c.log_lik = -std::numeric_limits<double>::infinity();
    }
  }

 private:
  void advance_impl(FilterCarry& c, const ParameterVector& theta, const TimeSeriesDataset& data,
                    std::size_t index, std::vector<FilterStepRecord>* records) const {
    const int d = layout_.d;
    if (index > 0 && config_.pseudo_updates) {
      const double h = cache_.step();
      for (int s = 1; s <= config_.n_sub; ++s) {
        const Eigen::VectorXd g = gamma(c);
        c.state = predict(c.state, cache_.A(), Eigen::VectorXd(), cache_.noise_sqrt(g));
        const double u = s < config_.n_sub ? data.u[index - 1] : data.u[index];
        const double t = data.t[index - 1] + s * h;
        auto pu = pseudo_update(c.state, *model_, u, t, theta, config_.R, layout_, g, config_.eps_chol);
        c.state = std::move(pu.state);
        c.calib.add(pu.z_hat, pu.s_breve);
        c.max_residual = std::max(c.max_residual, pu.residual);
        if (records) records->push_back({index, pu.z_hat, pu.s_breve});
      }
    } else if (index > 0) {
      // Linear-Gaussian mode: plain IWP prediction, no ODE conditioning.
      const Eigen::VectorXd g = gamma(c);
      for (int s = 1; s <= config_.n_sub; ++s)
        c.state = predict(c.state, cache_.A(), Eigen::VectorXd(), cache_.noise_sqrt(g));
      if (records) records->push_back({index, Eigen::VectorXd::Zero(d), 0.0});
    } else if (records) {
      records->push_back({index, Eigen::VectorXd::Zero(d), 0.0});
    }

    const double y = data.y[index];
    if (std::isfinite(y)) {
      auto du = data_update(c.state, y, model_->obs, layout_, config_.R_y);
      c.state = std::move(du.state);
      const double inc = log_lik_increment(du.v, du.S_y);
      c.log_lik += inc;
      if (records) {
        auto& r = records->back();
        r.has_data = true;
        r.v = du.v;
        r.S_y = du.S_y;
        r.log_lik_increment = inc;
      }
    }
    c.assimilated = index + 1;
  }

  const ModelSpec* model_;
  SolverConfig config_;
  StateLayout layout_;
  TransitionCache cache_;
};

struct SolveResult {
  bool ok = true;
  std::string failure;
  GaussianState state;
  double log_lik = 0.0;
  std::vector<FilterStepRecord> records;
  /// Diffusion estimate after each observation.
  std::vector<Eigen::VectorXd> gamma_trace;
  std::vector<TrajectoryPoint> trajectory;
  double max_residual = 0.0;
  std::size_t assimilated = 0;
};

/// Scores theta against the first `count` records of `data` (all when count
/// is omitted) from the initial state.
inline SolveResult solve_and_score(const ModelSpec& model, const ParameterVector& theta, const TimeSeriesDataset& data,
                                   const SolverConfig& config, std::optional<std::size_t> count = std::nullopt,
                                   const SolveOptions& opts = {}) {
  const std::size_t T = std::min(count.value_or(data.size()), data.size());
  OdeFilter filter(model, config, data.dt());
  SolveResult out;
  FilterCarry c = filter.start(theta, T > 0 ? data.u[0] : 0.0);
  for (std::size_t i = 0; i < T && !c.failed; ++i) {
    filter.advance(c, theta, data, i, opts.collect_records ? &out.records : nullptr);
    if (c.failed) break;
    if (opts.collect_gamma) out.gamma_trace.push_back(c.calib.estimate(config.gamma_min));
    if (opts.collect_trajectory) {
      TrajectoryPoint p;
      p.t = data.t[i];
      p.mean = c.state.mean;
      p.sd = c.state.cov_sqrt.colwise().norm().transpose();
      out.trajectory.push_back(std::move(p));
    }
  }
  out.ok = !c.failed;
  out.failure = c.failure;
  out.state = c.state;
  out.log_lik = c.failed ? -std::numeric_limits<double>::infinity() : c.log_lik;
  out.max_residual = c.max_residual;
  out.assimilated = c.assimilated;
  return out;
}

}  // namespace pnsmc
