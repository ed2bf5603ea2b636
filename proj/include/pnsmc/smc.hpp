#pragma once

// Iterated batch importance sampling over static model parameters. Each
// particle carries its own PN filter; log-weights accumulate the filter's
// incremental data log-likelihood, and when the effective sample size drops
// below a threshold the system is resampled and moved with an independent
// Metropolis-Hastings kernel whose proposal is a Gaussian fitted to the
// weighted cloud. Parameters live in sampling space throughout (log for
// log-space prior entries).

#include "pnsmc/dataset.hpp"
#include "pnsmc/models.hpp"
#include "pnsmc/odefilter.hpp"
#include "pnsmc/parallel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnsmc {

struct SmcConfig {
  std::size_t N = 128;
  /// Rejuvenate when ESS < ess_threshold * N.
  double ess_threshold = 0.5;
  std::uint64_t seed = 0;
  int move_count = 1;
  double proposal_inflation = 1.0;
  /// Absolute jitter added to the proposal covariance diagonal.
  double proposal_jitter = 1e-10;
  /// Accept with the prior-times-likelihood ratio only, leaving out the
  /// proposal-density correction of the independent MH kernel.
  bool paper_exact_acceptance = false;
  /// Move positive natural-space parameters in log coordinates.
  bool log_sampling = false;
  unsigned threads = 1;

  void validate() const {
    if (N < 2) throw std::invalid_argument("smc.N must be >= 2");
    if (!(ess_threshold > 0.0 && ess_threshold <= 1.0)) throw std::invalid_argument("smc.ess_threshold must lie in (0, 1]");
    if (move_count < 1) throw std::invalid_argument("smc.move_count must be >= 1");
    if (!(proposal_inflation >= 1.0)) throw std::invalid_argument("smc.proposal_inflation must be >= 1");
    if (!(proposal_jitter >= 0.0)) throw std::invalid_argument("smc.proposal_jitter must be >= 0");
  }
};

/// Raised when every particle has failed or carries zero weight.
struct SmcAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParticleSystem {
  /// Sampling-space parameter vectors.
  std::vector<Eigen::VectorXd> particles;
  Eigen::VectorXd log_weights;
  std::vector<FilterCarry> carried;
  /// Number of observations assimilated so far; every carry is at this point.
  std::size_t assimilated = 0;

  std::size_t size() const { return particles.size(); }
};

// ---------------------------------------------------------------------------
// Weight arithmetic

/// Normalized weights from log-weights, via max subtraction. All -inf gives zeros.
inline Eigen::VectorXd normalized_weights(const Eigen::VectorXd& log_w) {
  const double top = log_w.size() ? log_w.maxCoeff() : -std::numeric_limits<double>::infinity();
  if (!std::isfinite(top)) return Eigen::VectorXd::Zero(log_w.size());
  // Scalar std::exp: Eigen's vectorized exp clamps -inf to a denormal instead of 0.
  const Eigen::VectorXd w = log_w.unaryExpr([top](double l) { return std::exp(l - top); });
  return w / w.sum();
}

/// (sum w)^2 / sum w^2 computed from log-weights.
inline double ess(const Eigen::VectorXd& log_w) {
  const double top = log_w.size() ? log_w.maxCoeff() : -std::numeric_limits<double>::infinity();
  if (!std::isfinite(top)) return 0.0;
  const Eigen::ArrayXd w = log_w.array().unaryExpr([top](double l) { return std::exp(l - top); });
  const double s = w.sum();
  return s * s / w.square().sum();
}

/// log w_{t+1} = log w_t - phi_{t+1}, written with the log-likelihood increment -phi.
inline void apply_increments(Eigen::VectorXd& log_w, const Eigen::VectorXd& log_lik_increments) {
  for (Eigen::Index i = 0; i < log_w.size(); ++i) {
    const double inc = log_lik_increments[i];
    log_w[i] = std::isfinite(inc) ? log_w[i] + inc : -std::numeric_limits<double>::infinity();
  }
}

/// Systematic resampling: one uniform offset u0 in [0, 1), points (u0 + i) / N.
inline std::vector<std::size_t> systematic_resample(const Eigen::VectorXd& weights, double u0) {
  const auto n = static_cast<std::size_t>(weights.size());
  std::vector<std::size_t> idx(n);
  double cum = weights.size() ? weights[0] : 0.0;
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = (u0 + static_cast<double>(i)) / static_cast<double>(n);
    while (p >= cum && j + 1 < n) cum += weights[static_cast<Eigen::Index>(++j)];
    idx[i] = j;
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Independent MH proposal

struct GaussianProposal {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  /// Lower Cholesky factor of cov.
  Eigen::MatrixXd chol;
  double log_norm = 0.0;

  Eigen::VectorXd draw(std::mt19937_64& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
    return mean + chol * z;
  }

  double logpdf(const Eigen::VectorXd& x) const {
    const Eigen::VectorXd r = chol.triangularView<Eigen::Lower>().solve(x - mean);
    return log_norm - 0.5 * r.squaredNorm();
  }
};

/// Weighted mean and covariance of the cloud (sampling space), symmetrized,
/// scaled by `inflation` and jittered.
inline GaussianProposal fit_proposal(const std::vector<Eigen::VectorXd>& particles, const Eigen::VectorXd& log_w,
                                     double inflation = 1.0, double jitter = 1e-10) {
  if (particles.empty()) throw std::invalid_argument("fit_proposal: empty particle system");
  const Eigen::VectorXd w = normalized_weights(log_w);
  if (!(w.sum() > 0.0)) throw std::invalid_argument("fit_proposal: no particle carries weight");
  const Eigen::Index p = particles.front().size();
  GaussianProposal g;
  g.mean = Eigen::VectorXd::Zero(p);
  for (std::size_t j = 0; j < particles.size(); ++j)
    if (w[static_cast<Eigen::Index>(j)] > 0.0) g.mean += w[static_cast<Eigen::Index>(j)] * particles[j];
  g.cov = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t j = 0; j < particles.size(); ++j) {
    const double wj = w[static_cast<Eigen::Index>(j)];
    if (wj <= 0.0) continue;
    const Eigen::VectorXd r = particles[j] - g.mean;
    g.cov.noalias() += wj * r * r.transpose();
  }
  g.cov = 0.5 * (g.cov + g.cov.transpose()) * inflation;
  g.cov.diagonal().array() += jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
  if (llt.info() != Eigen::Success) throw std::runtime_error("fit_proposal: proposal covariance is not positive definite");
  g.chol = llt.matrixL();
  const double logdet = 2.0 * g.chol.diagonal().array().log().sum();
  g.log_norm = -0.5 * (static_cast<double>(p) * std::log(2.0 * std::numbers::pi) + logdet);
  if (!std::isfinite(g.log_norm)) throw std::runtime_error("fit_proposal: degenerate proposal covariance");
  return g;
}

/// log alpha for moving current -> proposed. The proposal terms are the
/// independent kernel's q(current) / q(proposed) correction and are skipped
/// when `include_proposal` is false.
inline double acceptance_log_ratio(double log_prior_cur, double log_lik_cur, double log_q_cur, double log_prior_prop,
                                   double log_lik_prop, double log_q_prop, bool include_proposal = true) {
  if (!std::isfinite(log_prior_prop) || !std::isfinite(log_lik_prop)) return -std::numeric_limits<double>::infinity();
  if (!std::isfinite(log_prior_cur) || !std::isfinite(log_lik_cur)) return 0.0;
  double r = (log_prior_prop + log_lik_prop) - (log_prior_cur + log_lik_cur);
  if (include_proposal) r += log_q_cur - log_q_prop;
  return std::min(0.0, r);
}

// ---------------------------------------------------------------------------
// Driver

struct RejuvenationEvent {
  std::size_t assimilated = 0;
  double ess_before = 0.0;
  double acceptance_rate = 0.0;
};

struct DiagnosticsRow {
  std::size_t index = 0;
  double ess = 0.0;
  double threshold = 0.0;
  bool rejuvenated = false;
  double acceptance_rate = std::numeric_limits<double>::quiet_NaN();
};

struct SmcResult {
  ParticleSystem system;
  std::vector<DiagnosticsRow> trace;
  std::vector<RejuvenationEvent> rejuvenations;
};

/// Owns the problem definition; all mutation of a ParticleSystem goes through it.
class Smc {
 public:
  Smc(const ModelSpec& model, const PriorSpec& prior, const TimeSeriesDataset& data, const SolverConfig& solver,
      const SmcConfig& config)
      : model_(&model), prior_(prior), data_(&data), config_(config), filter_(model, solver, data.dt()) {
    config_.validate();
    prior_.validate(&model);
    if (config_.log_sampling)
      prior_.use_log_coordinates(model);
    else
      prior_.apply_support(model);
  }

  const SmcConfig& config() const { return config_; }
  const PriorSpec& prior() const { return prior_; }
  const OdeFilter& filter() const { return filter_; }

  ParameterVector natural(const Eigen::VectorXd& s) const { return prior_.to_natural(s); }

  /// N prior draws, equal weights, filters started at the first sample.
  ParticleSystem init() const {
    ParticleSystem sys;
    const auto draws = prior_sample(prior_, config_.N, stream_seed(0));
    sys.particles.reserve(config_.N);
    for (const auto& th : draws) sys.particles.push_back(prior_.to_sampling(th));
    sys.log_weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(config_.N), -std::log(double(config_.N)));
    sys.carried.resize(config_.N);
    const double u1 = data_->empty() ? 0.0 : data_->u[0];
    parallel_for(config_.N, config_.threads, [&](std::size_t n) {
      sys.carried[n] = filter_.start(natural(sys.particles[n]), u1);
    });
    return sys;
  }

  /// Advances every carried filter by one observation and reweights.
  void assimilate(ParticleSystem& sys) const {
    const std::size_t t = sys.assimilated;
    if (t >= data_->size()) throw std::out_of_range("assimilate: no observation left");
    Eigen::VectorXd inc(static_cast<Eigen::Index>(sys.size()));
    parallel_for(sys.size(), config_.threads, [&](std::size_t n) {
      FilterCarry& c = sys.carried[n];
      const double before = c.log_lik;
      filter_.advance(c, natural(sys.particles[n]), *data_, t);
      inc[static_cast<Eigen::Index>(n)] =
          c.failed ? -std::numeric_limits<double>::infinity() : c.log_lik - before;
    });
    apply_increments(sys.log_weights, inc);
    sys.assimilated = t + 1;
    if (!std::isfinite(sys.log_weights.maxCoeff()))
      throw SmcAbort("all particles failed at observation " + std::to_string(t) + ": " + first_failure(sys));
  }

  /// Resample, reset weights and apply move_count IMH moves per particle.
  /// Returns the acceptance rate.
  double rejuvenate(ParticleSystem& sys, std::uint64_t event) const {
    const GaussianProposal proposal =
        fit_proposal(sys.particles, sys.log_weights, config_.proposal_inflation, config_.proposal_jitter);

    auto rng = make_stream(config_.seed, 1, event);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto idx = systematic_resample(normalized_weights(sys.log_weights), unif(rng));
    ParticleSystem next;
    next.assimilated = sys.assimilated;
    next.particles.reserve(sys.size());
    next.carried.reserve(sys.size());
    for (std::size_t i : idx) {
      next.particles.push_back(sys.particles[i]);
      next.carried.push_back(sys.carried[i]);
    }
    next.log_weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(sys.size()), -std::log(double(sys.size())));

    std::vector<int> accepted(sys.size(), 0);
    parallel_for(sys.size(), config_.threads, [&](std::size_t n) {
      for (int m = 0; m < config_.move_count; ++m) {
        auto prng = make_stream(config_.seed, 2, event, n * static_cast<std::uint64_t>(config_.move_count) + m);
        if (move(next.particles[n], next.carried[n], proposal, prng, sys.assimilated)) ++accepted[n];
      }
    });
    sys = std::move(next);
    double total = 0.0;
    for (int a : accepted) total += a;
    return total / (static_cast<double>(sys.size()) * config_.move_count);
  }

  /// One IMH move of a single particle against the first `t` observations.
  bool move(Eigen::VectorXd& theta, FilterCarry& carry, const GaussianProposal& proposal, std::mt19937_64& rng,
            std::size_t t) const {
    const Eigen::VectorXd cand = proposal.draw(rng);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double log_u = std::log(unif(rng));
    const double lp_cand = prior_.logpdf_sampling(cand);
    if (!std::isfinite(lp_cand)) return false;
    FilterCarry cc = rebrowse(cand, t);
    if (cc.failed) return false;
    const double log_alpha =
        acceptance_log_ratio(prior_.logpdf_sampling(theta), carry.log_lik, proposal.logpdf(theta), lp_cand, cc.log_lik,
                             proposal.logpdf(cand), !config_.paper_exact_acceptance);
    if (!(log_u < log_alpha) && log_alpha < 0.0) return false;
    theta = cand;
    carry = std::move(cc);
    return true;
  }

  /// Fresh filter run over observations [0, t).
  FilterCarry rebrowse(const Eigen::VectorXd& theta_sampling, std::size_t t) const {
    const ParameterVector th = natural(theta_sampling);
    FilterCarry c = filter_.start(th, data_->empty() ? 0.0 : data_->u[0]);
    for (std::size_t i = 0; i < t && !c.failed; ++i) filter_.advance(c, th, *data_, i);
    return c;
  }

  /// Assimilates all remaining observations, rejuvenating on trigger.
  SmcResult run(ParticleSystem sys, const std::function<void(const DiagnosticsRow&)>& on_step = {}) const {
    SmcResult out;
    const double threshold = config_.ess_threshold * static_cast<double>(config_.N);
    while (sys.assimilated < data_->size()) {
      assimilate(sys);
      DiagnosticsRow row;
      row.index = sys.assimilated - 1;
      row.ess = ess(sys.log_weights);
      row.threshold = threshold;
      if (row.ess < threshold) {
        const double rate = rejuvenate(sys, out.rejuvenations.size());
        row.rejuvenated = true;
        row.acceptance_rate = rate;
        out.rejuvenations.push_back({sys.assimilated, row.ess, rate});
      }
      out.trace.push_back(row);
      if (on_step) on_step(row);
    }
    out.system = std::move(sys);
    return out;
  }

  SmcResult run() const { return run(init()); }

 private:
  std::uint64_t stream_seed(std::uint64_t tag) const {
    auto rng = make_stream(config_.seed, 0, tag);
    return rng();
  }

  static std::string first_failure(const ParticleSystem& sys) {
    for (const auto& c : sys.carried)
      if (c.failed && !c.failure.empty()) return c.failure;
    return "zero likelihood";
  }

  const ModelSpec* model_;
  PriorSpec prior_;
  const TimeSeriesDataset* data_;
  SmcConfig config_;
  OdeFilter filter_;
};

}  // namespace pnsmc
