#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pnsmc {

/// Model parameters in natural (physical) units, ordered as the owning
/// ModelSpec's param_names.
struct ParameterVector {
  Eigen::VectorXd values;

  ParameterVector() = default;
  explicit ParameterVector(Eigen::VectorXd v) : values(std::move(v)) {}
  ParameterVector(std::initializer_list<double> v)
      : values(Eigen::Map<const Eigen::VectorXd>(v.begin(), static_cast<Eigen::Index>(v.size()))) {}

  Eigen::Index size() const { return values.size(); }
  double operator[](Eigen::Index i) const { return values[i]; }
  double& operator[](Eigen::Index i) { return values[i]; }
};

/// Which entry of the derivative-stacked state a scalar measurement reads:
/// block 0 is the solution X(1), block 1 its time derivative X(2).
struct ObsIndex {
  int block = 0;
  int component = 0;
};

enum class Observed { displacement, acceleration, voltage };

inline std::string to_string(Observed o) {
  switch (o) {
    case Observed::displacement: return "displacement";
    case Observed::acceleration: return "acceleration";
    case Observed::voltage: return "voltage";
  }
  return "displacement";
}

inline Observed observed_from_string(const std::string& s) {
  if (s == "displacement") return Observed::displacement;
  if (s == "acceleration") return Observed::acceleration;
  if (s == "voltage") return Observed::voltage;
  throw std::invalid_argument("unknown observed quantity '" + s + "'");
}

/// Measurement unit string for reports.
inline std::string unit_of(Observed o) {
  switch (o) {
    case Observed::displacement: return "m";
    case Observed::acceleration: return "m/s^2";
    case Observed::voltage: return "V";
  }
  return "";
}

using VectorField =
    std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double u, const ParameterVector& theta, double t)>;

/// A continuous-time state-space model xdot = f(x, u, theta).
struct ModelSpec {
  std::string name;
  int dim = 0;
  std::vector<std::string> param_names;
  /// Parameters that must stay strictly positive (eligible for log-space priors).
  std::vector<bool> positive;
  VectorField rhs;
  ObsIndex obs;
  Observed observed = Observed::displacement;
  std::map<std::string, double> constants;

  Eigen::Index n_params() const { return static_cast<Eigen::Index>(param_names.size()); }

  /// Evaluates the vector field, rejecting non-finite results.
  Eigen::VectorXd operator()(const Eigen::VectorXd& x, double u, const ParameterVector& theta,
                             double t = 0.0) const {
    Eigen::VectorXd dx = rhs(x, u, theta, t);
    if (dx.size() != dim) throw std::logic_error(name + ": rhs returned wrong dimension");
    if (!dx.allFinite()) throw std::domain_error(name + ": rhs produced a non-finite derivative");
    return dx;
  }

  /// Selects the measured scalar from a state and its derivative.
  double observe(const Eigen::VectorXd& x, const Eigen::VectorXd& dx) const {
    return obs.block == 0 ? x[obs.component] : dx[obs.component];
  }

  void validate() const {
    if (dim <= 0) throw std::invalid_argument(name + ": dimension must be positive");
    if (positive.size() != param_names.size())
      throw std::invalid_argument(name + ": positivity flags do not match parameter count");
    if (obs.block < 0 || obs.block > 1 || obs.component < 0 || obs.component >= dim)
      throw std::invalid_argument(name + ": observation index out of range");
  }

  void check_parameters(const ParameterVector& theta) const {
    if (theta.size() != n_params())
      throw std::invalid_argument(name + ": expected " + std::to_string(n_params()) + " parameters, got " +
                                  std::to_string(theta.size()));
  }
};

namespace detail {

inline void require_finite(const Eigen::VectorXd& x, double u, const ParameterVector& theta, const char* who) {
  if (!x.allFinite() || !std::isfinite(u) || !theta.values.allFinite())
    throw std::domain_error(std::string(who) + ": non-finite input");
}

inline double sign(double v) { return static_cast<double>((0.0 < v) - (v < 0.0)); }

}  // namespace detail

// Vector fields. Parameter order is fixed and documented per model.

/// x = (displacement, velocity, hysteretic force z);
/// theta = (m, c, k, alpha, beta, gamma, delta).
inline Eigen::VectorXd bouc_wen_rhs(const Eigen::VectorXd& x, double u, const ParameterVector& theta,
                                    double nu = 1.0) {
  detail::require_finite(x, u, theta, "bouc_wen_rhs");
  const double m = theta[0], c = theta[1], k = theta[2];
  const double alpha = theta[3], beta = theta[4], gamma = theta[5], delta = theta[6];
  const double disp = x[0], vel = x[1], z = x[2];
  const double az = std::abs(z);
  Eigen::VectorXd dx(3);
  dx[0] = vel;
  dx[1] = (u - c * vel - k * disp - z) / m;
  dx[2] = alpha * vel - beta * (gamma * std::abs(vel) * std::pow(az, nu - 1.0) * z + delta * vel * std::pow(az, nu));
  return dx;
}

/// theta = (m, c, k, k3).
inline Eigen::VectorXd duffing_rhs(const Eigen::VectorXd& x, double u, const ParameterVector& theta) {
  detail::require_finite(x, u, theta, "duffing_rhs");
  const double m = theta[0], c = theta[1], k = theta[2], k3 = theta[3];
  Eigen::VectorXd dx(2);
  dx[0] = x[1];
  dx[1] = (u - c * x[1] - k * x[0] - k3 * x[0] * x[0] * x[0]) / m;
  return dx;
}

/// theta = (M, Fv, Fc, offset); sign(0) = 0.
inline Eigen::VectorXd emps_rhs(const Eigen::VectorXd& x, double u, const ParameterVector& theta) {
  detail::require_finite(x, u, theta, "emps_rhs");
  const double mass = theta[0], fv = theta[1], fc = theta[2], offset = theta[3];
  Eigen::VectorXd dx(2);
  dx[0] = x[1];
  dx[1] = (u - fv * x[1] - fc * detail::sign(x[1]) - offset) / mass;
  return dx;
}

/// theta = (m, c, k).
inline Eigen::VectorXd linear_oscillator_rhs(const Eigen::VectorXd& x, double u, const ParameterVector& theta) {
  detail::require_finite(x, u, theta, "linear_oscillator_rhs");
  const double m = theta[0], c = theta[1], k = theta[2];
  Eigen::VectorXd dx(2);
  dx[0] = x[1];
  dx[1] = (u - c * x[1] - k * x[0]) / m;
  return dx;
}

inline ModelSpec bouc_wen_model(double nu = 1.0) {
  if (!(nu >= 1.0)) throw std::invalid_argument("bouc_wen: exponent nu must be >= 1");
  ModelSpec m;
  m.name = "bouc_wen";
  m.dim = 3;
  m.param_names = {"m", "c", "k", "alpha", "beta", "gamma", "delta"};
  m.positive = {true, true, true, true, true, true, false};
  m.rhs = [nu](const Eigen::VectorXd& x, double u, const ParameterVector& th, double) {
    return bouc_wen_rhs(x, u, th, nu);
  };
  m.obs = {1, 1};
  m.observed = Observed::acceleration;
  m.constants = {{"nu", nu}};
  return m;
}

inline ModelSpec duffing_model() {
  ModelSpec m;
  m.name = "duffing";
  m.dim = 2;
  m.param_names = {"m", "c", "k", "k3"};
  m.positive = {true, true, true, true};
  m.rhs = [](const Eigen::VectorXd& x, double u, const ParameterVector& th, double) { return duffing_rhs(x, u, th); };
  m.obs = {0, 0};
  m.observed = Observed::displacement;
  return m;
}

inline ModelSpec emps_model() {
  ModelSpec m;
  m.name = "emps";
  m.dim = 2;
  m.param_names = {"M", "Fv", "Fc", "offset"};
  m.positive = {true, true, true, false};
  m.rhs = [](const Eigen::VectorXd& x, double u, const ParameterVector& th, double) { return emps_rhs(x, u, th); };
  m.obs = {0, 0};
  m.observed = Observed::displacement;
  return m;
}

inline ModelSpec linear_oscillator_model() {
  ModelSpec m;
  m.name = "linear_oscillator";
  m.dim = 2;
  m.param_names = {"m", "c", "k"};
  m.positive = {true, true, true};
  m.rhs = [](const Eigen::VectorXd& x, double u, const ParameterVector& th, double) {
    return linear_oscillator_rhs(x, u, th);
  };
  m.obs = {0, 0};
  m.observed = Observed::displacement;
  return m;
}

/// Looks a benchmark model up by name; `observed` overrides the default
/// measured channel (acceleration reads block 1, the others block 0).
/// Constants the model does not declare are rejected.
inline ModelSpec make_model(const std::string& name, const std::map<std::string, double>& constants = {},
                            std::optional<Observed> observed = std::nullopt) {
  ModelSpec m;
  if (name == "bouc_wen") {
    auto it = constants.find("nu");
    m = bouc_wen_model(it == constants.end() ? 1.0 : it->second);
  } else if (name == "duffing") {
    m = duffing_model();
  } else if (name == "emps") {
    m = emps_model();
  } else if (name == "linear_oscillator") {
    m = linear_oscillator_model();
  } else {
    throw std::invalid_argument("unknown model '" + name + "'");
  }
  for (const auto& [k, _] : constants)
    if (!m.constants.count(k)) throw std::invalid_argument("model '" + name + "' has no constant '" + k + "'");
  if (observed) {
    m.observed = *observed;
    // Acceleration is the derivative of the velocity component.
    m.obs = m.observed == Observed::acceleration ? ObsIndex{1, 1} : ObsIndex{0, 0};
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Priors

enum class Space { natural, log };

struct PriorEntry {
  double mean = 0.0;
  double variance = 1.0;
  Space space = Space::natural;
  /// Natural-space entry truncated to theta > 0.
  bool positive = false;
  /// Natural-space entry of a positive parameter sampled in log(theta)
  /// coordinates; the prior density itself is unchanged.
  bool log_coords = false;

  /// True when the sampling coordinate is log(theta).
  bool logged() const { return space == Space::log || log_coords; }
};

/// Independent Gaussian priors per parameter. For log-space entries the
/// (mean, variance) pair describes log(theta). Natural-space entries of
/// positivity-constrained parameters are truncated at zero; the
/// normalization is left out since it cancels in every density ratio.
///
/// "Sampling coordinates" are what the SMC moves in: log(theta) for
/// log-space entries and for natural-space entries with log_coords set,
/// theta otherwise.
struct PriorSpec {
  std::vector<PriorEntry> entries;

  Eigen::Index size() const { return static_cast<Eigen::Index>(entries.size()); }

  void validate(const ModelSpec* model = nullptr) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!(entries[i].variance > 0.0) || !std::isfinite(entries[i].variance))
        throw std::invalid_argument("prior entry " + std::to_string(i) + ": variance must be positive");
      if (!std::isfinite(entries[i].mean))
        throw std::invalid_argument("prior entry " + std::to_string(i) + ": mean must be finite");
    }
    if (model) {
      if (static_cast<Eigen::Index>(entries.size()) != model->n_params())
        throw std::invalid_argument("prior has " + std::to_string(entries.size()) + " entries, model '" +
                                    model->name + "' has " + std::to_string(model->n_params()) + " parameters");
      for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].logged() && !model->positive[i])
          throw std::invalid_argument("prior for '" + model->param_names[i] +
                                      "' is log-space but the parameter is not positivity-constrained");
    }
  }

  /// Marks natural-space entries of positive model parameters as truncated.
  void apply_support(const ModelSpec& model) {
    for (std::size_t i = 0; i < entries.size() && i < model.positive.size(); ++i)
      entries[i].positive = model.positive[i] && entries[i].space == Space::natural;
  }

  /// Switches natural-space entries of positive parameters to log sampling
  /// coordinates (implies apply_support).
  void use_log_coordinates(const ModelSpec& model) {
    apply_support(model);
    for (auto& e : entries) e.log_coords = e.positive;
  }

  bool in_support(const Eigen::VectorXd& s) const {
    for (Eigen::Index i = 0; i < size(); ++i) {
      if (!std::isfinite(s[i])) return false;
      if (entries[i].positive && !entries[i].logged() && !(s[i] > 0.0)) return false;
    }
    return true;
  }

  /// Natural -> sampling coordinates. Non-positive logged entries map to NaN.
  Eigen::VectorXd to_sampling(const ParameterVector& theta) const {
    Eigen::VectorXd s = theta.values;
    for (Eigen::Index i = 0; i < size(); ++i)
      if (entries[i].logged()) s[i] = theta[i] > 0.0 ? std::log(theta[i]) : std::numeric_limits<double>::quiet_NaN();
    return s;
  }

  ParameterVector to_natural(const Eigen::VectorXd& s) const {
    ParameterVector theta{s};
    for (Eigen::Index i = 0; i < size(); ++i)
      if (entries[i].logged()) theta[i] = std::exp(s[i]);
    return theta;
  }

  /// Prior density of the sampling coordinates. For log_coords entries this
  /// is the natural-space Gaussian at exp(s) times the Jacobian exp(s).
  double logpdf_sampling(const Eigen::VectorXd& s) const {
    constexpr double log2pi = 1.8378770664093454835606594728112;
    if (s.size() != size()) throw std::invalid_argument("prior: dimension mismatch");
    if (!in_support(s)) return -std::numeric_limits<double>::infinity();
    double lp = 0.0;
    for (Eigen::Index i = 0; i < size(); ++i) {
      const auto& e = entries[i];
      const double x = e.log_coords ? std::exp(s[i]) : s[i];
      const double r = x - e.mean;
      lp += -0.5 * (log2pi + std::log(e.variance)) - 0.5 * r * r / e.variance;
      if (e.log_coords) lp += s[i];
    }
    return lp;
  }

  /// Natural-space marginal mean and standard deviation (log-normal moments
  /// for log-space entries; truncation ignored).
  double natural_mean(Eigen::Index i) const {
    const auto& e = entries[i];
    return e.space == Space::log ? std::exp(e.mean + 0.5 * e.variance) : e.mean;
  }
  double natural_sd(Eigen::Index i) const {
    const auto& e = entries[i];
    if (e.space == Space::natural) return std::sqrt(e.variance);
    return std::sqrt(std::expm1(e.variance)) * std::exp(e.mean + 0.5 * e.variance);
  }
};

/// Log density of theta in natural space, i.e. the sampling-space density
/// minus log(theta_i) for every logged coordinate. Non-positive values of
/// logged entries give -inf.
inline double prior_logpdf(const PriorSpec& prior, const ParameterVector& theta) {
  if (theta.size() != prior.size()) throw std::invalid_argument("prior_logpdf: dimension mismatch");
  double jac = 0.0;
  for (Eigen::Index i = 0; i < prior.size(); ++i) {
    if (!prior.entries[i].logged()) continue;
    if (!(theta[i] > 0.0)) return -std::numeric_limits<double>::infinity();
    jac -= std::log(theta[i]);
  }
  return prior.logpdf_sampling(prior.to_sampling(theta)) + jac;
}

/// Draws n independent samples (natural space) from a seeded engine.
/// Truncated entries are drawn by rejection.
inline std::vector<ParameterVector> prior_sample(const PriorSpec& prior, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ParameterVector> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    ParameterVector theta{Eigen::VectorXd(prior.size())};
    for (Eigen::Index i = 0; i < prior.size(); ++i) {
      const auto& e = prior.entries[i];
      const double sd = std::sqrt(e.variance);
      double x;
      do {
        x = e.mean + sd * normal(rng);
      } while (e.positive && e.space == Space::natural && !(x > 0.0));
      theta[i] = e.space == Space::log ? std::exp(x) : x;
    }
    out.push_back(theta);
  }
  return out;
}

/// Prior for the hysteretic system, natural-space Gaussians per parameter.
inline PriorSpec bouc_wen_reference_prior() {
  return PriorSpec{{{2.1, 0.011, Space::natural},
                    {8.8, 6.97, Space::natural},
                    {5.9e4, 2.18e8, Space::natural},
                    {4.4e4, 1.74e8, Space::natural},
                    {8.6e2, 6.66e4, Space::natural},
                    {0.93, 0.0541, Space::natural},
                    {1.3, 0.1056, Space::natural}}};
}

/// Default generating parameters for simulated hysteretic data: the values of
/// the public hysteretic benchmark, with delta taken positive (see README).
inline ParameterVector bouc_wen_default_truth() { return {2.0, 10.0, 5.0e4, 5.0e4, 1.0e3, 0.8, 1.1}; }

}  // namespace pnsmc
