#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <cmath>
#include <stdexcept>

namespace pnsmc {

/// Layout of the augmented state: q+1 blocks X(1)..X(q+1) of d signals each,
/// stored block-major. q counts the modelled derivatives; the prior over the
/// stack is IWP(q+1) in the usual naming.
struct StateLayout {
  int d = 1;
  int q = 1;

  int blocks() const { return q + 1; }
  int size() const { return d * (q + 1); }
  int index(int block, int component) const { return block * d + component; }
};

/// Discrete transition X_{t+1} = A X_t + xi + w, w ~ N(0, Q).
struct GaussMarkovTransition {
  Eigen::MatrixXd A;
  Eigen::VectorXd xi;
  Eigen::MatrixXd Q;
  /// Upper-triangular R with R^T R = Q.
  Eigen::MatrixXd Q_sqrt;
};

namespace detail {

inline double factorial(int n) {
  double f = 1.0;
  for (int k = 2; k <= n; ++k) f *= k;
  return f;
}

inline void check_layout(const StateLayout& layout) {
  if (layout.d < 1) throw std::invalid_argument("StateLayout: d must be >= 1");
  if (layout.q < 0) throw std::invalid_argument("StateLayout: q must be >= 0");
}

}  // namespace detail

/// Single-signal transition block, (q+1)x(q+1). Formulas are written with
/// 1-based block indices i, j and stored 0-based.
inline Eigen::MatrixXd iwp_transition_block(int q, double h) {
  const int n = q + 1;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i <= n; ++i)
    for (int j = i; j <= n; ++j) a(i - 1, j - 1) = std::pow(h, j - i) / detail::factorial(j - i);
  return a;
}

/// Single-signal unit-diffusion process noise block, (q+1)x(q+1).
inline Eigen::MatrixXd iwp_noise_block(int q, double h) {
  const int n = q + 1;
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= n; ++j) {
      const int p = 2 * q + 3 - i - j;
      Q(i - 1, j - 1) = std::pow(h, p) / (p * detail::factorial(q + 1 - i) * detail::factorial(q + 1 - j));
    }
  return Q;
}

/// Upper Cholesky factor of the unit noise block. Uses Q1(h) = D Q1(1) D with
/// D = diag(h^(q+3/2-i)), so the factor is chol(Q1(1)) * D and stays exact for
/// small h where a direct factorization loses all precision.
inline Eigen::MatrixXd iwp_noise_block_sqrt(int q, double h) {
  const int n = q + 1;
  if (h == 0.0) return Eigen::MatrixXd::Zero(n, n);
  Eigen::LLT<Eigen::MatrixXd> llt(iwp_noise_block(q, 1.0));
  Eigen::MatrixXd R = llt.matrixU();
  for (int j = 1; j <= n; ++j) R.col(j - 1) *= std::pow(h, q + 1.5 - j);
  return R;
}

/// Builds A(h) = A1(h) (x) I_d and Q(h) = Q1(h) (x) Gamma for diagonal Gamma.
inline GaussMarkovTransition build_transition(double h, const StateLayout& layout, const Eigen::VectorXd& gamma_diag) {
  detail::check_layout(layout);
  if (!(h >= 0.0) || !std::isfinite(h)) throw std::invalid_argument("build_transition: step size must be >= 0");
  if (gamma_diag.size() != layout.d) throw std::invalid_argument("build_transition: Gamma has wrong dimension");
  if ((gamma_diag.array() < 0.0).any() || !gamma_diag.allFinite())
    throw std::invalid_argument("build_transition: Gamma entries must be nonnegative");

  const Eigen::MatrixXd a1 = iwp_transition_block(layout.q, h);
  const Eigen::MatrixXd q1 = iwp_noise_block(layout.q, h);
  const Eigen::MatrixXd r1 = iwp_noise_block_sqrt(layout.q, h);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(layout.d, layout.d);
  const Eigen::MatrixXd gam = gamma_diag.asDiagonal();
  const Eigen::MatrixXd gam_sqrt = gamma_diag.cwiseSqrt().asDiagonal();

  GaussMarkovTransition tr;
  tr.A = Eigen::kroneckerProduct(a1, eye);
  tr.xi = Eigen::VectorXd::Zero(layout.size());
  tr.Q = Eigen::kroneckerProduct(q1, gam);
  tr.Q_sqrt = Eigen::kroneckerProduct(r1, gam_sqrt);
  return tr;
}

inline GaussMarkovTransition build_transition(double h, const StateLayout& layout, double gamma = 1.0) {
  return build_transition(h, layout, Eigen::VectorXd::Constant(layout.d, gamma));
}

/// Selector matrices C (block X(1)) and Cdot (block X(2)), each d x d(q+1).
struct Projections {
  Eigen::MatrixXd C;
  Eigen::MatrixXd Cdot;
};

inline Projections projections(const StateLayout& layout) {
  detail::check_layout(layout);
  if (layout.q < 1) throw std::invalid_argument("projections: q must be >= 1 to have a derivative block");
  Projections p;
  p.C = Eigen::MatrixXd::Zero(layout.d, layout.size());
  p.Cdot = Eigen::MatrixXd::Zero(layout.d, layout.size());
  p.C.leftCols(layout.d).setIdentity();
  p.Cdot.middleCols(layout.d, layout.d).setIdentity();
  return p;
}

/// Step-size dependent, Gamma independent pieces of the transition. Gamma is
/// recalibrated every step, so only these are cached and the diffusion is
/// applied per call.
class TransitionCache {
 public:
  TransitionCache() = default;
  TransitionCache(const StateLayout& layout, double h) : layout_(layout), h_(h) {
    detail::check_layout(layout);
    if (!(h >= 0.0)) throw std::invalid_argument("TransitionCache: step size must be >= 0");
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(layout.d, layout.d);
    A_ = Eigen::kroneckerProduct(iwp_transition_block(layout.q, h), eye);
    r1_ = iwp_noise_block_sqrt(layout.q, h);
  }

  const StateLayout& layout() const { return layout_; }
  double step() const { return h_; }
  const Eigen::MatrixXd& A() const { return A_; }

  /// Upper factor of Q1(h) (x) diag(gamma).
  Eigen::MatrixXd noise_sqrt(const Eigen::VectorXd& gamma_diag) const {
    const int n = layout_.size(), d = layout_.d;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd g = gamma_diag.cwiseMax(0.0).cwiseSqrt();
    for (int i = 0; i < layout_.blocks(); ++i)
      for (int j = i; j < layout_.blocks(); ++j)
        for (int k = 0; k < d; ++k) out(i * d + k, j * d + k) = r1_(i, j) * g[k];
    return out;
  }

 private:
  StateLayout layout_;
  double h_ = 0.0;
  Eigen::MatrixXd A_;
  Eigen::MatrixXd r1_;
};

}  // namespace pnsmc
