#pragma once

// Independent oracles and property checks: finite differences, a brute-force
// hypergradient, prox-sigma-contractivity sampling, Frobenius-norm identities,
// three-point monotonicity of quadratics, and a toy bilevel problem with
// closed-form solution.

#include "bilevel/solvers.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Default central-difference step for a point x: 1e-6 (1 + |x|_inf).
template <typename Derived>
typename Derived::Scalar default_fd_step(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar scale = x.size() ? x.cwiseAbs().maxCoeff() : Scalar(0);
  return Scalar(1e-6) * (Scalar(1) + scale);
}

/// Compares the directional derivative of a scalar function against the
/// central difference (f(x + h d) - f(x - h d)) / 2h over n_dirs random unit
/// directions. Returns the worst relative error |fd - an| / max(|fd|, |an|),
/// with agreement below 1e-14 absolute treated as exact.
template <typename Scalar, typename Value, typename Gradient>
Scalar fd_check(const Value& value, const Gradient& gradient, const NoDeduce<Vector<Scalar>>& x, int n_dirs,
                NoDeduce<Scalar> h,
                std::uint64_t seed = 0) {
  if (!(h > Scalar(0))) throw std::invalid_argument("fd_check: h must be positive");
  Rng rng(seed);
  const Vector<Scalar> g = gradient(x);
  Scalar worst(0);
  for (int k = 0; k < n_dirs; ++k) {
    Vector<Scalar> d = rng.normal_vector<Scalar>(x.size());
    d.normalize();
    const Scalar fd = (value(Vector<Scalar>(x + h * d)) - value(Vector<Scalar>(x - h * d))) / (Scalar(2) * h);
    const Scalar an = g.dot(d);
    const Scalar diff = std::abs(fd - an);
    if (diff <= Scalar(1e-14)) continue;
    worst = std::max(worst, diff / std::max(std::abs(fd), std::abs(an)));
  }
  return worst;
}

/// Vector-valued variant: `map` : R^n -> R^m and `directional(d)` its
/// analytic derivative applied to d. Errors are measured in the 2-norm.
template <typename Scalar, typename Map, typename Directional>
Scalar fd_check_vector(const Map& map, const Directional& directional, const NoDeduce<Vector<Scalar>>& x, int n_dirs,
                       NoDeduce<Scalar> h,
                       std::uint64_t seed = 0) {
  if (!(h > Scalar(0))) throw std::invalid_argument("fd_check_vector: h must be positive");
  Rng rng(seed);
  Scalar worst(0);
  for (int k = 0; k < n_dirs; ++k) {
    Vector<Scalar> d = rng.normal_vector<Scalar>(x.size());
    d.normalize();
    const Vector<Scalar> fd = (map(Vector<Scalar>(x + h * d)) - map(Vector<Scalar>(x - h * d))) / (Scalar(2) * h);
    const Vector<Scalar> an = directional(d);
    const Scalar diff = (fd - an).norm();
    if (diff <= Scalar(1e-14)) continue;
    worst = std::max(worst, diff / std::max(fd.norm(), an.norm()));
  }
  return worst;
}

template <typename Scalar>
struct DerivativeReport {
  Scalar grad_u = Scalar(0);     // grad_u F against F
  Scalar hessian = Scalar(0);    // Hessian apply against grad_u F
  Scalar mixed = Scalar(0);      // mixed rows against grad_u F in alpha
  Scalar outer_grad = Scalar(0); // grad J against J

  Scalar worst() const { return std::max(std::max(grad_u, hessian), std::max(mixed, outer_grad)); }
};

/// All analytic derivatives of a problem at (u, alpha) against central
/// differences of the next-lower oracle.
template <typename Scalar>
DerivativeReport<Scalar> check_problem_derivatives(const BilevelProblem<Scalar>& problem,
                                                   const NoDeduce<Vector<Scalar>>& u,
                                                   const NoDeduce<Vector<Scalar>>& alpha, int n_dirs, std::uint64_t seed) {
  using Vec = Vector<Scalar>;
  DerivativeReport<Scalar> rep;
  const Scalar hu = default_fd_step(u);
  const Scalar ha = default_fd_step(alpha);
  rep.grad_u = fd_check<Scalar>([&](const Vec& v) { return problem.inner_value(v, alpha); },
                                [&](const Vec& v) { return problem.inner_grad_u(v, alpha); }, u, n_dirs, hu, seed);
  const auto hessian = problem.inner_hessian(u, alpha);
  rep.hessian = fd_check_vector<Scalar>([&](const Vec& v) { return problem.inner_grad_u(v, alpha); },
                                        [&](const Vec& d) { return hessian(d); }, u, n_dirs, hu, seed + 1);
  const Matrix<Scalar> mixed = problem.inner_mixed_rows(u, alpha);
  rep.mixed = fd_check_vector<Scalar>([&](const Vec& a) { return problem.inner_grad_u(u, a); },
                                      [&](const Vec& d) { return Vec(mixed.transpose() * d); }, alpha, n_dirs, ha,
                                      seed + 2);
  rep.outer_grad = fd_check<Scalar>([&](const Vec& v) { return problem.outer_objective(v); },
                                    [&](const Vec& v) { return problem.outer_grad(v); }, u, n_dirs, hu, seed + 3);
  return rep;
}

// ---------------------------------------------------------------------------
// Brute-force hypergradient
// ---------------------------------------------------------------------------

/// Inner-solver settings for near-exact solves: stop once |grad F| <= inner_tol.
template <typename Scalar>
ImplicitConfig<Scalar> tight_inner_config(Scalar inner_tol, long max_iter = 2000000) {
  ImplicitConfig<Scalar> cfg;
  cfg.grad_tol = inner_tol;
  cfg.inner_max_iter = max_iter;
  return cfg;
}

/// Central differences of alpha -> J(S_u(alpha)) with S_u from tight inner
/// solves. Throws NumericalFailure if an inner solve misses inner_tol.
template <typename Scalar>
Vector<Scalar> hypergradient_oracle(const BilevelProblem<Scalar>& problem, const NoDeduce<Vector<Scalar>>& alpha,
                                    NoDeduce<Scalar> fd_h, NoDeduce<Scalar> inner_tol) {
  if (!(fd_h > Scalar(0))) throw std::invalid_argument("hypergradient_oracle: fd_h must be positive");
  if (!(inner_tol > Scalar(0))) throw std::invalid_argument("hypergradient_oracle: inner_tol must be positive");
  const auto cfg = tight_inner_config(inner_tol);
  const Vector<Scalar> zero = Vector<Scalar>::Zero(problem.inner_dim());
  auto reduced = [&](const Vector<Scalar>& a) {
    if (!regularizer_value(problem.regularizer(), a).feasible) {
      throw std::invalid_argument("hypergradient_oracle: perturbed alpha leaves Dom R");
    }
    const auto inner = implicit_solve_inner(problem, a, zero, cfg);
    const Scalar gnorm = problem.inner_grad_u(inner.u, a).norm();
    if (!(gnorm <= inner_tol)) {
      throw NumericalFailure("hypergradient_oracle: inner solve reached |grad F| = " + format_real(gnorm) +
                             " after " + std::to_string(inner.iterations) + " iterations (tol " +
                             format_real(inner_tol) + ")");
    }
    return problem.outer_objective(inner.u);
  };
  Vector<Scalar> grad(alpha.size());
  for (Index i = 0; i < alpha.size(); ++i) {
    Vector<Scalar> plus = alpha, minus = alpha;
    plus[i] += fd_h;
    minus[i] -= fd_h;
    grad[i] = (reduced(plus) - reduced(minus)) / (Scalar(2) * fd_h);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// prox-sigma-contractivity
// ---------------------------------------------------------------------------

template <typename Scalar>
struct ContractivityReport {
  int samples = 0;
  Scalar max_ratio = Scalar(0);  // max |D(a) - D(a_hat)| / |a - a_hat|
  Scalar bound = Scalar(0);      // sigma C_R
  bool pass = false;
};

/// D_{sigma R}(a) = prox_{sigma R}(a - sigma q) - a.
template <typename Scalar>
Vector<Scalar> prox_displacement(const RegularizerSpec<Scalar>& spec, const NoDeduce<Vector<Scalar>>& alpha,
                                 const NoDeduce<Vector<Scalar>>& q, NoDeduce<Scalar> sigma) {
  return prox_R(spec, Vector<Scalar>(alpha - sigma * q), sigma) - alpha;
}

/// Samples alpha uniformly in the box [lo, hi] and checks
/// |D(a) - D(a_hat)| <= sigma C_R |a - a_hat|.
template <typename Scalar>
ContractivityReport<Scalar> check_prox_contractivity(const RegularizerSpec<Scalar>& spec,
                                                     const NoDeduce<Vector<Scalar>>& alpha_hat,
                                                     const NoDeduce<Vector<Scalar>>& q, NoDeduce<Scalar> sigma,
                                                     NoDeduce<Scalar> c_r, const NoDeduce<Vector<Scalar>>& lo,
                                                     const NoDeduce<Vector<Scalar>>& hi, int n_samples,
                                                     std::uint64_t seed) {
  const Index n = alpha_hat.size();
  if (q.size() != n || lo.size() != n || hi.size() != n) {
    throw std::invalid_argument("check_prox_contractivity: dimension mismatch");
  }
  if (!(sigma > Scalar(0))) throw std::invalid_argument("check_prox_contractivity: sigma must be positive");
  if (n == 0 || !(lo.array() < hi.array()).all() || !lo.allFinite() || !hi.allFinite()) {
    throw std::invalid_argument("check_prox_contractivity: sampling box is empty or degenerate");
  }
  if (!((alpha_hat.array() >= lo.array()).all() && (alpha_hat.array() <= hi.array()).all())) {
    throw std::invalid_argument("check_prox_contractivity: alpha_hat lies outside the sampling box");
  }
  if (n_samples < 1) throw std::invalid_argument("check_prox_contractivity: n_samples must be >= 1");
  ContractivityReport<Scalar> rep;
  rep.bound = sigma * c_r;
  const Vector<Scalar> d_hat = prox_displacement(spec, alpha_hat, q, sigma);
  Rng rng(seed);
  for (int s = 0; s < n_samples; ++s) {
    Vector<Scalar> a(n);
    for (Index i = 0; i < n; ++i) a[i] = Scalar(rng.uniform(double(lo[i]), double(hi[i])));
    const Scalar dist = (a - alpha_hat).norm();
    if (dist == Scalar(0)) continue;
    const Scalar ratio = (prox_displacement(spec, a, q, sigma) - d_hat).norm() / dist;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    ++rep.samples;
  }
  rep.pass = rep.max_ratio <= rep.bound * (Scalar(1) + Scalar(1e-9));
  return rep;
}

// ---------------------------------------------------------------------------
// Three-point monotonicity of quadratics
// ---------------------------------------------------------------------------

/// Random symmetric H = Q diag(lambda) Q^T with spectrum in [gamma, L],
/// both extremes attained.
template <typename Scalar>
Matrix<Scalar> random_spd(Index n, Scalar gamma, Scalar big_l, Rng& rng) {
  const Matrix<Scalar> a = rng.normal_matrix<Scalar>(n, n);
  const Matrix<Scalar> q = Eigen::HouseholderQR<Matrix<Scalar>>(a).householderQ();
  Vector<Scalar> lambda(n);
  for (Index i = 0; i < n; ++i) lambda[i] = Scalar(rng.uniform(double(gamma), double(big_l)));
  lambda[0] = gamma;
  if (n > 1) lambda[n - 1] = big_l;
  return q * lambda.asDiagonal() * q.transpose();
}

/// Worst slack of
///   <H(z - x_hat), x - x_hat> >= gamma (1 - beta) |x - x_hat|^2 - L/(4 beta) |x - z|^2
/// over random (x, z, x_hat, beta in (0, 1]) for F = 1/2 <Hx, x>.
template <typename Scalar>
Scalar check_three_point_monotonicity(const Matrix<Scalar>& h, NoDeduce<Scalar> gamma, NoDeduce<Scalar> big_l, int n_samples,
                                      std::uint64_t seed) {
  if (!(Scalar(0) < gamma && gamma <= big_l)) {
    throw std::invalid_argument("check_three_point_monotonicity: need 0 < gamma <= L");
  }
  Rng rng(seed);
  const Index n = h.rows();
  Scalar worst = std::numeric_limits<Scalar>::infinity();
  for (int s = 0; s < n_samples; ++s) {
    const Vector<Scalar> x = rng.normal_vector<Scalar>(n);
    const Vector<Scalar> z = rng.normal_vector<Scalar>(n);
    const Vector<Scalar> x_hat = rng.normal_vector<Scalar>(n);
    const Scalar beta = Scalar(1) - Scalar(rng.uniform());  // (0, 1]
    const Scalar lhs = (h * (z - x_hat)).dot(x - x_hat);
    const Scalar rhs =
        gamma * (Scalar(1) - beta) * (x - x_hat).squaredNorm() - big_l / (Scalar(4) * beta) * (x - z).squaredNorm();
    worst = std::min(worst, lhs - rhs);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Frobenius structure
// ---------------------------------------------------------------------------

/// Spectral norm by power iteration on M^T M.
template <typename Scalar>
Scalar spectral_norm_power(const Matrix<Scalar>& m, int max_iter = 1000, std::uint64_t seed = 0) {
  Rng rng(seed);
  Vector<Scalar> v = rng.normal_vector<Scalar>(m.cols());
  v.normalize();
  Scalar est(0);
  for (int it = 0; it < max_iter; ++it) {
    Vector<Scalar> w = m.transpose() * (m * v);
    const Scalar nrm = w.norm();
    if (nrm == Scalar(0)) return Scalar(0);
    const Scalar next = std::sqrt(v.dot(w));
    v = w / nrm;
    if (std::abs(next - est) <= Scalar(1e-15) * next) {
      est = next;
      break;
    }
    est = next;
  }
  return est;
}

template <typename Scalar>
struct NormReport {
  int samples = 0;
  Scalar symmetry = Scalar(0);       // max |<p,q> - <q,p>|
  Scalar linearity = Scalar(0);      // max |<ap+bq,r> - a<p,r> - b<q,r>|
  Scalar positivity = Scalar(0);     // min <p,p> over nonzero p
  Scalar submultiplicative = std::numeric_limits<Scalar>::infinity();  // min |p|_F |M|_2 - |pM|_F
  Scalar spectral_vs_frobenius = std::numeric_limits<Scalar>::infinity();  // min |p|_F - |p|_2
};

/// Inner-product axioms and norm bounds on random 4x16 adjoints p, q, r and
/// 16x16 M. Spectral norms come from a full SVD.
template <typename Scalar>
NormReport<Scalar> check_norm_properties(int n_samples, std::uint64_t seed) {
  Rng rng(seed);
  NormReport<Scalar> rep;
  rep.positivity = std::numeric_limits<Scalar>::infinity();
  for (int s = 0; s < n_samples; ++s) {
    const Matrix<Scalar> p = rng.normal_matrix<Scalar>(4, 16);
    const Matrix<Scalar> q = rng.normal_matrix<Scalar>(4, 16);
    const Matrix<Scalar> r = rng.normal_matrix<Scalar>(4, 16);
    const Matrix<Scalar> m = rng.normal_matrix<Scalar>(16, 16);
    const Scalar a = Scalar(rng.normal());
    const Scalar b = Scalar(rng.normal());
    rep.symmetry = std::max(rep.symmetry, std::abs(frobenius_inner(p, q) - frobenius_inner(q, p)));
    rep.linearity = std::max(rep.linearity, std::abs(frobenius_inner(Matrix<Scalar>(a * p + b * q), r) -
                                                     a * frobenius_inner(p, r) - b * frobenius_inner(q, r)));
    rep.positivity = std::min(rep.positivity, frobenius_inner(p, p));
    const Scalar m2 = Eigen::JacobiSVD<Matrix<Scalar>>(m).singularValues()(0);
    rep.submultiplicative = std::min(rep.submultiplicative, frobenius_norm(p) * m2 - frobenius_norm(Matrix<Scalar>(p * m)));
    const Scalar p2 = Eigen::JacobiSVD<Matrix<Scalar>>(p).singularValues()(0);
    rep.spectral_vs_frobenius = std::min(rep.spectral_vs_frobenius, frobenius_norm(p) - p2);
    ++rep.samples;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Toy bilevel problem
//   F(u; a) = 1/2 |B u - a c|^2 + mu/2 |u|^2,  J(u) = 1/2 |u - b|^2,  R = 0.
// With H = B^T B + mu I and w = H^{-1} B^T c:
//   S_u(a) = a w,  p_hat = w^T,  a_hat = <w, b> / |w|^2.
// ---------------------------------------------------------------------------

template <typename Scalar>
class ToyQuadraticProblem final : public BilevelProblem<Scalar> {
 public:
  using Base = BilevelProblem<Scalar>;
  using typename Base::LinearOperator;
  using typename Base::Mat;
  using typename Base::Vec;

  ToyQuadraticProblem(Mat b_mat, Vec c, Scalar mu, Vec target)
      : Base(std::move(target), RegularizerSpec<Scalar>{}, 1), b_(std::move(b_mat)), c_(std::move(c)), mu_(mu) {
    if (!(mu > Scalar(0))) throw std::invalid_argument("ToyQuadraticProblem: mu must be positive");
    if (b_.cols() != this->inner_dim() || b_.rows() != c_.size()) {
      throw std::invalid_argument("ToyQuadraticProblem: dimension mismatch");
    }
    btc_ = b_.transpose() * c_;
  }

  const Mat& B() const { return b_; }
  const Vec& c() const { return c_; }
  Scalar mu() const { return mu_; }

  Mat dense_hessian() const {
    return b_.transpose() * b_ + mu_ * Mat::Identity(this->inner_dim(), this->inner_dim());
  }

  Scalar inner_value(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return (b_ * u - alpha[0] * c_).squaredNorm() / Scalar(2) + mu_ * u.squaredNorm() / Scalar(2);
  }
  Vec inner_grad_u(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return b_.transpose() * (b_ * u - alpha[0] * c_) + mu_ * u;
  }
  LinearOperator inner_hessian(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return [this](const Vec& v) -> Vec { return b_.transpose() * (b_ * v) + mu_ * v; };
  }
  Mat inner_mixed_rows(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return -btc_.transpose();
  }

 private:
  Mat b_;
  Vec c_;
  Scalar mu_;
  Vec btc_;
};

template <typename Scalar>
struct ToyBilevel {
  std::shared_ptr<ToyQuadraticProblem<Scalar>> problem;
  Vector<Scalar> w;  // d S_u / d alpha
  Vector<Scalar> u_hat;
  AdjointMatrix<Scalar> p_hat;
  Vector<Scalar> alpha_hat;
  Scalar lipschitz = Scalar(0);  // lambda_max(H)
};

template <typename Scalar = double>
ToyBilevel<Scalar> make_toy_problem(std::uint64_t seed, Index m, Index n, Scalar mu = Scalar(0.5)) {
  if (m < 2 || n < 2) throw std::invalid_argument("make_toy_problem: need m, n >= 2");
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed + attempt * 0x9E3779B97F4A7C15ull);
    Matrix<Scalar> b_mat = rng.normal_matrix<Scalar>(m, n);
    Vector<Scalar> c = rng.normal_vector<Scalar>(m);
    Vector<Scalar> target = rng.normal_vector<Scalar>(n);
    auto problem = std::make_shared<ToyQuadraticProblem<Scalar>>(b_mat, c, mu, target);
    const Matrix<Scalar> h = problem->dense_hessian();
    const Eigen::LDLT<Matrix<Scalar>> ldlt(h);
    const Vector<Scalar> w = ldlt.solve(b_mat.transpose() * c);
    if (!(w.norm() > Scalar(1e-8))) continue;
    ToyBilevel<Scalar> toy;
    toy.problem = problem;
    toy.w = w;
    toy.alpha_hat = Vector<Scalar>::Constant(1, w.dot(target) / w.squaredNorm());
    toy.u_hat = toy.alpha_hat[0] * w;
    toy.p_hat = w.transpose();
    toy.lipschitz = Eigen::SelfAdjointEigenSolver<Matrix<Scalar>>(h).eigenvalues().maxCoeff();
    return toy;
  }
}

// ---------------------------------------------------------------------------
// Fejer / rate monitor in the ZM norm
// ---------------------------------------------------------------------------

/// Diagonal blocks of Z M: (phi_u / tau, phi_p / theta, 1 / sigma) for FIFB;
/// the p-block is 0 for FEFB and for the implicit method.
template <typename Scalar>
struct MonitorWeights {
  Scalar u = Scalar(0);
  Scalar p = Scalar(0);
  Scalar alpha = Scalar(0);
};

template <typename Scalar>
MonitorWeights<Scalar> zm_weights(Method method, const StepLengths<Scalar>& steps, Scalar phi_u = Scalar(1),
                                  Scalar phi_p = Scalar(1)) {
  MonitorWeights<Scalar> w;
  w.u = phi_u / steps.tau;
  w.p = method == Method::fifb ? phi_p / steps.theta : Scalar(0);
  w.alpha = Scalar(1) / steps.sigma;
  return w;
}

template <typename Scalar>
struct MonitorReport {
  std::vector<Scalar> distances;
  Scalar max_increase = Scalar(0);  // max_k d_{k+1} - d_k (<= 0 when Fejer-monotone)
  Scalar rate = Scalar(0);          // geometric-mean ratio over the last half
};

template <typename Scalar>
Scalar zm_distance(const SolverState<Scalar>& x, const SolverState<Scalar>& x_hat, const MonitorWeights<Scalar>& w) {
  Scalar sq = w.u * (x.u - x_hat.u).squaredNorm() + w.alpha * (x.alpha - x_hat.alpha).squaredNorm();
  if (w.p != Scalar(0)) sq += w.p * (x.p - x_hat.p).squaredNorm();
  return std::sqrt(sq);
}

/// Distances d_k = |x^k - x_hat|_{ZM}, their largest increase, and the
/// geometric-mean contraction factor over the last half of the trace. Once
/// d_k falls to floor_rel * d_0 the iterates sit at rounding level; the rate
/// window then ends there, since ratios of rounding noise carry no rate.
template <typename Scalar>
MonitorReport<Scalar> fejer_and_rate_monitor(const std::vector<SolverState<Scalar>>& states,
                                             const SolverState<Scalar>& x_hat, const MonitorWeights<Scalar>& w,
                                             Scalar floor_rel = Scalar(1e-12)) {
  if (states.size() < 3) throw std::invalid_argument("fejer_and_rate_monitor: need at least 3 states");
  MonitorReport<Scalar> rep;
  rep.distances.reserve(states.size());
  for (const auto& s : states) rep.distances.push_back(zm_distance(s, x_hat, w));
  rep.max_increase = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t k = 1; k < rep.distances.size(); ++k) {
    rep.max_increase = std::max(rep.max_increase, rep.distances[k] - rep.distances[k - 1]);
  }
  std::size_t last = rep.distances.size() - 1;
  for (std::size_t k = 2; k < rep.distances.size(); ++k) {
    if (rep.distances[k] <= floor_rel * rep.distances[0]) {
      last = k;
      break;
    }
  }
  const std::size_t mid = last / 2;
  const Scalar d_mid = rep.distances[mid];
  const Scalar d_last = rep.distances[last];
  rep.rate = d_mid == Scalar(0) ? Scalar(0) : std::pow(d_last / d_mid, Scalar(1) / Scalar(last - mid));
  return rep;
}

}  // namespace bilevel
