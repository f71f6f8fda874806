#pragma once

// Adjoint variable p in L(U; A), realized as a dense outer_dim x inner_dim
// matrix whose rows live in U. Exact solves go through a matrix-free Krylov
// method; the inexact variant takes one Richardson step on p H + G = 0.

#include "bilevel/objectives.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>

namespace bilevel {

template <typename Scalar>
using AdjointMatrix = Matrix<Scalar>;

enum class KrylovMethod { cg, bicgstab };

template <typename Scalar>
struct KrylovConfig {
  Scalar tol = Scalar(1e-10);  // relative residual |Hx - b| <= tol |b|
  int max_iter = 10000;
  KrylovMethod method = KrylovMethod::cg;

  KrylovConfig() = default;
  KrylovConfig(Scalar t, int iters, KrylovMethod m = KrylovMethod::cg) : tol(t), max_iter(iters), method(m) {
    validate();
  }
  void validate() const {
    if (!(tol > Scalar(0))) throw std::invalid_argument("KrylovConfig: tol must be positive");
    if (max_iter < 1) throw std::invalid_argument("KrylovConfig: max_iter must be >= 1");
  }
};

template <typename Scalar>
struct KrylovResult {
  Vector<Scalar> solution;
  Scalar residual = Scalar(0);  // relative, recomputed from the returned iterate
  int iterations = 0;
  int operator_applies = 0;
  bool converged = false;
};

namespace detail {

template <typename Scalar, typename Apply>
KrylovResult<Scalar> conjugate_gradient(const Apply& apply, const Vector<Scalar>& rhs,
                                        const KrylovConfig<Scalar>& cfg, Scalar rhs_norm) {
  KrylovResult<Scalar> res;
  const Index n = rhs.size();
  Vector<Scalar> x = Vector<Scalar>::Zero(n);
  Vector<Scalar> r = rhs;
  Vector<Scalar> d = r;
  Scalar rr = r.squaredNorm();
  const Scalar target = cfg.tol * rhs_norm;
  Vector<Scalar> best = x;
  Scalar best_res = std::sqrt(rr);
  while (res.iterations < cfg.max_iter) {
    const Vector<Scalar> hd = apply(d);
    ++res.operator_applies;
    ++res.iterations;
    const Scalar dhd = d.dot(hd);
    if (!(dhd > Scalar(0))) break;  // operator not positive definite along d
    const Scalar step = rr / dhd;
    x += step * d;
    r -= step * hd;
    const Scalar rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) <= target) {
      // The recursive residual drifts; confirm with the true one and restart if needed.
      r = rhs - apply(x);
      ++res.operator_applies;
      const Scalar true_rr = r.squaredNorm();
      if (std::sqrt(true_rr) < best_res) {
        best_res = std::sqrt(true_rr);
        best = x;
      }
      if (std::sqrt(true_rr) <= target) break;
      rr = true_rr;
      d = r;
      continue;
    }
    if (std::sqrt(rr_next) < best_res) {
      best_res = std::sqrt(rr_next);
      best = x;
    }
    d = r + (rr_next / rr) * d;
    rr = rr_next;
  }
  res.solution = std::move(best);
  return res;
}

template <typename Scalar, typename Apply>
KrylovResult<Scalar> bicgstab(const Apply& apply, const Vector<Scalar>& rhs, const KrylovConfig<Scalar>& cfg,
                              Scalar rhs_norm) {
  KrylovResult<Scalar> res;
  const Index n = rhs.size();
  const Scalar target = cfg.tol * rhs_norm;
  Vector<Scalar> x = Vector<Scalar>::Zero(n);
  Vector<Scalar> r = rhs;
  const Vector<Scalar> r_hat = r;
  Scalar rho = Scalar(1), omega = Scalar(1), step = Scalar(1);
  Vector<Scalar> v = Vector<Scalar>::Zero(n);
  Vector<Scalar> d = Vector<Scalar>::Zero(n);
  Vector<Scalar> best = x;
  Scalar best_res = rhs_norm;
  const Scalar tiny = std::numeric_limits<Scalar>::min();
  while (res.iterations < cfg.max_iter) {
    ++res.iterations;
    const Scalar rho_next = r_hat.dot(r);
    if (std::abs(rho_next) <= tiny) break;  // breakdown
    const Scalar beta = (rho_next / rho) * (step / omega);
    rho = rho_next;
    d = r + beta * (d - omega * v);
    v = apply(d);
    ++res.operator_applies;
    const Scalar denom = r_hat.dot(v);
    if (std::abs(denom) <= tiny) break;
    step = rho / denom;
    const Vector<Scalar> s = r - step * v;
    if (s.norm() <= target) {
      x += step * d;
      r = s;
      best = x;
      best_res = s.norm();
      break;
    }
    const Vector<Scalar> t = apply(s);
    ++res.operator_applies;
    const Scalar tt = t.squaredNorm();
    if (tt <= tiny) break;
    omega = t.dot(s) / tt;
    x += step * d + omega * s;
    r = s - omega * t;
    const Scalar rn = r.norm();
    if (rn < best_res) {
      best_res = rn;
      best = x;
    }
    if (rn <= target) break;
    if (std::abs(omega) <= tiny) break;
  }
  res.solution = std::move(best);
  return res;
}

}  // namespace detail

/// Solves H x = rhs for a matrix-free operator H. Non-convergence is reported
/// through `converged`, with the best iterate found so far.
template <typename Scalar, typename Apply>
KrylovResult<Scalar> krylov_solve(const Apply& apply, const NoDeduce<Vector<Scalar>>& rhs,
                                  const KrylovConfig<Scalar>& cfg) {
  cfg.validate();
  const Scalar rhs_norm = rhs.norm();
  if (rhs_norm == Scalar(0)) {
    KrylovResult<Scalar> res;
    res.solution = Vector<Scalar>::Zero(rhs.size());
    res.converged = true;
    return res;
  }
  auto res = cfg.method == KrylovMethod::cg ? detail::conjugate_gradient(apply, rhs, cfg, rhs_norm)
                                            : detail::bicgstab(apply, rhs, cfg, rhs_norm);
  res.residual = (apply(res.solution) - rhs).norm() / rhs_norm;
  ++res.operator_applies;
  // Allow a sliver over tol for the final re-evaluation's own rounding.
  res.converged = res.residual <= cfg.tol * (Scalar(1) + Scalar(1e-6));
  return res;
}

// ---------------------------------------------------------------------------
// Frobenius structure on L(U; A) with the standard basis of R^{n_alpha}.
// ---------------------------------------------------------------------------

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar frobenius_inner(const Eigen::MatrixBase<DerivedA>& p, const Eigen::MatrixBase<DerivedB>& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) {
    throw std::invalid_argument("frobenius_inner: shape mismatch");
  }
  return (p.array() * q.array()).sum();
}

template <typename Derived>
typename Derived::Scalar frobenius_norm(const Eigen::MatrixBase<Derived>& p) {
  return std::sqrt(frobenius_inner(p, p));
}

// ---------------------------------------------------------------------------
// Exact and inexact adjoint updates
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AdjointSolution {
  AdjointMatrix<Scalar> p;
  bool converged = true;
  Scalar max_residual = Scalar(0);  // worst relative row residual
  int operator_applies = 0;
  std::string message;
};

/// p = -G H^{-1} with G the mixed rows at (u, alpha). H is symmetric, so each
/// row solves H x_i = -g_i; all rows share one Hessian closure.
template <typename Scalar>
AdjointSolution<Scalar> solve_adjoint_exact(const BilevelProblem<Scalar>& problem, const NoDeduce<Vector<Scalar>>& u,
                                            const NoDeduce<Vector<Scalar>>& alpha, const KrylovConfig<Scalar>& cfg,
                                            const Matrix<Scalar>* mixed_rows = nullptr) {
  const auto hessian = problem.inner_hessian(u, alpha);
  const Matrix<Scalar> g = mixed_rows ? *mixed_rows : problem.inner_mixed_rows(u, alpha);
  AdjointSolution<Scalar> out;
  out.p.resize(g.rows(), g.cols());
  for (Index i = 0; i < g.rows(); ++i) {
    const Vector<Scalar> rhs = -g.row(i).transpose();
    const auto res = krylov_solve(hessian, rhs, cfg);
    out.p.row(i) = res.solution.transpose();
    out.operator_applies += res.operator_applies;
    out.max_residual = std::max(out.max_residual, res.residual);
    if (!res.converged) {
      out.converged = false;
      std::ostringstream msg;
      msg << "adjoint row " << i << ": Krylov solve stopped after " << res.iterations
          << " iterations at relative residual " << res.residual << " (tol " << cfg.tol << ")";
      if (!out.message.empty()) out.message += "; ";
      out.message += msg.str();
    }
  }
  return out;
}

/// p_next = p - theta (p H + G), evaluated with n_alpha Hessian applies.
template <typename Scalar>
AdjointMatrix<Scalar> adjoint_step_inexact(const typename BilevelProblem<Scalar>::LinearOperator& hessian,
                                           const Matrix<Scalar>& mixed_rows, const AdjointMatrix<Scalar>& p,
                                           Scalar theta) {
  if (!(theta > Scalar(0))) throw std::invalid_argument("adjoint_step_inexact: theta must be positive");
  if (p.rows() != mixed_rows.rows() || p.cols() != mixed_rows.cols()) {
    throw std::invalid_argument("adjoint_step_inexact: adjoint shape mismatch");
  }
  AdjointMatrix<Scalar> next(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const Vector<Scalar> row = p.row(i).transpose();
    next.row(i) = (row - theta * (hessian(row) + mixed_rows.row(i).transpose())).transpose();
  }
  return next;
}

template <typename Scalar>
AdjointMatrix<Scalar> adjoint_step_inexact(const BilevelProblem<Scalar>& problem, const NoDeduce<AdjointMatrix<Scalar>>& p,
                                           const NoDeduce<Vector<Scalar>>& u, const NoDeduce<Vector<Scalar>>& alpha,
                                           NoDeduce<Scalar> theta) {
  return adjoint_step_inexact<Scalar>(problem.inner_hessian(u, alpha), problem.inner_mixed_rows(u, alpha), p,
                                      theta);
}

/// Frobenius norm of the adjoint-equation residual p H + G.
template <typename Scalar>
Scalar adjoint_residual(const BilevelProblem<Scalar>& problem, const NoDeduce<AdjointMatrix<Scalar>>& p,
                        const NoDeduce<Vector<Scalar>>& u, const NoDeduce<Vector<Scalar>>& alpha) {
  const auto hessian = problem.inner_hessian(u, alpha);
  const Matrix<Scalar> g = problem.inner_mixed_rows(u, alpha);
  Scalar sq(0);
  for (Index i = 0; i < p.rows(); ++i) {
    const Vector<Scalar> row = p.row(i).transpose();
    sq += (hessian(row) + g.row(i).transpose()).squaredNorm();
  }
  return std::sqrt(sq);
}

}  // namespace bilevel
