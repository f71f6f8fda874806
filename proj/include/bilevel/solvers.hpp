#pragma once

// Single-loop bilevel solvers (forward-exact and forward-inexact
// forward-backward) and the implicit-function baseline, with iterate tracing
// and a deterministic resource counter.
//
// Resource units: one per inner gradient, per Hessian apply (Krylov
// iterations included), per inner objective value, and per mixed-derivative
// row. The counter is the same for every method, so traces are comparable.

#include "bilevel/adjoint.hpp"

#include <chrono>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

/// Raised when a component that must succeed (e.g. an inner solve feeding
/// the implicit baseline) does not.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { fefb, fifb, implicit };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::fefb: return "fefb";
    case Method::fifb: return "fifb";
    case Method::implicit: return "implicit";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "fefb") return Method::fefb;
  if (s == "fifb") return Method::fifb;
  if (s == "implicit") return Method::implicit;
  throw std::invalid_argument("unknown method '" + s + "' (expected fefb, fifb or implicit)");
}

template <typename Scalar>
struct StepLengths {
  Scalar tau = Scalar(0);    // inner gradient step
  Scalar sigma = Scalar(0);  // outer forward-backward step
  Scalar theta = Scalar(0);  // adjoint step (inexact method only)
};

template <typename Scalar>
struct SolverState {
  Vector<Scalar> u;
  AdjointMatrix<Scalar> p;
  Vector<Scalar> alpha;
  long k = 0;
  double resource = 0.0;
  bool adjoint_ok = true;  // last exact adjoint solve converged
  std::string message;
};

template <typename Scalar>
Vector<Scalar> hypergradient(const NoDeduce<AdjointMatrix<Scalar>>& p, const NoDeduce<Vector<Scalar>>& u,
                             const BilevelProblem<Scalar>& problem) {
  if (p.cols() != u.size() || p.rows() != problem.outer_dim()) {
    throw std::invalid_argument("hypergradient: adjoint shape does not match the problem");
  }
  return p * problem.outer_grad(u);
}

// ---------------------------------------------------------------------------
// Single-loop steps
// ---------------------------------------------------------------------------

/// u+ = u - tau grad_u F(u; a);  p+ = S_p(u+, a);  a+ = prox_{sigma R}(a - sigma p+ grad J(u+)).
template <typename Scalar>
SolverState<Scalar> fefb_step(const BilevelProblem<Scalar>& problem, const SolverState<Scalar>& state,
                              const StepLengths<Scalar>& steps, const KrylovConfig<Scalar>& krylov) {
  SolverState<Scalar> next;
  next.u = state.u - steps.tau * problem.inner_grad_u(state.u, state.alpha);
  const Matrix<Scalar> mixed = problem.inner_mixed_rows(next.u, state.alpha);
  auto adj = solve_adjoint_exact(problem, next.u, state.alpha, krylov, &mixed);
  next.p = std::move(adj.p);
  next.adjoint_ok = adj.converged;
  next.message = std::move(adj.message);
  const Vector<Scalar> h = hypergradient(next.p, next.u, problem);
  next.alpha = problem.prox(state.alpha - steps.sigma * h, steps.sigma);
  next.k = state.k + 1;
  next.resource = state.resource + 1.0 + static_cast<double>(mixed.rows()) + adj.operator_applies;
  return next;
}

/// As fefb_step, but with a single adjoint step p+ = p - theta (p H + G).
template <typename Scalar>
SolverState<Scalar> fifb_step(const BilevelProblem<Scalar>& problem, const SolverState<Scalar>& state,
                              const StepLengths<Scalar>& steps) {
  SolverState<Scalar> next;
  next.u = state.u - steps.tau * problem.inner_grad_u(state.u, state.alpha);
  const auto hessian = problem.inner_hessian(next.u, state.alpha);
  const Matrix<Scalar> mixed = problem.inner_mixed_rows(next.u, state.alpha);
  next.p = adjoint_step_inexact<Scalar>(hessian, mixed, state.p, steps.theta);
  const Vector<Scalar> h = hypergradient(next.p, next.u, problem);
  next.alpha = problem.prox(state.alpha - steps.sigma * h, steps.sigma);
  next.k = state.k + 1;
  next.resource = state.resource + 1.0 + 2.0 * static_cast<double>(mixed.rows());
  return next;
}

// ---------------------------------------------------------------------------
// Implicit-function baseline
// ---------------------------------------------------------------------------

enum class OuterStepMode { fixed, backtracking };

template <typename Scalar>
struct ImplicitConfig {
  Scalar rho = Scalar(5e-10);    // stop when |F(v+) - F(v)| <= rho |F(v)|
  // When positive, stop on |grad F| <= grad_tol instead of the rho test, and
  // once F differences drop to rounding level accept steps that do not
  // increase |grad F|. Used for near-exact reference solves.
  Scalar grad_tol = Scalar(0);
  long inner_max_iter = 500000;
  Scalar initial_step = Scalar(1);
  Scalar armijo_grow = Scalar(1.1);
  Scalar armijo_shrink = Scalar(0.75);
  Scalar armijo_c = Scalar(1e-4);  // sufficient-decrease constant
  OuterStepMode outer_mode = OuterStepMode::backtracking;
  Scalar sigma = Scalar(5e-5);   // fixed step, or first backtracking trial
  Scalar sigma_shrink = Scalar(0.1);
  int max_probes = 6;
  bool warm_start = false;       // start inner solves at the previous u instead of 0

  void validate() const {
    if (!(rho > Scalar(0))) throw std::invalid_argument("ImplicitConfig: rho must be positive");
    if (!(Scalar(0) < armijo_shrink && armijo_shrink < Scalar(1) && Scalar(1) < armijo_grow)) {
      throw std::invalid_argument("ImplicitConfig: need 0 < armijo_shrink < 1 < armijo_grow");
    }
    if (!(armijo_c > Scalar(0) && armijo_c < Scalar(1))) {
      throw std::invalid_argument("ImplicitConfig: armijo_c must lie in (0, 1)");
    }
    if (!(sigma > Scalar(0))) throw std::invalid_argument("ImplicitConfig: sigma must be positive");
    if (!(Scalar(0) < sigma_shrink && sigma_shrink < Scalar(1))) {
      throw std::invalid_argument("ImplicitConfig: sigma_shrink must lie in (0, 1)");
    }
    if (inner_max_iter < 1) throw std::invalid_argument("ImplicitConfig: inner_max_iter must be >= 1");
    if (max_probes < 1) throw std::invalid_argument("ImplicitConfig: max_probes must be >= 1");
    if (!(initial_step > Scalar(0))) throw std::invalid_argument("ImplicitConfig: initial_step must be positive");
  }
};

template <typename Scalar>
struct InnerSolveResult {
  Vector<Scalar> u;
  Scalar value = Scalar(0);
  long iterations = 0;
  bool converged = false;  // stopping test met before the iteration cap
  Scalar last_step = Scalar(0);
  double resource = 0.0;
};

/// Gradient descent with Armijo backtracking on u -> F(u; alpha).
template <typename Scalar>
InnerSolveResult<Scalar> implicit_solve_inner(const BilevelProblem<Scalar>& problem,
                                              const NoDeduce<Vector<Scalar>>& alpha,
                                              const NoDeduce<Vector<Scalar>>& v0, const ImplicitConfig<Scalar>& cfg) {
  cfg.validate();
  const bool gradient_mode = cfg.grad_tol > Scalar(0);
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  InnerSolveResult<Scalar> res;
  Vector<Scalar> v = v0;
  Scalar f = problem.inner_value(v, alpha);
  Vector<Scalar> g = problem.inner_grad_u(v, alpha);
  res.resource += 2.0;
  Scalar step = cfg.initial_step / cfg.armijo_grow;
  while (res.iterations < cfg.inner_max_iter) {
    const Scalar gg = g.squaredNorm();
    if (gg == Scalar(0) || (gradient_mode && std::sqrt(gg) <= cfg.grad_tol)) {
      res.converged = true;
      break;
    }
    step *= cfg.armijo_grow;
    Vector<Scalar> trial;
    Vector<Scalar> g_trial;
    Scalar f_trial(0);
    bool accepted = false;
    for (int shrinks = 0; shrinks <= 200; ++shrinks, step *= cfg.armijo_shrink) {
      trial = v - step * g;
      f_trial = problem.inner_value(trial, alpha);
      res.resource += 1.0;
      if (f_trial <= f - cfg.armijo_c * step * gg) {
        accepted = true;
        break;
      }
      if (gradient_mode && cfg.armijo_c * step * gg <= Scalar(64) * eps * std::abs(f)) {
        // The sufficient-decrease margin is below the resolution of F.
        g_trial = problem.inner_grad_u(trial, alpha);
        res.resource += 1.0;
        if (g_trial.squaredNorm() <= gg) {
          accepted = true;
          break;
        }
        g_trial.resize(0);
      }
    }
    if (!accepted) {
      // No representable decrease along -g: the iterate is as good as it gets.
      res.converged = !gradient_mode;
      break;
    }
    ++res.iterations;
    const Scalar f_prev = f;
    v = std::move(trial);
    f = f_trial;
    if (g_trial.size()) {
      g = std::move(g_trial);
    } else {
      g = problem.inner_grad_u(v, alpha);
      res.resource += 1.0;
    }
    if (!gradient_mode && std::abs(f - f_prev) <= cfg.rho * std::abs(f_prev)) {
      res.converged = true;
      break;
    }
  }
  if (gradient_mode && !res.converged) res.converged = g.norm() <= cfg.grad_tol;
  res.last_step = step;
  res.value = f;
  res.u = std::move(v);
  return res;
}

/// Near-exact inner solve, exact adjoint, then one outer forward-backward
/// step with fixed sigma or backtracking on J(S_u(.)) + R.
template <typename Scalar>
SolverState<Scalar> implicit_step(const BilevelProblem<Scalar>& problem, const SolverState<Scalar>& state,
                                  const ImplicitConfig<Scalar>& cfg, const KrylovConfig<Scalar>& krylov) {
  SolverState<Scalar> next;
  const Vector<Scalar> v0 = cfg.warm_start ? state.u : Vector<Scalar>::Zero(problem.inner_dim());
  auto inner = implicit_solve_inner(problem, state.alpha, v0, cfg);
  double resource = inner.resource;
  next.u = std::move(inner.u);
  auto adj = solve_adjoint_exact(problem, next.u, state.alpha, krylov);
  resource += static_cast<double>(problem.outer_dim()) + adj.operator_applies;
  if (!adj.converged) throw NumericalFailure("implicit step " + std::to_string(state.k) + ": " + adj.message);
  next.p = std::move(adj.p);
  const Vector<Scalar> h = hypergradient(next.p, next.u, problem);

  if (cfg.outer_mode == OuterStepMode::fixed) {
    next.alpha = problem.prox(state.alpha - cfg.sigma * h, cfg.sigma);
  } else {
    // Forward-backward sufficient decrease:
    //   J(S(a+)) <= J(S(a)) + <h, a+ - a> + |a+ - a|^2 / (2 sigma)
    const Scalar j0 = problem.outer_objective(next.u);
    Scalar sigma = cfg.sigma;
    next.alpha = state.alpha;
    for (int probe = 0; probe < cfg.max_probes; ++probe, sigma *= cfg.sigma_shrink) {
      const Vector<Scalar> trial = problem.prox(state.alpha - sigma * h, sigma);
      const Vector<Scalar> d = trial - state.alpha;
      auto probe_inner = implicit_solve_inner(problem, trial, next.u, cfg);
      resource += probe_inner.resource;
      const Scalar j1 = problem.outer_objective(probe_inner.u);
      if (j1 <= j0 + h.dot(d) + d.squaredNorm() / (Scalar(2) * sigma)) {
        next.alpha = trial;
        break;
      }
    }
  }
  next.k = state.k + 1;
  next.resource = state.resource + resource;
  return next;
}

// ---------------------------------------------------------------------------
// Step-length utilities
// ---------------------------------------------------------------------------

/// Power-iteration estimate of the largest eigenvalue of the inner Hessian.
/// Rayleigh quotients of PSD power iterates never overshoot lambda_max and
/// the running maximum is returned, so the estimate grows with iters.
template <typename Scalar>
Scalar estimate_hessian_bounds(const BilevelProblem<Scalar>& problem, const NoDeduce<Vector<Scalar>>& u,
                               const NoDeduce<Vector<Scalar>>& alpha, int iters, std::uint64_t seed = 0) {
  if (iters < 1) throw std::invalid_argument("estimate_hessian_bounds: iters must be >= 1");
  const auto hessian = problem.inner_hessian(u, alpha);
  Rng rng(seed);
  Vector<Scalar> v = rng.normal_vector<Scalar>(problem.inner_dim());
  v.normalize();
  Scalar best(0);
  for (int it = 0; it < iters; ++it) {
    Vector<Scalar> hv = hessian(v);
    best = std::max(best, v.dot(hv));
    const Scalar nrm = hv.norm();
    if (nrm == Scalar(0)) break;
    v = hv / nrm;
  }
  return best;
}

template <typename Apply, typename Scalar>
Scalar estimate_operator_max_eigenvalue(const Apply& apply, Index dim, int iters, std::uint64_t seed = 0) {
  Rng rng(seed);
  Vector<Scalar> v = rng.normal_vector<Scalar>(dim);
  v.normalize();
  Scalar best(0);
  for (int it = 0; it < iters; ++it) {
    Vector<Scalar> hv = apply(v);
    best = std::max(best, v.dot(hv));
    const Scalar nrm = hv.norm();
    if (nrm == Scalar(0)) break;
    v = hv / nrm;
  }
  return best;
}

/// Warnings for steps outside tau < 2/L_F and theta < 1/L_F (L_F estimated
/// at the given point). Steps are never modified.
template <typename Scalar>
std::vector<std::string> check_step_lengths(const BilevelProblem<Scalar>& problem, const NoDeduce<Vector<Scalar>>& u,
                                            const NoDeduce<Vector<Scalar>>& alpha, const StepLengths<Scalar>& steps,
                                            Method method, int iters = 100) {
  std::vector<std::string> warnings;
  if (method == Method::implicit) return warnings;
  const Scalar lmax = estimate_hessian_bounds(problem, u, alpha, iters);
  if (steps.tau * lmax >= Scalar(2)) {
    warnings.push_back("tau = " + format_real(steps.tau) + " violates tau < 2/L_F (L_F ~ " +
                       format_real(lmax) + ")");
  }
  if (method == Method::fifb && steps.theta * lmax >= Scalar(1)) {
    warnings.push_back("theta = " + format_real(steps.theta) + " violates theta < 1/L_F (L_F ~ " +
                       format_real(lmax) + ")");
  }
  return warnings;
}

// ---------------------------------------------------------------------------
// Runs and traces
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Reference {
  Vector<Scalar> alpha;  // alpha^lim
  Vector<Scalar> u;      // u^lim
};

template <typename Scalar>
struct TraceRecord {
  long k = 0;
  double resource = 0.0;
  double wall_s = 0.0;
  Vector<Scalar> alpha;
  Scalar grad_norm = Scalar(0);
  Scalar J = Scalar(0);
  Scalar R = Scalar(0);
  std::optional<Scalar> e_alpha_rel;
  std::optional<Scalar> e_u_rel;
};

template <typename Scalar>
struct IterateTrace {
  std::vector<TraceRecord<Scalar>> records;

  long last_step() const { return records.empty() ? 0 : records.back().k; }
};

template <typename Scalar>
struct RunOptions {
  Method method = Method::fifb;
  StepLengths<Scalar> steps;
  ImplicitConfig<Scalar> implicit;
  KrylovConfig<Scalar> krylov;
  long n_steps = 0;
  long trace_every = 1;
  std::optional<Reference<Scalar>> reference;
  std::function<void(const SolverState<Scalar>&)> observer;  // called on every state, k = 0 included
};

template <typename Scalar>
struct RunResult {
  IterateTrace<Scalar> trace;
  SolverState<Scalar> state;
  bool ok = true;
  std::string error;           // set when a component failed; the trace is partial
  std::vector<std::string> log;  // non-fatal events (e.g. unconverged adjoint solves)
};

/// u0 = S_u(alpha0) by a near-exact inner solve, p0 = S_p(u0, alpha0).
template <typename Scalar>
SolverState<Scalar> initialize_state(const BilevelProblem<Scalar>& problem, const NoDeduce<Vector<Scalar>>& alpha0,
                                     const ImplicitConfig<Scalar>& inner_cfg, const KrylovConfig<Scalar>& krylov) {
  SolverState<Scalar> s;
  s.alpha = alpha0;
  auto inner = implicit_solve_inner(problem, alpha0, Vector<Scalar>::Zero(problem.inner_dim()), inner_cfg);
  s.u = std::move(inner.u);
  auto adj = solve_adjoint_exact(problem, s.u, alpha0, krylov);
  if (!adj.converged) throw NumericalFailure("initial adjoint solve: " + adj.message);
  s.p = std::move(adj.p);
  return s;
}

template <typename Scalar>
TraceRecord<Scalar> make_record(const BilevelProblem<Scalar>& problem, const SolverState<Scalar>& s, double wall_s,
                                const std::optional<Reference<Scalar>>& reference) {
  TraceRecord<Scalar> rec;
  rec.k = s.k;
  rec.resource = s.resource;
  rec.wall_s = wall_s;
  rec.alpha = s.alpha;
  rec.grad_norm = problem.inner_grad_u(s.u, s.alpha).norm();
  const auto outer = problem.outer_value(s.u, s.alpha);
  rec.J = outer.J;
  rec.R = outer.R;
  if (reference) {
    rec.e_alpha_rel = (reference->alpha - s.alpha).norm() / reference->alpha.norm();
    rec.e_u_rel = (reference->u - s.u).norm() / reference->u.norm();
  }
  return rec;
}

template <typename Scalar>
RunResult<Scalar> run(const BilevelProblem<Scalar>& problem, SolverState<Scalar> init, const RunOptions<Scalar>& opt) {
  if (opt.n_steps < 1) throw std::invalid_argument("run: n_steps must be >= 1");
  if (opt.trace_every < 1) throw std::invalid_argument("run: trace_every must be >= 1");
  if (init.u.size() != problem.inner_dim() || init.alpha.size() != problem.outer_dim() ||
      init.p.rows() != problem.outer_dim() || init.p.cols() != problem.inner_dim()) {
    throw std::invalid_argument("run: initial state does not match the problem dimensions");
  }
  if (opt.method == Method::implicit) opt.implicit.validate();
  if (opt.method != Method::implicit) {
    if (!(opt.steps.tau > Scalar(0)) || !(opt.steps.sigma > Scalar(0))) {
      throw std::invalid_argument("run: tau and sigma must be positive");
    }
    if (opt.method == Method::fifb && !(opt.steps.theta > Scalar(0))) {
      throw std::invalid_argument("run: theta must be positive for fifb");
    }
  }
  opt.krylov.validate();

  RunResult<Scalar> out;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  SolverState<Scalar> state = std::move(init);
  state.k = 0;
  state.resource = 0.0;
  out.trace.records.push_back(make_record(problem, state, 0.0, opt.reference));
  if (opt.observer) opt.observer(state);
  try {
    for (long step = 1; step <= opt.n_steps; ++step) {
      switch (opt.method) {
        case Method::fefb: state = fefb_step(problem, state, opt.steps, opt.krylov); break;
        case Method::fifb: state = fifb_step(problem, state, opt.steps); break;
        case Method::implicit: state = implicit_step(problem, state, opt.implicit, opt.krylov); break;
      }
      if (!state.adjoint_ok) out.log.push_back("step " + std::to_string(state.k) + ": " + state.message);
      if (!state.alpha.allFinite() || !state.u.allFinite()) {
        throw NumericalFailure("step " + std::to_string(state.k) + ": iterate became non-finite");
      }
      if (opt.observer) opt.observer(state);
      if (step % opt.trace_every == 0 || step == opt.n_steps) {
        out.trace.records.push_back(make_record(problem, state, elapsed(), opt.reference));
      }
    }
  } catch (const NumericalFailure& e) {
    out.ok = false;
    out.error = e.what();
  }
  out.state = std::move(state);
  return out;
}

}  // namespace bilevel
