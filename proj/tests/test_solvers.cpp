#include "doctest.h"

#include "bilevel/verify.hpp"

#include <cmath>

using namespace bilevel;
using Vec = Vector<double>;
using Mat = Matrix<double>;

namespace {

SolverState<double> optimum(const ToyBilevel<double>& toy) {
  SolverState<double> s;
  s.u = toy.u_hat;
  s.p = toy.p_hat;
  s.alpha = toy.alpha_hat;
  return s;
}

StepLengths<double> toy_steps(const ToyBilevel<double>& toy) {
  StepLengths<double> st;
  st.tau = 0.9 / toy.lipschitz;
  st.theta = 0.9 / toy.lipschitz;
  st.sigma = 0.02 / toy.w.squaredNorm();
  return st;
}

// Diagonal-Hessian problem with known spectrum, for the power iteration.
class DiagonalProblem final : public BilevelProblem<double> {
 public:
  explicit DiagonalProblem(Vec d) : BilevelProblem<double>(Vec::Zero(d.size()), {}, 1), d_(std::move(d)) {}
  double inner_value(const Vec& u, const Vec&) const override { return 0.5 * u.dot(d_.cwiseProduct(u)); }
  Vec inner_grad_u(const Vec& u, const Vec&) const override { return d_.cwiseProduct(u); }
  LinearOperator inner_hessian(const Vec&, const Vec&) const override {
    return [d = d_](const Vec& v) -> Vec { return d.cwiseProduct(v); };
  }
  Mat inner_mixed_rows(const Vec& u, const Vec&) const override { return Mat::Zero(1, u.size()); }

 private:
  Vec d_;
};

DenoisingProblem<double> denoising(Index n, std::uint64_t seed) {
  const auto b = generate_phantom(n, seed);
  const auto z = add_gaussian_noise(b, 0.1, seed + 100);
  return DenoisingProblem<double>(z.data, b.data, HuberSpec<double>(0.01));
}

}  // namespace

TEST_CASE("one step at the optimality triple is stationary") {
  const auto toy = make_toy_problem<double>(1, 6, 4);
  const auto x = optimum(toy);
  const auto st = toy_steps(toy);
  const KrylovConfig<double> kc(1e-14, 100);
  const auto fe = fefb_step(*toy.problem, x, st, kc);
  const auto fi = fifb_step(*toy.problem, x, st);
  for (const auto* y : {&fe, &fi}) {
    CHECK((y->u - x.u).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((y->p - x.p).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((y->alpha - x.alpha).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(y->k == 1);
    CHECK(y->resource > 0.0);
  }
}

TEST_CASE("small sigma moves alpha by at most sigma times the hypergradient") {
  const auto toy = make_toy_problem<double>(2, 6, 4);
  SolverState<double> x;
  x.u = Vec::Zero(4);
  x.alpha = Vec::Zero(1);
  x.p = Mat::Zero(1, 4);
  auto st = toy_steps(toy);
  st.sigma = 1e-9;
  const auto y = fefb_step(*toy.problem, x, st, KrylovConfig<double>(1e-14, 100));
  const Vec h = hypergradient(y.p, y.u, *toy.problem);
  CHECK((y.alpha - x.alpha).norm() <= st.sigma * h.norm() * (1 + 1e-12));
}

TEST_CASE("FIFB with a stationary adjoint equals FEFB") {
  // The toy adjoint is independent of (u, alpha), so an exact p stays exact.
  const auto toy = make_toy_problem<double>(3, 6, 4);
  SolverState<double> x;
  x.u = Vec::Constant(4, 0.3);
  x.alpha = Vec::Constant(1, -0.2);
  x.p = toy.p_hat;
  const auto st = toy_steps(toy);
  const auto fe = fefb_step(*toy.problem, x, st, KrylovConfig<double>(1e-14, 100));
  const auto fi = fifb_step(*toy.problem, x, st);
  CHECK((fe.u - fi.u).norm() == 0.0);
  CHECK((fe.p - fi.p).norm() <= 1e-12);
  CHECK((fe.alpha - fi.alpha).norm() <= 1e-12);
}

TEST_CASE("toy problem: FEFB and FIFB converge Fejer-monotonically") {
  const auto toy = make_toy_problem<double>(4, 6, 4);
  const auto st = toy_steps(toy);
  const auto x_hat = optimum(toy);
  for (const auto method : {Method::fefb, Method::fifb}) {
    auto init = initialize_state(*toy.problem, Vec::Zero(1), tight_inner_config(1e-13), KrylovConfig<double>(1e-14, 100));
    if (method == Method::fifb) init.p.array() += 0.1;
    RunOptions<double> opt;
    opt.method = method;
    opt.steps = st;
    opt.krylov = KrylovConfig<double>(1e-14, 100);
    opt.n_steps = 5000;
    std::vector<SolverState<double>> states;
    opt.observer = [&](const SolverState<double>& s) { states.push_back(s); };
    const auto res = run(*toy.problem, init, opt);
    CHECK(res.ok);
    CHECK(std::abs(res.state.alpha[0] - toy.alpha_hat[0]) <= 1e-8);
    const auto mon = fejer_and_rate_monitor(states, x_hat, zm_weights(method, st));
    CHECK(mon.max_increase <= 1e-12);
    CHECK(mon.rate < 1.0);
    CHECK(res.trace.records.size() == 5001);
  }
}

TEST_CASE("inner solver: quadratics, monotone Armijo, cap flag") {
  const auto p = denoising(16, 1);
  ImplicitConfig<double> cfg;
  cfg.rho = 1e-14;
  const auto r = implicit_solve_inner(p, Vec::Zero(1), Vec::Zero(256), cfg);
  CHECK(r.converged);
  CHECK((r.u - p.measurement()).norm() <= 1e-6 * p.measurement().norm());
  CHECK(r.iterations <= 5);

  const Vec a = Vec::Constant(1, 0.05);
  double prev = p.inner_value(Vec::Zero(256), a);
  for (long m = 1; m <= 40; ++m) {
    cfg.inner_max_iter = m;
    const auto step = implicit_solve_inner(p, a, Vec::Zero(256), cfg);
    CHECK(step.value <= prev);
    prev = step.value;
  }
  CHECK_FALSE(implicit_solve_inner(p, a, Vec::Zero(256), cfg).converged);

  ImplicitConfig<double> bad;
  bad.armijo_grow = 0.9;
  CHECK_THROWS_AS(implicit_solve_inner(p, a, Vec::Zero(256), bad), std::invalid_argument);
  bad = {};
  bad.rho = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("implicit baseline on the toy problem") {
  const auto toy = make_toy_problem<double>(5, 6, 4);
  ImplicitConfig<double> cfg = tight_inner_config(1e-13);
  cfg.outer_mode = OuterStepMode::fixed;
  cfg.sigma = 0.5 / toy.w.squaredNorm();
  const KrylovConfig<double> kc(1e-14, 100);

  auto init = initialize_state(*toy.problem, Vec::Zero(1), cfg, kc);
  RunOptions<double> opt;
  opt.method = Method::implicit;
  opt.implicit = cfg;
  opt.krylov = kc;
  opt.n_steps = 80;
  const auto res = run(*toy.problem, init, opt);
  CHECK(res.ok);
  CHECK(std::abs(res.state.alpha[0] - toy.alpha_hat[0]) <= 1e-8);

  // At the optimum the hypergradient vanishes and alpha stays put.
  auto at = optimum(toy);
  const auto y = implicit_step(*toy.problem, at, cfg, kc);
  CHECK(std::abs(y.alpha[0] - toy.alpha_hat[0]) <= 1e-10);
}

TEST_CASE("backtracking implicit step decreases the reduced objective") {
  const auto p = denoising(16, 2);
  ImplicitConfig<double> cfg;
  cfg.rho = 1e-12;
  cfg.sigma = 5e-5 * 64.0;
  const KrylovConfig<double> kc(1e-10, 2000);
  auto init = initialize_state(p, Vec::Zero(1), cfg, kc);
  const double before = p.outer_objective(init.u);
  const auto next = implicit_step(p, init, cfg, kc);
  CHECK(next.alpha[0] > 0.0);
  const auto s = implicit_solve_inner(p, next.alpha, Vec::Zero(256), cfg);
  CHECK(p.outer_objective(s.u) < before);
}

TEST_CASE("hypergradient edge cases") {
  const auto p = denoising(8, 3);
  CHECK(hypergradient(Mat::Ones(1, 64), p.target(), p).isZero(0.0));
  CHECK(hypergradient(Mat::Zero(1, 64), p.measurement(), p).isZero(0.0));
  CHECK_THROWS_AS(hypergradient(Mat::Zero(2, 64), p.measurement(), p), std::invalid_argument);
}

TEST_CASE("power iteration bounds") {
  const auto p = denoising(8, 4);
  CHECK(std::abs(estimate_hessian_bounds(p, p.measurement(), Vec::Zero(1), 50) - 1.0) <= 1e-6);

  DiagonalProblem diag((Vec(3) << 1.0, 2.0, 4.0).finished());
  CHECK(std::abs(estimate_hessian_bounds(diag, Vec::Zero(3), Vec::Zero(1), 200) - 4.0) <= 1e-6);

  const auto toy = make_toy_problem<double>(6, 20, 16);
  double last = 0.0;
  for (int it : {1, 2, 5, 10, 50, 200}) {
    const double est = estimate_hessian_bounds(*toy.problem, Vec::Zero(16), Vec::Zero(1), it);
    CHECK(est <= toy.lipschitz + 1e-6);
    CHECK(est >= last);
    last = est;
  }
  CHECK_THROWS_AS(estimate_hessian_bounds(p, p.measurement(), Vec::Zero(1), 0), std::invalid_argument);
}

TEST_CASE("step-length warnings") {
  const auto toy = make_toy_problem<double>(7, 6, 4);
  StepLengths<double> st{3.0 / toy.lipschitz, 1e-3, 2.0 / toy.lipschitz};
  const auto w = check_step_lengths(*toy.problem, Vec::Zero(4), Vec::Zero(1), st, Method::fifb);
  CHECK(w.size() == 2);
  st = toy_steps(toy);
  CHECK(check_step_lengths(*toy.problem, Vec::Zero(4), Vec::Zero(1), st, Method::fifb).empty());
}

TEST_CASE("run contract, determinism and partial traces") {
  const auto p = denoising(16, 5);
  const KrylovConfig<double> kc(1e-10, 2000);
  ImplicitConfig<double> inner;
  inner.rho = 1e-12;
  const auto init = initialize_state(p, Vec::Zero(1), inner, kc);
  RunOptions<double> opt;
  opt.method = Method::fifb;
  opt.steps = {5e-3, 1e-4, 5e-3};
  opt.n_steps = 0;
  CHECK_THROWS_AS(run(p, init, opt), std::invalid_argument);

  opt.n_steps = 200;
  opt.trace_every = 10;
  const auto a = run(p, init, opt);
  const auto b = run(p, init, opt);
  CHECK(a.trace.records.size() == 21);
  for (std::size_t i = 0; i < a.trace.records.size(); ++i) {
    CHECK(a.trace.records[i].alpha == b.trace.records[i].alpha);
    CHECK(a.trace.records[i].J == b.trace.records[i].J);
    CHECK(a.trace.records[i].resource == b.trace.records[i].resource);
    if (i) CHECK(a.trace.records[i].k > a.trace.records[i - 1].k);
    if (i) CHECK(a.trace.records[i].resource >= a.trace.records[i - 1].resource);
  }

  RunOptions<double> imp;
  imp.method = Method::implicit;
  imp.implicit = inner;
  imp.krylov = KrylovConfig<double>(1e-15, 1);
  imp.n_steps = 5;
  const auto failed = run(p, init, imp);
  CHECK_FALSE(failed.ok);
  CHECK(failed.error.find("Krylov") != std::string::npos);
  // Step 1 runs at alpha = 0 where H = I and one iteration suffices.
  CHECK(failed.trace.records.size() == 2);
}
