#include "doctest.h"

#include "bilevel/adjoint.hpp"

#include <cmath>

using namespace bilevel;
using Vec = Vector<double>;
using Mat = Matrix<double>;

namespace {

Mat dense_hessian(const BilevelProblem<double>& p, const Vec& u, const Vec& a) {
  const auto h = p.inner_hessian(u, a);
  Mat m(u.size(), u.size());
  for (Index j = 0; j < u.size(); ++j) m.col(j) = h(Vec::Unit(u.size(), j));
  return m;
}

DenoisingProblem<double> small_denoising(std::uint64_t seed, Vec* u_out) {
  Rng rng(seed);
  const auto b = generate_phantom(8, seed);
  Vec z = b.data + 0.1 * rng.normal_vector<double>(64);
  *u_out = z;
  return DenoisingProblem<double>(z, b.data, HuberSpec<double>(0.05));
}

}  // namespace

TEST_CASE("Krylov on identity and diagonal operators") {
  const Vec r = (Vec(3) << 1.0, -2.0, 0.5).finished();
  for (const auto method : {KrylovMethod::cg, KrylovMethod::bicgstab}) {
    const KrylovConfig<double> cfg(1e-12, 100, method);
    const auto id = krylov_solve([](const Vec& v) { return v; }, r, cfg);
    CHECK(id.converged);
    CHECK(id.iterations == 1);
    CHECK((id.solution - r).norm() <= 1e-14);

    const Vec diag = (Vec(3) << 1.0, 2.0, 4.0).finished();
    const auto dg = krylov_solve([&](const Vec& v) { return Vec(diag.cwiseProduct(v)); }, Vec::Ones(3), cfg);
    CHECK(dg.converged);
    CHECK((dg.solution - (Vec(3) << 1.0, 0.5, 0.25).finished()).norm() <= 1e-12);

    const auto zr = krylov_solve([](const Vec& v) { return v; }, Vec::Zero(3), cfg);
    CHECK(zr.iterations == 0);
    CHECK(zr.solution.isZero(0.0));
  }
}

TEST_CASE("Krylov on random SPD matches dense factorization") {
  Rng rng(1);
  const Mat a = rng.normal_matrix<double>(16, 16);
  const Mat h = a.transpose() * a + Mat::Identity(16, 16);
  const Vec rhs = rng.normal_vector<double>(16);
  const Vec exact = h.ldlt().solve(rhs);
  for (const auto method : {KrylovMethod::cg, KrylovMethod::bicgstab}) {
    const KrylovConfig<double> cfg(1e-10, 1000, method);
    const auto res = krylov_solve([&](const Vec& v) { return Vec(h * v); }, rhs, cfg);
    CHECK(res.converged);
    CHECK(res.residual <= 1e-10 * (1 + 1e-6));
    CHECK((h * res.solution - rhs).norm() <= 1e-10 * rhs.norm() * (1 + 1e-6));
    const double cond_bound = 10.0 * 1e-10 * (h.norm() * h.inverse().norm());
    CHECK((res.solution - exact).norm() <= cond_bound * exact.norm());
  }
}

TEST_CASE("Krylov non-convergence is flagged") {
  Rng rng(2);
  const Mat a = rng.normal_matrix<double>(30, 30);
  const Mat h = a.transpose() * a + 1e-3 * Mat::Identity(30, 30);
  const KrylovConfig<double> cfg(1e-14, 2);
  const auto res = krylov_solve([&](const Vec& v) { return Vec(h * v); }, Vec::Ones(30), cfg);
  CHECK_FALSE(res.converged);
  CHECK(res.residual > 1e-14);
  CHECK(res.solution.size() == 30);
  CHECK_THROWS_AS(KrylovConfig<double>(0.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(KrylovConfig<double>(1e-8, 0), std::invalid_argument);
}

TEST_CASE("exact adjoint special cases") {
  Vec u;
  const auto p = small_denoising(3, &u);
  const KrylovConfig<double> cfg(1e-12, 1000);

  const auto flat = solve_adjoint_exact(p, Vec::Zero(64), Vec::Constant(1, 0.05), cfg);
  CHECK(flat.converged);
  CHECK(flat.p.isZero(0.0));

  const auto id = solve_adjoint_exact(p, u, Vec::Zero(1), cfg);
  CHECK((id.p + p.inner_mixed_rows(u, Vec::Zero(1))).norm() <= 1e-12 * id.p.norm());
}

TEST_CASE("exact adjoint matches dense solve") {
  Vec u;
  const auto p = small_denoising(4, &u);
  Rng rng(5);
  for (int t = 0; t < 5; ++t) {
    const Vec a = Vec::Constant(1, rng.uniform(0.005, 0.2));
    const Mat h = dense_hessian(p, u, a);
    const Mat g = p.inner_mixed_rows(u, a);
    const Mat dense = -(h.ldlt().solve(g.transpose())).transpose();
    for (const auto method : {KrylovMethod::cg, KrylovMethod::bicgstab}) {
      const auto sol = solve_adjoint_exact(p, u, a, KrylovConfig<double>(1e-12, 5000, method));
      CHECK(sol.converged);
      CHECK((sol.p - dense).norm() <= 1e-8 * dense.norm());
      CHECK(adjoint_residual(p, sol.p, u, a) <= g.rows() * 1e-12 * g.rowwise().norm().maxCoeff() * (1 + 1e-6));
    }
  }
}

TEST_CASE("deconvolution adjoint matches dense solve") {
  Rng rng(6);
  const auto b = generate_phantom(8, 6);
  const auto k = build_kernel(0.15, 0.1, 0.75);
  const Vec z = convolve(k, b.data, 8) + 5e-3 * rng.normal_vector<double>(64);
  DeconvolutionProblem<double> p(z, b.data, HuberSpec<double>(0.05), 0.1,
                                 RegularizerSpec<double>(RegularizerKind::l1_nonneg, 0.01));
  const Vec a = (Vec(4) << 0.05, 0.3, 0.3, 0.4).finished();
  const Mat h = dense_hessian(p, z, a);
  const Mat g = p.inner_mixed_rows(z, a);
  const Mat dense = -(h.ldlt().solve(g.transpose())).transpose();
  const auto sol = solve_adjoint_exact(p, z, a, KrylovConfig<double>(1e-12, 5000));
  CHECK(sol.converged);
  CHECK((sol.p - dense).norm() <= 1e-7 * dense.norm());
}

TEST_CASE("inexact adjoint step") {
  Vec u;
  const auto p = small_denoising(7, &u);
  const Vec a = Vec::Constant(1, 0.05);
  const auto exact = solve_adjoint_exact(p, u, a, KrylovConfig<double>(1e-14, 5000));
  const Mat same = adjoint_step_inexact(p, exact.p, u, a, 0.01);
  CHECK((same - exact.p).norm() <= 1e-12 * exact.p.norm());

  // H = I, G = 0 -> p halves for theta = 1/2.
  const Mat q = Rng(8).normal_matrix<double>(2, 5);
  const auto id = [](const Vec& v) { return v; };
  const Mat halved = adjoint_step_inexact<double>(id, Mat::Zero(2, 5), q, 0.5);
  CHECK(std::abs(frobenius_norm(halved) - 0.5 * frobenius_norm(q)) <= 1e-15);
  CHECK_THROWS_AS(adjoint_step_inexact<double>(id, Mat::Zero(2, 5), q, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(adjoint_step_inexact<double>(id, Mat::Zero(3, 5), q, 0.1), std::invalid_argument);
}

TEST_CASE("inexact adjoint iteration contracts to the exact adjoint") {
  Vec u;
  const auto p = small_denoising(9, &u);
  const Vec a = Vec::Constant(1, 0.02);
  const Mat h = dense_hessian(p, u, a);
  Eigen::SelfAdjointEigenSolver<Mat> eig(h);
  const double lmin = eig.eigenvalues().minCoeff();
  const double lmax = eig.eigenvalues().maxCoeff();
  CHECK(lmin >= 1.0 - 1e-12);
  const double theta = 0.9 / lmax;
  const Mat g = p.inner_mixed_rows(u, a);
  const Mat exact = -(h.ldlt().solve(g.transpose())).transpose();

  Mat q = Mat::Zero(1, 64);
  double err = frobenius_norm(Mat(q - exact));
  const auto hess = p.inner_hessian(u, a);
  for (int it = 0; it < 2000; ++it) {
    q = adjoint_step_inexact<double>(hess, g, q, theta);
    const double next = frobenius_norm(Mat(q - exact));
    if (err > 1e-13) CHECK(next <= err * (1 - theta * lmin) * (1 + 1e-9) + 1e-15);
    err = next;
  }
  CHECK(err <= 1e-6);
}

TEST_CASE("Frobenius inner product and norm") {
  Mat e = Mat::Zero(3, 4);
  e(1, 2) = 1.0;
  CHECK(frobenius_norm(e) == 1.0);
  const Vec x = (Vec(3) << 1, 2, 2).finished();
  const Vec y = (Vec(2) << 3, 4).finished();
  CHECK(std::abs(frobenius_norm(Mat(x * y.transpose())) - x.norm() * y.norm()) <= 1e-14);
  CHECK_THROWS_AS(frobenius_inner(Mat::Zero(2, 3), Mat::Zero(3, 2)), std::invalid_argument);

  Rng rng(10);
  const Mat p = rng.normal_matrix<double>(4, 16);
  const Mat m = rng.normal_matrix<double>(16, 16);
  const double m2 = Eigen::JacobiSVD<Mat>(m).singularValues()(0);
  CHECK(frobenius_norm(Mat(p * m)) <= frobenius_norm(p) * m2);
  CHECK(Eigen::JacobiSVD<Mat>(p).singularValues()(0) <= frobenius_norm(p));
}
