#pragma once

// Inner objectives F(u; alpha) with their derivative oracles, the outer
// fitness J(u) = 1/2 |u - b|^2, and outer regularizers R with their prox.

#include "bilevel/core.hpp"

#include <array>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace bilevel {

// ---------------------------------------------------------------------------
// Outer regularizer
// ---------------------------------------------------------------------------

enum class RegularizerKind {
  zero,        // R = 0
  l1_nonneg,   // R = beta |a|_1 + indicator of [0, inf)^n
  nonneg,      // R = indicator of [0, inf)^n
  squared_l2,  // R = beta/2 |a|^2
};

template <typename Scalar>
struct RegularizerSpec {
  RegularizerKind kind = RegularizerKind::zero;
  Scalar beta = Scalar(0);

  RegularizerSpec() = default;
  RegularizerSpec(RegularizerKind k, Scalar b) : kind(k), beta(b) {
    if (b < Scalar(0)) throw std::invalid_argument("RegularizerSpec: beta must be >= 0");
  }
};

/// Value of R; `feasible` is false when an indicator is violated, in which
/// case `value` is +inf.
template <typename Scalar>
struct RegularizerValue {
  Scalar value = Scalar(0);
  bool feasible = true;
};

template <typename Scalar, typename Derived>
RegularizerValue<Scalar> regularizer_value(const RegularizerSpec<Scalar>& spec,
                                           const Eigen::MatrixBase<Derived>& x) {
  const bool nonneg = (x.array() >= Scalar(0)).all();
  switch (spec.kind) {
    case RegularizerKind::zero:
      return {Scalar(0), true};
    case RegularizerKind::l1_nonneg:
      if (!nonneg) return {std::numeric_limits<Scalar>::infinity(), false};
      return {spec.beta * x.sum(), true};
    case RegularizerKind::nonneg:
      if (!nonneg) return {std::numeric_limits<Scalar>::infinity(), false};
      return {Scalar(0), true};
    case RegularizerKind::squared_l2:
      return {spec.beta * x.squaredNorm() / Scalar(2), true};
  }
  return {};
}

/// prox_{sigma R}(x) = argmin_z 1/2 |z - x|^2 + sigma R(z).
template <typename Scalar, typename Derived>
Vector<Scalar> prox_R(const RegularizerSpec<Scalar>& spec, const Eigen::MatrixBase<Derived>& x,
                      Scalar sigma) {
  if (!(sigma > Scalar(0))) throw std::invalid_argument("prox_R: sigma must be positive");
  switch (spec.kind) {
    case RegularizerKind::zero:
      return x;
    case RegularizerKind::l1_nonneg:
      return (x.array() - sigma * spec.beta).cwiseMax(Scalar(0)).matrix();
    case RegularizerKind::nonneg:
      return x.cwiseMax(Scalar(0));
    case RegularizerKind::squared_l2:
      return x / (Scalar(1) + sigma * spec.beta);
  }
  return x;
}

inline const char* to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::zero: return "zero";
    case RegularizerKind::l1_nonneg: return "l1_nonneg";
    case RegularizerKind::nonneg: return "nonneg";
    case RegularizerKind::squared_l2: return "squared_l2";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Problem abstraction
// ---------------------------------------------------------------------------

template <typename Scalar>
struct OuterValue {
  Scalar J = Scalar(0);
  Scalar R = Scalar(0);
  bool feasible = true;
};

/// Derivative oracles of a bilevel problem
///   min_alpha J(S_u(alpha)) + R(alpha),  S_u(alpha) = argmin_u F(u; alpha)
/// with J(u) = 1/2 |u - b|^2. Implementations are immutable after
/// construction; all oracles are const and thread-safe.
template <typename Scalar>
class BilevelProblem {
 public:
  using Vec = Vector<Scalar>;
  using Mat = Matrix<Scalar>;
  using LinearOperator = std::function<Vec(const Vec&)>;

  BilevelProblem(Vec target, RegularizerSpec<Scalar> regularizer, Index outer_dim)
      : target_(std::move(target)), regularizer_(regularizer), outer_dim_(outer_dim) {}
  virtual ~BilevelProblem() = default;

  Index inner_dim() const { return target_.size(); }
  Index outer_dim() const { return outer_dim_; }
  const Vec& target() const { return target_; }
  const RegularizerSpec<Scalar>& regularizer() const { return regularizer_; }

  virtual Scalar inner_value(const Vec& u, const Vec& alpha) const = 0;
  virtual Vec inner_grad_u(const Vec& u, const Vec& alpha) const = 0;

  /// Hessian of F in u at (u, alpha) as a matrix-free operator. The closure
  /// caches whatever depends on (u, alpha), so repeated applies are cheap.
  virtual LinearOperator inner_hessian(const Vec& u, const Vec& alpha) const = 0;

  /// Row i is d/d alpha_i of grad_u F(u; alpha); shape outer_dim x inner_dim.
  virtual Mat inner_mixed_rows(const Vec& u, const Vec& alpha) const = 0;

  Vec inner_hess_apply(const Vec& u, const Vec& alpha, const Vec& v) const {
    check_inner(v, "direction");
    return inner_hessian(u, alpha)(v);
  }

  Scalar outer_objective(const Vec& u) const {
    check_inner(u, "u");
    return (u - target_).squaredNorm() / Scalar(2);
  }
  Vec outer_grad(const Vec& u) const {
    check_inner(u, "u");
    return u - target_;
  }

  OuterValue<Scalar> outer_value(const Vec& u, const Vec& alpha) const {
    check_outer(alpha);
    const auto r = regularizer_value(regularizer_, alpha);
    return {outer_objective(u), r.value, r.feasible};
  }

  Vec prox(const Vec& alpha, Scalar sigma) const { return prox_R(regularizer_, alpha, sigma); }

 protected:
  void check_inner(const Vec& u, const char* what) const {
    if (u.size() != inner_dim()) {
      throw std::invalid_argument(std::string("dimension mismatch: ") + what + " has length " +
                                  std::to_string(u.size()) + ", expected " + std::to_string(inner_dim()));
    }
  }
  void check_outer(const Vec& alpha) const {
    if (alpha.size() != outer_dim_) {
      throw std::invalid_argument("dimension mismatch: alpha has length " + std::to_string(alpha.size()) +
                                  ", expected " + std::to_string(outer_dim_));
    }
  }
  void check(const Vec& u, const Vec& alpha) const {
    check_inner(u, "u");
    check_outer(alpha);
  }

 private:
  Vec target_;
  RegularizerSpec<Scalar> regularizer_;
  Index outer_dim_;
};

// ---------------------------------------------------------------------------
// Denoising: F(u; a) = 1/2 |u - z|^2 + a |Du|_{1,gamma}, alpha = (a).
// ---------------------------------------------------------------------------

template <typename Scalar>
class DenoisingProblem final : public BilevelProblem<Scalar> {
 public:
  using Base = BilevelProblem<Scalar>;
  using typename Base::LinearOperator;
  using typename Base::Mat;
  using typename Base::Vec;

  DenoisingProblem(Vec measurement, Vec ground_truth, HuberSpec<Scalar> huber,
                   RegularizerSpec<Scalar> regularizer = {})
      : Base(std::move(ground_truth), regularizer, 1),
        z_(std::move(measurement)),
        huber_(huber),
        side_(side_from_size(z_.size())) {
    this->check_inner(z_, "measurement");
  }

  Index side() const { return side_; }
  const Vec& measurement() const { return z_; }
  const HuberSpec<Scalar>& huber() const { return huber_; }

  Scalar inner_value(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return (u - z_).squaredNorm() / Scalar(2) + alpha[0] * huber_norm(backward_difference(u, side_), huber_);
  }

  Vec inner_grad_u(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return (u - z_) + alpha[0] * tv_gradient(u);
  }

  LinearOperator inner_hessian(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    Vec weights = alpha[0] * huber_rho(backward_difference(u, side_), huber_, 2);
    const Index n = side_;
    return [weights = std::move(weights), n](const Vec& v) -> Vec {
      const Vec dv = backward_difference(v, n);
      return v + backward_difference_adjoint(weights.cwiseProduct(dv), n);
    };
  }

  Mat inner_mixed_rows(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    return tv_gradient(u).transpose();
  }

 private:
  // D^T rho'(Du)
  Vec tv_gradient(const Vec& u) const {
    return backward_difference_adjoint(huber_rho(backward_difference(u, side_), huber_, 1), side_);
  }

  Vec z_;
  HuberSpec<Scalar> huber_;
  Index side_;
};

// ---------------------------------------------------------------------------
// Deconvolution:
//   F(u; a) = 1/2 |K(a2,a3,a4) * u - z|^2 + C a1 |Du|_{1,gamma},
//   alpha = (a1, a2, a3, a4).
// ---------------------------------------------------------------------------

template <typename Scalar>
class DeconvolutionProblem final : public BilevelProblem<Scalar> {
 public:
  using Base = BilevelProblem<Scalar>;
  using typename Base::LinearOperator;
  using typename Base::Mat;
  using typename Base::Vec;

  DeconvolutionProblem(Vec measurement, Vec ground_truth, HuberSpec<Scalar> huber, Scalar tv_scale,
                       RegularizerSpec<Scalar> regularizer)
      : Base(std::move(ground_truth), regularizer, 4),
        z_(std::move(measurement)),
        huber_(huber),
        scale_(tv_scale),
        side_(side_from_size(z_.size())) {
    this->check_inner(z_, "measurement");
    if (!(tv_scale > Scalar(0))) throw std::invalid_argument("DeconvolutionProblem: C must be positive");
    basis_[0] = build_kernel<Scalar>(1, 0, 0);
    basis_[1] = build_kernel<Scalar>(0, 1, 0);
    basis_[2] = build_kernel<Scalar>(0, 0, 1);
  }

  Index side() const { return side_; }
  Scalar tv_scale() const { return scale_; }
  const Vec& measurement() const { return z_; }
  const HuberSpec<Scalar>& huber() const { return huber_; }

  Kernel5x5<Scalar> kernel(const Vec& alpha) const { return build_kernel<Scalar>(alpha[1], alpha[2], alpha[3]); }

  Scalar inner_value(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    const Vec residual = convolve(kernel(alpha), u, side_) - z_;
    return residual.squaredNorm() / Scalar(2) +
           scale_ * alpha[0] * huber_norm(backward_difference(u, side_), huber_);
  }

  Vec inner_grad_u(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    const auto k = kernel(alpha);
    const Vec residual = convolve(k, u, side_) - z_;
    return convolve_adjoint(k, residual, side_) + scale_ * alpha[0] * tv_gradient(u);
  }

  LinearOperator inner_hessian(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    Vec weights = scale_ * alpha[0] * huber_rho(backward_difference(u, side_), huber_, 2);
    const Index n = side_;
    const auto k = kernel(alpha);
    return [weights = std::move(weights), n, k](const Vec& v) -> Vec {
      const Vec kv = convolve(k, v, n);
      const Vec dv = backward_difference(v, n);
      return convolve_adjoint(k, kv, n) + backward_difference_adjoint(weights.cwiseProduct(dv), n);
    };
  }

  Mat inner_mixed_rows(const Vec& u, const Vec& alpha) const override {
    this->check(u, alpha);
    const auto k = kernel(alpha);
    const Vec residual = convolve(k, u, side_) - z_;
    Mat rows(4, u.size());
    rows.row(0) = (scale_ * tv_gradient(u)).transpose();
    for (int i = 0; i < 3; ++i) {
      const auto& ki = basis_[i];
      const Vec kiu = convolve(ki, u, side_);
      rows.row(i + 1) = (convolve_adjoint(ki, residual, side_) + convolve_adjoint(k, kiu, side_)).transpose();
    }
    return rows;
  }

 private:
  Vec tv_gradient(const Vec& u) const {
    return backward_difference_adjoint(huber_rho(backward_difference(u, side_), huber_, 1), side_);
  }

  Vec z_;
  HuberSpec<Scalar> huber_;
  Scalar scale_;
  Index side_;
  std::array<Kernel5x5<Scalar>, 3> basis_;
};

}  // namespace bilevel
