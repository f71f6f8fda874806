#pragma once

// Grid vectors, the backward-difference operator, the 5x5 parametrized
// kernel, the C^2 Huber penalty and seeded synthetic data.
//
// Images are square and stored row-major: pixel (i, j) of an n x n image
// lives at flat index i * n + j. Everything below uses that convention.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace bilevel {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Wraps a parameter type so that Scalar is deduced from the other arguments
/// and Eigen expressions convert implicitly.
template <typename T>
using NoDeduce = std::type_identity_t<T>;

template <typename Scalar>
using Kernel5x5 = Eigen::Matrix<Scalar, 5, 5>;

/// Square grayscale image, n*n intensities in row-major order.
template <typename Scalar>
struct GridImage {
  Index side = 0;
  Vector<Scalar> data;

  GridImage() = default;
  GridImage(Index n, Vector<Scalar> values) : side(n), data(std::move(values)) {
    if (n < 1 || data.size() != n * n) {
      throw std::invalid_argument("GridImage: expected " + std::to_string(n * n) +
                                  " values, got " + std::to_string(data.size()));
    }
  }
  static GridImage zero(Index n) { return GridImage(n, Vector<Scalar>::Zero(n * n)); }

  Scalar& operator()(Index i, Index j) { return data[i * side + j]; }
  Scalar operator()(Index i, Index j) const { return data[i * side + j]; }
};

/// Stacked differences: first n*n entries along i (rows), last n*n along j.
template <typename Scalar>
struct GradientField {
  Index side = 0;
  Vector<Scalar> data;

  GradientField() = default;
  GradientField(Index n, Vector<Scalar> values) : side(n), data(std::move(values)) {
    if (n < 1 || data.size() != 2 * n * n) {
      throw std::invalid_argument("GradientField: expected " + std::to_string(2 * n * n) +
                                  " values, got " + std::to_string(data.size()));
    }
  }
  auto x_part() const { return data.head(side * side); }
  auto y_part() const { return data.tail(side * side); }
};

/// Shortest general-format rendering of a real (for diagnostics).
inline std::string format_real(double x) {
  std::ostringstream out;
  out << x;
  return out.str();
}

inline Index side_from_size(Index size) {
  const auto n = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(size))));
  if (n * n != size) {
    throw std::invalid_argument("vector of length " + std::to_string(size) +
                                " is not a square image");
  }
  return n;
}

// ---------------------------------------------------------------------------
// Backward differences with Dirichlet boundary (zero outside the grid).
//   (Du)_x(i,j) = u(i,j) - u(i-1,j),   (Du)_y(i,j) = u(i,j) - u(i,j-1)
// so row 0 / column 0 differences equal u itself and D has exactly 2n^2 rows.
// ---------------------------------------------------------------------------

template <typename Derived>
Vector<typename Derived::Scalar> backward_difference(const Eigen::MatrixBase<Derived>& u,
                                                     Index n) {
  using Scalar = typename Derived::Scalar;
  if (u.size() != n * n) throw std::invalid_argument("backward_difference: size mismatch");
  Vector<Scalar> out(2 * n * n);
  const auto nn = n * n;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const Index k = i * n + j;
      const Scalar up = i > 0 ? u[k - n] : Scalar(0);
      const Scalar left = j > 0 ? u[k - 1] : Scalar(0);
      out[k] = u[k] - up;
      out[nn + k] = u[k] - left;
    }
  }
  return out;
}

template <typename Derived>
Vector<typename Derived::Scalar> backward_difference_adjoint(const Eigen::MatrixBase<Derived>& g,
                                                             Index n) {
  using Scalar = typename Derived::Scalar;
  if (g.size() != 2 * n * n) {
    throw std::invalid_argument("backward_difference_adjoint: size mismatch");
  }
  const auto nn = n * n;
  Vector<Scalar> out(nn);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const Index k = i * n + j;
      const Scalar down = i + 1 < n ? g[k + n] : Scalar(0);
      const Scalar right = j + 1 < n ? g[nn + k + 1] : Scalar(0);
      out[k] = g[k] - down + g[nn + k] - right;
    }
  }
  return out;
}

template <typename Scalar>
GradientField<Scalar> apply_D(const GridImage<Scalar>& u) {
  return GradientField<Scalar>(u.side, backward_difference(u.data, u.side));
}

template <typename Scalar>
GridImage<Scalar> apply_D_transpose(const GradientField<Scalar>& g) {
  return GridImage<Scalar>(g.side, backward_difference_adjoint(g.data, g.side));
}

// ---------------------------------------------------------------------------
// Huber-type C^2 smoothing of |x|:
//   rho(x) = -|x|^3/(3 gamma^2) + x^2/gamma   for |x| <= gamma
//          = |x| - gamma/3                     otherwise
// ---------------------------------------------------------------------------

template <typename Scalar>
struct HuberSpec {
  Scalar gamma = Scalar(0.01);

  HuberSpec() = default;
  explicit HuberSpec(Scalar g) : gamma(g) {
    if (!(g > Scalar(0))) throw std::invalid_argument("HuberSpec: gamma must be positive");
  }
};

template <typename Scalar>
Scalar huber_rho(Scalar x, const HuberSpec<Scalar>& spec, int order = 0) {
  using std::abs;
  const Scalar g = spec.gamma;
  const Scalar ax = abs(x);
  const bool inner = ax <= g;
  switch (order) {
    case 0:
      return inner ? -ax * ax * ax / (Scalar(3) * g * g) + ax * ax / g : ax - g / Scalar(3);
    case 1:
      if (inner) return x * (Scalar(2) / g - ax / (g * g));
      return x > Scalar(0) ? Scalar(1) : Scalar(-1);
    case 2:
      return inner ? Scalar(2) / g - Scalar(2) * ax / (g * g) : Scalar(0);
    default:
      throw std::invalid_argument("huber_rho: order must be 0, 1 or 2");
  }
}

template <typename Derived>
Vector<typename Derived::Scalar> huber_rho(const Eigen::MatrixBase<Derived>& x,
                                           const HuberSpec<typename Derived::Scalar>& spec,
                                           int order) {
  using Scalar = typename Derived::Scalar;
  Vector<Scalar> out(x.size());
  for (Index i = 0; i < x.size(); ++i) out[i] = huber_rho<Scalar>(x[i], spec, order);
  return out;
}

/// Smoothed l1 norm: sum of rho over all entries.
template <typename Derived>
typename Derived::Scalar huber_norm(const Eigen::MatrixBase<Derived>& y,
                                    const HuberSpec<typename Derived::Scalar>& spec) {
  using Scalar = typename Derived::Scalar;
  Scalar s(0);
  for (Index i = 0; i < y.size(); ++i) s += huber_rho<Scalar>(y[i], spec, 0);
  return s;
}

// ---------------------------------------------------------------------------
// 5x5 kernel with three symmetric groups and zero corners:
//   center           -> a2
//   4 orthogonal nbrs -> a3 / 4 each
//   16 other cells    -> a4 / 16 each
// ---------------------------------------------------------------------------

enum class KernelGroup { center, orthogonal, outer, corner };

inline KernelGroup kernel_group(int r, int c) {
  const int dr = std::abs(r - 2);
  const int dc = std::abs(c - 2);
  if (dr == 0 && dc == 0) return KernelGroup::center;
  if (dr == 2 && dc == 2) return KernelGroup::corner;
  if (dr + dc == 1) return KernelGroup::orthogonal;
  return KernelGroup::outer;
}

template <typename Scalar>
Kernel5x5<Scalar> build_kernel(Scalar center, Scalar orthogonal, Scalar outer) {
  Kernel5x5<Scalar> k;
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 5; ++c) {
      switch (kernel_group(r, c)) {
        case KernelGroup::center: k(r, c) = center; break;
        case KernelGroup::orthogonal: k(r, c) = orthogonal / Scalar(4); break;
        case KernelGroup::outer: k(r, c) = outer / Scalar(16); break;
        case KernelGroup::corner: k(r, c) = Scalar(0); break;
      }
    }
  }
  return k;
}

template <typename Derived>
Kernel5x5<typename Derived::Scalar> build_kernel(const Eigen::MatrixBase<Derived>& weights) {
  if (weights.size() != 3) throw std::invalid_argument("build_kernel: expected 3 weights");
  return build_kernel(weights[0], weights[1], weights[2]);
}

/// "Same"-size 2-D convolution with zero padding:
///   out(i,j) = sum_{a,b} k(a+2, b+2) u(i-a, j-b),  a, b in [-2, 2].
template <typename Scalar, typename Derived>
Vector<Scalar> convolve(const Kernel5x5<Scalar>& k, const Eigen::MatrixBase<Derived>& u, Index n) {
  if (u.size() != n * n) throw std::invalid_argument("convolve: size mismatch");
  Vector<Scalar> out = Vector<Scalar>::Zero(n * n);
  const auto& src = u.derived();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      Scalar acc(0);
      for (int a = -2; a <= 2; ++a) {
        const Index si = i - a;
        if (si < 0 || si >= n) continue;
        for (int b = -2; b <= 2; ++b) {
          const Index sj = j - b;
          if (sj < 0 || sj >= n) continue;
          const Scalar w = k(a + 2, b + 2);
          if (w != Scalar(0)) acc += w * src[si * n + sj];
        }
      }
      out[i * n + j] = acc;
    }
  }
  return out;
}

/// Adjoint of convolve(k, ., n): convolution with the point-reflected kernel.
template <typename Scalar, typename Derived>
Vector<Scalar> convolve_adjoint(const Kernel5x5<Scalar>& k, const Eigen::MatrixBase<Derived>& v,
                                Index n) {
  const Kernel5x5<Scalar> flipped = k.reverse();
  return convolve(flipped, v, n);
}

template <typename Scalar>
GridImage<Scalar> convolve(const Kernel5x5<Scalar>& k, const GridImage<Scalar>& u) {
  return GridImage<Scalar>(u.side, convolve(k, u.data, u.side));
}

// ---------------------------------------------------------------------------
// Seeded randomness. std::mt19937_64 is fully specified by the standard, and
// the uniform/normal transforms below are written out so that sequences do
// not depend on the standard library's distribution implementations.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in the open interval (0, 1), 53-bit resolution.
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via the Box-Muller transform; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double phi = 2.0 * 3.14159265358979323846 * uniform();
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  template <typename Scalar>
  Vector<Scalar> normal_vector(Index size) {
    Vector<Scalar> v(size);
    for (Index i = 0; i < size; ++i) v[i] = static_cast<Scalar>(normal());
    return v;
  }
  template <typename Scalar>
  Matrix<Scalar> normal_matrix(Index rows, Index cols) {
    Matrix<Scalar> m(rows, cols);
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = static_cast<Scalar>(normal());
    return m;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Piecewise-constant test image made of overlapping rectangles and disks.
template <typename Scalar = double>
GridImage<Scalar> generate_phantom(Index n, std::uint64_t seed) {
  if (n < 8) throw std::invalid_argument("generate_phantom: side must be at least 8");
  Rng rng(seed);
  auto img = GridImage<Scalar>::zero(n);
  img.data.setConstant(static_cast<Scalar>(rng.uniform(0.1, 0.4)));
  const int shapes = 6 + static_cast<int>(rng.uniform() * 4.0);
  const double dn = static_cast<double>(n);
  for (int s = 0; s < shapes; ++s) {
    const auto value = static_cast<Scalar>(rng.uniform(0.0, 1.0));
    const bool disk = rng.uniform() < 0.5;
    const double ci = rng.uniform(0.1, 0.9) * dn;
    const double cj = rng.uniform(0.1, 0.9) * dn;
    const double hi = rng.uniform(0.08, 0.3) * dn;
    const double hj = disk ? hi : rng.uniform(0.08, 0.3) * dn;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        const double di = (static_cast<double>(i) + 0.5 - ci) / hi;
        const double dj = (static_cast<double>(j) + 0.5 - cj) / hj;
        const bool inside = disk ? di * di + dj * dj <= 1.0 : std::abs(di) <= 1.0 && std::abs(dj) <= 1.0;
        if (inside) img(i, j) = value;
      }
    }
  }
  return img;
}

/// u + sigma * xi with xi i.i.d. standard normal from Rng(seed). No clamping.
template <typename Scalar>
GridImage<Scalar> add_gaussian_noise(const GridImage<Scalar>& u, Scalar sigma, std::uint64_t seed) {
  if (sigma < Scalar(0)) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
  GridImage<Scalar> out = u;
  if (sigma == Scalar(0)) return out;
  Rng rng(seed);
  for (Index i = 0; i < out.data.size(); ++i) out.data[i] += sigma * static_cast<Scalar>(rng.normal());
  return out;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar relative_error(const Eigen::MatrixBase<DerivedA>& x,
                                         const Eigen::MatrixBase<DerivedB>& reference) {
  return (x - reference).norm() / reference.norm();
}

}  // namespace bilevel
