#pragma once

#include "ses/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace ses {

/// 2x3 affine map of continuous image coordinates (x right, y down):
/// p' = A p + t.
template <typename Scalar>
class Affine2 {
 public:
  using Point = Eigen::Matrix<Scalar, 2, 1>;
  using LinearMap = Eigen::Matrix<Scalar, 2, 2>;
  using Matrix = Eigen::Matrix<Scalar, 2, 3>;

  Affine2() : m_(Matrix::Zero()) { m_.template leftCols<2>().setIdentity(); }
  explicit Affine2(const Matrix& m) : m_(m) {}
  Affine2(const LinearMap& a, const Point& t) {
    m_.template leftCols<2>() = a;
    m_.col(2) = t;
  }

  static Affine2 identity() { return Affine2(); }
  static Affine2 translation(const Point& t) { return Affine2(LinearMap::Identity(), t); }
  /// a applied about a fixed point: p' = a (p - c) + c.
  static Affine2 about(const LinearMap& a, const Point& c) { return Affine2(a, c - a * c); }

  const Matrix& matrix() const { return m_; }
  LinearMap linear() const { return m_.template leftCols<2>(); }
  Point offset() const { return m_.col(2); }
  Scalar determinant() const { return linear().determinant(); }
  bool invertible(Scalar tol = Scalar(1e-9)) const { return std::abs(determinant()) > tol; }

  Point operator()(const Point& p) const { return linear() * p + offset(); }

  /// Composition: (*this)(rhs(p)).
  Affine2 operator*(const Affine2& rhs) const {
    return Affine2(linear() * rhs.linear(), linear() * rhs.offset() + offset());
  }

  Affine2 inverse() const {
    const LinearMap inv = linear().inverse();
    return Affine2(inv, -inv * offset());
  }

 private:
  Matrix m_;
};

using Affine2D = Affine2<double>;
using Point2 = Affine2D::Point;

template <typename Scalar>
typename Affine2<Scalar>::Point apply_point(const Affine2<Scalar>& t,
                                            const typename Affine2<Scalar>::Point& p) {
  return t(p);
}

/// outer ∘ inner
template <typename Scalar>
Affine2<Scalar> compose(const Affine2<Scalar>& outer, const Affine2<Scalar>& inner) {
  return outer * inner;
}

enum class TransformKind { identity, rotation, reflection, skew, scale };
enum class ReflectAxis { vertical, horizontal };
enum class ShearAxis { x, y };

std::string to_string(TransformKind kind);
TransformKind parse_transform_kind(const std::string& text);

/// Parameters of one evaluation transform. Only the fields of `kind` matter.
struct TransformParams {
  TransformKind kind = TransformKind::identity;
  double angle_deg = 0.0;                     // rotation, [-180, 180)
  ReflectAxis axis = ReflectAxis::vertical;   // reflection
  ShearAxis shear_axis = ShearAxis::x;        // skew
  double shear = 0.0;                         // skew, [-0.3, 0.3]
  double factor = 1.0;                        // scale, [0.5, 2.0]
};

/// Draws parameters uniformly from the ranges above.
TransformParams random_transform(TransformKind kind, Rng& rng);

/// Builds the transform about `center`. Throws ValueError for parameters
/// outside their ranges.
Affine2D make_transform(const TransformParams& params, const Point2& center);

/// Inverse built from the inverted parameters rather than by matrix inversion.
Affine2D analytic_inverse(const TransformParams& params, const Point2& center);

/// Pixel (row i, column j) is centred at continuous (j + 0.5, i + 0.5).
inline Point2 pixel_center(std::size_t row, std::size_t col) {
  return {static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5};
}

/// Image of C channels stored as a [C,H,W] tensor.
struct ImageGrid {
  Tensor pixels;

  ImageGrid() = default;
  explicit ImageGrid(Tensor p);
  ImageGrid(std::size_t channels, std::size_t height, std::size_t width)
      : ImageGrid(Tensor::zeros({channels, height, width})) {}

  std::size_t channels() const { return pixels.size(0); }
  std::size_t height() const { return pixels.size(1); }
  std::size_t width() const { return pixels.size(2); }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels.data()[(c * height() + y) * width() + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels.mutable_data()[(c * height() + y) * width() + x];
  }
  Point2 center() const { return {0.5 * static_cast<double>(width()), 0.5 * static_cast<double>(height())}; }
};

/// Bilinear sample at continuous coordinates; out-of-range taps read 0.
double sample_bilinear(const ImageGrid& img, std::size_t channel, const Point2& p);

/// Output pixel p takes the bilinear sample of `img` at t^{-1}(p). Same extents.
ImageGrid warp_image(const ImageGrid& img, const Affine2D& t);

}  // namespace ses
