#include "ses/geometry.hpp"

#include "ses/error.hpp"

#include <numbers>

namespace ses {

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::identity: return "identity";
    case TransformKind::rotation: return "rotation";
    case TransformKind::reflection: return "reflection";
    case TransformKind::skew: return "skew";
    case TransformKind::scale: return "scale";
  }
  return "?";
}

TransformKind parse_transform_kind(const std::string& text) {
  for (auto k : {TransformKind::identity, TransformKind::rotation, TransformKind::reflection,
                 TransformKind::skew, TransformKind::scale})
    if (to_string(k) == text) return k;
  throw ValueError("unknown transform '" + text + "' (rotation|reflection|skew|scale|identity)");
}

TransformParams random_transform(TransformKind kind, Rng& rng) {
  TransformParams p;
  p.kind = kind;
  switch (kind) {
    case TransformKind::identity: break;
    case TransformKind::rotation:
      p.angle_deg = std::uniform_real_distribution<double>(-180.0, 180.0)(rng);
      break;
    case TransformKind::reflection:
      p.axis = std::bernoulli_distribution(0.5)(rng) ? ReflectAxis::horizontal : ReflectAxis::vertical;
      break;
    case TransformKind::skew:
      p.shear_axis = std::bernoulli_distribution(0.5)(rng) ? ShearAxis::y : ShearAxis::x;
      p.shear = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
      break;
    case TransformKind::scale:
      p.factor = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
      break;
  }
  return p;
}

namespace {

// Exact cosine/sine at multiples of 90 degrees.
std::pair<double, double> cos_sin_deg(double deg) {
  const double quarter = deg / 90.0;
  if (quarter == std::round(quarter)) {
    switch (((static_cast<long>(std::round(quarter)) % 4) + 4) % 4) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  const double rad = deg * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

Affine2D::LinearMap rotation_matrix(double deg) {
  auto [c, s] = cos_sin_deg(deg);
  Affine2D::LinearMap a;
  a << c, -s, s, c;
  return a;
}

Affine2D::LinearMap reflection_matrix(ReflectAxis axis) {
  Affine2D::LinearMap a = Affine2D::LinearMap::Identity();
  if (axis == ReflectAxis::vertical) a(0, 0) = -1.0;
  else a(1, 1) = -1.0;
  return a;
}

Affine2D::LinearMap shear_matrix(ShearAxis axis, double s) {
  Affine2D::LinearMap a = Affine2D::LinearMap::Identity();
  if (axis == ShearAxis::x) a(0, 1) = s;
  else a(1, 0) = s;
  return a;
}

void check_range(const TransformParams& p) {
  auto fail = [](const std::string& what) { throw ValueError("transform parameter out of range: " + what); };
  switch (p.kind) {
    case TransformKind::rotation:
      if (!(p.angle_deg >= -180.0 && p.angle_deg < 180.0))
        fail("rotation angle " + std::to_string(p.angle_deg) + " not in [-180, 180)");
      break;
    case TransformKind::skew:
      if (!(std::abs(p.shear) <= 0.3)) fail("shear " + std::to_string(p.shear) + " not in [-0.3, 0.3]");
      break;
    case TransformKind::scale:
      if (!(p.factor >= 0.5 && p.factor <= 2.0))
        fail("scale " + std::to_string(p.factor) + " not in [0.5, 2.0]");
      break;
    default: break;
  }
}

}  // namespace

Affine2D make_transform(const TransformParams& p, const Point2& center) {
  check_range(p);
  switch (p.kind) {
    case TransformKind::identity: return Affine2D::identity();
    case TransformKind::rotation: return Affine2D::about(rotation_matrix(p.angle_deg), center);
    case TransformKind::reflection: return Affine2D::about(reflection_matrix(p.axis), center);
    case TransformKind::skew: return Affine2D::about(shear_matrix(p.shear_axis, p.shear), center);
    case TransformKind::scale:
      return Affine2D::about(p.factor * Affine2D::LinearMap::Identity(), center);
  }
  throw ValueError("unknown transform kind");
}

Affine2D analytic_inverse(const TransformParams& p, const Point2& center) {
  switch (p.kind) {
    case TransformKind::identity: return Affine2D::identity();
    case TransformKind::rotation: return Affine2D::about(rotation_matrix(-p.angle_deg), center);
    case TransformKind::reflection: return Affine2D::about(reflection_matrix(p.axis), center);
    case TransformKind::skew: return Affine2D::about(shear_matrix(p.shear_axis, -p.shear), center);
    case TransformKind::scale:
      return Affine2D::about((1.0 / p.factor) * Affine2D::LinearMap::Identity(), center);
  }
  throw ValueError("unknown transform kind");
}

ImageGrid::ImageGrid(Tensor p) : pixels(std::move(p)) {
  if (pixels.rank() != 3) throw ShapeError("image must be [C,H,W], got " + to_string(pixels.shape()));
}

double sample_bilinear(const ImageGrid& img, std::size_t channel, const Point2& p) {
  const double u = p.x() - 0.5, v = p.y() - 0.5;
  const double x0 = std::floor(u), y0 = std::floor(v);
  const double fx = u - x0, fy = v - y0;
  const auto H = static_cast<long>(img.height()), W = static_cast<long>(img.width());
  const auto* plane = img.pixels.data().data() + channel * img.height() * img.width();
  const long ix = static_cast<long>(x0), iy = static_cast<long>(y0);
  const double wx[2] = {1.0 - fx, fx}, wy[2] = {1.0 - fy, fy};
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const double wgt = wy[dy] * wx[dx];
      if (wgt == 0.0) continue;
      const long yy = iy + dy, xx = ix + dx;
      if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
      acc += wgt * plane[yy * W + xx];
    }
  return acc;
}

ImageGrid warp_image(const ImageGrid& img, const Affine2D& t) {
  if (!t.invertible()) throw ValueError("warp_image: singular transform");
  const Affine2D inv = t.inverse();
  ImageGrid out(img.channels(), img.height(), img.width());
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x)
        out.at(c, y, x) = sample_bilinear(img, c, inv(pixel_center(y, x)));
  return out;
}

}  // namespace ses
