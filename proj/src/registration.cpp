#include "thinseg/registration.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <limits>

namespace thinseg {

namespace {

constexpr double kMaxCondition = 1e12;

// Isotropic normalization: centroid to the origin, RMS radius to sqrt(2).
struct Normalizer {
  Point2 centroid;
  double scale = 1.0;  // multiply centred coordinates by this

  Point2 forward(Point2 p) const { return {(p.x - centroid.x) * scale, (p.y - centroid.y) * scale}; }
};

Normalizer make_normalizer(std::span<const LandmarkPair> pairs, bool fixed_side, const char* which) {
  Normalizer n;
  const double count = static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    const Point2& q = fixed_side ? p.fixed : p.moving;
    if (!std::isfinite(q.x) || !std::isfinite(q.y)) {
      throw RegistrationError(RegistrationError::Kind::Degenerate, "landmark coordinates must be finite");
    }
    n.centroid.x += q.x / count;
    n.centroid.y += q.y / count;
  }
  double ss = 0.0;
  for (const auto& p : pairs) {
    const Point2& q = fixed_side ? p.fixed : p.moving;
    ss += (q.x - n.centroid.x) * (q.x - n.centroid.x) + (q.y - n.centroid.y) * (q.y - n.centroid.y);
  }
  const double rms = std::sqrt(ss / count);
  const double extent = std::max(std::abs(n.centroid.x), std::abs(n.centroid.y)) + rms;
  if (!(rms > 1e-12 * std::max(extent, 1.0))) {
    throw RegistrationError(RegistrationError::Kind::Degenerate,
                            std::string("degenerate configuration: all ") + which + " points coincide");
  }
  n.scale = std::sqrt(2.0) / rms;
  return n;
}

template <int N>
void check_condition(const Eigen::Matrix<double, N, N>& normal, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, N, N>> eig(normal, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxCondition) {
    throw RegistrationError(RegistrationError::Kind::Degenerate,
                            std::string("singular landmark configuration (") + what + ")");
  }
}

// Fixed-frame transform from a normalized-frame solution: f = cf + (L' (m - cm) sm + t') / sf.
AffineTransform2D denormalize(const Eigen::Matrix2d& lin, const Eigen::Vector2d& t, const Normalizer& nm,
                              const Normalizer& nf) {
  Eigen::Matrix2d L = lin * (nm.scale / nf.scale);
  Eigen::Vector2d cm(nm.centroid.x, nm.centroid.y);
  Eigen::Vector2d cf(nf.centroid.x, nf.centroid.y);
  Eigen::Vector2d tr = cf + t / nf.scale - L * cm;
  return AffineTransform2D({L(0, 0), L(0, 1), tr(0), L(1, 0), L(1, 1), tr(1)});
}

}  // namespace

AffineTransform2D::AffineTransform2D(const std::array<double, 6>& m) : m_(m) {
  for (double v : m_) {
    if (!std::isfinite(v)) throw Error("transform coefficients must be finite");
  }
}

AffineTransform2D AffineTransform2D::similarity(double theta_rad, double scale, double tx, double ty) {
  const double c = scale * std::cos(theta_rad);
  const double s = scale * std::sin(theta_rad);
  return AffineTransform2D({c, -s, tx, s, c, ty});
}

nlohmann::json AffineTransform2D::to_json() const {
  return nlohmann::json{{"matrix", {{m_[0], m_[1], m_[2]}, {m_[3], m_[4], m_[5]}}}, {"units", "um"}};
}

AffineTransform2D AffineTransform2D::from_json(const nlohmann::json& j) {
  const auto& m = j.at("matrix");
  if (!m.is_array() || m.size() != 2 || m[0].size() != 3 || m[1].size() != 3) {
    throw Error("transform matrix must be 2x3");
  }
  if (j.contains("units") && j["units"] != "um") throw Error("transform units must be \"um\"");
  std::array<double, 6> v{};
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) v[r * 3 + c] = m[r][c].get<double>();
  }
  return AffineTransform2D(v);
}

AffineTransform2D compose(const AffineTransform2D& a, const AffineTransform2D& b) {
  const auto& p = a.matrix();
  const auto& q = b.matrix();
  return AffineTransform2D({p[0] * q[0] + p[1] * q[3], p[0] * q[1] + p[1] * q[4], p[0] * q[2] + p[1] * q[5] + p[2],
                            p[3] * q[0] + p[4] * q[3], p[3] * q[1] + p[4] * q[4],
                            p[3] * q[2] + p[4] * q[5] + p[5]});
}

AffineTransform2D invert(const AffineTransform2D& t) {
  const auto& m = t.matrix();
  const double det = t.determinant();
  const double norm = std::abs(m[0]) + std::abs(m[1]) + std::abs(m[3]) + std::abs(m[4]);
  if (!(std::abs(det) > 1e-14 * norm * norm)) {
    throw RegistrationError(RegistrationError::Kind::NotInvertible, "transform is not invertible");
  }
  const double a = m[4] / det, b = -m[1] / det, c = -m[3] / det, d = m[0] / det;
  return AffineTransform2D({a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])});
}

TransformModel parse_transform_model(const std::string& name) {
  if (name == "similarity") return TransformModel::Similarity;
  if (name == "affine") return TransformModel::Affine;
  throw Error("unknown transform model '" + name + "' (expected similarity or affine)");
}

std::string to_string(TransformModel m) { return m == TransformModel::Similarity ? "similarity" : "affine"; }

RegistrationResult evaluate_transform(const AffineTransform2D& t, std::span<const LandmarkPair> pairs) {
  RegistrationResult r{t, {}, 0.0};
  double ss = 0.0;
  for (const auto& p : pairs) {
    Point2 q = t.apply(p.moving);
    double d = std::hypot(q.x - p.fixed.x, q.y - p.fixed.y);
    r.residuals_um.push_back(d);
    ss += d * d;
  }
  r.rms_residual_um = pairs.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(pairs.size()));
  return r;
}

RegistrationResult solve_similarity(std::span<const LandmarkPair> pairs) {
  if (pairs.size() < 2) {
    throw RegistrationError(RegistrationError::Kind::TooFewLandmarks,
                            "similarity needs at least 2 landmark pairs, got " + std::to_string(pairs.size()));
  }
  const Normalizer nf = make_normalizer(pairs, true, "fixed");
  const Normalizer nm = make_normalizer(pairs, false, "moving");

  // Unknowns (a, b, tx, ty): x' = a x - b y + tx, y' = b x + a y + ty.
  Eigen::Matrix4d normal = Eigen::Matrix4d::Zero();
  Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
  for (const auto& p : pairs) {
    Point2 m = nm.forward(p.moving);
    Point2 f = nf.forward(p.fixed);
    Eigen::Vector4d rx(m.x, -m.y, 1.0, 0.0);
    Eigen::Vector4d ry(m.y, m.x, 0.0, 1.0);
    normal += rx * rx.transpose() + ry * ry.transpose();
    rhs += rx * f.x + ry * f.y;
  }
  check_condition<4>(normal, "similarity normal equations");
  Eigen::Vector4d sol = normal.ldlt().solve(rhs);
  Eigen::Matrix2d lin;
  lin << sol(0), -sol(1), sol(1), sol(0);
  AffineTransform2D t = denormalize(lin, Eigen::Vector2d(sol(2), sol(3)), nm, nf);
  return evaluate_transform(t, pairs);
}

RegistrationResult solve_affine(std::span<const LandmarkPair> pairs) {
  if (pairs.size() < 3) {
    throw RegistrationError(RegistrationError::Kind::TooFewLandmarks,
                            "affine needs at least 3 landmark pairs, got " + std::to_string(pairs.size()));
  }
  const Normalizer nf = make_normalizer(pairs, true, "fixed");
  const Normalizer nm = make_normalizer(pairs, false, "moving");

  Eigen::Matrix3d normal = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d fixed_normal = Eigen::Matrix3d::Zero();
  Eigen::Vector3d rhs_x = Eigen::Vector3d::Zero();
  Eigen::Vector3d rhs_y = Eigen::Vector3d::Zero();
  for (const auto& p : pairs) {
    Point2 m = nm.forward(p.moving);
    Point2 f = nf.forward(p.fixed);
    Eigen::Vector3d row(m.x, m.y, 1.0);
    Eigen::Vector3d frow(f.x, f.y, 1.0);
    normal += row * row.transpose();
    fixed_normal += frow * frow.transpose();
    rhs_x += row * f.x;
    rhs_y += row * f.y;
  }
  check_condition<3>(normal, "moving points collinear");
  check_condition<3>(fixed_normal, "fixed points collinear");
  auto ldlt = normal.ldlt();
  Eigen::Vector3d sx = ldlt.solve(rhs_x);
  Eigen::Vector3d sy = ldlt.solve(rhs_y);
  Eigen::Matrix2d lin;
  lin << sx(0), sx(1), sy(0), sy(1);
  AffineTransform2D t = denormalize(lin, Eigen::Vector2d(sx(2), sy(2)), nm, nf);
  return evaluate_transform(t, pairs);
}

RegistrationResult solve(std::span<const LandmarkPair> pairs, TransformModel model) {
  return model == TransformModel::Similarity ? solve_similarity(pairs) : solve_affine(pairs);
}

LabelMap warp_labelmap(const LabelMap& map, const AffineTransform2D& t, int target_width, int target_height,
                       PixelScale target_scale) {
  const AffineTransform2D inv = invert(t);
  LabelMap out(target_width, target_height, target_scale);
  out.consolidated = map.consolidated;
  const double ts = target_scale.microns_per_pixel();
  const double inv_src = 1.0 / map.scale.microns_per_pixel();
  for (int r = 0; r < target_height; ++r) {
    for (int c = 0; c < target_width; ++c) {
      Point2 q = inv.apply({(c + 0.5) * ts, (r + 0.5) * ts});
      double sx = std::floor(q.x * inv_src);
      double sy = std::floor(q.y * inv_src);
      if (sx < 0 || sy < 0 || sx >= map.width || sy >= map.height) continue;
      out.at(r, c) = map.at(static_cast<int>(sy), static_cast<int>(sx));
    }
  }
  return out;
}

Raster warp_raster(const Raster& src, const AffineTransform2D& t, int target_width, int target_height,
                   PixelScale target_scale) {
  const AffineTransform2D inv = invert(t);
  Raster out(target_width, target_height, src.bands, target_scale);
  const double ts = target_scale.microns_per_pixel();
  const double inv_src = 1.0 / src.scale.microns_per_pixel();
  for (int r = 0; r < target_height; ++r) {
    for (int c = 0; c < target_width; ++c) {
      Point2 q = inv.apply({(c + 0.5) * ts, (r + 0.5) * ts});
      const double px = q.x * inv_src;
      const double py = q.y * inv_src;
      if (px < 0 || py < 0 || px >= src.width || py >= src.height) continue;
      // Continuous pixel coordinates with centres on integers.
      const double u = px - 0.5, v = py - 0.5;
      const double fu = std::floor(u), fv = std::floor(v);
      const double wx = u - fu, wy = v - fv;
      const int x0 = std::clamp(static_cast<int>(fu), 0, src.width - 1);
      const int x1 = std::clamp(static_cast<int>(fu) + 1, 0, src.width - 1);
      const int y0 = std::clamp(static_cast<int>(fv), 0, src.height - 1);
      const int y1 = std::clamp(static_cast<int>(fv) + 1, 0, src.height - 1);
      for (int b = 0; b < src.bands; ++b) {
        const double top = (1 - wx) * src.at(y0, x0, b) + wx * src.at(y0, x1, b);
        const double bottom = (1 - wx) * src.at(y1, x0, b) + wx * src.at(y1, x1, b);
        out.at(r, c, b) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

nlohmann::json to_json(const RegistrationResult& r, TransformModel model) {
  nlohmann::json j = r.transform.to_json();
  j["model"] = to_string(model);
  j["residuals_um"] = r.residuals_um;
  j["rms_um"] = r.rms_residual_um;
  return j;
}

nlohmann::json landmarks_to_json(std::span<const LandmarkPair> pairs) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& p : pairs) {
    j.push_back({{"fixed", {p.fixed.x, p.fixed.y}}, {"moving", {p.moving.x, p.moving.y}}});
  }
  return j;
}

std::vector<LandmarkPair> landmarks_from_json(const nlohmann::json& j) {
  const nlohmann::json& list = j.is_object() && j.contains("landmarks") ? j["landmarks"] : j;
  if (!list.is_array()) throw Error("landmark file must be a JSON list");
  std::vector<LandmarkPair> pairs;
  for (const auto& e : list) {
    const auto& f = e.at("fixed");
    const auto& m = e.at("moving");
    if (f.size() != 2 || m.size() != 2) throw Error("landmark coordinates must be [x_um, y_um]");
    pairs.push_back({{f[0].get<double>(), f[1].get<double>()}, {m[0].get<double>(), m[1].get<double>()}});
  }
  return pairs;
}

std::vector<LandmarkPair> load_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open landmark file " + path.string());
  try {
    return landmarks_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed landmark file " + path.string() + ": " + e.what());
  }
}

AffineTransform2D load_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open transform file " + path.string());
  try {
    return AffineTransform2D::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed transform file " + path.string() + ": " + e.what());
  }
}

}  // namespace thinseg
