#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinseg/raster.hpp"

namespace thinseg {

/// Physical coordinate in micrometres.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct LandmarkPair {
  Point2 fixed;   // on the thin-section image
  Point2 moving;  // on the mineral map
};

/// Raised when a landmark set cannot determine the requested transform.
class RegistrationError : public Error {
 public:
  enum class Kind { TooFewLandmarks, Degenerate, NotInvertible };
  RegistrationError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// 2x3 matrix [[a, b, tx], [c, d, ty]] taking moving coordinates to fixed ones.
class AffineTransform2D {
 public:
  AffineTransform2D() = default;
  explicit AffineTransform2D(const std::array<double, 6>& m);

  static AffineTransform2D identity() { return AffineTransform2D(); }
  /// x' = s R(theta) x + t
  static AffineTransform2D similarity(double theta_rad, double scale, double tx, double ty);

  Point2 apply(Point2 p) const {
    return {m_[0] * p.x + m_[1] * p.y + m_[2], m_[3] * p.x + m_[4] * p.y + m_[5]};
  }
  double determinant() const { return m_[0] * m_[4] - m_[1] * m_[3]; }
  const std::array<double, 6>& matrix() const { return m_; }
  double operator()(int row, int col) const { return m_[row * 3 + col]; }

  nlohmann::json to_json() const;
  static AffineTransform2D from_json(const nlohmann::json& j);

 private:
  std::array<double, 6> m_{1, 0, 0, 0, 1, 0};
};

/// Applies b first, then a.
AffineTransform2D compose(const AffineTransform2D& a, const AffineTransform2D& b);
AffineTransform2D invert(const AffineTransform2D& t);

struct RegistrationResult {
  AffineTransform2D transform;
  std::vector<double> residuals_um;
  double rms_residual_um = 0.0;
};

enum class TransformModel { Similarity, Affine };

TransformModel parse_transform_model(const std::string& name);
std::string to_string(TransformModel m);

/// Least-squares rotation + uniform scale + translation.
RegistrationResult solve_similarity(std::span<const LandmarkPair> pairs);
/// Least-squares full 6-parameter affine.
RegistrationResult solve_affine(std::span<const LandmarkPair> pairs);
RegistrationResult solve(std::span<const LandmarkPair> pairs, TransformModel model);

/// {"model", "transform", "residuals_um", "rms_um"}; AffineTransform2D::from_json
/// accepts the result object as well.
nlohmann::json to_json(const RegistrationResult& r, TransformModel model);

/// Residual statistics of an arbitrary transform on a landmark set.
RegistrationResult evaluate_transform(const AffineTransform2D& t, std::span<const LandmarkPair> pairs);

/// Resamples a label map onto a target grid (nearest neighbour, physical
/// coordinates, pixel centres at (i + 0.5) * scale). Target pixels that pull
/// back outside the source become kSentinel.
LabelMap warp_labelmap(const LabelMap& map, const AffineTransform2D& t, int target_width, int target_height,
                       PixelScale target_scale);

/// Bilinear counterpart of warp_labelmap for intensity rasters; uncovered pixels are 0.
Raster warp_raster(const Raster& r, const AffineTransform2D& t, int target_width, int target_height,
                   PixelScale target_scale);

nlohmann::json landmarks_to_json(std::span<const LandmarkPair> pairs);
std::vector<LandmarkPair> landmarks_from_json(const nlohmann::json& j);
std::vector<LandmarkPair> load_landmarks(const std::filesystem::path& path);
AffineTransform2D load_transform(const std::filesystem::path& path);

}  // namespace thinseg
