#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace thinseg {

/// Base class for every error raised by the library. The CLI maps these to
/// a diagnostic and a nonzero exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Label value reserved for "outside / unlabeled" pixels.
inline constexpr std::uint8_t kSentinel = 255;

/// Number of consolidated mineral classes (five most frequent phases + Others).
inline constexpr int kNumClasses = 6;

/// Network output channels: one per class plus the non-SOI channel.
inline constexpr int kNumOutputs = kNumClasses + 1;

using Rgb = std::array<std::uint8_t, 3>;

class PixelScale {
 public:
  explicit PixelScale(double microns_per_pixel);
  double microns_per_pixel() const { return um_; }
  bool operator==(const PixelScale& other) const = default;

 private:
  double um_;
};

/// Multi-band intensity image, band-interleaved, values in [0,1].
struct Raster {
  int width = 0;
  int height = 0;
  int bands = 0;
  std::vector<float> data;
  PixelScale scale{1.0};

  Raster() = default;
  Raster(int w, int h, int b, PixelScale s, float fill = 0.0f);

  float& at(int row, int col, int band) {
    return data[(static_cast<std::size_t>(row) * width + col) * bands + band];
  }
  float at(int row, int col, int band) const {
    return data[(static_cast<std::size_t>(row) * width + col) * bands + band];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

/// Per-pixel categorical labels. Values are phase ids until consolidation,
/// class indices in [0, kNumClasses) afterwards. kSentinel marks unlabeled.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;
  PixelScale scale{1.0};
  bool consolidated = false;

  LabelMap() = default;
  LabelMap(int w, int h, PixelScale s, std::uint8_t fill = kSentinel);

  std::uint8_t& at(int row, int col) { return values[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * width + col];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

/// Segment of interest: 1 where the pixel carries usable data.
struct SOIMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> mask;
  PixelScale scale{1.0};

  SOIMask() = default;
  SOIMask(int w, int h, PixelScale s, bool fill = false);

  bool at(int row, int col) const { return mask[static_cast<std::size_t>(row) * width + col] != 0; }
  void set(int row, int col, bool v) {
    mask[static_cast<std::size_t>(row) * width + col] = v ? 1 : 0;
  }
  std::size_t count() const;
};

struct PhaseEntry {
  int id = 0;
  std::string name;
  Rgb color{};
  std::optional<int> consolidated;
};

/// Phase palette plus the phase -> consolidated class table.
///
/// Colors and ids are unique so palette decoding is unambiguous. After
/// build_consolidation every entry carries a class index, the last index
/// (keep) being "Others".
class ClassRegistry {
 public:
  ClassRegistry() = default;
  explicit ClassRegistry(std::vector<PhaseEntry> entries);

  const std::vector<PhaseEntry>& entries() const { return entries_; }
  const PhaseEntry* find(int id) const;
  const PhaseEntry* find_color(const Rgb& color) const;
  const PhaseEntry* find_name(const std::string& name) const;

  bool has_consolidation() const;
  int num_classes() const { return num_classes_; }
  int class_of(int phase_id) const;
  void set_consolidation(const std::map<int, int>& table, int num_classes);

  /// Names of consolidated classes, index order; the last one is "Others".
  std::vector<std::string> class_names() const;
  /// Display colors of consolidated classes. Never white, which renders the sentinel.
  std::vector<Rgb> class_palette() const;
  /// Registry whose ids are the consolidated class indices (used for class maps).
  ClassRegistry class_registry() const;

  nlohmann::json to_json() const;
  static ClassRegistry from_json(const nlohmann::json& j);
  static ClassRegistry load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<PhaseEntry> entries_;
  int num_classes_ = 0;
};

struct PhysicalSize {
  double width_mm = 0.0;
  double height_mm = 0.0;
};

PhysicalSize physical_size(int width, int height, PixelScale scale);
PhysicalSize physical_size(const Raster& r);
PhysicalSize physical_size(const LabelMap& m);

/// Maps each pixel color to its phase id. tolerance is the L-infinity
/// distance (in 8-bit units) accepted for nearest-color matching; 0 = exact.
LabelMap decode_labelmap(const Raster& image, const ClassRegistry& registry, int tolerance = 0);

using PhaseHistogram = std::map<int, std::int64_t>;

PhaseHistogram phase_frequencies(std::span<const LabelMap> maps, std::span<const SOIMask> sois);

ClassRegistry build_consolidation(ClassRegistry registry, const PhaseHistogram& freq, int keep = 5);

LabelMap apply_consolidation(const LabelMap& map, const ClassRegistry& registry);

Raster stack_pp_xp(const Raster& pp, const Raster& xp);

}  // namespace thinseg
