#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinseg/raster.hpp"

namespace thinseg {

/// PP, XP, registered label map, and SOI of one thin section on a shared grid.
struct ThinSection {
  std::string id;
  Raster pp;
  Raster xp;
  LabelMap qemscan;
  SOIMask soi;

  /// Throws unless every grid has the same size and scale.
  void validate() const;
};

struct Rect {
  int row = 0;
  int col = 0;
  int height = 0;
  int width = 0;

  bool empty() const { return height <= 0 || width <= 0; }
  bool operator==(const Rect&) const = default;
};

/// Bounding box of the SOI, shrunk to the largest centred sub-rectangle whose
/// sides are multiples of `chunk`. Empty when the box is smaller than one
/// chunk in either direction.
Rect soi_bbox_center_crop(const SOIMask& soi, int chunk = 1000);

using ClassCounts = std::array<std::int64_t, kNumClasses>;

/// Position and statistics of a retained chunk.
struct ChunkDescriptor {
  std::string section_id;
  int row = 0;
  int col = 0;
  int size = 0;
  double coverage = 0.0;
  int column_major_index = 0;
  ClassCounts class_counts{};  // labeled SOI pixels per class
  /// Set when the chunk was written to disk. Relative to the manifest in
  /// JSON, resolved once loaded.
  std::optional<std::string> pp_file, xp_file, labels_file, soi_file;

  nlohmann::json to_json() const;
  static ChunkDescriptor from_json(const nlohmann::json& j);
};

struct Chunk {
  ChunkDescriptor info;
  Raster image;     // 6 bands
  LabelMap labels;  // consolidated classes, sentinel outside the SOI
  SOIMask soi;
};

/// 8-bit copy of a chunk for keeping many of them in memory. Exact for
/// images decoded from 8-bit files; other inputs are rounded to 1/255.
struct PackedChunk {
  ChunkDescriptor info;
  int width = 0;
  int height = 0;
  double scale_um = 1.0;
  std::vector<std::uint8_t> image;  // interleaved, 6 bands
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> soi;

  static PackedChunk pack(const Chunk& c);
  Chunk unpack() const;
};

/// Chunk grid over the centre crop, enumerated column by column; cells with
/// SOI coverage below min_coverage are dropped and take no index.
/// Labels must be consolidated when class counts are wanted.
std::vector<ChunkDescriptor> plan_chunks(const std::string& section_id, const SOIMask& soi, const LabelMap* labels,
                                         int chunk = 1000, double min_coverage = 0.70);

std::vector<Chunk> chunk_section(const ThinSection& s, int chunk = 1000, double min_coverage = 0.70);

/// Cuts the chunk described by d out of a section.
Chunk extract_chunk(const ThinSection& s, const ChunkDescriptor& d);

enum class SplitMethod { Same, Split };

SplitMethod parse_split_method(const std::string& name);
std::string to_string(SplitMethod m);

/// Section files referenced by a manifest.
struct SectionSource {
  std::string id;
  std::filesystem::path pp, xp, labels, soi;
  double scale_um = 1.0;
};

struct DatasetManifest {
  std::vector<SectionSource> sections;
  std::vector<ChunkDescriptor> chunks;
  std::filesystem::path registry;  // consolidated class registry
  int chunk_size = 1000;
  double min_coverage = 0.70;
  SplitMethod split_method = SplitMethod::Same;
  double val_fraction = 0.20;
  std::vector<std::string> val_sections;
  std::vector<int> train_ids;  // indices into chunks
  std::vector<int> val_ids;

  /// Throws unless train/val form a partition of the chunks.
  void check_partition() const;

  /// Paths are written relative to base and resolved against it on load.
  nlohmann::json to_json(const std::filesystem::path& base) const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& base);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
};

/// Per section, the last ceil(val_fraction * n) chunks by column-major index
/// go to validation.
DatasetManifest split_same(DatasetManifest m, double val_fraction = 0.20);

/// Every chunk of the named sections goes to validation.
DatasetManifest split_by_section(DatasetManifest m, const std::vector<std::string>& val_section_ids);

struct SplitDistributionReport {
  std::array<double, kNumClasses> train{};
  std::array<double, kNumClasses> val{};
  double max_abs_difference = 0.0;  // fraction units
  bool within(double points) const { return max_abs_difference * 100.0 <= points; }
};

/// Class fractions of the train and validation sets from the chunk counts.
SplitDistributionReport compare_split_distributions(const DatasetManifest& m);

/// One training sample in planar layout: image [6][size][size].
struct Sample {
  int size = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> soi;
};

/// Crop origin, flips, and number of counter-clockwise quarter turns.
struct AugmentParams {
  int row = 0;
  int col = 0;
  bool flip_horizontal = false;
  bool flip_vertical = false;
  int quarter_turns = 0;
};

AugmentParams draw_augment(std::mt19937_64& rng, int height, int width, int crop);

/// Crop, then flips, then rotation; identical for image, labels, and SOI.
Sample apply_augment(const Chunk& c, const AugmentParams& p, int crop);

Sample apply_augment(const PackedChunk& c, const AugmentParams& p, int crop);

Sample augment(const Chunk& c, std::mt19937_64& rng, int crop = 512);
Sample augment(const PackedChunk& c, std::mt19937_64& rng, int crop = 512);

/// Loads the grids of a manifest section (labels already registered and consolidated).
ThinSection load_section(const SectionSource& src);

/// Loads the given chunks, from their own files when materialized and
/// otherwise by cutting them out of their sections (each loaded once).
std::vector<PackedChunk> load_chunks(const DatasetManifest& m, std::span<const int> ids);

/// Writes the chunk's grids next to each other under dir and records the
/// file names in its descriptor.
void materialize_chunk(const Chunk& c, const std::filesystem::path& dir, ChunkDescriptor& d);

}  // namespace thinseg
