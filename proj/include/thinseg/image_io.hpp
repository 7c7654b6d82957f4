#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>

#include "thinseg/raster.hpp"

namespace thinseg {

/// Loads a PNG or TIFF (8/16-bit, gray or RGB; alpha is dropped, palettes are
/// expanded) and normalizes intensities to [0,1].
Raster load_raster(const std::filesystem::path& path, PixelScale scale);

/// Writes a 1- or 3-band raster as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const Raster& r);

/// In-memory 8-bit PNG encoding of a 1- or 3-band raster.
std::string encode_png(const Raster& r);

/// Writes a single channel as a 16-bit grayscale PNG; values are clamped to [0,1].
void write_png16(const std::filesystem::path& path, int width, int height, std::span<const float> values);

/// Writes a label map as an indexed PNG; palette[i] is the color of value i.
/// Missing palette entries (and the sentinel) are rendered white.
void write_indexed_png(const std::filesystem::path& path, const LabelMap& map, std::span<const Rgb> palette);

/// Reads the raw indices of an indexed PNG (or the values of an 8-bit gray PNG).
LabelMap read_indexed_png(const std::filesystem::path& path, PixelScale scale);

/// SOI masks are stored as 8-bit gray PNGs, nonzero = inside.
void write_soi_png(const std::filesystem::path& path, const SOIMask& soi);
SOIMask read_soi_png(const std::filesystem::path& path, PixelScale scale);

/// Writes through a sibling temp file and renames it into place.
void write_atomic(const std::filesystem::path& path,
                  const std::function<void(const std::filesystem::path&)>& writer);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace thinseg
