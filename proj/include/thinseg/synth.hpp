#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "thinseg/raster.hpp"
#include "thinseg/registration.hpp"

namespace thinseg {

/// Phase palette of the synthetic corpus: Calcite, Dolomite, Mg-Clay
/// Minerals, Quartz, Pores, Others, Pyrite, Carbon Rich Material (ids 0..7).
ClassRegistry synth_registry();

/// Rendering colour of a phase under plane- and cross-polarized light.
struct PhaseStyle {
  Rgb pp{};
  Rgb xp{};
  double noise = 0.04;  // Gaussian sigma in [0,1] intensity units
};

/// One style per synth_registry() phase, indexed by phase id.
std::vector<PhaseStyle> synth_styles(double noise = 0.04);

/// Voronoi tessellation on a jittered seed grid with spacing `granularity`
/// pixels. weights[i] is the requested area fraction of value i; cells are
/// handed out in random order to the value furthest below its quota.
LabelMap gen_phase_map(std::uint64_t seed, int width, int height, std::span<const double> weights,
                       double granularity, PixelScale scale = PixelScale(1.0));

/// Base colour per value plus seeded Gaussian noise; kSentinel renders black.
/// Values without a style are an error.
std::pair<Raster, Raster> render_pp_xp(const LabelMap& map, std::span<const PhaseStyle> styles, std::uint64_t seed);

/// Keeps the top-left pixel of every factor x factor cell.
LabelMap degrade_to_sampling_grid(const LabelMap& map, int factor);

/// Resamples the map through t (physical coordinates) onto its own grid.
LabelMap perturb_registration(const LabelMap& map, const AffineTransform2D& t);

/// Superellipse |x/a|^p + |y/b|^p <= 1 centred in the grid.
SOIMask superellipse_soi(int width, int height, double semi_x, double semi_y, double exponent, PixelScale scale);

struct CorpusRecipe {
  int sections = 12;
  int size = 2048;                // image side, pixels
  double image_scale_um = 1.32;
  int map_factor = 8;             // map pixel = factor image pixels
  int map_size = 288;             // map side, map pixels (covers the rotated image)
  int soi_extent = 2040;          // SOI bounding box side, pixels
  double soi_exponent = 2.5;
  int soi_holes = 2;              // small defects cut out of the SOI
  double granularity_min = 60.0;
  double granularity_max = 140.0;
  double max_rotation_deg = 4.0;
  double max_scale_dev = 0.02;
  double max_shift_um = 20.0;
  int landmarks = 4;
  double noise = 0.04;
  std::uint64_t seed = 1;
};

struct SynthSection {
  std::string id;
  Raster pp;
  Raster xp;
  LabelMap truth;   // phase ids on the image grid
  LabelMap map;     // phase ids on the coarse map grid
  SOIMask soi;
  AffineTransform2D transform_gt;  // map µm -> image µm
  std::vector<LandmarkPair> landmarks;
  std::vector<double> phase_weights;
  double granularity = 0.0;
};

SynthSection generate_section(const CorpusRecipe& recipe, int index);

/// Writes corpus.json, registry.json, and sections/<id>/{pp,xp,map,truth,soi}.png,
/// landmarks.json, transform_gt.json.
void write_corpus(const std::filesystem::path& dir, const CorpusRecipe& recipe);

}  // namespace thinseg
