#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "thinseg/dataset.hpp"
#include "thinseg/raster.hpp"
#include "thinseg/registration.hpp"

namespace thinseg {

/// Files of one section in a corpus directory (as written by write_corpus).
struct CorpusSection {
  std::string id;
  int width = 0;
  int height = 0;
  int map_width = 0;
  int map_height = 0;
  std::filesystem::path pp, xp, map, truth, soi, landmarks, transform_gt;
};

struct Corpus {
  std::filesystem::path dir;
  double image_scale_um = 1.0;
  double map_scale_um = 1.0;
  ClassRegistry registry;
  std::vector<CorpusSection> sections;

  static Corpus load(const std::filesystem::path& dir);
  const CorpusSection& find(const std::string& id) const;
};

enum class TransformSource { Landmarks, Groundtruth };

struct PrepareOptions {
  int chunk = 1000;
  double min_coverage = 0.70;
  TransformModel model = TransformModel::Similarity;
  TransformSource source = TransformSource::Landmarks;
  bool use_truth = false;    // label from the full-resolution truth map instead of the registered map
  bool materialize = false;  // also write every chunk to disk
  int keep_phases = 5;
};

/// Map-to-image transform of a section from its landmarks or its groundtruth file.
AffineTransform2D section_transform(const CorpusSection& s, const PrepareOptions& opt);

/// Registers every section's map onto its image grid, consolidates phases
/// into classes over the whole corpus, writes the class maps and the class
/// registry under out_dir, and plans the chunks. The manifest has no split yet.
DatasetManifest prepare_dataset(const Corpus& corpus, const std::filesystem::path& out_dir, const PrepareOptions& opt);

}  // namespace thinseg
