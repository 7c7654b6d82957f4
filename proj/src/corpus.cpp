#include "thinseg/corpus.hpp"

#include <fstream>

#include "thinseg/image_io.hpp"

namespace thinseg {

Corpus Corpus::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.json");
  if (!in) throw Error("no corpus.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("corpus.json: " + std::string(e.what()));
  }
  Corpus c;
  c.dir = dir;
  c.image_scale_um = j.at("image_scale_um").get<double>();
  c.map_scale_um = j.at("map_scale_um").get<double>();
  c.registry = ClassRegistry::load(dir / j.value("registry", std::string("registry.json")));
  for (const auto& s : j.at("sections")) {
    CorpusSection cs;
    cs.id = s.at("id").get<std::string>();
    cs.width = s.at("width").get<int>();
    cs.height = s.at("height").get<int>();
    cs.map_width = s.at("map_width").get<int>();
    cs.map_height = s.at("map_height").get<int>();
    auto path = [&](const char* key) {
      return s.contains(key) ? dir / s[key].get<std::string>() : std::filesystem::path();
    };
    cs.pp = path("pp");
    cs.xp = path("xp");
    cs.map = path("map");
    cs.truth = path("truth");
    cs.soi = path("soi");
    cs.landmarks = path("landmarks");
    cs.transform_gt = path("transform_gt");
    c.sections.push_back(cs);
  }
  return c;
}

const CorpusSection& Corpus::find(const std::string& id) const {
  for (const auto& s : sections) {
    if (s.id == id) return s;
  }
  throw Error("corpus has no section '" + id + "'");
}

AffineTransform2D section_transform(const CorpusSection& s, const PrepareOptions& opt) {
  if (opt.source == TransformSource::Groundtruth) return load_transform(s.transform_gt);
  const auto pairs = load_landmarks(s.landmarks);
  return solve(pairs, opt.model).transform;
}

DatasetManifest prepare_dataset(const Corpus& corpus, const std::filesystem::path& out_dir, const PrepareOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "labels");
  const PixelScale image_scale(corpus.image_scale_um);

  std::vector<LabelMap> maps;
  std::vector<SOIMask> sois;
  for (const auto& s : corpus.sections) {
    SOIMask soi = read_soi_png(s.soi, image_scale);
    if (opt.use_truth) {
      maps.push_back(read_indexed_png(s.truth, image_scale));
    } else {
      const LabelMap map = read_indexed_png(s.map, PixelScale(corpus.map_scale_um));
      maps.push_back(warp_labelmap(map, section_transform(s, opt), soi.width, soi.height, image_scale));
    }
    sois.push_back(std::move(soi));
  }
  const ClassRegistry registry = build_consolidation(corpus.registry, phase_frequencies(maps, sois), opt.keep_phases);
  const ClassRegistry classes = registry.class_registry();
  DatasetManifest m;
  m.registry = out_dir / "registry.json";
  classes.save(m.registry);
  registry.save(out_dir / "phase_registry.json");
  m.chunk_size = opt.chunk;
  m.min_coverage = opt.min_coverage;
  const auto palette = registry.class_palette();

  for (std::size_t i = 0; i < corpus.sections.size(); ++i) {
    const auto& s = corpus.sections[i];
    LabelMap labels = apply_consolidation(maps[i], registry);
    for (std::size_t p = 0; p < labels.pixel_count(); ++p) {
      if (sois[i].mask[p] == 0) labels.values[p] = kSentinel;
    }
    const fs::path lp = out_dir / "labels" / (s.id + ".png");
    write_atomic(lp, [&](const fs::path& t) { write_indexed_png(t, labels, palette); });
    m.sections.push_back({s.id, s.pp, s.xp, lp, s.soi, corpus.image_scale_um});
    auto planned = plan_chunks(s.id, sois[i], &labels, opt.chunk, opt.min_coverage);
    if (opt.materialize && !planned.empty()) {
      ThinSection t;
      t.id = s.id;
      t.pp = load_raster(s.pp, image_scale);
      t.xp = load_raster(s.xp, image_scale);
      t.qemscan = std::move(labels);
      t.soi = sois[i];
      t.validate();
      for (auto& d : planned) materialize_chunk(extract_chunk(t, d), out_dir / "chunks", d);
    }
    m.chunks.insert(m.chunks.end(), planned.begin(), planned.end());
  }
  m.train_ids.resize(m.chunks.size());
  for (std::size_t i = 0; i < m.chunks.size(); ++i) m.train_ids[i] = static_cast<int>(i);
  return m;
}

}  // namespace thinseg
