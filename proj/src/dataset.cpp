#include "thinseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "thinseg/image_io.hpp"

namespace thinseg {

void ThinSection::validate() const {
  auto same = [&](int w, int h, const PixelScale& s, const char* what) {
    if (w != pp.width || h != pp.height) {
      throw Error("section " + id + ": " + what + " is " + std::to_string(w) + "x" + std::to_string(h) +
                  ", PP is " + std::to_string(pp.width) + "x" + std::to_string(pp.height));
    }
    if (std::abs(s.microns_per_pixel() - pp.scale.microns_per_pixel()) > 1e-9) {
      throw Error("section " + id + ": " + what + " scale differs from PP");
    }
  };
  if (pp.bands != 3 || xp.bands != 3) throw Error("section " + id + ": PP and XP must be RGB");
  same(xp.width, xp.height, xp.scale, "XP");
  same(qemscan.width, qemscan.height, qemscan.scale, "label map");
  same(soi.width, soi.height, soi.scale, "SOI");
}

Rect soi_bbox_center_crop(const SOIMask& soi, int chunk) {
  if (chunk <= 0) throw Error("chunk size must be positive");
  int r0 = soi.height, r1 = -1, c0 = soi.width, c1 = -1;
  for (int r = 0; r < soi.height; ++r) {
    const std::uint8_t* row = soi.mask.data() + static_cast<std::size_t>(r) * soi.width;
    for (int c = 0; c < soi.width; ++c) {
      if (row[c] == 0) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (r1 < 0) throw Error("SOI is empty");
  const int bh = r1 - r0 + 1, bw = c1 - c0 + 1;
  const int h = bh / chunk * chunk, w = bw / chunk * chunk;
  if (h == 0 || w == 0) return {};
  return {r0 + (bh - h) / 2, c0 + (bw - w) / 2, h, w};
}

nlohmann::json ChunkDescriptor::to_json() const {
  nlohmann::json j{{"section", section_id},     {"row", row},
                   {"col", col},                {"size", size},
                   {"coverage", coverage},      {"index", column_major_index},
                   {"class_counts", class_counts}};
  if (pp_file) j["files"] = {{"pp", *pp_file}, {"xp", *xp_file}, {"labels", *labels_file}, {"soi", *soi_file}};
  return j;
}

ChunkDescriptor ChunkDescriptor::from_json(const nlohmann::json& j) {
  ChunkDescriptor d;
  d.section_id = j.at("section").get<std::string>();
  d.row = j.at("row").get<int>();
  d.col = j.at("col").get<int>();
  d.size = j.at("size").get<int>();
  d.coverage = j.at("coverage").get<double>();
  d.column_major_index = j.at("index").get<int>();
  if (j.contains("class_counts")) d.class_counts = j["class_counts"].get<ClassCounts>();
  if (j.contains("files")) {
    d.pp_file = j["files"].at("pp").get<std::string>();
    d.xp_file = j["files"].at("xp").get<std::string>();
    d.labels_file = j["files"].at("labels").get<std::string>();
    d.soi_file = j["files"].at("soi").get<std::string>();
  }
  return d;
}

PackedChunk PackedChunk::pack(const Chunk& c) {
  PackedChunk p;
  p.info = c.info;
  p.width = c.image.width;
  p.height = c.image.height;
  p.scale_um = c.image.scale.microns_per_pixel();
  p.image.resize(c.image.data.size());
  std::transform(c.image.data.begin(), c.image.data.end(), p.image.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });
  p.labels = c.labels.values;
  p.soi = c.soi.mask;
  return p;
}

Chunk PackedChunk::unpack() const {
  const PixelScale s(scale_um);
  Chunk c;
  c.info = info;
  c.image = Raster(width, height, 6, s);
  std::transform(image.begin(), image.end(), c.image.data.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
  c.labels = LabelMap(width, height, s);
  c.labels.values = labels;
  c.labels.consolidated = true;
  c.soi = SOIMask(width, height, s);
  c.soi.mask = soi;
  return c;
}

std::vector<ChunkDescriptor> plan_chunks(const std::string& section_id, const SOIMask& soi, const LabelMap* labels,
                                         int chunk, double min_coverage) {
  if (labels != nullptr && (labels->width != soi.width || labels->height != soi.height)) {
    throw Error("plan_chunks: label map and SOI sizes differ");
  }
  const Rect crop = soi_bbox_center_crop(soi, chunk);
  std::vector<ChunkDescriptor> out;
  if (crop.empty()) return out;
  const double area = static_cast<double>(chunk) * chunk;
  const bool count_classes = labels != nullptr && labels->consolidated;
  int index = 0;
  for (int cj = 0; cj < crop.width / chunk; ++cj) {
    for (int ci = 0; ci < crop.height / chunk; ++ci) {
      ChunkDescriptor d;
      d.section_id = section_id;
      d.row = crop.row + ci * chunk;
      d.col = crop.col + cj * chunk;
      d.size = chunk;
      std::int64_t covered = 0;
      for (int r = d.row; r < d.row + chunk; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * soi.width + d.col;
        for (int c = 0; c < chunk; ++c) {
          if (soi.mask[base + c] == 0) continue;
          ++covered;
          if (count_classes) {
            const std::uint8_t v = labels->values[base + c];
            if (v < kNumClasses) ++d.class_counts[v];
          }
        }
      }
      if (static_cast<double>(covered) < min_coverage * area - 1e-9) continue;
      d.coverage = static_cast<double>(covered) / area;
      d.column_major_index = index++;
      out.push_back(d);
    }
  }
  return out;
}

Chunk extract_chunk(const ThinSection& s, const ChunkDescriptor& d) {
  if (d.row < 0 || d.col < 0 || d.row + d.size > s.pp.height || d.col + d.size > s.pp.width) {
    throw Error("chunk at (" + std::to_string(d.row) + ", " + std::to_string(d.col) + ") lies outside section " +
                s.id);
  }
  const int n = d.size;
  Chunk c;
  c.info = d;
  c.image = Raster(n, n, 6, s.pp.scale);
  c.labels = LabelMap(n, n, s.pp.scale);
  c.labels.consolidated = s.qemscan.consolidated;
  c.soi = SOIMask(n, n, s.pp.scale);
  for (int r = 0; r < n; ++r) {
    for (int col = 0; col < n; ++col) {
      const int sr = d.row + r, sc = d.col + col;
      for (int b = 0; b < 3; ++b) {
        c.image.at(r, col, b) = s.pp.at(sr, sc, b);
        c.image.at(r, col, 3 + b) = s.xp.at(sr, sc, b);
      }
      const bool inside = s.soi.at(sr, sc);
      c.soi.set(r, col, inside);
      c.labels.at(r, col) = inside ? s.qemscan.at(sr, sc) : kSentinel;
    }
  }
  return c;
}

std::vector<Chunk> chunk_section(const ThinSection& s, int chunk, double min_coverage) {
  s.validate();
  std::vector<Chunk> out;
  for (const auto& d : plan_chunks(s.id, s.soi, &s.qemscan, chunk, min_coverage)) out.push_back(extract_chunk(s, d));
  return out;
}

SplitMethod parse_split_method(const std::string& name) {
  if (name == "same") return SplitMethod::Same;
  if (name == "split") return SplitMethod::Split;
  throw Error("unknown split method '" + name + "' (expected same or split)");
}

std::string to_string(SplitMethod m) { return m == SplitMethod::Same ? "same" : "split"; }

void DatasetManifest::check_partition() const {
  std::vector<int> seen(chunks.size(), 0);
  for (const auto* ids : {&train_ids, &val_ids}) {
    for (int i : *ids) {
      if (i < 0 || static_cast<std::size_t>(i) >= chunks.size()) throw Error("manifest references unknown chunk");
      if (seen[i]++) throw Error("chunk " + std::to_string(i) + " appears twice in the split");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw Error("split does not cover every chunk");
}

namespace {

std::string rel(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  return std::filesystem::absolute(p).lexically_proximate(std::filesystem::absolute(base)).generic_string();
}

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  std::filesystem::path q(p);
  return q.is_absolute() ? q : (base / q).lexically_normal();
}

}  // namespace

nlohmann::json DatasetManifest::to_json(const std::filesystem::path& base) const {
  nlohmann::json j;
  j["chunk_size"] = chunk_size;
  j["min_coverage"] = min_coverage;
  j["registry"] = rel(registry, base);
  j["sections"] = nlohmann::json::array();
  for (const auto& s : sections) {
    j["sections"].push_back({{"id", s.id},
                             {"pp", rel(s.pp, base)},
                             {"xp", rel(s.xp, base)},
                             {"labels", rel(s.labels, base)},
                             {"soi", rel(s.soi, base)},
                             {"scale_um", s.scale_um}});
  }
  j["chunks"] = nlohmann::json::array();
  for (auto c : chunks) {
    if (c.pp_file) {
      for (auto* f : {&c.pp_file, &c.xp_file, &c.labels_file, &c.soi_file}) **f = rel(**f, base);
    }
    j["chunks"].push_back(c.to_json());
  }
  j["split"] = {{"method", to_string(split_method)},
                {"val_fraction", val_fraction},
                {"val_sections", val_sections},
                {"train", train_ids},
                {"val", val_ids}};
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  DatasetManifest m;
  m.chunk_size = j.value("chunk_size", 1000);
  m.min_coverage = j.value("min_coverage", 0.70);
  m.registry = resolve(j.value("registry", std::string()), base);
  for (const auto& s : j.at("sections")) {
    SectionSource src;
    src.id = s.at("id").get<std::string>();
    src.pp = resolve(s.at("pp").get<std::string>(), base);
    src.xp = resolve(s.at("xp").get<std::string>(), base);
    src.labels = resolve(s.at("labels").get<std::string>(), base);
    src.soi = resolve(s.at("soi").get<std::string>(), base);
    src.scale_um = s.at("scale_um").get<double>();
    m.sections.push_back(src);
  }
  for (const auto& c : j.at("chunks")) {
    auto d = ChunkDescriptor::from_json(c);
    if (d.pp_file) {
      for (auto* f : {&d.pp_file, &d.xp_file, &d.labels_file, &d.soi_file}) **f = resolve(**f, base).string();
    }
    m.chunks.push_back(std::move(d));
  }
  if (j.contains("split")) {
    const auto& s = j["split"];
    m.split_method = parse_split_method(s.value("method", std::string("same")));
    m.val_fraction = s.value("val_fraction", 0.20);
    m.val_sections = s.value("val_sections", std::vector<std::string>{});
    m.train_ids = s.value("train", std::vector<int>{});
    m.val_ids = s.value("val", std::vector<int>{});
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  write_text_atomic(path, to_json(base).dump(2) + "\n");
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("manifest " + path.string() + ": " + e.what());
  }
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return from_json(j, base);
}

DatasetManifest split_same(DatasetManifest m, double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) throw Error("val_fraction must lie in [0, 1]");
  m.split_method = SplitMethod::Same;
  m.val_fraction = val_fraction;
  m.val_sections.clear();
  m.train_ids.clear();
  m.val_ids.clear();
  std::map<std::string, std::vector<int>> by_section;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < m.chunks.size(); ++i) {
    auto& v = by_section[m.chunks[i].section_id];
    if (v.empty()) order.push_back(m.chunks[i].section_id);
    v.push_back(static_cast<int>(i));
  }
  for (const auto& id : order) {
    auto& ids = by_section[id];
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
      return m.chunks[a].column_major_index < m.chunks[b].column_major_index;
    });
    const int n = static_cast<int>(ids.size());
    const int nval = std::min(n, static_cast<int>(std::ceil(val_fraction * n - 1e-9)));
    for (int k = 0; k < n; ++k) (k < n - nval ? m.train_ids : m.val_ids).push_back(ids[k]);
  }
  return m;
}

DatasetManifest split_by_section(DatasetManifest m, const std::vector<std::string>& val_section_ids) {
  std::set<std::string> known;
  for (const auto& s : m.sections) known.insert(s.id);
  for (const auto& c : m.chunks) known.insert(c.section_id);
  const std::set<std::string> val(val_section_ids.begin(), val_section_ids.end());
  for (const auto& id : val) {
    if (!known.count(id)) throw Error("validation section '" + id + "' is not in the manifest");
  }
  m.split_method = SplitMethod::Split;
  m.val_sections = val_section_ids;
  m.train_ids.clear();
  m.val_ids.clear();
  for (std::size_t i = 0; i < m.chunks.size(); ++i) {
    (val.count(m.chunks[i].section_id) ? m.val_ids : m.train_ids).push_back(static_cast<int>(i));
  }
  return m;
}

SplitDistributionReport compare_split_distributions(const DatasetManifest& m) {
  SplitDistributionReport r;
  auto fractions = [&](const std::vector<int>& ids, std::array<double, kNumClasses>& out) {
    std::array<double, kNumClasses> sum{};
    double total = 0;
    for (int i : ids) {
      for (int c = 0; c < kNumClasses; ++c) {
        sum[c] += static_cast<double>(m.chunks[i].class_counts[c]);
        total += static_cast<double>(m.chunks[i].class_counts[c]);
      }
    }
    for (int c = 0; c < kNumClasses; ++c) out[c] = total > 0 ? sum[c] / total : 0.0;
  };
  fractions(m.train_ids, r.train);
  fractions(m.val_ids, r.val);
  for (int c = 0; c < kNumClasses; ++c) r.max_abs_difference = std::max(r.max_abs_difference, std::abs(r.train[c] - r.val[c]));
  return r;
}

AugmentParams draw_augment(std::mt19937_64& rng, int height, int width, int crop) {
  if (height < crop || width < crop) {
    throw Error("chunk " + std::to_string(width) + "x" + std::to_string(height) + " is smaller than crop " +
                std::to_string(crop));
  }
  AugmentParams p;
  p.row = std::uniform_int_distribution<int>(0, height - crop)(rng);
  p.col = std::uniform_int_distribution<int>(0, width - crop)(rng);
  std::bernoulli_distribution coin(0.5);
  p.flip_horizontal = coin(rng);
  p.flip_vertical = coin(rng);
  p.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  return p;
}

namespace {

// Fills a sample given per-pixel accessors in chunk coordinates.
template <class Image, class Label, class Soi>
Sample augment_impl(int height, int width, const AugmentParams& p, int crop, Image image, Label label, Soi soi) {
  if (crop <= 0 || p.row < 0 || p.col < 0 || p.row + crop > height || p.col + crop > width) {
    throw Error("augmentation window does not fit the chunk");
  }
  const int n = crop;
  Sample s;
  s.size = n;
  s.image.resize(static_cast<std::size_t>(6) * n * n);
  s.labels.resize(static_cast<std::size_t>(n) * n);
  s.soi.resize(static_cast<std::size_t>(n) * n);
  const int turns = ((p.quarter_turns % 4) + 4) % 4;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      int y = r, x = c;
      // Undo the counter-clockwise turns: rot90(a)[i][j] = a[j][n-1-i].
      for (int t = 0; t < turns; ++t) {
        const int ny = x, nx = n - 1 - y;
        y = ny;
        x = nx;
      }
      if (p.flip_vertical) y = n - 1 - y;
      if (p.flip_horizontal) x = n - 1 - x;
      const int sr = p.row + y, sc = p.col + x;
      const std::size_t o = static_cast<std::size_t>(r) * n + c;
      for (int b = 0; b < 6; ++b) s.image[static_cast<std::size_t>(b) * n * n + o] = image(sr, sc, b);
      s.labels[o] = label(sr, sc);
      s.soi[o] = soi(sr, sc);
    }
  }
  return s;
}

}  // namespace

Sample apply_augment(const Chunk& c, const AugmentParams& p, int crop) {
  if (c.image.bands != 6) throw Error("augment expects a 6-band chunk image");
  return augment_impl(
      c.image.height, c.image.width, p, crop, [&](int r, int col, int b) { return c.image.at(r, col, b); },
      [&](int r, int col) { return c.labels.at(r, col); },
      [&](int r, int col) { return static_cast<std::uint8_t>(c.soi.at(r, col) ? 1 : 0); });
}

Sample apply_augment(const PackedChunk& c, const AugmentParams& p, int crop) {
  return augment_impl(
      c.height, c.width, p, crop,
      [&](int r, int col, int b) {
        return static_cast<float>(c.image[(static_cast<std::size_t>(r) * c.width + col) * 6 + b]) / 255.0f;
      },
      [&](int r, int col) { return c.labels[static_cast<std::size_t>(r) * c.width + col]; },
      [&](int r, int col) {
        return static_cast<std::uint8_t>(c.soi[static_cast<std::size_t>(r) * c.width + col] ? 1 : 0);
      });
}

Sample augment(const Chunk& c, std::mt19937_64& rng, int crop) {
  return apply_augment(c, draw_augment(rng, c.image.height, c.image.width, crop), crop);
}

Sample augment(const PackedChunk& c, std::mt19937_64& rng, int crop) {
  return apply_augment(c, draw_augment(rng, c.height, c.width, crop), crop);
}

ThinSection load_section(const SectionSource& src) {
  const PixelScale scale(src.scale_um);
  ThinSection s;
  s.id = src.id;
  s.pp = load_raster(src.pp, scale);
  s.xp = load_raster(src.xp, scale);
  s.qemscan = read_indexed_png(src.labels, scale);
  s.qemscan.consolidated = true;
  s.soi = read_soi_png(src.soi, scale);
  s.validate();
  return s;
}

void materialize_chunk(const Chunk& c, const std::filesystem::path& dir, ChunkDescriptor& d) {
  std::filesystem::create_directories(dir);
  const std::string stem = c.info.section_id + "_" + std::to_string(c.info.column_major_index);
  Raster pp(c.image.width, c.image.height, 3, c.image.scale), xp = pp;
  for (std::size_t i = 0; i < c.image.pixel_count(); ++i) {
    for (int b = 0; b < 3; ++b) {
      pp.data[i * 3 + b] = c.image.data[i * 6 + b];
      xp.data[i * 3 + b] = c.image.data[i * 6 + 3 + b];
    }
  }
  const auto p = dir / (stem + "_pp.png"), x = dir / (stem + "_xp.png");
  const auto l = dir / (stem + "_labels.png"), s = dir / (stem + "_soi.png");
  write_atomic(p, [&](const std::filesystem::path& t) { write_png(t, pp); });
  write_atomic(x, [&](const std::filesystem::path& t) { write_png(t, xp); });
  write_atomic(l, [&](const std::filesystem::path& t) { write_indexed_png(t, c.labels, {}); });
  write_atomic(s, [&](const std::filesystem::path& t) { write_soi_png(t, c.soi); });
  d.pp_file = p.string();
  d.xp_file = x.string();
  d.labels_file = l.string();
  d.soi_file = s.string();
}

std::vector<PackedChunk> load_chunks(const DatasetManifest& m, std::span<const int> ids) {
  std::map<std::string, const SectionSource*> sources;
  for (const auto& s : m.sections) sources[s.id] = &s;
  std::vector<PackedChunk> out(ids.size());
  std::map<std::string, std::vector<std::size_t>> pending;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= m.chunks.size()) throw Error("unknown chunk id");
    const ChunkDescriptor& d = m.chunks[ids[k]];
    if (!d.pp_file) {
      pending[d.section_id].push_back(k);
      continue;
    }
    auto src = sources.find(d.section_id);
    const PixelScale scale(src == sources.end() ? 1.0 : src->second->scale_um);
    ThinSection t;
    t.id = d.section_id;
    t.pp = load_raster(*d.pp_file, scale);
    t.xp = load_raster(*d.xp_file, scale);
    t.qemscan = read_indexed_png(*d.labels_file, scale);
    t.qemscan.consolidated = true;
    t.soi = read_soi_png(*d.soi_file, scale);
    t.validate();
    ChunkDescriptor local = d;
    local.row = local.col = 0;
    auto c = extract_chunk(t, local);
    c.info = d;
    out[k] = PackedChunk::pack(c);
  }
  for (const auto& [id, ks] : pending) {
    auto src = sources.find(id);
    if (src == sources.end()) throw Error("manifest has no section '" + id + "'");
    const ThinSection s = load_section(*src->second);
    for (std::size_t k : ks) out[k] = PackedChunk::pack(extract_chunk(s, m.chunks[ids[k]]));
  }
  return out;
}

}  // namespace thinseg
