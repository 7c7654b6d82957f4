#include "thinseg/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "thinseg/image_io.hpp"

namespace thinseg {

PixelScale::PixelScale(double microns_per_pixel) : um_(microns_per_pixel) {
  if (!std::isfinite(um_) || um_ <= 0.0) {
    throw Error("pixel scale must be positive and finite");
  }
}

Raster::Raster(int w, int h, int b, PixelScale s, float fill)
    : width(w), height(h), bands(b), data(static_cast<std::size_t>(w) * h * b, fill), scale(s) {
  if (w < 0 || h < 0 || (b != 1 && b != 3 && b != 6)) {
    throw Error("raster must have non-negative size and 1, 3 or 6 bands");
  }
}

LabelMap::LabelMap(int w, int h, PixelScale s, std::uint8_t fill)
    : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill), scale(s) {}

SOIMask::SOIMask(int w, int h, PixelScale s, bool fill)
    : width(w), height(h), mask(static_cast<std::size_t>(w) * h, fill ? 1 : 0), scale(s) {}

std::size_t SOIMask::count() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

// ---------------------------------------------------------------------------
// ClassRegistry

ClassRegistry::ClassRegistry(std::vector<PhaseEntry> entries) : entries_(std::move(entries)) {
  std::set<int> ids;
  std::set<Rgb> colors;
  for (const auto& e : entries_) {
    if (e.id < 0 || e.id >= kSentinel) {
      throw Error("phase id " + std::to_string(e.id) + " outside [0, 254]");
    }
    if (!ids.insert(e.id).second) {
      throw Error("duplicate phase id " + std::to_string(e.id));
    }
    if (!colors.insert(e.color).second) {
      throw Error("duplicate palette color for phase '" + e.name + "'");
    }
  }
  std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  int max_class = -1;
  bool all = !entries_.empty();
  for (const auto& e : entries_) {
    if (e.consolidated) {
      max_class = std::max(max_class, *e.consolidated);
    } else {
      all = false;
    }
  }
  num_classes_ = all ? max_class + 1 : 0;
}

const PhaseEntry* ClassRegistry::find(int id) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                             [](const PhaseEntry& e, int v) { return e.id < v; });
  return (it != entries_.end() && it->id == id) ? &*it : nullptr;
}

const PhaseEntry* ClassRegistry::find_color(const Rgb& color) const {
  for (const auto& e : entries_) {
    if (e.color == color) return &e;
  }
  return nullptr;
}

const PhaseEntry* ClassRegistry::find_name(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

bool ClassRegistry::has_consolidation() const { return num_classes_ > 0; }

int ClassRegistry::class_of(int phase_id) const {
  const PhaseEntry* e = find(phase_id);
  if (e == nullptr) {
    throw Error("phase id " + std::to_string(phase_id) + " not in registry");
  }
  if (!e->consolidated) {
    throw Error("registry has no consolidation table");
  }
  return *e->consolidated;
}

void ClassRegistry::set_consolidation(const std::map<int, int>& table, int num_classes) {
  for (auto& e : entries_) {
    auto it = table.find(e.id);
    if (it == table.end()) {
      throw Error("consolidation table misses phase " + std::to_string(e.id));
    }
    e.consolidated = it->second;
  }
  num_classes_ = num_classes;
}

std::vector<std::string> ClassRegistry::class_names() const {
  if (!has_consolidation()) throw Error("registry has no consolidation table");
  std::vector<std::string> names(num_classes_, "Others");
  for (const auto& e : entries_) {
    int c = *e.consolidated;
    if (c < num_classes_ - 1) names[c] = e.name;
  }
  return names;
}

std::vector<Rgb> ClassRegistry::class_palette() const {
  if (!has_consolidation()) throw Error("registry has no consolidation table");
  const Rgb white{255, 255, 255};
  std::vector<Rgb> palette(num_classes_, white);
  std::set<Rgb> used{white};
  const int others = num_classes_ - 1;
  for (const auto& e : entries_) {
    int c = *e.consolidated;
    if (c < others) {
      palette[c] = e.color;
      used.insert(e.color);
    }
  }
  std::vector<Rgb> candidates;
  if (const auto* o = find_name("Others"); o != nullptr && *o->consolidated == others) {
    candidates.push_back(o->color);
  }
  for (const auto& e : entries_) {
    if (*e.consolidated == others) candidates.push_back(e.color);
  }
  for (int g = 128; g >= 0; g -= 16) {
    candidates.push_back({static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(g)});
  }
  for (const auto& c : candidates) {
    if (!used.contains(c)) {
      palette[others] = c;
      break;
    }
  }
  return palette;
}

ClassRegistry ClassRegistry::class_registry() const {
  auto names = class_names();
  auto palette = class_palette();
  std::vector<PhaseEntry> out;
  for (int c = 0; c < num_classes_; ++c) {
    out.push_back({c, names[c], palette[c], c});
  }
  return ClassRegistry(std::move(out));
}

nlohmann::json ClassRegistry::to_json() const {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json j{{"id", e.id}, {"name", e.name}, {"color", {e.color[0], e.color[1], e.color[2]}}};
    if (e.consolidated) j["consolidated"] = *e.consolidated;
    phases.push_back(std::move(j));
  }
  return nlohmann::json{{"phases", std::move(phases)}};
}

ClassRegistry ClassRegistry::from_json(const nlohmann::json& j) {
  const nlohmann::json& list = j.is_array() ? j : j.at("phases");
  std::vector<PhaseEntry> entries;
  for (const auto& p : list) {
    PhaseEntry e;
    e.id = p.at("id").get<int>();
    e.name = p.at("name").get<std::string>();
    const auto& c = p.at("color");
    if (!c.is_array() || c.size() != 3) throw Error("phase color must be [r,g,b]");
    for (int i = 0; i < 3; ++i) {
      int v = c[i].get<int>();
      if (v < 0 || v > 255) throw Error("phase color component out of range");
      e.color[i] = static_cast<std::uint8_t>(v);
    }
    if (p.contains("consolidated") && !p["consolidated"].is_null()) {
      e.consolidated = p["consolidated"].get<int>();
    }
    entries.push_back(std::move(e));
  }
  return ClassRegistry(std::move(entries));
}

ClassRegistry ClassRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open registry " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed registry " + path.string() + ": " + e.what());
  }
}

void ClassRegistry::save(const std::filesystem::path& path) const {
  write_text_atomic(path, to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Operations

PhysicalSize physical_size(int width, int height, PixelScale scale) {
  return {width * scale.microns_per_pixel() / 1000.0, height * scale.microns_per_pixel() / 1000.0};
}

PhysicalSize physical_size(const Raster& r) { return physical_size(r.width, r.height, r.scale); }

PhysicalSize physical_size(const LabelMap& m) { return physical_size(m.width, m.height, m.scale); }

namespace {

Rgb quantize(const Raster& image, std::size_t pixel) {
  Rgb c;
  for (int b = 0; b < 3; ++b) {
    float v = std::clamp(image.data[pixel * 3 + b], 0.0f, 1.0f);
    c[b] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return c;
}

}  // namespace

LabelMap decode_labelmap(const Raster& image, const ClassRegistry& registry, int tolerance) {
  if (image.bands != 3) throw Error("palette decoding needs a 3-band image");
  LabelMap out(image.width, image.height, image.scale);
  std::map<Rgb, int> exact;
  for (const auto& e : registry.entries()) exact.emplace(e.color, e.id);

  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    Rgb c = quantize(image, i);
    auto it = exact.find(c);
    int id = -1;
    if (it != exact.end()) {
      id = it->second;
    } else if (tolerance > 0) {
      int best = tolerance + 1;
      for (const auto& e : registry.entries()) {
        int d = 0;
        for (int b = 0; b < 3; ++b) d = std::max(d, std::abs(int(e.color[b]) - int(c[b])));
        if (d < best) {
          best = d;
          id = e.id;
        }
      }
    }
    if (id < 0) {
      std::ostringstream msg;
      msg << "color (" << int(c[0]) << "," << int(c[1]) << "," << int(c[2]) << ") at row "
          << i / image.width << ", col " << i % image.width << " is not in the registry";
      throw Error(msg.str());
    }
    out.values[i] = static_cast<std::uint8_t>(id);
  }
  return out;
}

PhaseHistogram phase_frequencies(std::span<const LabelMap> maps, std::span<const SOIMask> sois) {
  if (maps.size() != sois.size()) throw Error("phase_frequencies: map and SOI lists differ in length");
  PhaseHistogram hist;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    const auto& s = sois[k];
    if (m.width != s.width || m.height != s.height) {
      throw Error("phase_frequencies: map " + std::to_string(k) + " and its SOI differ in size");
    }
    std::array<std::int64_t, 256> counts{};
    for (std::size_t i = 0; i < m.pixel_count(); ++i) {
      if (s.mask[i] != 0) ++counts[m.values[i]];
    }
    for (int v = 0; v < kSentinel; ++v) {
      if (counts[v] != 0) hist[v] += counts[v];
    }
  }
  return hist;
}

ClassRegistry build_consolidation(ClassRegistry registry, const PhaseHistogram& freq, int keep) {
  if (freq.empty()) throw Error("build_consolidation: empty histogram");
  if (keep < 1) throw Error("build_consolidation: keep must be >= 1");

  std::vector<std::pair<int, std::int64_t>> ranked;
  for (const auto& e : registry.entries()) {
    auto it = freq.find(e.id);
    ranked.emplace_back(e.id, it == freq.end() ? 0 : it->second);
  }
  for (const auto& [id, n] : freq) {
    if (registry.find(id) == nullptr) {
      throw Error("build_consolidation: phase " + std::to_string(id) + " not in registry");
    }
  }
  // A phase literally named "Others" always lands in the Others class.
  const PhaseEntry* others_phase = registry.find_name("Others");
  std::erase_if(ranked, [&](const auto& p) { return others_phase != nullptr && p.first == others_phase->id; });
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  std::map<int, int> table;
  for (const auto& e : registry.entries()) table[e.id] = keep;
  for (int r = 0; r < keep && r < static_cast<int>(ranked.size()); ++r) {
    if (ranked[r].second > 0) table[ranked[r].first] = r;
  }
  registry.set_consolidation(table, keep + 1);
  return registry;
}

LabelMap apply_consolidation(const LabelMap& map, const ClassRegistry& registry) {
  if (map.consolidated) return map;
  if (!registry.has_consolidation()) throw Error("registry has no consolidation table");
  std::array<std::uint8_t, 256> lut;
  lut.fill(kSentinel);
  for (const auto& e : registry.entries()) lut[e.id] = static_cast<std::uint8_t>(*e.consolidated);
  LabelMap out = map;
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    std::uint8_t v = map.values[i];
    if (v == kSentinel) continue;
    if (registry.find(v) == nullptr) {
      throw Error("label " + std::to_string(v) + " not in registry");
    }
    out.values[i] = lut[v];
  }
  out.consolidated = true;
  return out;
}

Raster stack_pp_xp(const Raster& pp, const Raster& xp) {
  if (pp.bands != 3 || xp.bands != 3) throw Error("stack_pp_xp: both inputs must have 3 bands");
  if (pp.width != xp.width || pp.height != xp.height) throw Error("stack_pp_xp: dimension mismatch");
  if (!(pp.scale == xp.scale)) throw Error("stack_pp_xp: scale mismatch");
  Raster out(pp.width, pp.height, 6, pp.scale);
  for (std::size_t i = 0; i < pp.pixel_count(); ++i) {
    for (int b = 0; b < 3; ++b) {
      out.data[i * 6 + b] = pp.data[i * 3 + b];
      out.data[i * 6 + 3 + b] = xp.data[i * 3 + b];
    }
  }
  return out;
}

}  // namespace thinseg
