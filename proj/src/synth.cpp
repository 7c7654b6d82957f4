#include "thinseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "thinseg/image_io.hpp"

namespace thinseg {

ClassRegistry synth_registry() {
  return ClassRegistry({{0, "Calcite", {0, 255, 255}, std::nullopt},
                        {1, "Dolomite", {0, 0, 255}, std::nullopt},
                        {2, "Mg-Clay Minerals", {0, 160, 0}, std::nullopt},
                        {3, "Quartz", {255, 255, 0}, std::nullopt},
                        {4, "Pores", {0, 0, 0}, std::nullopt},
                        {5, "Others", {160, 160, 160}, std::nullopt},
                        {6, "Pyrite", {255, 128, 0}, std::nullopt},
                        {7, "Carbon Rich Material", {255, 0, 255}, std::nullopt}});
}

std::vector<PhaseStyle> synth_styles(double noise) {
  return {{{225, 215, 200}, {200, 170, 230}, noise}, {{195, 185, 165}, {120, 200, 150}, noise},
          {{150, 170, 110}, {90, 110, 60}, noise},   {{240, 240, 235}, {45, 45, 70}, noise},
          {{60, 110, 200}, {15, 15, 20}, noise},     {{110, 80, 60}, {160, 60, 60}, noise},
          {{30, 30, 30}, {30, 30, 30}, noise},       {{70, 50, 40}, {60, 40, 120}, noise}};
}

LabelMap gen_phase_map(std::uint64_t seed, int width, int height, std::span<const double> weights,
                       double granularity, PixelScale scale) {
  if (width <= 0 || height <= 0) throw Error("gen_phase_map: size must be positive");
  if (!(granularity >= 1.0)) throw Error("gen_phase_map: granularity must be at least one pixel");
  if (weights.empty() || weights.size() > kSentinel) throw Error("gen_phase_map: need 1..255 weights");
  double wsum = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("gen_phase_map: weights must be non-negative");
    wsum += w;
  }
  if (wsum <= 0) throw Error("gen_phase_map: weights sum to zero");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double g = granularity;
  const int gx = static_cast<int>(std::ceil(width / g)) + 1;
  const int gy = static_cast<int>(std::ceil(height / g)) + 1;
  std::vector<double> sx(static_cast<std::size_t>(gx) * gy), sy(sx.size());
  for (int j = 0; j < gy; ++j) {
    for (int i = 0; i < gx; ++i) {
      sx[j * gx + i] = (i + unit(rng)) * g;
      sy[j * gx + i] = (j + unit(rng)) * g;
    }
  }

  std::vector<std::int32_t> owner(static_cast<std::size_t>(width) * height);
  std::vector<std::int64_t> area(sx.size(), 0);
  for (int y = 0; y < height; ++y) {
    const double py = y + 0.5;
    const int cj = static_cast<int>(py / g);
    for (int x = 0; x < width; ++x) {
      const double px = x + 0.5;
      const int ci = static_cast<int>(px / g);
      int best = -1;
      double bd = 0;
      for (int j = std::max(0, cj - 2); j <= std::min(gy - 1, cj + 2); ++j) {
        for (int i = std::max(0, ci - 2); i <= std::min(gx - 1, ci + 2); ++i) {
          const int k = j * gx + i;
          const double dx = sx[k] - px, dy = sy[k] - py;
          const double d = dx * dx + dy * dy;
          if (best < 0 || d < bd) {
            best = k;
            bd = d;
          }
        }
      }
      owner[static_cast<std::size_t>(y) * width + x] = best;
      ++area[best];
    }
  }

  std::vector<int> order;
  for (std::size_t k = 0; k < area.size(); ++k) {
    if (area[k] > 0) order.push_back(static_cast<int>(k));
  }
  std::shuffle(order.begin(), order.end(), rng);
  const double total = static_cast<double>(width) * height;
  std::vector<double> assigned(weights.size(), 0.0);
  std::vector<std::uint8_t> cls(sx.size(), 0);
  for (int k : order) {
    int pick = -1;
    double deficit = 0;
    for (std::size_t c = 0; c < weights.size(); ++c) {
      if (weights[c] <= 0) continue;
      const double d = weights[c] / wsum * total - assigned[c];
      if (pick < 0 || d > deficit) {
        pick = static_cast<int>(c);
        deficit = d;
      }
    }
    cls[k] = static_cast<std::uint8_t>(pick);
    assigned[pick] += static_cast<double>(area[k]);
  }

  LabelMap out(width, height, scale);
  for (std::size_t i = 0; i < owner.size(); ++i) out.values[i] = cls[owner[i]];
  return out;
}

std::pair<Raster, Raster> render_pp_xp(const LabelMap& map, std::span<const PhaseStyle> styles, std::uint64_t seed) {
  Raster pp(map.width, map.height, 3, map.scale), xp(map.width, map.height, 3, map.scale);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    const std::uint8_t v = map.values[i];
    if (v == kSentinel) {
      for (int b = 0; b < 3; ++b) pp.data[i * 3 + b] = xp.data[i * 3 + b] = 0.0f;
      continue;
    }
    if (v >= styles.size()) throw Error("render_pp_xp: no style for value " + std::to_string(v));
    const PhaseStyle& s = styles[v];
    for (int b = 0; b < 3; ++b) {
      const double n = s.noise > 0 ? s.noise * gauss(rng) : 0.0;
      pp.data[i * 3 + b] = static_cast<float>(std::clamp(s.pp[b] / 255.0 + n, 0.0, 1.0));
    }
    for (int b = 0; b < 3; ++b) {
      const double n = s.noise > 0 ? s.noise * gauss(rng) : 0.0;
      xp.data[i * 3 + b] = static_cast<float>(std::clamp(s.xp[b] / 255.0 + n, 0.0, 1.0));
    }
  }
  return {std::move(pp), std::move(xp)};
}

LabelMap degrade_to_sampling_grid(const LabelMap& map, int factor) {
  if (factor < 1) throw Error("sampling factor must be at least 1");
  const int w = (map.width + factor - 1) / factor, h = (map.height + factor - 1) / factor;
  LabelMap out(w, h, PixelScale(map.scale.microns_per_pixel() * factor));
  out.consolidated = map.consolidated;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) out.at(r, c) = map.at(r * factor, c * factor);
  }
  return out;
}

LabelMap perturb_registration(const LabelMap& map, const AffineTransform2D& t) {
  LabelMap out = warp_labelmap(map, t, map.width, map.height, map.scale);
  out.consolidated = map.consolidated;
  return out;
}

SOIMask superellipse_soi(int width, int height, double semi_x, double semi_y, double exponent, PixelScale scale) {
  if (!(semi_x > 0 && semi_y > 0 && exponent > 0)) throw Error("superellipse parameters must be positive");
  SOIMask soi(width, height, scale);
  for (int r = 0; r < height; ++r) {
    const double y = std::abs((r + 0.5 - height / 2.0) / semi_y);
    for (int c = 0; c < width; ++c) {
      const double x = std::abs((c + 0.5 - width / 2.0) / semi_x);
      soi.set(r, c, std::pow(x, exponent) + std::pow(y, exponent) <= 1.0);
    }
  }
  return soi;
}

SynthSection generate_section(const CorpusRecipe& recipe, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(recipe.seed), static_cast<std::uint32_t>(recipe.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthSection s;
  char id[16];
  std::snprintf(id, sizeof id, "S%02d", index + 1);
  s.id = id;

  const std::vector<double> base{0.30, 0.22, 0.15, 0.12, 0.09, 0.04, 0.04, 0.04};
  double sum = 0;
  for (double b : base) {
    s.phase_weights.push_back(b * std::exp(0.35 * gauss(rng)));
    sum += s.phase_weights.back();
  }
  for (auto& w : s.phase_weights) w /= sum;
  s.granularity = recipe.granularity_min + (recipe.granularity_max - recipe.granularity_min) * unit(rng);

  const PixelScale image_scale(recipe.image_scale_um);
  const PixelScale map_scale(recipe.image_scale_um * recipe.map_factor);
  s.truth = gen_phase_map(rng(), recipe.size, recipe.size, s.phase_weights, s.granularity, image_scale);
  auto [pp, xp] = render_pp_xp(s.truth, synth_styles(recipe.noise), rng());
  s.pp = std::move(pp);
  s.xp = std::move(xp);

  const double theta = (2 * unit(rng) - 1) * recipe.max_rotation_deg * std::numbers::pi / 180.0;
  const double scale = 1.0 + (2 * unit(rng) - 1) * recipe.max_scale_dev;
  const double map_half = recipe.map_size * map_scale.microns_per_pixel() / 2.0;
  const double image_half = recipe.size * image_scale.microns_per_pixel() / 2.0;
  const double shx = (2 * unit(rng) - 1) * recipe.max_shift_um, shy = (2 * unit(rng) - 1) * recipe.max_shift_um;
  const auto rot = AffineTransform2D::similarity(theta, scale, 0, 0);
  const Point2 mc = rot.apply({map_half, map_half});
  s.transform_gt = AffineTransform2D::similarity(theta, scale, image_half - mc.x + shx, image_half - mc.y + shy);
  s.map = warp_labelmap(s.truth, invert(s.transform_gt), recipe.map_size, recipe.map_size, map_scale);

  s.soi = superellipse_soi(recipe.size, recipe.size, recipe.soi_extent / 2.0, recipe.soi_extent / 2.0,
                           recipe.soi_exponent, image_scale);
  for (int h = 0; h < recipe.soi_holes; ++h) {
    const double radius = 15 + 25 * unit(rng);
    const double cx = recipe.size * (0.25 + 0.5 * unit(rng)), cy = recipe.size * (0.25 + 0.5 * unit(rng));
    for (int r = std::max(0, static_cast<int>(cy - radius)); r < std::min(recipe.size, static_cast<int>(cy + radius) + 1); ++r) {
      for (int c = std::max(0, static_cast<int>(cx - radius)); c < std::min(recipe.size, static_cast<int>(cx + radius) + 1); ++c) {
        const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
        if (dx * dx + dy * dy <= radius * radius) s.soi.set(r, c, false);
      }
    }
  }

  const double extent = 2 * map_half;
  for (int k = 0; k < recipe.landmarks; ++k) {
    LandmarkPair p;
    p.moving = {extent * (0.15 + 0.7 * unit(rng)), extent * (0.15 + 0.7 * unit(rng))};
    p.fixed = s.transform_gt.apply(p.moving);
    s.landmarks.push_back(p);
  }
  return s;
}

void write_corpus(const std::filesystem::path& dir, const CorpusRecipe& recipe) {
  if (recipe.sections < 1) throw Error("corpus needs at least one section");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "sections");
  const ClassRegistry registry = synth_registry();
  registry.save(dir / "registry.json");
  std::vector<Rgb> palette(kSentinel, Rgb{255, 255, 255});
  for (const auto& e : registry.entries()) palette[e.id] = e.color;

  nlohmann::json corpus;
  corpus["registry"] = "registry.json";
  corpus["image_scale_um"] = recipe.image_scale_um;
  corpus["map_scale_um"] = recipe.image_scale_um * recipe.map_factor;
  corpus["recipe"] = {{"sections", recipe.sections},
                      {"size", recipe.size},
                      {"map_factor", recipe.map_factor},
                      {"map_size", recipe.map_size},
                      {"seed", recipe.seed},
                      {"noise", recipe.noise}};
  corpus["sections"] = nlohmann::json::array();
  for (int i = 0; i < recipe.sections; ++i) {
    const SynthSection s = generate_section(recipe, i);
    const fs::path sd = dir / "sections" / s.id;
    fs::create_directories(sd);
    write_atomic(sd / "pp.png", [&](const fs::path& p) { write_png(p, s.pp); });
    write_atomic(sd / "xp.png", [&](const fs::path& p) { write_png(p, s.xp); });
    write_atomic(sd / "map.png", [&](const fs::path& p) { write_indexed_png(p, s.map, palette); });
    write_atomic(sd / "truth.png", [&](const fs::path& p) { write_indexed_png(p, s.truth, palette); });
    write_atomic(sd / "soi.png", [&](const fs::path& p) { write_soi_png(p, s.soi); });
    write_text_atomic(sd / "landmarks.json", landmarks_to_json(s.landmarks).dump(2) + "\n");
    write_text_atomic(sd / "transform_gt.json", s.transform_gt.to_json().dump(2) + "\n");
    const std::string rel = "sections/" + s.id + "/";
    corpus["sections"].push_back({{"id", s.id},
                                  {"width", s.pp.width},
                                  {"height", s.pp.height},
                                  {"map_width", s.map.width},
                                  {"map_height", s.map.height},
                                  {"pp", rel + "pp.png"},
                                  {"xp", rel + "xp.png"},
                                  {"map", rel + "map.png"},
                                  {"truth", rel + "truth.png"},
                                  {"soi", rel + "soi.png"},
                                  {"landmarks", rel + "landmarks.json"},
                                  {"transform_gt", rel + "transform_gt.json"},
                                  {"phase_weights", s.phase_weights},
                                  {"granularity_px", s.granularity}});
  }
  write_text_atomic(dir / "corpus.json", corpus.dump(2) + "\n");
}

}  // namespace thinseg
