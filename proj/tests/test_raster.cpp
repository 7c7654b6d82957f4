#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "thinseg/image_io.hpp"
#include "thinseg/raster.hpp"
#include "thinseg/synth.hpp"
#include "test_util.hpp"

using namespace thinseg;

namespace {

ClassRegistry six_phases() {
  return ClassRegistry({{0, "Calcite", {0, 255, 255}, {}},
                        {1, "Dolomite", {0, 0, 255}, {}},
                        {2, "Quartz", {255, 255, 0}, {}},
                        {3, "Pores", {0, 0, 0}, {}},
                        {4, "Pyrite", {255, 128, 0}, {}},
                        {5, "Others", {160, 160, 160}, {}},
                        {6, "Rutile", {200, 0, 0}, {}}});
}

}  // namespace

TEST(Raster, LoadNormalizesEightBitEndpoints) {
  testutil::TempDir dir;
  Raster r(4, 3, 3, PixelScale(1.0));
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = (i % 2) ? 1.0f : 0.0f;
  write_png(dir / "a.png", r);
  const Raster back = load_raster(dir / "a.png", PixelScale(2.5));
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.bands, 3);
  EXPECT_EQ(back.scale, PixelScale(2.5));
  for (std::size_t i = 0; i < r.data.size(); ++i) EXPECT_EQ(back.data[i], r.data[i]);
}

TEST(Raster, LoadsSixteenBitGray) {
  testutil::TempDir dir;
  std::vector<float> v{0.0f, 1.0f, 0.5f, 0.25f};
  write_png16(dir / "g.png", 2, 2, v);
  const Raster r = load_raster(dir / "g.png", PixelScale(1.0));
  EXPECT_EQ(r.bands, 1);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.data[i], v[i], 1.0 / 65535);
}

TEST(Raster, LoadRejectsMissingAndGarbage) {
  testutil::TempDir dir;
  EXPECT_THROW(load_raster(dir / "none.png", PixelScale(1.0)), Error);
  write_text_atomic(dir / "bad.png", "not an image");
  EXPECT_THROW(load_raster(dir / "bad.png", PixelScale(1.0)), Error);
}

TEST(Raster, SynthRenderingRoundTripsThroughPng) {
  testutil::TempDir dir;
  const std::vector<double> w{0.5, 0.5};
  const LabelMap m = gen_phase_map(3, 10, 10, w, 4.0);
  const auto styles = synth_styles();
  const auto [pp, xp] = render_pp_xp(m, styles, 9);
  write_png(dir / "pp.png", pp);
  const Raster r = load_raster(dir / "pp.png", PixelScale(1.0));
  EXPECT_EQ(r.width, 10);
  EXPECT_EQ(r.height, 10);
  EXPECT_EQ(r.bands, 3);
}

TEST(Raster, PhysicalSize) {
  EXPECT_DOUBLE_EQ(physical_size(2500, 2500, PixelScale(10.0)).width_mm, 25.0);
  EXPECT_DOUBLE_EQ(physical_size(0, 7, PixelScale(3.0)).width_mm, 0.0);
  EXPECT_NEAR(physical_size(18500, 1, PixelScale(1.32)).width_mm, 24.42, 1e-12);
  const auto a = physical_size(100, 40, PixelScale(1.32));
  const auto b = physical_size(300, 120, PixelScale(1.32));
  EXPECT_NEAR(b.width_mm, 3 * a.width_mm, 1e-12);
  EXPECT_NEAR(b.height_mm, 3 * a.height_mm, 1e-12);
  EXPECT_THROW(PixelScale(0.0), Error);
  EXPECT_THROW(PixelScale(-1.0), Error);
}

TEST(Registry, RejectsDuplicateIdsAndColors) {
  EXPECT_THROW(ClassRegistry({{0, "a", {1, 2, 3}, {}}, {0, "b", {4, 5, 6}, {}}}), Error);
  EXPECT_THROW(ClassRegistry({{0, "a", {1, 2, 3}, {}}, {1, "b", {1, 2, 3}, {}}}), Error);
  EXPECT_THROW(ClassRegistry({{255, "a", {1, 2, 3}, {}}}), Error);
}

TEST(Registry, JsonRoundTripKeepsConsolidation) {
  testutil::TempDir dir;
  PhaseHistogram f{{0, 10}, {1, 9}, {2, 8}, {3, 7}, {4, 6}, {6, 5}};
  const ClassRegistry r = build_consolidation(six_phases(), f);
  r.save(dir / "r.json");
  const ClassRegistry back = ClassRegistry::load(dir / "r.json");
  ASSERT_EQ(back.entries().size(), r.entries().size());
  for (std::size_t i = 0; i < r.entries().size(); ++i) {
    EXPECT_EQ(back.entries()[i].id, r.entries()[i].id);
    EXPECT_EQ(back.entries()[i].color, r.entries()[i].color);
    EXPECT_EQ(back.entries()[i].consolidated, r.entries()[i].consolidated);
  }
  EXPECT_EQ(back.num_classes(), kNumClasses);
}

TEST(Decode, SingleColorMap) {
  Raster img(3, 2, 3, PixelScale(10.0));
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    img.data[i * 3] = 0.0f;
    img.data[i * 3 + 1] = 1.0f;
    img.data[i * 3 + 2] = 1.0f;
  }
  const LabelMap m = decode_labelmap(img, six_phases());
  for (auto v : m.values) EXPECT_EQ(v, 0);
  EXPECT_EQ(m.scale, PixelScale(10.0));
}

TEST(Decode, UnknownColorNamesItsLocation) {
  Raster img(3, 2, 3, PixelScale(1.0));
  img.at(1, 2, 0) = 0.5f;
  try {
    decode_labelmap(img, six_phases());
    FAIL() << "expected a decode error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("col 2"), std::string::npos) << msg;
  }
}

TEST(Decode, ToleranceSnapsNearColors) {
  Raster img(1, 1, 3, PixelScale(1.0));
  img.data = {2.0f / 255, 253.0f / 255, 1.0f};
  EXPECT_THROW(decode_labelmap(img, six_phases()), Error);
  EXPECT_EQ(decode_labelmap(img, six_phases(), 2).values[0], 0);
}

TEST(Decode, RenderedPhaseGridRoundTrips) {
  const ClassRegistry reg = synth_registry();
  std::vector<double> w(reg.entries().size(), 1.0);
  const LabelMap m = gen_phase_map(5, 40, 30, w, 6.0);
  Raster img(m.width, m.height, 3, m.scale);
  for (std::size_t i = 0; i < m.pixel_count(); ++i) {
    const Rgb c = reg.find(m.values[i])->color;
    for (int b = 0; b < 3; ++b) img.data[i * 3 + b] = c[b] / 255.0f;
  }
  EXPECT_EQ(decode_labelmap(img, reg).values, m.values);
}

TEST(Frequencies, CountsMaskedPixels) {
  LabelMap m(2, 2, PixelScale(1.0), 2);
  SOIMask full(2, 2, PixelScale(1.0), true);
  SOIMask half(2, 2, PixelScale(1.0), false);
  half.set(0, 0, true);
  half.set(1, 1, true);
  EXPECT_EQ(phase_frequencies(std::vector{m}, std::vector{full}), (PhaseHistogram{{2, 4}}));
  EXPECT_EQ(phase_frequencies(std::vector{m}, std::vector{half}), (PhaseHistogram{{2, 2}}));
  SOIMask wrong(3, 2, PixelScale(1.0), true);
  EXPECT_THROW(phase_frequencies(std::vector{m}, std::vector{wrong}), Error);
}

TEST(Frequencies, MatchesBruteForceAndIgnoresOrder) {
  std::mt19937_64 rng(11);
  std::vector<LabelMap> maps;
  std::vector<SOIMask> sois;
  for (int k = 0; k < 3; ++k) {
    LabelMap m(64, 64, PixelScale(1.0));
    SOIMask s(64, 64, PixelScale(1.0));
    for (std::size_t i = 0; i < m.pixel_count(); ++i) {
      m.values[i] = (rng() % 9 == 0) ? kSentinel : static_cast<std::uint8_t>(rng() % 7);
      s.mask[i] = rng() % 3 != 0;
    }
    maps.push_back(m);
    sois.push_back(s);
  }
  PhaseHistogram brute;
  std::int64_t covered = 0;
  for (int k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < maps[k].pixel_count(); ++i) {
      if (sois[k].mask[i] && maps[k].values[i] != kSentinel) {
        ++brute[maps[k].values[i]];
        ++covered;
      }
    }
  }
  const PhaseHistogram h = phase_frequencies(maps, sois);
  EXPECT_EQ(h, brute);
  std::int64_t total = 0;
  for (const auto& [id, n] : h) total += n;
  EXPECT_EQ(total, covered);
  std::reverse(maps.begin(), maps.end());
  std::reverse(sois.begin(), sois.end());
  EXPECT_EQ(phase_frequencies(maps, sois), brute);
}

TEST(Consolidation, KeepsTopFiveAndMergesTheRest) {
  PhaseHistogram f{{0, 10}, {1, 60}, {2, 30}, {3, 50}, {4, 40}, {6, 20}};
  const ClassRegistry r = build_consolidation(six_phases(), f);
  EXPECT_EQ(r.class_of(1), 0);
  EXPECT_EQ(r.class_of(3), 1);
  EXPECT_EQ(r.class_of(4), 2);
  EXPECT_EQ(r.class_of(2), 3);
  EXPECT_EQ(r.class_of(6), 4);
  EXPECT_EQ(r.class_of(0), 5);
  EXPECT_EQ(r.class_of(5), 5);  // a phase named Others never gets its own class
  EXPECT_EQ(r.class_names().back(), "Others");
}

TEST(Consolidation, PoresAreAnOrdinaryPhase) {
  PhaseHistogram f{{3, 100}, {0, 1}};
  EXPECT_EQ(build_consolidation(six_phases(), f).class_of(3), 0);
}

TEST(Consolidation, TiesBreakByPhaseId) {
  PhaseHistogram f{{0, 50}, {1, 40}, {2, 30}, {3, 20}, {4, 10}, {6, 10}};
  const ClassRegistry r = build_consolidation(six_phases(), f);
  EXPECT_EQ(r.class_of(4), 4);
  EXPECT_EQ(r.class_of(6), 5);
  PhaseHistogram g{{6, 10}, {4, 10}, {0, 50}, {1, 40}, {2, 30}, {3, 20}};
  EXPECT_EQ(build_consolidation(six_phases(), g).class_of(4), 4);
}

TEST(Consolidation, ExactlyKeepPhases) {
  PhaseHistogram f{{0, 5}, {1, 4}, {2, 3}, {3, 2}, {4, 1}};
  const ClassRegistry r = build_consolidation(six_phases(), f);
  for (int id = 0; id < 5; ++id) EXPECT_EQ(r.class_of(id), id);
}

TEST(Consolidation, Errors) {
  EXPECT_THROW(build_consolidation(six_phases(), {}), Error);
  EXPECT_THROW(build_consolidation(six_phases(), {{0, 1}}, 0), Error);
  EXPECT_THROW(build_consolidation(six_phases(), {{42, 1}}), Error);
}

TEST(Consolidation, ApplyMatchesLookupAndIsIdempotent) {
  PhaseHistogram f{{0, 10}, {1, 60}, {2, 30}, {3, 50}, {4, 40}, {6, 20}};
  const ClassRegistry r = build_consolidation(six_phases(), f);
  std::mt19937_64 rng(2);
  LabelMap m(32, 16, PixelScale(1.0));
  const int ids[] = {0, 1, 2, 3, 4, 5, 6};
  for (auto& v : m.values) v = rng() % 10 == 0 ? kSentinel : ids[rng() % 7];
  const LabelMap c = apply_consolidation(m, r);
  for (std::size_t i = 0; i < m.pixel_count(); ++i) {
    if (m.values[i] == kSentinel) {
      EXPECT_EQ(c.values[i], kSentinel);
    } else {
      EXPECT_EQ(c.values[i], r.class_of(m.values[i]));
    }
  }
  EXPECT_TRUE(c.consolidated);
  EXPECT_EQ(apply_consolidation(c, r).values, c.values);

  LabelMap rare(4, 4, PixelScale(1.0), 0);
  for (auto v : apply_consolidation(rare, r).values) EXPECT_EQ(v, 5);
  LabelMap top(4, 4, PixelScale(1.0), 1);
  for (auto v : apply_consolidation(top, r).values) EXPECT_EQ(v, 0);
  EXPECT_THROW(apply_consolidation(m, six_phases()), Error);
}

TEST(Consolidation, ClassPaletteAvoidsWhiteAndDuplicates) {
  PhaseHistogram f{{0, 10}, {1, 60}, {2, 30}, {3, 50}, {4, 40}, {6, 20}};
  const auto palette = build_consolidation(six_phases(), f).class_palette();
  ASSERT_EQ(palette.size(), 6u);
  std::set<Rgb> seen(palette.begin(), palette.end());
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_FALSE(seen.contains(Rgb{255, 255, 255}));
}

TEST(Stack, BandsComeFromPpThenXp) {
  Raster pp(5, 4, 3, PixelScale(1.0), 0.2f);
  Raster xp(5, 4, 3, PixelScale(1.0), 0.8f);
  const Raster s = stack_pp_xp(pp, xp);
  ASSERT_EQ(s.bands, 6);
  for (std::size_t i = 0; i < s.pixel_count(); ++i) {
    for (int b = 0; b < 3; ++b) {
      EXPECT_EQ(s.data[i * 6 + b], 0.2f);
      EXPECT_EQ(s.data[i * 6 + 3 + b], 0.8f);
    }
  }
}

TEST(Stack, MatchesNaiveConcatenation) {
  std::mt19937 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  Raster pp(7, 3, 3, PixelScale(1.0)), xp(7, 3, 3, PixelScale(1.0));
  for (auto& v : pp.data) v = u(rng);
  for (auto& v : xp.data) v = u(rng);
  const Raster s = stack_pp_xp(pp, xp);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 7; ++x) {
      for (int b = 0; b < 3; ++b) {
        EXPECT_EQ(s.at(y, x, b), pp.at(y, x, b));
        EXPECT_EQ(s.at(y, x, b + 3), xp.at(y, x, b));
      }
    }
  }
  const Raster self = stack_pp_xp(pp, pp);
  for (std::size_t i = 0; i < self.pixel_count(); ++i) {
    for (int b = 0; b < 3; ++b) EXPECT_EQ(self.data[i * 6 + b], self.data[i * 6 + b + 3]);
  }
}

TEST(Stack, RejectsMismatches) {
  Raster a(4, 4, 3, PixelScale(1.0)), b(4, 5, 3, PixelScale(1.0)), c(4, 4, 3, PixelScale(2.0)), d(4, 4, 1, PixelScale(1.0));
  EXPECT_THROW(stack_pp_xp(a, b), Error);
  EXPECT_THROW(stack_pp_xp(a, c), Error);
  EXPECT_THROW(stack_pp_xp(a, d), Error);
}

TEST(ImageIo, IndexedAndSoiRoundTrip) {
  testutil::TempDir dir;
  LabelMap m(6, 5, PixelScale(1.0));
  for (std::size_t i = 0; i < m.pixel_count(); ++i) m.values[i] = i % 4 == 0 ? kSentinel : i % 7;
  std::vector<Rgb> palette{{1, 2, 3}, {4, 5, 6}};
  write_indexed_png(dir / "m.png", m, palette);
  EXPECT_EQ(read_indexed_png(dir / "m.png", PixelScale(1.0)).values, m.values);
  SOIMask s(6, 5, PixelScale(1.0));
  for (std::size_t i = 0; i < s.mask.size(); ++i) s.mask[i] = i % 3 == 0;
  write_soi_png(dir / "s.png", s);
  EXPECT_EQ(read_soi_png(dir / "s.png", PixelScale(1.0)).mask, s.mask);
}
