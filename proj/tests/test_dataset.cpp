#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "oracles/brute.hpp"
#include "thinseg/dataset.hpp"
#include "thinseg/image_io.hpp"
#include "test_util.hpp"

using namespace thinseg;

namespace {

SOIMask box_soi(int w, int h, int r0, int c0, int bh, int bw) {
  SOIMask m(w, h, PixelScale(1.0));
  for (int r = r0; r < r0 + bh; ++r) {
    for (int c = c0; c < c0 + bw; ++c) m.set(r, c, true);
  }
  return m;
}

ThinSection random_section(const std::string& id, int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ThinSection s;
  s.id = id;
  s.pp = Raster(w, h, 3, PixelScale(1.0));
  s.xp = Raster(w, h, 3, PixelScale(1.0));
  for (auto& v : s.pp.data) v = static_cast<float>(rng() % 256) / 255.0f;
  for (auto& v : s.xp.data) v = static_cast<float>(rng() % 256) / 255.0f;
  s.qemscan = LabelMap(w, h, PixelScale(1.0));
  for (auto& v : s.qemscan.values) v = rng() % kNumClasses;
  s.qemscan.consolidated = true;
  s.soi = oracle::random_blob_soi(seed, w, h);
  return s;
}

DatasetManifest manifest_with(const std::map<std::string, int>& chunks_per_section) {
  DatasetManifest m;
  for (const auto& [id, n] : chunks_per_section) {
    m.sections.push_back({id, {}, {}, {}, {}, 1.0});
    for (int k = 0; k < n; ++k) {
      ChunkDescriptor d;
      d.section_id = id;
      d.column_major_index = k;
      d.size = 10;
      d.class_counts[k % kNumClasses] = 100;
      m.chunks.push_back(d);
    }
  }
  return m;
}

std::vector<int> indices_of(const DatasetManifest& m, const std::vector<int>& ids, const std::string& section) {
  std::vector<int> out;
  for (int i : ids) {
    if (m.chunks[i].section_id == section) out.push_back(m.chunks[i].column_major_index);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(CenterCrop, ExactMultiple) {
  const SOIMask m = box_soi(3200, 2200, 100, 100, 2000, 3000);
  EXPECT_EQ(soi_bbox_center_crop(m), (Rect{100, 100, 2000, 3000}));
}

TEST(CenterCrop, CentresTheLargestMultiple) {
  const SOIMask m = box_soi(2600, 2600, 50, 50, 2500, 2500);
  EXPECT_EQ(soi_bbox_center_crop(m), (Rect{300, 300, 2000, 2000}));
}

TEST(CenterCrop, TooSmallGivesNothing) {
  const SOIMask m = box_soi(5100, 1100, 0, 0, 999, 5000);
  EXPECT_TRUE(soi_bbox_center_crop(m).empty());
  EXPECT_TRUE(plan_chunks("s", m, nullptr).empty());
  EXPECT_THROW(soi_bbox_center_crop(SOIMask(10, 10, PixelScale(1.0))), Error);
}

TEST(Chunking, FullSoiGivesFourFullChunks) {
  ThinSection s = random_section("a", 2000, 2000, 1);
  s.soi = SOIMask(2000, 2000, PixelScale(1.0), true);
  const auto chunks = chunk_section(s);
  ASSERT_EQ(chunks.size(), 4u);
  for (const auto& c : chunks) EXPECT_EQ(c.info.coverage, 1.0);
  EXPECT_EQ(chunks[1].info.row, 1000);
  EXPECT_EQ(chunks[1].info.col, 0);
  EXPECT_EQ(chunks[2].info.row, 0);
  EXPECT_EQ(chunks[2].info.col, 1000);
}

TEST(Chunking, ExactThresholdIsRetained) {
  SOIMask m(1000, 2000, PixelScale(1.0), true);
  for (int r = 1200; r < 1500; ++r) {
    for (int c = 0; c < 1000; ++c) m.set(r, c, false);
  }
  auto d = plan_chunks("s", m, nullptr);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_DOUBLE_EQ(d[1].coverage, 0.70);
  for (int c = 0; c < 1000; ++c) m.set(1500, c, false);
  d = plan_chunks("s", m, nullptr);
  ASSERT_EQ(d.size(), 1u);
}

TEST(Chunking, MatchesBruteForceOnRandomMasks) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const int w = 300 + static_cast<int>(seed) * 37, h = 260 + static_cast<int>(seed) * 23;
    const SOIMask m = oracle::random_blob_soi(seed, w, h);
    const auto got = plan_chunks("s", m, nullptr, 50, 0.7);
    const auto want = oracle::brute_chunks(m, 50, 0.7);
    ASSERT_EQ(got.size(), want.size()) << "seed " << seed;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].row, want[i].row);
      EXPECT_EQ(got[i].col, want[i].col);
      EXPECT_EQ(got[i].column_major_index, static_cast<int>(i));
      EXPECT_DOUBLE_EQ(got[i].coverage, want[i].covered / 2500.0);
    }
  }
}

TEST(Chunking, ChunksAreDisjointAndInside) {
  const ThinSection s = random_section("a", 420, 380, 3);
  const auto chunks = chunk_section(s, 60, 0.5);
  ASSERT_FALSE(chunks.empty());
  std::vector<int> hit(static_cast<std::size_t>(s.soi.width) * s.soi.height, 0);
  for (const auto& c : chunks) {
    ASSERT_LE(c.info.row + 60, s.soi.height);
    ASSERT_LE(c.info.col + 60, s.soi.width);
    for (int r = c.info.row; r < c.info.row + 60; ++r) {
      for (int col = c.info.col; col < c.info.col + 60; ++col) EXPECT_EQ(hit[r * s.soi.width + col]++, 0);
    }
  }
}

TEST(Chunking, ExtractCopiesGridsAndMasksLabels) {
  const ThinSection s = random_section("a", 300, 300, 4);
  const auto chunks = chunk_section(s, 100, 0.3);
  ASSERT_FALSE(chunks.empty());
  const Chunk& c = chunks.front();
  std::int64_t labeled = 0;
  ClassCounts counts{};
  for (int r = 0; r < 100; ++r) {
    for (int col = 0; col < 100; ++col) {
      const int sr = c.info.row + r, sc = c.info.col + col;
      EXPECT_EQ(c.image.at(r, col, 1), s.pp.at(sr, sc, 1));
      EXPECT_EQ(c.image.at(r, col, 4), s.xp.at(sr, sc, 1));
      EXPECT_EQ(c.soi.at(r, col), s.soi.at(sr, sc));
      if (s.soi.at(sr, sc)) {
        EXPECT_EQ(c.labels.at(r, col), s.qemscan.at(sr, sc));
        ++counts[s.qemscan.at(sr, sc)];
        ++labeled;
      } else {
        EXPECT_EQ(c.labels.at(r, col), kSentinel);
      }
    }
  }
  EXPECT_EQ(c.info.class_counts, counts);
}

TEST(Chunking, CountIndependentOfSectionOrder) {
  std::vector<ThinSection> sections{random_section("a", 300, 200, 5), random_section("b", 250, 280, 6),
                                    random_section("c", 200, 200, 7)};
  auto total = [&] {
    std::size_t n = 0;
    for (const auto& s : sections) n += chunk_section(s, 50, 0.7).size();
    return n;
  };
  const std::size_t forward = total();
  std::reverse(sections.begin(), sections.end());
  EXPECT_EQ(total(), forward);
}

TEST(Split, SameTakesTheLastFifthPerSection) {
  const auto m = split_same(manifest_with({{"a", 10}, {"b", 1}, {"c", 0}}));
  m.check_partition();
  EXPECT_EQ(indices_of(m, m.train_ids, "a"), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(indices_of(m, m.val_ids, "a"), (std::vector<int>{8, 9}));
  EXPECT_EQ(indices_of(m, m.val_ids, "b"), (std::vector<int>{0}));
  EXPECT_TRUE(indices_of(m, m.train_ids, "b").empty());
}

TEST(Split, SameRatio) {
  const auto m = split_same(manifest_with({{"a", 5}, {"b", 5}, {"c", 5}, {"d", 5}}));
  EXPECT_EQ(m.train_ids.size(), 16u);
  EXPECT_EQ(m.val_ids.size(), 4u);
}

TEST(Split, BySection) {
  const auto base = manifest_with({{"a", 3}, {"b", 4}, {"c", 2}, {"d", 5}});
  const auto m = split_by_section(base, {"b"});
  m.check_partition();
  EXPECT_EQ(m.val_ids.size(), 4u);
  for (int i : m.val_ids) EXPECT_EQ(m.chunks[i].section_id, "b");
  for (int i : m.train_ids) EXPECT_NE(m.chunks[i].section_id, "b");
  const auto none = split_by_section(base, {});
  EXPECT_EQ(none.train_ids.size(), base.chunks.size());
  EXPECT_TRUE(none.val_ids.empty());
  EXPECT_THROW(split_by_section(base, {"zz"}), Error);
}

TEST(Split, PartitionCheckCatchesOverlapAndGaps) {
  auto m = split_same(manifest_with({{"a", 5}}));
  m.val_ids.push_back(m.train_ids.front());
  EXPECT_THROW(m.check_partition(), Error);
  m = split_same(manifest_with({{"a", 5}}));
  m.train_ids.pop_back();
  EXPECT_THROW(m.check_partition(), Error);
}

TEST(Split, DistributionReportComparesClassFractions) {
  auto m = manifest_with({{"a", 6}, {"b", 6}});
  m = split_by_section(m, {"b"});
  const auto r = compare_split_distributions(m);
  EXPECT_NEAR(r.max_abs_difference, 0.0, 1e-12);
  EXPECT_TRUE(r.within(5.0));
}

TEST(Manifest, JsonRoundTripWithRelativePaths) {
  testutil::TempDir dir;
  auto m = split_same(manifest_with({{"a", 3}, {"b", 2}}));
  m.sections[0].pp = dir / "data" / "a_pp.png";
  m.sections[0].labels = dir / "data" / "a_labels.png";
  m.registry = dir / "data" / "registry.json";
  m.save(dir / "m.json");
  const std::string text = [&] {
    std::ifstream in(dir / "m.json");
    return std::string(std::istreambuf_iterator<char>(in), {});
  }();
  EXPECT_EQ(text.find(dir.path().string()), std::string::npos);
  const auto back = DatasetManifest::load(dir / "m.json");
  EXPECT_EQ(back.sections[0].pp, m.sections[0].pp);
  EXPECT_EQ(back.registry, m.registry);
  EXPECT_EQ(back.train_ids, m.train_ids);
  EXPECT_EQ(back.val_ids, m.val_ids);
  EXPECT_EQ(back.chunks.size(), m.chunks.size());
  EXPECT_EQ(back.chunks[2].class_counts, m.chunks[2].class_counts);
}

TEST(Augment, IdentityParamsGiveTopLeftWindow) {
  const ThinSection s = random_section("a", 300, 300, 8);
  const Chunk c = chunk_section(s, 100, 0.2).front();
  const Sample out = apply_augment(c, AugmentParams{}, 64);
  for (int r = 0; r < 64; ++r) {
    for (int col = 0; col < 64; ++col) {
      EXPECT_EQ(out.labels[r * 64 + col], c.labels.at(r, col));
      EXPECT_EQ(out.image[2 * 64 * 64 + r * 64 + col], c.image.at(r, col, 2));
    }
  }
}

TEST(Augment, MatchesCropFlipRotateOracle) {
  const ThinSection s = random_section("a", 300, 300, 9);
  const Chunk c = chunk_section(s, 100, 0.2).front();
  const int n = 40;
  for (int k = 0; k < 4; ++k) {
    for (int f = 0; f < 4; ++f) {
      const AugmentParams p{7, 13, (f & 1) != 0, (f & 2) != 0, k};
      std::vector<std::vector<int>> a(n, std::vector<int>(n));
      for (int r = 0; r < n; ++r) {
        for (int col = 0; col < n; ++col) a[r][col] = c.labels.at(p.row + r, p.col + col);
      }
      if (p.flip_horizontal) {
        for (auto& row : a) std::reverse(row.begin(), row.end());
      }
      if (p.flip_vertical) std::reverse(a.begin(), a.end());
      for (int t = 0; t < k; ++t) {
        auto b = a;
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) b[i][j] = a[j][n - 1 - i];
        }
        a = b;
      }
      const Sample out = apply_augment(c, p, n);
      for (int r = 0; r < n; ++r) {
        for (int col = 0; col < n; ++col) ASSERT_EQ(out.labels[r * n + col], a[r][col]) << k << " " << f;
      }
    }
  }
}

TEST(Augment, ImageLabelsAndSoiMoveTogether) {
  ThinSection s = random_section("a", 200, 200, 10);
  // Encode the source position into the image so every output pixel can be traced.
  for (int r = 0; r < 200; ++r) {
    for (int col = 0; col < 200; ++col) {
      s.pp.at(r, col, 0) = r / 255.0f;
      s.pp.at(r, col, 1) = col / 255.0f;
    }
  }
  const Chunk c = chunk_section(s, 100, 0.1).front();
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 8; ++trial) {
    const Sample out = augment(c, rng, 50);
    for (int i = 0; i < 50 * 50; ++i) {
      const int sr = static_cast<int>(std::lround(out.image[i] * 255.0f)) - c.info.row;
      const int sc = static_cast<int>(std::lround(out.image[50 * 50 + i] * 255.0f)) - c.info.col;
      ASSERT_EQ(out.labels[i], c.labels.at(sr, sc));
      ASSERT_EQ(out.soi[i] != 0, c.soi.at(sr, sc));
    }
  }
}

TEST(Augment, SeededAndPackedAgree) {
  const ThinSection s = random_section("a", 300, 300, 11);
  const Chunk c = chunk_section(s, 100, 0.2).front();
  const PackedChunk p = PackedChunk::pack(c);
  std::mt19937_64 a(42), b(42), d(42);
  const Sample x = augment(c, a, 64);
  const Sample y = augment(c, b, 64);
  const Sample z = augment(p, d, 64);
  EXPECT_EQ(x.image, y.image);
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_EQ(x.image, z.image);
  EXPECT_EQ(x.labels, z.labels);
  EXPECT_EQ(x.soi, z.soi);
  EXPECT_THROW(augment(c, a, 101), Error);
}

TEST(Augment, LabelMultisetPreservedByFlipsAndTurns) {
  const ThinSection s = random_section("a", 300, 300, 12);
  const Chunk c = chunk_section(s, 100, 0.2).front();
  auto histogram = [](const Sample& x) {
    std::map<int, int> h;
    for (auto v : x.labels) ++h[v];
    return h;
  };
  const auto base = histogram(apply_augment(c, AugmentParams{5, 5, false, false, 0}, 60));
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(histogram(apply_augment(c, AugmentParams{5, 5, true, k % 2 == 0, k}, 60)), base);
  }
}

TEST(Chunks, MaterializedAndSectionLoadsAgree) {
  testutil::TempDir dir;
  ThinSection s = random_section("sec", 240, 240, 13);
  s.pp.scale = s.xp.scale = PixelScale(1.0);
  write_png(dir / "pp.png", s.pp);
  write_png(dir / "xp.png", s.xp);
  write_indexed_png(dir / "labels.png", s.qemscan, std::vector<Rgb>{});
  write_soi_png(dir / "soi.png", s.soi);
  DatasetManifest m;
  m.sections.push_back({"sec", dir / "pp.png", dir / "xp.png", dir / "labels.png", dir / "soi.png", 1.0});
  LabelMap labels = s.qemscan;
  m.chunks = plan_chunks("sec", s.soi, &labels, 80, 0.3);
  ASSERT_GE(m.chunks.size(), 2u);
  m = split_same(m);
  std::vector<int> all(m.chunks.size());
  std::iota(all.begin(), all.end(), 0);
  const auto from_section = load_chunks(m, all);

  const ThinSection loaded = load_section(m.sections[0]);
  for (auto& d : m.chunks) materialize_chunk(extract_chunk(loaded, d), dir / "chunks", d);
  m.save(dir / "m.json");
  const auto reloaded = DatasetManifest::load(dir / "m.json");
  ASSERT_TRUE(reloaded.chunks[0].pp_file.has_value());
  const auto from_files = load_chunks(reloaded, all);
  ASSERT_EQ(from_files.size(), from_section.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(from_files[i].image, from_section[i].image);
    EXPECT_EQ(from_files[i].labels, from_section[i].labels);
    EXPECT_EQ(from_files[i].soi, from_section[i].soi);
  }
}
