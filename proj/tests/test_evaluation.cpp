#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles/brute.hpp"
#include "test_util.hpp"
#include "thinseg/evaluation.hpp"

using namespace thinseg;

namespace {

struct Triple {
  LabelMap pred, gt;
  SOIMask soi;
};

// Random class maps with some sentinels and an irregular SOI. Classes 4 and 5
// are kept out of the groundtruth in every other seed to exercise absent classes.
Triple random_triple(std::uint64_t seed, int n = 32) {
  std::mt19937_64 rng(seed);
  Triple t{LabelMap(n, n, PixelScale(1.0)), LabelMap(n, n, PixelScale(1.0)), SOIMask(n, n, PixelScale(1.0))};
  const int gt_classes = seed % 2 ? 4 : kNumClasses;
  for (int i = 0; i < n * n; ++i) {
    t.pred.values[i] = rng() % 17 == 0 ? kSentinel : static_cast<std::uint8_t>(rng() % 4);
    t.gt.values[i] = rng() % 13 == 0 ? kSentinel : static_cast<std::uint8_t>(rng() % gt_classes);
    t.soi.mask[i] = rng() % 5 != 0;
  }
  return t;
}

}  // namespace

TEST(Dice, MatchesPixelSetOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Triple t = random_triple(seed);
    const DiceReport d = dice_scores(t.pred, t.gt, t.soi);
    const auto ref = oracle::brute_dice(t.pred, t.gt, t.soi);
    double sum = 0;
    int present = 0;
    for (int k = 0; k < kNumClasses; ++k) {
      if (ref[k]) {
        EXPECT_FALSE(d.absent[k]);
        EXPECT_NEAR(d.per_class[k], *ref[k], 1e-9);
        sum += *ref[k];
        ++present;
      } else {
        EXPECT_TRUE(d.absent[k]);
        EXPECT_EQ(d.per_class[k], 1.0);
      }
    }
    EXPECT_NEAR(d.mean, sum / present, 1e-9);
  }
}

TEST(Dice, SymmetricAndIdentity) {
  const Triple t = random_triple(3);
  const DiceReport a = dice_scores(t.pred, t.gt, t.soi), b = dice_scores(t.gt, t.pred, t.soi);
  EXPECT_EQ(a.per_class, b.per_class);
  const DiceReport same = dice_scores(t.gt, t.gt, t.soi);
  for (int k = 0; k < kNumClasses; ++k) EXPECT_EQ(same.per_class[k], 1.0);
  EXPECT_EQ(same.mean, 1.0);
}

TEST(Dice, Errors) {
  const Triple t = random_triple(1);
  EXPECT_THROW(dice_scores(t.pred, LabelMap(31, 32, PixelScale(1.0)), t.soi), Error);
  LabelMap bad = t.gt;
  bad.values[0] = 9;
  SOIMask all(32, 32, PixelScale(1.0), true);
  LabelMap pred = t.pred;
  pred.values[0] = 0;
  EXPECT_THROW(dice_scores(pred, bad, all), Error);
}

TEST(Confusion, MatchesTallyOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Triple t = random_triple(seed);
    const ConfusionMatrix m = confusion(t.pred, t.gt, t.soi);
    const auto ref = oracle::brute_confusion(t.pred, t.gt, t.soi);
    for (int r = 0; r < kNumClasses; ++r) {
      for (int c = 0; c < kNumClasses; ++c) EXPECT_EQ(m.counts[r][c], ref[r][c]);
    }
    std::int64_t scored = 0, diag = 0;
    for (int r = 0; r < 32; ++r) {
      for (int c = 0; c < 32; ++c) scored += oracle::scored(t.pred, t.gt, t.soi, r, c) ? 1 : 0;
    }
    for (int k = 0; k < kNumClasses; ++k) diag += ref[k][k];
    EXPECT_EQ(m.total(), scored);
    EXPECT_NEAR(m.accuracy(), static_cast<double>(diag) / scored, 1e-12);
    const auto rn = m.row_normalized();
    for (int r = 0; r < kNumClasses; ++r) {
      std::int64_t row = 0;
      for (int c = 0; c < kNumClasses; ++c) row += ref[r][c];
      for (int c = 0; c < kNumClasses; ++c) {
        EXPECT_NEAR(rn[r][c], row ? static_cast<double>(ref[r][c]) / row : 0.0, 1e-12);
      }
    }
  }
}

TEST(Confusion, IdentityIsDiagonal) {
  const Triple t = random_triple(4);
  const ConfusionMatrix m = confusion(t.gt, t.gt, t.soi);
  for (int r = 0; r < kNumClasses; ++r) {
    for (int c = 0; c < kNumClasses; ++c) {
      if (r != c) EXPECT_EQ(m.counts[r][c], 0);
    }
  }
  EXPECT_EQ(m.accuracy(), 1.0);
}

TEST(Confusion, CsvHasHeaderAndRows) {
  const Triple t = random_triple(5);
  const std::vector<std::string> names{"a", "b", "c", "d", "e", "f"};
  const std::string csv = confusion(t.pred, t.gt, t.soi).to_csv(names);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "true\\predicted,a,b,c,d,e,f");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), kNumClasses + 1);
}

TEST(Distribution, MatchesCountOracleAndSumsToOne) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Triple t = random_triple(seed);
    const ClassArray f = class_distribution(t.gt, t.soi);
    const auto ref = oracle::brute_distribution(t.gt, t.soi);
    double s = 0;
    for (int k = 0; k < kNumClasses; ++k) {
      EXPECT_NEAR(f[k], ref[k], 1e-9);
      s += f[k];
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Distribution, SimpleCases) {
  LabelMap m(4, 2, PixelScale(1.0), 2);
  const SOIMask soi(4, 2, PixelScale(1.0), true);
  EXPECT_EQ(class_distribution(m, soi), (ClassArray{0, 0, 1, 0, 0, 0}));
  for (int c = 0; c < 4; ++c) m.at(1, c) = 5;
  EXPECT_EQ(class_distribution(m, soi), (ClassArray{0, 0, 0.5, 0, 0, 0.5}));
  const SOIMask none(4, 2, PixelScale(1.0), false);
  EXPECT_EQ(class_distribution(m, none), ClassArray{});
}

TEST(Distribution, EqualsConfusionMarginals) {
  const Triple t = random_triple(8);
  const SectionEvaluation e = evaluate_section("s", t.pred, t.gt, t.soi);
  const ConfusionMatrix m = confusion(t.pred, t.gt, t.soi);
  for (int c = 0; c < kNumClasses; ++c) {
    std::int64_t col = 0;
    for (int r = 0; r < kNumClasses; ++r) col += m.counts[r][c];
    EXPECT_NEAR(e.predicted[c], static_cast<double>(col) / m.total(), 1e-12);
  }
}

TEST(Correlate, MatchesNormalEquationOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<DistributionPoint> pts;
    std::vector<double> x, y;
    for (int s = 0; s < 5; ++s) {
      for (int c = 0; c < kNumClasses; ++c) {
        const double g = u(rng), p = 0.8 * g + 0.1 * u(rng);
        pts.push_back({"s" + std::to_string(s), c, g, p});
        x.push_back(g);
        y.push_back(p);
      }
    }
    const CorrelationReport r = correlate(pts);
    const oracle::Fit f = oracle::brute_fit(x, y);
    EXPECT_EQ(r.overall.points, pts.size());
    EXPECT_NEAR(*r.overall.slope, f.slope, 1e-9);
    EXPECT_NEAR(*r.overall.intercept, f.intercept, 1e-9);
    EXPECT_NEAR(*r.overall.r_squared, f.r_squared, 1e-9);
    EXPECT_NEAR(r.overall.rmse, f.rmse, 1e-9);
    ASSERT_EQ(r.per_class.size(), static_cast<std::size_t>(kNumClasses));
    for (int c = 0; c < kNumClasses; ++c) {
      std::vector<double> xc, yc;
      for (const auto& p : pts) {
        if (p.class_index == c) {
          xc.push_back(p.groundtruth_fraction);
          yc.push_back(p.predicted_fraction);
        }
      }
      const oracle::Fit fc = oracle::brute_fit(xc, yc);
      EXPECT_NEAR(*r.per_class.at(c).r_squared, fc.r_squared, 1e-9);
      EXPECT_NEAR(r.per_class.at(c).rmse, fc.rmse, 1e-9);
    }
  }
}

TEST(Correlate, IdentityAndOffset) {
  std::vector<DistributionPoint> same, shifted;
  for (int i = 0; i < 10; ++i) {
    const double g = 0.05 + 0.08 * i;
    same.push_back({"s", i % kNumClasses, g, g});
    shifted.push_back({"s", i % kNumClasses, g, g + 0.05});
  }
  const CorrelationReport a = correlate(same);
  EXPECT_NEAR(*a.overall.slope, 1.0, 1e-12);
  EXPECT_NEAR(*a.overall.intercept, 0.0, 1e-12);
  EXPECT_NEAR(*a.overall.r_squared, 1.0, 1e-12);
  EXPECT_EQ(a.overall.rmse, 0.0);
  const CorrelationReport b = correlate(shifted);
  EXPECT_NEAR(*b.overall.slope, 1.0, 1e-12);
  EXPECT_NEAR(*b.overall.intercept, 0.05, 1e-12);
  EXPECT_NEAR(*b.overall.r_squared, 1.0, 1e-12);
  EXPECT_NEAR(b.overall.rmse, 0.05, 1e-12);
}

TEST(Correlate, OrderInvariantAndDegenerate) {
  std::vector<DistributionPoint> pts;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 12; ++i) pts.push_back({"s", i % 3, u(rng), u(rng)});
  auto rev = pts;
  std::reverse(rev.begin(), rev.end());
  EXPECT_NEAR(*correlate(pts).overall.r_squared, *correlate(rev).overall.r_squared, 1e-12);

  std::vector<DistributionPoint> flat{{"a", 0, 0.3, 0.2}, {"b", 0, 0.3, 0.4}};
  const CorrelationReport r = correlate(flat);
  EXPECT_FALSE(r.overall.r_squared.has_value());
  EXPECT_FALSE(r.overall.slope.has_value());
  EXPECT_NEAR(r.overall.rmse, 0.1, 1e-12);
  EXPECT_TRUE(r.to_json()["r_squared"].is_null());
  EXPECT_THROW(correlate(std::vector<DistributionPoint>{{"a", 0, 0.1, 0.1}}), Error);
}

TEST(Report, SummarizesAndWritesFiles) {
  std::vector<SectionEvaluation> secs;
  for (int s = 0; s < 3; ++s) {
    const Triple t = random_triple(20 + s);
    secs.push_back(evaluate_section("S" + std::to_string(s), t.pred, t.gt, t.soi));
  }
  const EvaluationReport rep = summarize(secs);
  EXPECT_EQ(rep.points.size(), 3u * kNumClasses);
  ASSERT_TRUE(rep.correlation.has_value());
  std::int64_t inter = 0;
  for (const auto& s : secs) inter += s.dice.intersection[0];
  EXPECT_EQ(rep.dice.intersection[0], inter);
  testutil::TempDir dir;
  rep.write(dir.path());
  for (const char* f : {"report.json", "dice.csv", "confusion.csv", "distributions.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const auto j = rep.to_json();
  EXPECT_EQ(j["sections"].size(), 3u);
}
