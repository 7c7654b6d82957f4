#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "thinseg/inference.hpp"

using namespace thinseg;

namespace {

UNetConfig small_net() {
  UNetConfig c;
  c.level_channels = {4, 8};
  return c;
}

Raster random_image(int w, int h, std::uint64_t seed) {
  Raster r(w, h, 6, PixelScale(1.0));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : r.data) v = u(rng);
  return r;
}

ModelParams<float> constant_logit_model(const UNetConfig& cfg) {
  ModelParams<float> p = init_model<float>(cfg, 1);
  const auto specs = parameter_layout(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    std::fill(p.tensors[i].values.begin(), p.tensors[i].values.end(), 0.0f);
    if (specs[i].name == "head.bias") {
      for (int c = 0; c < kNumOutputs; ++c) p.tensors[i].values[c] = 0.3f * c - 0.5f;
    }
  }
  return p;
}

}  // namespace

TEST(Windows, StartsCoverTheAxis) {
  EXPECT_EQ(window_starts(512, {512, 0.25}), (std::vector<int>{0}));
  EXPECT_EQ(window_starts(1000, {512, 0.25}), (std::vector<int>{0, 384, 488}));
  EXPECT_EQ(window_starts(896, {512, 0.25}), (std::vector<int>{0, 384}));
  EXPECT_EQ(window_starts(10, {4, 0.5}), (std::vector<int>{0, 2, 4, 6}));
  EXPECT_THROW(window_starts(100, {512, 0.25}), Error);
  EXPECT_THROW((WindowConfig{512, 1.0}).stride(), Error);
  EXPECT_THROW((WindowConfig{0, 0.25}).stride(), Error);
}

TEST(SlidingWindow, SingleWindowEqualsDirectForward) {
  const UNetConfig cfg = small_net();
  const auto params = init_model<float>(cfg, 5);
  const Raster image = random_image(64, 64, 1);
  const SOIMask soi(64, 64, PixelScale(1.0), true);
  const Prediction p = sliding_window_predict(params, image, soi, {64, 0.25});
  const Tensor<float> direct = softmax_channels(forward(params, to_planar(image)));
  ASSERT_EQ(p.probabilities.values.size(), direct.values.size());
  for (std::size_t i = 0; i < direct.values.size(); ++i) ASSERT_EQ(p.probabilities.values[i], direct.values[i]);
}

TEST(SlidingWindow, OverlapBandIsTheTwoWindowMean) {
  const UNetConfig cfg = small_net();
  const auto params = init_model<float>(cfg, 8);
  const Raster image = random_image(112, 64, 6);
  const SOIMask soi(112, 64, PixelScale(1.0), true);
  const Prediction p = sliding_window_predict(params, image, soi, {64, 0.25});
  auto crop = [&](int x0) {
    Raster c(64, 64, 6, PixelScale(1.0));
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int b = 0; b < 6; ++b) c.at(y, x, b) = image.at(y, x0 + x, b);
      }
    }
    return softmax_channels(forward(params, to_planar(c)));
  };
  const Tensor<float> left = crop(0), right = crop(48);
  for (int k = 0; k < kNumOutputs; ++k) {
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 112; ++x) {
        double want;
        const auto at = [&](const Tensor<float>& t, int xx) { return t.values[(k * 64 + y) * 64 + xx]; };
        if (x < 48) {
          want = at(left, x);
        } else if (x < 64) {
          want = (static_cast<double>(at(left, x)) + at(right, x - 48)) / 2.0;
        } else {
          want = at(right, x - 48);
        }
        ASSERT_NEAR(p.probabilities.values[(k * 64 + y) * 112 + x], want, 1e-6);
      }
    }
  }
}

TEST(SlidingWindow, ProbabilitiesSumToOne) {
  const UNetConfig cfg = small_net();
  const auto params = init_model<float>(cfg, 6);
  const Raster image = random_image(100, 90, 2);
  const SOIMask soi(100, 90, PixelScale(1.0), true);
  const Prediction p = sliding_window_predict(params, image, soi, {32, 0.25});
  const std::size_t px = 100 * 90;
  for (std::size_t i = 0; i < px; ++i) {
    double s = 0;
    for (int c = 0; c < kNumOutputs; ++c) s += p.probabilities.values[c * px + i];
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(SlidingWindow, ConstantLogitsGiveConstantProbabilities) {
  const UNetConfig cfg = small_net();
  const auto params = constant_logit_model(cfg);
  const Raster image = random_image(200, 160, 3);
  const SOIMask soi(200, 160, PixelScale(1.0), true);
  const Prediction p = sliding_window_predict(params, image, soi, {64, 0.25});
  const std::size_t px = 200 * 160;
  for (int c = 0; c < kNumOutputs; ++c) {
    const float v = p.probabilities.values[c * px];
    for (std::size_t i = 0; i < px; ++i) ASSERT_EQ(p.probabilities.values[c * px + i], v);
  }
}

TEST(SlidingWindow, IndependentOfVisitOrder) {
  const UNetConfig cfg = small_net();
  const auto params = init_model<float>(cfg, 7);
  const Raster image = random_image(120, 100, 4);
  const SOIMask soi(120, 100, PixelScale(1.0), true);
  const WindowConfig w{32, 0.3};
  const Prediction a = sliding_window_predict(params, image, soi, w);
  const int n = static_cast<int>(window_starts(100, w).size() * window_starts(120, w).size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937 rng(9);
  std::shuffle(order.begin(), order.end(), rng);
  const Prediction b = sliding_window_predict(params, image, soi, w, order);
  EXPECT_EQ(a.probabilities.values, b.probabilities.values);
  EXPECT_EQ(a.classes.values, b.classes.values);
  std::vector<int> bad(order.begin(), order.end() - 1);
  EXPECT_THROW(sliding_window_predict(params, image, soi, w, bad), Error);
}

TEST(SlidingWindow, ClassesOnlyInsideSoiAndNeverTheOutsideChannel) {
  const UNetConfig cfg = small_net();
  auto params = constant_logit_model(cfg);
  const auto specs = parameter_layout(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == "head.bias") params.tensors[i].values[kNumClasses] = 50.0f;  // the outside channel dominates everywhere
  }
  const Raster image = random_image(64, 64, 5);
  SOIMask soi(64, 64, PixelScale(1.0), true);
  for (int c = 0; c < 64; ++c) soi.set(10, c, false);
  const Prediction p = sliding_window_predict(params, image, soi, {32, 0.25});
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (y == 10) {
        EXPECT_EQ(p.classes.at(y, x), kSentinel);
      } else {
        EXPECT_LT(p.classes.at(y, x), kNumClasses);
      }
    }
  }
}

TEST(SlidingWindow, Errors) {
  const auto params = init_model<float>(small_net(), 1);
  const SOIMask soi(64, 64, PixelScale(1.0), true);
  EXPECT_THROW(sliding_window_predict(params, random_image(64, 64, 1), soi, {31, 0.25}), Error);
  EXPECT_THROW(sliding_window_predict(params, random_image(64, 48, 1), soi, {32, 0.25}), Error);
  Raster three(64, 64, 3, PixelScale(1.0));
  EXPECT_THROW(sliding_window_predict(params, three, soi, {32, 0.25}), Error);
}

TEST(Render, RegistryColoursAndWhiteSentinel) {
  const ClassRegistry reg({{0, "A", {10, 20, 30}, 0}, {1, "B", {40, 50, 60}, 1}});
  LabelMap m(3, 1, PixelScale(1.0));
  m.values = {0, 1, kSentinel};
  const Raster r = render_prediction(m, reg);
  EXPECT_FLOAT_EQ(r.at(0, 0, 2), 30 / 255.0f);
  EXPECT_FLOAT_EQ(r.at(0, 1, 0), 40 / 255.0f);
  for (int b = 0; b < 3; ++b) EXPECT_EQ(r.at(0, 2, b), 1.0f);
  const LabelMap back = decode_labelmap(
      [&] {
        Raster q = r;
        q.width = 2;
        q.data.resize(6);
        return q;
      }(),
      reg);
  EXPECT_EQ(back.values, (std::vector<std::uint8_t>{0, 1}));
}
