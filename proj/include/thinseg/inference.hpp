#pragma once

#include <span>
#include <vector>

#include "thinseg/network.hpp"
#include "thinseg/raster.hpp"

namespace thinseg {

struct WindowConfig {
  int window = 512;
  double overlap = 0.25;

  int stride() const;
};

/// Window origins along one axis: multiples of the stride, with the last
/// window shifted back to end at the border.
std::vector<int> window_starts(int length, const WindowConfig& cfg);

struct Prediction {
  LabelMap classes;             // class index on SOI pixels, kSentinel elsewhere
  Tensor<float> probabilities;  // [kNumOutputs, H, W]
};

/// Sliding-window inference with uniform averaging of softmax outputs.
///
/// Windows are visited in `order` (indices into the row-major window grid;
/// empty = row-major) but always accumulated in row-major order, in double,
/// so the result is bitwise independent of the visiting order.
Prediction sliding_window_predict(const ModelParams<float>& params, const Raster& image, const SOIMask& soi,
                                  const WindowConfig& cfg = {}, std::span<const int> order = {});

/// Argmax over the mineral channels on SOI pixels.
LabelMap argmax_classes(const Tensor<float>& probabilities, const SOIMask& soi);

/// Class colours from a class registry (ids = class indices); the sentinel and
/// unknown values render white.
Raster render_prediction(const LabelMap& map, const ClassRegistry& registry);

/// Planar [bands, H, W] copy of an interleaved raster, as a batch of one.
Tensor<float> to_planar(const Raster& image);

}  // namespace thinseg
