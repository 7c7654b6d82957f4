#include "thinseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace thinseg {

int WindowConfig::stride() const {
  if (window <= 0) throw Error("window size must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw Error("overlap must lie in [0, 1)");
  return std::max(1, static_cast<int>(std::lround(window * (1.0 - overlap))));
}

std::vector<int> window_starts(int length, const WindowConfig& cfg) {
  if (length < cfg.window) {
    throw Error("image side " + std::to_string(length) + " is smaller than the window " + std::to_string(cfg.window));
  }
  const int stride = cfg.stride();
  std::vector<int> starts;
  for (int s = 0;; s += stride) {
    if (s + cfg.window >= length) {
      starts.push_back(length - cfg.window);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

Tensor<float> to_planar(const Raster& image) {
  Tensor<float> t({1, image.bands, image.height, image.width});
  const std::size_t px = image.pixel_count();
  for (std::size_t i = 0; i < px; ++i) {
    for (int b = 0; b < image.bands; ++b) t.values[b * px + i] = image.data[i * image.bands + b];
  }
  return t;
}

LabelMap argmax_classes(const Tensor<float>& probabilities, const SOIMask& soi) {
  const int h = probabilities.dim(1), w = probabilities.dim(2);
  if (soi.width != w || soi.height != h) throw Error("argmax_classes: SOI size mismatch");
  LabelMap out(w, h, soi.scale);
  out.consolidated = true;
  const std::size_t px = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < px; ++i) {
    if (soi.mask[i] == 0) continue;
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c) {
      if (probabilities.values[c * px + i] > probabilities.values[best * px + i]) best = c;
    }
    out.values[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Prediction sliding_window_predict(const ModelParams<float>& params, const Raster& image, const SOIMask& soi,
                                  const WindowConfig& cfg, std::span<const int> order) {
  if (image.bands != params.config.in_channels) {
    throw Error("image has " + std::to_string(image.bands) + " bands, model expects " +
                std::to_string(params.config.in_channels));
  }
  if (soi.width != image.width || soi.height != image.height) throw Error("SOI and image sizes differ");
  if (cfg.window % params.config.size_divisor() != 0) {
    throw Error("window " + std::to_string(cfg.window) + " is not divisible by " +
                std::to_string(params.config.size_divisor()));
  }
  const auto rows = window_starts(image.height, cfg);
  const auto cols = window_starts(image.width, cfg);
  const int count = static_cast<int>(rows.size() * cols.size());
  std::vector<int> visit(order.begin(), order.end());
  if (visit.empty()) {
    visit.resize(count);
    for (int i = 0; i < count; ++i) visit[i] = i;
  }
  {
    auto sorted = visit;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < count; ++i) {
      if (static_cast<int>(sorted.size()) != count || sorted[i] != i) {
        throw Error("window order must be a permutation of the window grid");
      }
    }
  }

  const int oc = params.config.out_channels, n = cfg.window;
  const std::size_t W = image.width, H = image.height, px = W * H;
  std::vector<double> sum(static_cast<std::size_t>(oc) * px, 0.0);
  std::vector<std::uint16_t> hits(px, 0);
  std::map<int, Tensor<float>> pending;
  int cursor = 0;

  auto accumulate = [&](int idx, const Tensor<float>& p) {
    const int r0 = rows[idx / cols.size()], c0 = cols[idx % cols.size()];
    for (int c = 0; c < oc; ++c) {
      for (int y = 0; y < n; ++y) {
        const float* src = p.values.data() + (static_cast<std::size_t>(c) * n + y) * n;
        double* dst = sum.data() + c * px + (r0 + y) * W + c0;
        for (int x = 0; x < n; ++x) dst[x] += src[x];
      }
    }
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) ++hits[(r0 + y) * W + c0 + x];
    }
  };

  Tensor<float> input({1, image.bands, n, n});
  for (int idx : visit) {
    const int r0 = rows[idx / cols.size()], c0 = cols[idx % cols.size()];
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const float* src = image.data.data() + ((r0 + y) * W + c0 + x) * image.bands;
        for (int b = 0; b < image.bands; ++b) input.values[(static_cast<std::size_t>(b) * n + y) * n + x] = src[b];
      }
    }
    auto probs = softmax_channels(forward(params, input));
    probs.shape = {oc, n, n};
    pending.emplace(idx, std::move(probs));
    while (true) {
      auto it = pending.find(cursor);
      if (it == pending.end()) break;
      accumulate(cursor, it->second);
      pending.erase(it);
      ++cursor;
    }
  }

  Prediction out;
  out.probabilities = Tensor<float>({oc, static_cast<int>(H), static_cast<int>(W)});
  for (int c = 0; c < oc; ++c) {
    for (std::size_t i = 0; i < px; ++i) {
      out.probabilities.values[c * px + i] = static_cast<float>(sum[c * px + i] / hits[i]);
    }
  }
  out.classes = argmax_classes(out.probabilities, soi);
  out.classes.scale = image.scale;
  return out;
}

Raster render_prediction(const LabelMap& map, const ClassRegistry& registry) {
  Raster out(map.width, map.height, 3, map.scale);
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    const PhaseEntry* e = map.values[i] == kSentinel ? nullptr : registry.find(map.values[i]);
    for (int b = 0; b < 3; ++b) out.data[i * 3 + b] = e ? e->color[b] / 255.0f : 1.0f;
  }
  return out;
}

}  // namespace thinseg
