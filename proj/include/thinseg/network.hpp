#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinseg/raster.hpp"

namespace thinseg {

/// Soft-Dice smoothing term.
inline constexpr double kDiceEpsilon = 1e-5;

class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class NormKind { Instance, None };

/// Residual U-Net architecture.
///
/// Each level holds a residual block of two 3x3 convolutions (each followed
/// by normalization and a PReLU); the block output is the sum of its first
/// and last feature maps. Levels after the first open with a stride-2
/// convolution, and the decoder upsamples with stride-2 transposed 3x3
/// convolutions before concatenating the matching encoder output. A 1x1
/// convolution produces the output logits. Convolutions carry a bias only
/// when normalization is disabled.
struct UNetConfig {
  int in_channels = 6;
  int out_channels = kNumOutputs;
  std::vector<int> level_channels{16, 32, 64, 128};
  NormKind norm = NormKind::Instance;

  void validate() const;
  int levels() const { return static_cast<int>(level_channels.size()); }
  /// Spatial sizes must be multiples of this.
  int size_divisor() const { return 1 << (levels() - 1); }
  std::string fingerprint() const;

  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

/// Dense row-major array.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> values;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, T fill = T(0));
  std::size_t size() const { return values.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
};

enum class ParamKind { ConvWeight, TransposedConvWeight, Bias, NormScale, NormShift, PReLUSlope };

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  ParamKind kind;
  int fan_in = 0;
};

/// Ordered list of learnable tensors for a configuration.
std::vector<ParamSpec> parameter_layout(const UNetConfig& config);

template <class T>
struct ModelParams {
  UNetConfig config;
  std::vector<Tensor<T>> tensors;  // parameter_layout(config) order

  std::size_t scalar_count() const;
};

/// He-style initialization (weights ~ N(0, 2 / fan_in)), zero biases and
/// shifts, unit norm scales, PReLU slopes 0.25. Deterministic per seed.
template <class T>
ModelParams<T> init_model(const UNetConfig& config, std::uint64_t seed);

/// Every tensor zero except norm scales (1) and PReLU slopes (0.25).
template <class T>
ModelParams<T> zero_model(const UNetConfig& config);

template <class To, class From>
ModelParams<To> cast_model(const ModelParams<From>& params);

/// input [B, in_channels, H, W] -> logits [B, out_channels, H, W].
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& input);

/// Channel-wise softmax of [B, C, H, W].
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Masked soft Dice loss over the kNumClasses mineral channels.
///
/// labels and soi are [B, H, W]; a pixel contributes when its SOI flag is set
/// and its label is not kSentinel. Throws when no pixel contributes.
template <class T>
double dice_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels, std::span<const std::uint8_t> soi);

/// Dice loss and its derivative with respect to the probabilities.
template <class T>
double dice_loss_grad(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> soi, Tensor<T>* dprobs);

template <class T>
struct Gradients {
  double loss = 0.0;
  std::vector<Tensor<T>> grads;  // same layout as ModelParams::tensors
  Tensor<T> probabilities;
};

/// Exact reverse-mode gradients of dice_loss(softmax(forward(input))).
template <class T>
Gradients<T> backward(const ModelParams<T>& params, const Tensor<T>& input, std::span<const std::uint8_t> labels,
                      std::span<const std::uint8_t> soi);

}  // namespace thinseg
