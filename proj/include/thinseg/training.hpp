#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinseg/checkpoint.hpp"
#include "thinseg/dataset.hpp"
#include "thinseg/evaluation.hpp"
#include "thinseg/inference.hpp"
#include "thinseg/network.hpp"

namespace thinseg {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 300;
  int val_interval_epochs = 15;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  int crop = 512;
  WindowConfig validation_window{};

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected; "network" (if present) is ignored here.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochEntry {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  int steps = 0;
};

struct ValidationEntry {
  int epoch = 0;
  DiceReport dice;
};

struct TrainingRecord {
  std::vector<EpochEntry> epochs;
  std::vector<ValidationEntry> validations;
  int best_epoch = 0;
  double best_dice = -1.0;
  std::int64_t steps = 0;
  bool diverged = false;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Hard-argmax Dice over all chunks from global per-class sums.
DiceReport validate(const ModelParams<float>& params, const std::vector<PackedChunk>& chunks,
                    const WindowConfig& window);

struct TrainResult {
  TrainingRecord record;
  Checkpoint<float> best;  // highest validation Dice
  Checkpoint<float> last;  // final (or last finite) parameters
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains from freshly initialized parameters (seeded by tc.seed).
TrainResult train(const std::vector<PackedChunk>& train_chunks, const std::vector<PackedChunk>& val_chunks,
                  const TrainConfig& tc, const UNetConfig& net, const ProgressFn& progress = {});

TrainResult train(const DatasetManifest& manifest, const TrainConfig& tc, const UNetConfig& net,
                  const ProgressFn& progress = {});

/// best.ckpt, last.ckpt, curves.csv, record.json
void write_training_outputs(const std::filesystem::path& dir, const TrainResult& r, const TrainConfig& tc);

}  // namespace thinseg
