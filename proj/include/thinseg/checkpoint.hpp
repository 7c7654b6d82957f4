#pragma once

#include <filesystem>

#include <json.hpp>

#include "thinseg/network.hpp"
#include "thinseg/optimizer.hpp"

namespace thinseg {

template <class T>
struct Checkpoint {
  ModelParams<T> params;
  AdamState<T> optimizer;
  int epoch = 0;
  double best_val_dice = 0.0;
  nlohmann::json metadata = nlohmann::json::object();
};

/// File layout: a magic line, a little-endian uint64 header length, a JSON
/// header (config, fingerprint, dtype, tensor table, training state), then
/// the raw tensor blob in table order.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);

/// Loads a checkpoint; throws if the stored fingerprint disagrees with the
/// stored config or the file is truncated. Values stored in another dtype are
/// converted.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace thinseg
