#include "thinseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "thinseg/image_io.hpp"
#include "thinseg/optimizer.hpp"

namespace thinseg {

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error("batch_size must be at least 1");
  if (epochs < 1) throw Error("epochs must be at least 1");
  if (val_interval_epochs < 1) throw Error("val_interval_epochs must be at least 1");
  if (epochs < val_interval_epochs) throw Error("epochs must be at least val_interval_epochs");
  if (!(lr > 0) || !std::isfinite(lr)) throw Error("lr must be positive");
  if (crop < 1) throw Error("crop must be positive");
  validation_window.stride();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"epochs", epochs},
          {"val_interval_epochs", val_interval_epochs},
          {"lr", lr},
          {"seed", seed},
          {"crop", crop},
          {"window", validation_window.window},
          {"overlap", validation_window.overlap}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"batch_size", "epochs", "val_interval_epochs", "lr", "seed",
                                              "crop",       "window", "overlap",             "network"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw Error("unknown training option '" + k + "'");
  }
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.val_interval_epochs = j.value("val_interval_epochs", c.val_interval_epochs);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.crop = j.value("crop", c.crop);
  c.validation_window.window = j.value("window", c.validation_window.window);
  c.validation_window.overlap = j.value("overlap", c.validation_window.overlap);
  c.validate();
  return c;
}

std::string TrainingRecord::to_csv() const {
  std::ostringstream s;
  s.precision(10);
  s << "epoch,loss,lr,val_dice_mean";
  for (int c = 0; c < kNumClasses; ++c) s << ",val_dice_" << c;
  s << "\n";
  for (const auto& e : epochs) {
    s << e.epoch << "," << e.loss << "," << e.lr << ",";
    auto v = std::find_if(validations.begin(), validations.end(), [&](const auto& x) { return x.epoch == e.epoch; });
    if (v != validations.end()) {
      s << v->dice.mean;
      for (double d : v->dice.per_class) s << "," << d;
    } else {
      for (int c = 0; c < kNumClasses; ++c) s << ",";
    }
    s << "\n";
  }
  return s.str();
}

nlohmann::json TrainingRecord::to_json() const {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}, {"steps", e.steps}});
  j["validations"] = nlohmann::json::array();
  for (const auto& v : validations) j["validations"].push_back({{"epoch", v.epoch}, {"dice", v.dice.to_json()}});
  j["best_epoch"] = best_epoch;
  j["best_dice"] = best_dice;
  j["steps"] = steps;
  j["diverged"] = diverged;
  return j;
}

DiceReport validate(const ModelParams<float>& params, const std::vector<PackedChunk>& chunks,
                    const WindowConfig& window) {
  DiceReport total;
  for (const auto& pc : chunks) {
    const Chunk c = pc.unpack();
    const Prediction p = sliding_window_predict(params, c.image, c.soi, window);
    const DiceReport d = dice_scores(p.classes, c.labels, c.soi);
    for (int k = 0; k < kNumClasses; ++k) {
      total.intersection[k] += d.intersection[k];
      total.predicted[k] += d.predicted[k];
      total.target[k] += d.target[k];
    }
  }
  total.finalize();
  return total;
}

namespace {

struct Batch {
  Tensor<float> input;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> soi;
};

Batch make_batch(const std::vector<PackedChunk>& chunks, std::span<const int> picks, const TrainConfig& tc,
                 int epoch, int first_position) {
  const int n = tc.crop, b = static_cast<int>(picks.size());
  Batch out;
  out.input = Tensor<float>({b, 6, n, n});
  out.labels.resize(static_cast<std::size_t>(b) * n * n);
  out.soi.resize(out.labels.size());
  for (int i = 0; i < b; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(tc.seed), static_cast<std::uint32_t>(tc.seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(first_position + i)};
    std::mt19937_64 rng(seq);
    const Sample s = augment(chunks[picks[i]], rng, n);
    std::copy(s.image.begin(), s.image.end(), out.input.values.begin() + static_cast<long>(i) * 6 * n * n);
    std::copy(s.labels.begin(), s.labels.end(), out.labels.begin() + static_cast<long>(i) * n * n);
    std::copy(s.soi.begin(), s.soi.end(), out.soi.begin() + static_cast<long>(i) * n * n);
  }
  return out;
}

bool has_scored_pixel(const Batch& b) {
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    if (b.soi[i] && b.labels[i] != kSentinel) return true;
  }
  return false;
}

}  // namespace

TrainResult train(const std::vector<PackedChunk>& train_chunks, const std::vector<PackedChunk>& val_chunks,
                  const TrainConfig& tc, const UNetConfig& net, const ProgressFn& progress) {
  tc.validate();
  net.validate();
  if (train_chunks.empty()) throw Error("training set is empty");
  if (val_chunks.empty()) throw Error("validation set is empty");
  if (tc.crop % net.size_divisor() != 0) {
    throw Error("crop " + std::to_string(tc.crop) + " is not divisible by " + std::to_string(net.size_divisor()));
  }
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };

  TrainResult r;
  Checkpoint<float> state;
  state.params = init_model<float>(net, tc.seed);
  std::mt19937_64 shuffle_rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(train_chunks.size());

  auto snapshot = [&](int epoch) {
    Checkpoint<float> c = state;
    c.epoch = epoch;
    c.best_val_dice = r.record.best_dice;
    c.metadata = {{"train_config", tc.to_json()}};
    return c;
  };
  r.best = snapshot(0);
  r.last = r.best;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = scheduled_lr(tc.lr, epoch, tc.epochs);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    int steps = 0;
    for (std::size_t p0 = 0; p0 < order.size(); p0 += tc.batch_size) {
      const std::size_t p1 = std::min(order.size(), p0 + tc.batch_size);
      const Batch batch = make_batch(train_chunks, std::span<const int>(order).subspan(p0, p1 - p0), tc, epoch,
                                     static_cast<int>(p0));
      if (!has_scored_pixel(batch)) continue;
      Gradients<float> g;
      try {
        g = backward(state.params, batch.input, batch.labels, batch.soi);
      } catch (const NumericalError& e) {
        r.record.diverged = true;
        say(std::string("diverged: ") + e.what());
        break;
      }
      if (!std::isfinite(g.loss)) {
        r.record.diverged = true;
        break;
      }
      optimizer_step(state.params, g.grads, state.optimizer, lr);
      bool finite = true;
      for (const auto& t : state.params.tensors) {
        for (float v : t.values) finite = finite && std::isfinite(v);
      }
      if (!finite) {
        r.record.diverged = true;
        break;
      }
      loss_sum += g.loss;
      ++steps;
      ++r.record.steps;
    }
    if (r.record.diverged) {
      say("training aborted at epoch " + std::to_string(epoch + 1));
      break;
    }
    EpochEntry e{epoch + 1, steps > 0 ? loss_sum / steps : 0.0, lr, steps};
    r.record.epochs.push_back(e);
    std::ostringstream msg;
    msg.precision(5);
    msg << "epoch " << e.epoch << "/" << tc.epochs << " loss " << e.loss << " lr " << lr;
    if ((epoch + 1) % tc.val_interval_epochs == 0) {
      ValidationEntry v{epoch + 1, validate(state.params, val_chunks, tc.validation_window)};
      msg << " val_dice " << v.dice.mean;
      if (v.dice.mean > r.record.best_dice) {
        r.record.best_dice = v.dice.mean;
        r.record.best_epoch = epoch + 1;
        r.best = snapshot(epoch + 1);
      }
      r.record.validations.push_back(v);
    }
    r.last = snapshot(epoch + 1);
    say(msg.str());
  }
  r.best.best_val_dice = r.record.best_dice;
  r.last.best_val_dice = r.record.best_dice;
  return r;
}

TrainResult train(const DatasetManifest& manifest, const TrainConfig& tc, const UNetConfig& net,
                  const ProgressFn& progress) {
  manifest.check_partition();
  const auto train_chunks = load_chunks(manifest, manifest.train_ids);
  const auto val_chunks = load_chunks(manifest, manifest.val_ids);
  TrainResult r = train(train_chunks, val_chunks, tc, net, progress);
  if (!manifest.registry.empty()) {
    const nlohmann::json registry = ClassRegistry::load(manifest.registry).to_json();
    r.best.metadata["registry"] = registry;
    r.last.metadata["registry"] = registry;
  }
  return r;
}

void write_training_outputs(const std::filesystem::path& dir, const TrainResult& r, const TrainConfig& tc) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "best.ckpt", r.best);
  save_checkpoint(dir / "last.ckpt", r.last);
  write_text_atomic(dir / "curves.csv", r.record.to_csv());
  nlohmann::json j = r.record.to_json();
  j["train_config"] = tc.to_json();
  j["network"] = r.best.params.config.to_json();
  write_text_atomic(dir / "record.json", j.dump(2) + "\n");
}

}  // namespace thinseg
