#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "thinseg/corpus.hpp"
#include "thinseg/evaluation.hpp"
#include "thinseg/image_io.hpp"
#include "thinseg/inference.hpp"
#include "thinseg/service.hpp"
#include "thinseg/synth.hpp"
#include "thinseg/training.hpp"

namespace fs = std::filesystem;
using namespace thinseg;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw Error("no such file: " + path.string());
}

std::vector<std::string> split_ids(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const std::size_t comma = std::min(item.find(',', start), item.size());
      if (comma > start) out.push_back(item.substr(start, comma - start));
      start = comma + 1;
    }
  }
  return out;
}

struct SynthArgs {
  fs::path out;
  CorpusRecipe recipe;
};

void run_synth(SynthArgs a) {
  const CorpusRecipe standard;
  if (a.recipe.size != standard.size) {
    const double k = static_cast<double>(a.recipe.size) / standard.size;
    a.recipe.map_size = static_cast<int>(std::ceil(standard.map_size * k));
    a.recipe.soi_extent = static_cast<int>(standard.soi_extent * k);
    a.recipe.granularity_min = std::max(4.0, standard.granularity_min * k);
    a.recipe.granularity_max = std::max(8.0, standard.granularity_max * k);
  }
  write_corpus(a.out, a.recipe);
  std::cout << "wrote " << a.recipe.sections << " sections to " << a.out.string() << "\n";
}

struct RegisterArgs {
  fs::path fixed, moving, landmarks, out;
  std::string model = "similarity";
};

void run_register(const RegisterArgs& a) {
  if (!a.fixed.empty()) require_file(a.fixed);
  if (!a.moving.empty()) require_file(a.moving);
  const auto pairs = load_landmarks(a.landmarks);
  const TransformModel model = parse_transform_model(a.model);
  const RegistrationResult r = solve(pairs, model);
  write_text_atomic(a.out, to_json(r, model).dump(2) + "\n");
  for (std::size_t i = 0; i < r.residuals_um.size(); ++i) {
    std::printf("landmark %zu residual %.6g um\n", i, r.residuals_um[i]);
  }
  std::printf("rms residual %.6g um\n", r.rms_residual_um);
}

struct WarpArgs {
  fs::path map, transform, like, out;
  double map_scale_um = 0.0;
  double image_scale_um = 0.0;
  fs::path registry;
};

void run_warp(const WarpArgs& a) {
  const LabelMap map = read_indexed_png(a.map, PixelScale(a.map_scale_um));
  const Raster like = load_raster(a.like, PixelScale(a.image_scale_um));
  const LabelMap warped = warp_labelmap(map, load_transform(a.transform), like.width, like.height, like.scale);
  std::vector<Rgb> palette(256, Rgb{255, 255, 255});
  if (!a.registry.empty()) {
    const ClassRegistry registry = ClassRegistry::load(a.registry);
    for (const auto& e : registry.entries()) palette[e.id] = e.color;
  }
  write_indexed_png(a.out, warped, palette);
}

struct ChunkArgs {
  fs::path corpus, out, data_dir;
  PrepareOptions opt;
  std::string model = "similarity";
  std::string source = "landmarks";
};

void run_chunk(ChunkArgs a) {
  a.opt.model = parse_transform_model(a.model);
  if (a.source == "landmarks") {
    a.opt.source = TransformSource::Landmarks;
  } else if (a.source == "groundtruth") {
    a.opt.source = TransformSource::Groundtruth;
  } else {
    throw Error("transform source must be landmarks or groundtruth");
  }
  const Corpus corpus = Corpus::load(a.corpus);
  fs::path data = a.data_dir;
  if (data.empty()) data = (a.out.has_parent_path() ? a.out.parent_path() : fs::path(".")) / (a.out.stem().string() + "_data");
  const DatasetManifest m = prepare_dataset(corpus, data, a.opt);
  m.save(a.out);
  std::cout << m.chunks.size() << " chunks from " << m.sections.size() << " sections\n";
}

struct SplitArgs {
  fs::path manifest, out;
  std::string method = "same";
  std::vector<std::string> val_sections;
  double val_fraction = 0.20;
};

void run_split(const SplitArgs& a) {
  DatasetManifest m = DatasetManifest::load(a.manifest);
  const SplitMethod method = parse_split_method(a.method);
  if (method == SplitMethod::Same) {
    if (!a.val_sections.empty()) throw Error("--val-sections only applies to --method split");
    m = split_same(std::move(m), a.val_fraction);
  } else {
    const auto ids = split_ids(a.val_sections);
    if (ids.empty()) throw Error("--method split needs --val-sections");
    m = split_by_section(std::move(m), ids);
  }
  m.save(a.out.empty() ? a.manifest : a.out);
  const SplitDistributionReport d = compare_split_distributions(m);
  std::printf("train %zu chunks, validation %zu chunks, largest class-fraction gap %.2f points\n", m.train_ids.size(),
              m.val_ids.size(), d.max_abs_difference * 100.0);
}

struct TrainArgs {
  fs::path manifest, config, out;
};

void run_train(const TrainArgs& a) {
  const nlohmann::json cfg = read_json(a.config);
  const TrainConfig tc = TrainConfig::from_json(cfg);
  const UNetConfig net = cfg.contains("network") ? UNetConfig::from_json(cfg["network"]) : UNetConfig{};
  const DatasetManifest m = DatasetManifest::load(a.manifest);
  const TrainResult r = train(m, tc, net, [](const std::string& line) { std::cout << line << std::endl; });
  write_training_outputs(a.out, r, tc);
  if (r.record.diverged) throw Error("training diverged; last finite state kept in " + (a.out / "last.ckpt").string());
  std::printf("best validation Dice %.4f at epoch %d\n", r.record.best_dice, r.record.best_epoch);
}

struct InferArgs {
  fs::path checkpoint, pp, xp, soi, out, registry;
  double scale_um = 1.0;
  WindowConfig window;
  bool probabilities = false;
};

void run_infer(const InferArgs& a) {
  const Checkpoint<float> ckpt = load_checkpoint<float>(a.checkpoint);
  ClassRegistry registry;
  if (!a.registry.empty()) {
    registry = ClassRegistry::load(a.registry);
  } else if (ckpt.metadata.contains("registry")) {
    registry = ClassRegistry::from_json(ckpt.metadata["registry"]);
  }
  const PixelScale scale(a.scale_um);
  const Raster image = stack_pp_xp(load_raster(a.pp, scale), load_raster(a.xp, scale));
  const SOIMask soi = read_soi_png(a.soi, scale);
  const Prediction p = sliding_window_predict(ckpt.params, image, soi, a.window);

  std::vector<Rgb> palette(256, Rgb{255, 255, 255});
  for (const auto& e : registry.entries()) palette[e.id] = e.color;
  fs::create_directories(a.out);
  write_indexed_png(a.out / "classes.png", p.classes, palette);
  write_png(a.out / "render.png", render_prediction(p.classes, registry));
  if (a.probabilities) {
    const std::size_t plane = p.classes.pixel_count();
    for (int c = 0; c < kNumOutputs; ++c) {
      write_png16(a.out / ("probability_" + std::to_string(c) + ".png"), p.classes.width, p.classes.height,
                  std::span<const float>(p.probabilities.values).subspan(c * plane, plane));
    }
  }
  const nlohmann::json info{{"checkpoint", fs::absolute(a.checkpoint).string()},
                            {"window", a.window.window},
                            {"overlap", a.window.overlap},
                            {"width", p.classes.width},
                            {"height", p.classes.height},
                            {"scale_um", a.scale_um},
                            {"distribution", class_distribution(p.classes, soi)}};
  write_text_atomic(a.out / "prediction.json", info.dump(2) + "\n");
}

struct EvaluateArgs {
  std::vector<fs::path> pred, gt, soi;
  std::vector<std::string> ids;
  fs::path out, registry;
};

void run_evaluate(const EvaluateArgs& a) {
  if (a.pred.size() != a.gt.size() || a.pred.size() != a.soi.size()) {
    throw Error("--pred, --gt and --soi must be given the same number of times");
  }
  if (!a.ids.empty() && a.ids.size() != a.pred.size()) throw Error("--id must be given once per --pred");
  std::vector<SectionEvaluation> sections;
  const PixelScale unit(1.0);
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const std::string id = a.ids.empty() ? a.pred[i].parent_path().filename().string() + ":" + a.pred[i].stem().string()
                                         : a.ids[i];
    sections.push_back(evaluate_section(id, read_indexed_png(a.pred[i], unit), read_indexed_png(a.gt[i], unit),
                                        read_soi_png(a.soi[i], unit)));
  }
  const EvaluationReport report = summarize(std::move(sections));
  std::vector<std::string> names;
  if (!a.registry.empty()) names = ClassRegistry::load(a.registry).class_names();
  report.write(a.out, names);
  std::printf("mean Dice %.4f", report.dice.mean);
  if (report.correlation && report.correlation->overall.r_squared) {
    std::printf(", distribution R^2 %.4f, RMSE %.4f", *report.correlation->overall.r_squared,
                report.correlation->overall.rmse);
  }
  std::printf("\n");
}

struct ServeArgs {
  fs::path corpus;
  std::string host = "127.0.0.1";
  int port = 8080;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Thin-section mineral segmentation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  c_synth->add_option("--out", synth.out)->required();
  c_synth->add_option("--sections", synth.recipe.sections)->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", synth.recipe.seed);
  c_synth->add_option("--size", synth.recipe.size, "Image side in pixels; map and SOI extents scale along")->check(CLI::PositiveNumber);

  RegisterArgs reg;
  auto* c_reg = app.add_subcommand("register", "Solve a map-to-image transform from landmarks");
  c_reg->add_option("--fixed", reg.fixed, "Thin-section image");
  c_reg->add_option("--moving", reg.moving, "Mineral map");
  c_reg->add_option("--landmarks", reg.landmarks)->required();
  c_reg->add_option("--model", reg.model)->check(CLI::IsMember({"similarity", "affine"}));
  c_reg->add_option("--out", reg.out)->required();

  WarpArgs warp;
  auto* c_warp = app.add_subcommand("warp", "Resample a label map onto an image grid");
  c_warp->add_option("--map", warp.map)->required();
  c_warp->add_option("--transform", warp.transform)->required();
  c_warp->add_option("--like", warp.like)->required();
  c_warp->add_option("--out", warp.out)->required();
  c_warp->add_option("--map-scale-um", warp.map_scale_um)->required()->check(CLI::PositiveNumber);
  c_warp->add_option("--image-scale-um", warp.image_scale_um)->required()->check(CLI::PositiveNumber);
  c_warp->add_option("--registry", warp.registry, "Palette for the output");

  ChunkArgs chunk;
  auto* c_chunk = app.add_subcommand("chunk", "Register, consolidate and chunk a corpus");
  c_chunk->add_option("--corpus", chunk.corpus)->required();
  c_chunk->add_option("--size", chunk.opt.chunk)->check(CLI::PositiveNumber);
  c_chunk->add_option("--min-coverage", chunk.opt.min_coverage)->check(CLI::Range(0.0, 1.0));
  c_chunk->add_option("--out", chunk.out)->required();
  c_chunk->add_option("--data-dir", chunk.data_dir, "Class maps and chunk files (default: <out>_data)");
  c_chunk->add_option("--model", chunk.model)->check(CLI::IsMember({"similarity", "affine"}));
  c_chunk->add_option("--transform-source", chunk.source)->check(CLI::IsMember({"landmarks", "groundtruth"}));
  c_chunk->add_flag("--use-truth", chunk.opt.use_truth, "Label from the full-resolution truth maps");
  c_chunk->add_flag("--materialize", chunk.opt.materialize, "Write every chunk to disk");

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Assign chunks to training and validation");
  c_split->add_option("--manifest", split.manifest)->required();
  c_split->add_option("--method", split.method)->check(CLI::IsMember({"same", "split"}));
  c_split->add_option("--val-sections", split.val_sections);
  c_split->add_option("--val-fraction", split.val_fraction)->check(CLI::Range(0.0, 1.0));
  c_split->add_option("--out", split.out, "Output manifest (default: overwrite --manifest)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--manifest", tr.manifest)->required();
  c_train->add_option("--config", tr.config)->required();
  c_train->add_option("--out", tr.out)->required();

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Predict a class map for one section");
  c_infer->add_option("--checkpoint", inf.checkpoint)->required();
  c_infer->add_option("--pp", inf.pp)->required();
  c_infer->add_option("--xp", inf.xp)->required();
  c_infer->add_option("--soi", inf.soi)->required();
  c_infer->add_option("--out", inf.out)->required();
  c_infer->add_option("--window", inf.window.window)->check(CLI::PositiveNumber);
  c_infer->add_option("--overlap", inf.window.overlap)->check(CLI::Range(0.0, 0.99));
  c_infer->add_option("--scale-um", inf.scale_um)->check(CLI::PositiveNumber);
  c_infer->add_option("--registry", inf.registry, "Class registry (default: the checkpoint's)");
  c_infer->add_flag("--probabilities", inf.probabilities, "Also write per-channel probabilities");

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Score predicted class maps");
  c_eval->add_option("--pred", ev.pred)->required();
  c_eval->add_option("--gt", ev.gt)->required();
  c_eval->add_option("--soi", ev.soi)->required();
  c_eval->add_option("--id", ev.ids, "Section name per --pred");
  c_eval->add_option("--out", ev.out)->required();
  c_eval->add_option("--registry", ev.registry, "Class registry for column names");

  ServeArgs srv;
  auto* c_serve = app.add_subcommand("serve", "Run the registration service");
  c_serve->add_option("--corpus", srv.corpus)->required();
  c_serve->add_option("--port", srv.port)->check(CLI::Range(0, 65535));
  c_serve->add_option("--host", srv.host);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*c_synth) run_synth(synth);
    if (*c_reg) run_register(reg);
    if (*c_warp) run_warp(warp);
    if (*c_chunk) run_chunk(chunk);
    if (*c_split) run_split(split);
    if (*c_train) run_train(tr);
    if (*c_infer) run_infer(inf);
    if (*c_eval) run_evaluate(ev);
    if (*c_serve) {
      std::cout << "serving " << srv.corpus.string() << " on " << srv.host << ":" << srv.port << std::endl;
      serve(Corpus::load(srv.corpus), srv.host, srv.port);
    }
  } catch (const std::exception& e) {
    std::cerr << "thinseg: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
