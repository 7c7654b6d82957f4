#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinseg/raster.hpp"

namespace thinseg {

using ClassArray = std::array<double, kNumClasses>;
using CountArray = std::array<std::int64_t, kNumClasses>;

/// Hard Dice from raw counts. Classes absent from both prediction and target
/// score 1, are flagged, and are left out of the mean.
struct DiceReport {
  CountArray intersection{};
  CountArray predicted{};
  CountArray target{};
  ClassArray per_class{};
  std::array<bool, kNumClasses> absent{};
  double mean = 0.0;

  /// Recomputes per-class scores and the mean from the counts.
  void finalize();
  nlohmann::json to_json() const;
};

/// Pixels scored by every metric: SOI set and both labels not kSentinel.
DiceReport dice_scores(const LabelMap& pred, const LabelMap& gt, const SOIMask& soi);

struct ConfusionMatrix {
  std::array<CountArray, kNumClasses> counts{};  // [true][predicted]

  std::int64_t total() const;
  /// Rows divided by their sums; empty rows stay zero.
  std::array<ClassArray, kNumClasses> row_normalized() const;
  double accuracy() const;
  nlohmann::json to_json() const;
  std::string to_csv(std::span<const std::string> names = {}) const;
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, const SOIMask& soi);

/// Per-class fractions of SOI pixels carrying a class label; zeros when none do.
ClassArray class_distribution(const LabelMap& map, const SOIMask& soi);

struct DistributionPoint {
  std::string section_id;
  int class_index = 0;
  double groundtruth_fraction = 0.0;
  double predicted_fraction = 0.0;
};

struct FitReport {
  std::size_t points = 0;
  std::optional<double> r_squared;  // empty when the groundtruth has no variance
  std::optional<double> slope;
  std::optional<double> intercept;
  double rmse = 0.0;  // against the identity line

  nlohmann::json to_json() const;
};

struct CorrelationReport {
  FitReport overall;
  std::map<int, FitReport> per_class;

  nlohmann::json to_json() const;
};

/// OLS fit predicted ~ groundtruth (R², slope, intercept) plus RMSE against
/// the identity, overall and per class. Needs at least two points.
CorrelationReport correlate(std::span<const DistributionPoint> points);

struct SectionEvaluation {
  std::string id;
  DiceReport dice;
  ConfusionMatrix confusion;
  ClassArray groundtruth{};
  ClassArray predicted{};
};

SectionEvaluation evaluate_section(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                                   const SOIMask& soi);

struct EvaluationReport {
  std::vector<SectionEvaluation> sections;
  DiceReport dice;  // global sums over all sections
  ConfusionMatrix confusion;
  std::vector<DistributionPoint> points;
  std::optional<CorrelationReport> correlation;  // empty with fewer than two points

  nlohmann::json to_json(std::span<const std::string> class_names = {}) const;
  /// report.json, dice.csv, confusion.csv, distributions.csv
  void write(const std::filesystem::path& dir, std::span<const std::string> class_names = {}) const;
};

EvaluationReport summarize(std::vector<SectionEvaluation> sections);

}  // namespace thinseg
