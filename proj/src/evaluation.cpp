#include "thinseg/evaluation.hpp"

#include <cmath>
#include <sstream>

#include "thinseg/image_io.hpp"

namespace thinseg {

namespace {

void check_aligned(const LabelMap& a, const LabelMap& b, const SOIMask& soi) {
  if (a.width != b.width || a.height != b.height || a.width != soi.width || a.height != soi.height) {
    throw Error("prediction, groundtruth, and SOI must share dimensions");
  }
}

void check_class(std::uint8_t v) {
  if (v >= kNumClasses) throw Error("label value " + std::to_string(v) + " is not a class index");
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string class_name(std::span<const std::string> names, int c) {
  return static_cast<std::size_t>(c) < names.size() ? names[c] : "class" + std::to_string(c);
}

}  // namespace

void DiceReport::finalize() {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const std::int64_t den = predicted[c] + target[c];
    absent[c] = den == 0;
    if (absent[c]) {
      per_class[c] = 1.0;
      continue;
    }
    per_class[c] = 2.0 * static_cast<double>(intersection[c]) / static_cast<double>(den);
    sum += per_class[c];
    ++present;
  }
  mean = present > 0 ? sum / present : 1.0;
}

nlohmann::json DiceReport::to_json() const {
  return {{"mean", mean},
          {"per_class", per_class},
          {"absent", absent},
          {"intersection", intersection},
          {"predicted", predicted},
          {"target", target}};
}

DiceReport dice_scores(const LabelMap& pred, const LabelMap& gt, const SOIMask& soi) {
  check_aligned(pred, gt, soi);
  DiceReport r;
  for (std::size_t i = 0; i < pred.pixel_count(); ++i) {
    const std::uint8_t p = pred.values[i], g = gt.values[i];
    if (soi.mask[i] == 0 || p == kSentinel || g == kSentinel) continue;
    check_class(p);
    check_class(g);
    ++r.predicted[p];
    ++r.target[g];
    if (p == g) ++r.intersection[p];
  }
  r.finalize();
  return r;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts) {
    for (auto v : row) t += v;
  }
  return t;
}

std::array<ClassArray, kNumClasses> ConfusionMatrix::row_normalized() const {
  std::array<ClassArray, kNumClasses> out{};
  for (int r = 0; r < kNumClasses; ++r) {
    std::int64_t s = 0;
    for (auto v : counts[r]) s += v;
    if (s == 0) continue;
    for (int c = 0; c < kNumClasses; ++c) out[r][c] = static_cast<double>(counts[r][c]) / static_cast<double>(s);
  }
  return out;
}

double ConfusionMatrix::accuracy() const {
  const std::int64_t t = total();
  if (t == 0) return 0.0;
  std::int64_t d = 0;
  for (int c = 0; c < kNumClasses; ++c) d += counts[c][c];
  return static_cast<double>(d) / static_cast<double>(t);
}

nlohmann::json ConfusionMatrix::to_json() const {
  return {{"counts", counts}, {"row_normalized", row_normalized()}, {"accuracy", accuracy()}, {"total", total()}};
}

std::string ConfusionMatrix::to_csv(std::span<const std::string> names) const {
  std::ostringstream s;
  s << "true\\predicted";
  for (int c = 0; c < kNumClasses; ++c) s << "," << class_name(names, c);
  s << "\n";
  for (int r = 0; r < kNumClasses; ++r) {
    s << class_name(names, r);
    for (int c = 0; c < kNumClasses; ++c) s << "," << counts[r][c];
    s << "\n";
  }
  return s.str();
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt, const SOIMask& soi) {
  check_aligned(pred, gt, soi);
  ConfusionMatrix m;
  for (std::size_t i = 0; i < pred.pixel_count(); ++i) {
    const std::uint8_t p = pred.values[i], g = gt.values[i];
    if (soi.mask[i] == 0 || p == kSentinel || g == kSentinel) continue;
    check_class(p);
    check_class(g);
    ++m.counts[g][p];
  }
  return m;
}

ClassArray class_distribution(const LabelMap& map, const SOIMask& soi) {
  if (map.width != soi.width || map.height != soi.height) throw Error("map and SOI must share dimensions");
  CountArray n{};
  std::int64_t total = 0;
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    const std::uint8_t v = map.values[i];
    if (soi.mask[i] == 0 || v == kSentinel) continue;
    check_class(v);
    ++n[v];
    ++total;
  }
  ClassArray f{};
  if (total == 0) return f;
  for (int c = 0; c < kNumClasses; ++c) f[c] = static_cast<double>(n[c]) / static_cast<double>(total);
  return f;
}

nlohmann::json FitReport::to_json() const {
  return {{"points", points},
          {"r_squared", optional_json(r_squared)},
          {"slope", optional_json(slope)},
          {"intercept", optional_json(intercept)},
          {"rmse", rmse}};
}

nlohmann::json CorrelationReport::to_json() const {
  nlohmann::json j = overall.to_json();
  j["per_class"] = nlohmann::json::object();
  for (const auto& [c, r] : per_class) j["per_class"][std::to_string(c)] = r.to_json();
  return j;
}

namespace {

FitReport fit(std::span<const DistributionPoint> pts) {
  FitReport r;
  r.points = pts.size();
  if (pts.empty()) return r;
  const double n = static_cast<double>(pts.size());
  double mx = 0, my = 0, se = 0;
  for (const auto& p : pts) {
    mx += p.groundtruth_fraction;
    my += p.predicted_fraction;
    const double d = p.predicted_fraction - p.groundtruth_fraction;
    se += d * d;
  }
  mx /= n;
  my /= n;
  r.rmse = std::sqrt(se / n);
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& p : pts) {
    const double dx = p.groundtruth_fraction - mx, dy = p.predicted_fraction - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (pts.size() < 2 || sxx <= 0.0) return r;
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double ss_res = 0;
  for (const auto& p : pts) {
    const double e = p.predicted_fraction - (slope * p.groundtruth_fraction + intercept);
    ss_res += e * e;
  }
  r.slope = slope;
  r.intercept = intercept;
  // SStot is over the dependent (predicted) values.
  r.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return r;
}

}  // namespace

CorrelationReport correlate(std::span<const DistributionPoint> points) {
  if (points.size() < 2) throw Error("correlate needs at least two distribution points");
  CorrelationReport r;
  r.overall = fit(points);
  std::map<int, std::vector<DistributionPoint>> by_class;
  for (const auto& p : points) by_class[p.class_index].push_back(p);
  for (const auto& [c, pts] : by_class) r.per_class[c] = fit(pts);
  return r;
}

SectionEvaluation evaluate_section(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                                   const SOIMask& soi) {
  SectionEvaluation e;
  e.id = id;
  e.dice = dice_scores(pred, gt, soi);
  e.confusion = confusion(pred, gt, soi);
  // Both distributions are taken over the commonly scored pixels.
  const auto total = static_cast<double>(e.confusion.total());
  for (int c = 0; c < kNumClasses; ++c) {
    double row = 0, col = 0;
    for (int k = 0; k < kNumClasses; ++k) {
      row += static_cast<double>(e.confusion.counts[c][k]);
      col += static_cast<double>(e.confusion.counts[k][c]);
    }
    e.groundtruth[c] = total > 0 ? row / total : 0.0;
    e.predicted[c] = total > 0 ? col / total : 0.0;
  }
  return e;
}

EvaluationReport summarize(std::vector<SectionEvaluation> sections) {
  EvaluationReport r;
  r.sections = std::move(sections);
  for (const auto& s : r.sections) {
    for (int c = 0; c < kNumClasses; ++c) {
      r.dice.intersection[c] += s.dice.intersection[c];
      r.dice.predicted[c] += s.dice.predicted[c];
      r.dice.target[c] += s.dice.target[c];
      for (int k = 0; k < kNumClasses; ++k) r.confusion.counts[c][k] += s.confusion.counts[c][k];
      r.points.push_back({s.id, c, s.groundtruth[c], s.predicted[c]});
    }
  }
  r.dice.finalize();
  if (r.points.size() >= 2) r.correlation = correlate(r.points);
  return r;
}

nlohmann::json EvaluationReport::to_json(std::span<const std::string> class_names) const {
  nlohmann::json j;
  nlohmann::json names = nlohmann::json::array();
  for (int c = 0; c < kNumClasses; ++c) names.push_back(class_name(class_names, c));
  j["classes"] = names;
  j["dice"] = dice.to_json();
  j["confusion"] = confusion.to_json();
  j["correlation"] = correlation ? correlation->to_json() : nlohmann::json();
  j["sections"] = nlohmann::json::array();
  for (const auto& s : sections) {
    j["sections"].push_back({{"id", s.id},
                             {"dice", s.dice.to_json()},
                             {"groundtruth_fractions", s.groundtruth},
                             {"predicted_fractions", s.predicted}});
  }
  return j;
}

void EvaluationReport::write(const std::filesystem::path& dir, std::span<const std::string> class_names) const {
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / "report.json", to_json(class_names).dump(2) + "\n");

  std::ostringstream d;
  d << "section,class,dice,absent\n";
  auto dice_rows = [&](const std::string& id, const DiceReport& r) {
    for (int c = 0; c < kNumClasses; ++c) {
      d << id << "," << class_name(class_names, c) << "," << r.per_class[c] << "," << (r.absent[c] ? 1 : 0) << "\n";
    }
  };
  for (const auto& s : sections) dice_rows(s.id, s.dice);
  dice_rows("all", dice);
  write_text_atomic(dir / "dice.csv", d.str());

  write_text_atomic(dir / "confusion.csv", confusion.to_csv(class_names));

  std::ostringstream p;
  p.precision(10);
  p << "section,class,groundtruth_fraction,predicted_fraction\n";
  for (const auto& pt : points) {
    p << pt.section_id << "," << class_name(class_names, pt.class_index) << "," << pt.groundtruth_fraction << ","
      << pt.predicted_fraction << "\n";
  }
  write_text_atomic(dir / "distributions.csv", p.str());
}

}  // namespace thinseg
