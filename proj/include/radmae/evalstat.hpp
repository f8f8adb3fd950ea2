#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radmae/datamodel.hpp"

namespace radmae::stats {

/// Area under the ROC curve as the normalised Mann-Whitney statistic:
/// (concordant + 0.5 * tied) / (n_pos * n_neg). Requires both classes.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Unweighted one-vs-rest macro AUROC. `probs` is row-major n x k. Classes with
/// no positive (or no negative) example are skipped and reported in `skipped`.
double auroc_ovr_macro(std::span<const double> probs, std::span<const int> labels, int k,
                       std::vector<int>* skipped = nullptr);

struct ClassificationMetrics {
  double balanced_accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<std::string> warnings;
};

/// Binary (k == 2): precision/recall/F1 of class 1. Multiclass: macro averages
/// over classes present in `labels`. Balanced accuracy is mean per-class recall.
ClassificationMetrics classification_metrics(std::span<const int> predictions, std::span<const int> labels, int k);

struct RegressionMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

RegressionMetrics regression_metrics(std::span<const double> predictions, std::span<const double> targets);

struct ConfusionMatrix {
  int k = 0;
  std::vector<long> counts;  // row = true class, column = predicted class

  explicit ConfusionMatrix(int classes = 0) : k(classes), counts(static_cast<std::size_t>(classes) * classes, 0) {}
  long& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  long at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  long total() const;
  long trace() const;
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int k);

/// One matrix per group value. Masked labels are skipped; entries whose group
/// is missing or not in `known_groups` (when non-empty) land in "other".
std::map<std::string, ConfusionMatrix> grouped_confusion(std::span<const int> predictions,
                                                         std::span<const LabeledTarget> labels,
                                                         std::span<const std::optional<std::string>> groups, int k,
                                                         const std::set<std::string>& known_groups = {});

struct FoldInterval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// mean +/- t_{n-1, (1+level)/2} * sd / sqrt(n), sample sd.
FoldInterval fold_ci(std::span<const double> values, double level = 0.95);

struct MetricReport {
  std::string metric;
  std::vector<double> per_fold;
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t n = 0;
};

MetricReport make_metric_report(std::string metric, std::vector<double> per_fold, double level = 0.95);

struct MannWhitneyResult {
  double u = 0.0;  // U of the first sample
  double p_value = 1.0;
  bool exact = false;
};

/// Two-sided Mann-Whitney U. Exact null distribution when the combined size is
/// at most 25 and there are no ties; otherwise normal approximation with tie
/// and continuity correction.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b);

struct ShapiroWilkResult {
  double w = 0.0;
  double p_value = 0.0;
};

/// Royston's (1995) approximation, valid for 3 <= n <= 5000. Throws on a
/// constant sample.
ShapiroWilkResult shapiro_wilk(std::span<const double> sample);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

/// Two-sided pooled-variance independent t-test.
TTestResult independent_t_test(std::span<const double> a, std::span<const double> b);

struct TestResult {
  std::string test_name;  // "t-test" or "mann-whitney"
  double statistic = 0.0;
  double p_value = 1.0;
  std::optional<double> normality_p_a;
  std::optional<double> normality_p_b;
  std::vector<std::string> flags;
};

/// Shapiro-Wilk gate: both samples normal at `alpha` -> t-test, else Mann-Whitney.
TestResult compare_models(std::span<const double> a, std::span<const double> b, double alpha = 0.05);

/// "****" < 1e-4, "***" < 1e-3, "**" < 1e-2, "*" < 0.05, otherwise "ns".
std::string significance_stars(double p);

double median(std::vector<double> values);

nlohmann::json to_json(const MetricReport& r);
nlohmann::json to_json(const TestResult& r);
nlohmann::json to_json(const ConfusionMatrix& m);

}  // namespace radmae::stats
