#ifndef QVCBI_EVAL_HPP
#define QVCBI_EVAL_HPP

// ROC curves, Mann-Whitney AUC, cross-entropy and normalized confusion matrices.

#include "qvcbi/core.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qvcbi {

struct RocResult {
  std::vector<double> thresholds;  // +inf, then unique scores in decreasing order
  std::vector<double> tpr;
  std::vector<double> fpr;
  double auc = 0.0;
};

/// Curve from a sweep over the unique scores (score >= threshold is positive); AUC is the
/// Mann-Whitney statistic with ties counted 1/2. Throws DataError if only one class is present.
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under a curve given as parallel fpr/tpr vectors.
double trapezoid_auc(const std::vector<double>& fpr, const std::vector<double>& tpr);

/// Highest true positive rate at false positive rate `fpr_target`, linearly interpolated between curve points.
double tpr_at_fpr(const RocResult& roc, double fpr_target);

/// -(1/N) sum log p[label] with p clipped to >= 1e-12. `probs` is (classes x N).
double cross_entropy(const Matrix& probs, std::span<const int> labels);

/// Rows: true damaged, true undamaged. Columns: predicted damaged, predicted undamaged.
/// [[TP, FN], [FP, TN]] divided by the row totals.
Eigen::Matrix2d confusion_binary(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;
  Index excluded = 0;
};

/// Score q(m, cell) and label (truth == m) for every truth point whose cell has a finite posterior
/// and is not excluded by `mask` (mask[cell] != 0 excludes).
ScoredLabels one_vs_rest(const Matrix& q, std::span<const Index> cells, std::span<const int> truth, int m,
                         std::span<const std::uint8_t> mask = {});

struct ClassMetrics {
  std::string node;
  int state = 0;
  Index positives = 0;
  Index negatives = 0;
  double auc_posterior = 0.0;
  double auc_prior = 0.0;  // NaN when no prior is available
};

struct NodeMetrics {
  std::string node;
  Index points = 0;
  Index excluded = 0;
  double cross_entropy = 0.0;
  Eigen::Matrix2d confusion = Eigen::Matrix2d::Zero();
  double threshold = 0.5;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  std::vector<NodeMetrics> nodes;
};

/// metrics.json plus class_metrics.csv and confusion.csv.
void write_metrics(const MetricsReport& report, const std::filesystem::path& outdir);
MetricsReport read_metrics(const std::filesystem::path& outdir);

/// fpr,tpr,threshold polyline.
void write_roc_csv(const RocResult& roc, const std::filesystem::path& path);

}  // namespace qvcbi

#endif  // QVCBI_EVAL_HPP
