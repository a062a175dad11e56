#include "qvcbi/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

using namespace qvcbi;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

struct Sample {
  std::vector<double> scores;
  std::vector<int> labels;
};

Sample random_sample(std::mt19937_64& rng, bool quantize) {
  std::uniform_int_distribution<int> size(2, 300);
  std::normal_distribution<double> n01;
  Sample s;
  const int n = size(rng);
  for (int i = 0; i < n; ++i) {
    const int label = i < 2 ? i : static_cast<int>(rng() % 2);
    double v = n01(rng) + 0.8 * label;
    if (quantize) v = std::round(v * 4.0) / 4.0;
    s.scores.push_back(v);
    s.labels.push_back(label);
  }
  return s;
}

}  // namespace

TEST(RocAuc, WorkedExamples) {
  const std::vector<double> perfect{0.9, 0.8, 0.1, 0.2};
  const std::vector<int> pl{1, 1, 0, 0};
  EXPECT_EQ(roc_auc(perfect, pl).auc, 1.0);
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> l{0, 0, 1, 1};
  EXPECT_EQ(roc_auc(s, l).auc, 0.75);
  const std::vector<double> tied(6, 0.3);
  const std::vector<int> tl{1, 0, 1, 0, 0, 1};
  EXPECT_EQ(roc_auc(tied, tl).auc, 0.5);
}

TEST(RocAuc, SingleClassIsAnError) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(roc_auc(s, std::vector<int>{1, 1}), DataError);
  EXPECT_THROW(roc_auc(s, std::vector<int>{0, 0}), DataError);
}

TEST(RocAuc, MatchesThePairwiseOracle) {
  std::mt19937_64 rng(17);
  for (int set = 0; set < 100; ++set) {
    const Sample s = random_sample(rng, set % 2 == 0);
    EXPECT_NEAR(roc_auc(s.scores, s.labels).auc, pairwise_auc(s.scores, s.labels), 1e-12) << "set " << set;
  }
}

TEST(RocAuc, CurveShapeAndTrapezoid) {
  std::mt19937_64 rng(19);
  for (int set = 0; set < 50; ++set) {
    const Sample s = random_sample(rng, set % 3 == 0);
    const RocResult r = roc_auc(s.scores, s.labels);
    ASSERT_EQ(r.tpr.size(), r.fpr.size());
    ASSERT_EQ(r.tpr.size(), r.thresholds.size());
    EXPECT_EQ(r.fpr.front(), 0.0);
    EXPECT_EQ(r.tpr.front(), 0.0);
    EXPECT_EQ(r.fpr.back(), 1.0);
    EXPECT_EQ(r.tpr.back(), 1.0);
    EXPECT_TRUE(std::isinf(r.thresholds.front()));
    for (std::size_t i = 1; i < r.tpr.size(); ++i) {
      EXPECT_GE(r.tpr[i], r.tpr[i - 1]);
      EXPECT_GE(r.fpr[i], r.fpr[i - 1]);
      EXPECT_LT(r.thresholds[i], r.thresholds[i - 1]);
    }
    EXPECT_NEAR(trapezoid_auc(r.fpr, r.tpr), r.auc, 1e-9);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
  }
}

TEST(RocAuc, NegationAndMonotoneTransforms) {
  std::mt19937_64 rng(23);
  for (int set = 0; set < 50; ++set) {
    const Sample s = random_sample(rng, set % 2 == 1);
    const double auc = roc_auc(s.scores, s.labels).auc;
    std::vector<double> neg, ex, aff;
    for (double v : s.scores) {
      neg.push_back(-v);
      ex.push_back(std::exp(v));
      aff.push_back(3.0 * v - 7.0);
    }
    EXPECT_NEAR(roc_auc(neg, s.labels).auc, 1.0 - auc, 1e-12);
    EXPECT_NEAR(roc_auc(ex, s.labels).auc, auc, 1e-12);
    EXPECT_NEAR(roc_auc(aff, s.labels).auc, auc, 1e-12);
  }
}

TEST(TprAtFpr, InterpolatesAlongTheCurve) {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<int> l{1, 0, 1, 0};
  const RocResult r = roc_auc(s, l);
  EXPECT_DOUBLE_EQ(tpr_at_fpr(r, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(tpr_at_fpr(r, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(tpr_at_fpr(r, 0.25), 0.5);
  EXPECT_DOUBLE_EQ(tpr_at_fpr(r, 1.0), 1.0);
}

TEST(CrossEntropy, WorkedExamples) {
  Matrix one_hot = Matrix::Zero(3, 3);
  one_hot(0, 0) = one_hot(2, 1) = one_hot(1, 2) = 1.0;
  EXPECT_EQ(cross_entropy(one_hot, std::vector<int>{0, 2, 1}), 0.0);
  const Matrix uniform = Matrix::Constant(4, 5, 0.25);
  EXPECT_NEAR(cross_entropy(uniform, std::vector<int>{0, 1, 2, 3, 0}), std::log(4.0), 1e-15);
  Matrix p(2, 1);
  p << 0.7, 0.3;
  EXPECT_NEAR(cross_entropy(p, std::vector<int>{0}), -std::log(0.7), 1e-15);
  EXPECT_NEAR(cross_entropy(p, std::vector<int>{0}), 0.3567, 1e-4);
  EXPECT_NEAR(cross_entropy(one_hot, std::vector<int>{1, 0, 0}), -std::log(1e-12), 1e-9);
  EXPECT_THROW(cross_entropy(Matrix(2, 0), std::vector<int>{}), DataError);
}

TEST(Confusion, PerfectAndInverted) {
  const std::vector<double> s{0.9, 0.8, 0.1, 0.2};
  const std::vector<int> l{1, 1, 0, 0};
  EXPECT_EQ(confusion_binary(s, l), Eigen::Matrix2d::Identity());
  Eigen::Matrix2d inv;
  inv << 0, 1, 1, 0;
  EXPECT_EQ(confusion_binary(s, std::vector<int>{0, 0, 1, 1}), inv);
}

TEST(Confusion, RowsAreNormalizedByTrueClass) {
  const std::vector<double> s{0.9, 0.4, 0.6, 0.6, 0.2};
  const std::vector<int> l{1, 1, 0, 0, 0};
  const Eigen::Matrix2d c = confusion_binary(s, l, 0.5);
  EXPECT_DOUBLE_EQ(c(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(c(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(c(1, 0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c(1, 1), 1.0 / 3.0);
  EXPECT_NEAR(c.row(0).sum(), 1.0, 1e-12);
  EXPECT_NEAR(c.row(1).sum(), 1.0, 1e-12);
}

TEST(OneVsRest, ScoresLabelsAndExclusions) {
  Matrix q(2, 3);
  q << 0.1, 0.8, std::numeric_limits<double>::quiet_NaN(), 0.9, 0.2, std::numeric_limits<double>::quiet_NaN();
  const std::vector<Index> cells{0, 1};
  const std::vector<int> truth{1, 0};
  const ScoredLabels sl = one_vs_rest(q, cells, truth, 1);
  EXPECT_EQ(sl.scores, (std::vector<double>{0.9, 0.2}));
  EXPECT_EQ(sl.labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(roc_auc(sl.scores, sl.labels).auc, 1.0);

  const std::vector<Index> with_nan{0, 1, 2};
  const std::vector<int> t3{1, 0, 1};
  EXPECT_EQ(one_vs_rest(q, with_nan, t3, 1).excluded, 1);
  const std::vector<std::uint8_t> mask{0, 1, 0};
  const ScoredLabels masked = one_vs_rest(q, cells, truth, 1, mask);
  EXPECT_EQ(masked.excluded, 1);
  EXPECT_EQ(masked.scores.size(), 1u);

  const std::vector<int> all_one{1, 1};
  const ScoredLabels single = one_vs_rest(q, cells, all_one, 1);
  EXPECT_THROW(roc_auc(single.scores, single.labels), DataError);
}

TEST(MetricsFiles, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "qvcbi_eval_metrics";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  MetricsReport r;
  r.classes.push_back({"BD", 1, 40, 60, 0.91234567890123, 0.6});
  r.classes.push_back({"LS", 1, 5, 95, 0.99, std::numeric_limits<double>::quiet_NaN()});
  NodeMetrics nm;
  nm.node = "BD";
  nm.points = 100;
  nm.excluded = 3;
  nm.cross_entropy = 0.4321;
  nm.confusion << 0.9, 0.1, 0.2, 0.8;
  r.nodes.push_back(nm);
  write_metrics(r, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "class_metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "confusion.csv"));
  const MetricsReport back = read_metrics(dir);
  ASSERT_EQ(back.classes.size(), 2u);
  EXPECT_EQ(back.classes[0].node, "BD");
  EXPECT_EQ(back.classes[0].auc_posterior, 0.91234567890123);
  EXPECT_EQ(back.classes[0].positives, 40);
  EXPECT_TRUE(std::isnan(back.classes[1].auc_prior));
  ASSERT_EQ(back.nodes.size(), 1u);
  EXPECT_EQ(back.nodes[0].confusion, nm.confusion);
  EXPECT_EQ(back.nodes[0].cross_entropy, 0.4321);
  EXPECT_EQ(back.nodes[0].excluded, 3);
}
