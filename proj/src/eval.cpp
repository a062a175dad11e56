#include "qvcbi/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace qvcbi {

namespace fs = std::filesystem;
using nlohmann::json;

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (int l : labels) (l != 0 ? pos : neg) += 1.0;
  if (pos == 0 || neg == 0) throw DataError("roc_auc: labels contain a single class");

  RocResult r;
  r.thresholds.push_back(std::numeric_limits<double>::infinity());
  r.tpr.push_back(0.0);
  r.fpr.push_back(0.0);
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    double tie_pos = 0, tie_neg = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] != 0 ? tie_pos : tie_neg) += 1.0;
      ++j;
    }
    // Negatives here lose to every earlier positive and tie with the positives of this block.
    area += tie_neg * (tp + 0.5 * tie_pos);
    tp += tie_pos;
    fp += tie_neg;
    r.thresholds.push_back(scores[order[i]]);
    r.tpr.push_back(tp / pos);
    r.fpr.push_back(fp / neg);
    i = j;
  }
  r.auc = area / (pos * neg);
  return r;
}

double trapezoid_auc(const std::vector<double>& fpr, const std::vector<double>& tpr) {
  double a = 0.0;
  for (std::size_t i = 1; i < fpr.size(); ++i) a += (fpr[i] - fpr[i - 1]) * 0.5 * (tpr[i] + tpr[i - 1]);
  return a;
}

double tpr_at_fpr(const RocResult& roc, double target) {
  for (std::size_t i = 1; i < roc.fpr.size(); ++i) {
    if (roc.fpr[i] > target) {
      const double f0 = roc.fpr[i - 1], f1 = roc.fpr[i];
      return roc.tpr[i - 1] + (roc.tpr[i] - roc.tpr[i - 1]) * (target - f0) / (f1 - f0);
    }
  }
  return roc.tpr.back();
}

double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  if (labels.empty()) throw DataError("cross_entropy: empty input");
  if (static_cast<Index>(labels.size()) != probs.cols()) throw DataError("cross_entropy: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= probs.rows()) throw DataError("cross_entropy: label out of range");
    s -= std::log(std::max(probs(labels[i], static_cast<Index>(i)), 1e-12));
  }
  return s / static_cast<double>(labels.size());
}

Eigen::Matrix2d confusion_binary(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw DataError("confusion_binary: size mismatch");
  Eigen::Matrix2d c = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int row = labels[i] != 0 ? 0 : 1;
    const int col = scores[i] >= threshold ? 0 : 1;
    c(row, col) += 1.0;
  }
  for (int r = 0; r < 2; ++r) {
    const double total = c.row(r).sum();
    if (total > 0) c.row(r) /= total;
  }
  return c;
}

ScoredLabels one_vs_rest(const Matrix& q, std::span<const Index> cells, std::span<const int> truth, int m,
                         std::span<const std::uint8_t> mask) {
  if (cells.size() != truth.size()) throw DataError("one_vs_rest: cells and labels differ in length");
  if (m < 0 || m >= q.rows()) throw DataError("one_vs_rest: class out of range");
  ScoredLabels out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Index cell = cells[i];
    const bool masked = !mask.empty() && mask[static_cast<std::size_t>(cell)] != 0;
    if (cell < 0 || cell >= q.cols() || masked || !q.col(cell).allFinite()) {
      ++out.excluded;
      continue;
    }
    out.scores.push_back(q(m, cell));
    out.labels.push_back(truth[i] == m ? 1 : 0);
  }
  return out;
}

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_back(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

std::string csv_num(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

void write_metrics(const MetricsReport& report, const fs::path& outdir) {
  fs::create_directories(outdir);
  json j;
  j["classes"] = json::array();
  for (const auto& c : report.classes)
    j["classes"].push_back({{"node", c.node},
                            {"state", c.state},
                            {"positives", c.positives},
                            {"negatives", c.negatives},
                            {"auc_posterior", num(c.auc_posterior)},
                            {"auc_prior", num(c.auc_prior)}});
  j["nodes"] = json::array();
  for (const auto& n : report.nodes)
    j["nodes"].push_back({{"node", n.node},
                          {"points", n.points},
                          {"excluded", n.excluded},
                          {"cross_entropy", num(n.cross_entropy)},
                          {"threshold", n.threshold},
                          {"confusion",
                           {{"tp", n.confusion(0, 0)}, {"fn", n.confusion(0, 1)}, {"fp", n.confusion(1, 0)},
                            {"tn", n.confusion(1, 1)}}}});
  std::ofstream(outdir / "metrics.json") << j.dump(2) << '\n';

  std::ofstream cls(outdir / "class_metrics.csv");
  cls << "node,state,positives,negatives,auc_prior,auc_posterior\n";
  for (const auto& c : report.classes)
    cls << c.node << ',' << c.state << ',' << c.positives << ',' << c.negatives << ',' << csv_num(c.auc_prior) << ','
        << csv_num(c.auc_posterior) << '\n';
  std::ofstream conf(outdir / "confusion.csv");
  conf << "node,threshold,cross_entropy,tp,fn,fp,tn\n";
  for (const auto& n : report.nodes)
    conf << n.node << ',' << csv_num(n.threshold) << ',' << csv_num(n.cross_entropy) << ',' << csv_num(n.confusion(0, 0))
         << ',' << csv_num(n.confusion(0, 1)) << ',' << csv_num(n.confusion(1, 0)) << ','
         << csv_num(n.confusion(1, 1)) << '\n';
  if (!cls || !conf) throw DataError("failed writing metrics to " + outdir.string());
}

MetricsReport read_metrics(const fs::path& outdir) {
  std::ifstream in(outdir / "metrics.json");
  if (!in) throw DataError("cannot open " + (outdir / "metrics.json").string());
  MetricsReport r;
  try {
    const json j = json::parse(in);
    for (const auto& c : j.at("classes"))
      r.classes.push_back({c.at("node").get<std::string>(), c.at("state").get<int>(), c.at("positives").get<Index>(),
                           c.at("negatives").get<Index>(), num_back(c.at("auc_posterior")),
                           num_back(c.at("auc_prior"))});
    for (const auto& n : j.at("nodes")) {
      NodeMetrics m;
      m.node = n.at("node").get<std::string>();
      m.points = n.at("points").get<Index>();
      m.excluded = n.at("excluded").get<Index>();
      m.cross_entropy = num_back(n.at("cross_entropy"));
      m.threshold = n.at("threshold").get<double>();
      const json& c = n.at("confusion");
      m.confusion << c.at("tp").get<double>(), c.at("fn").get<double>(), c.at("fp").get<double>(),
          c.at("tn").get<double>();
      r.nodes.push_back(m);
    }
  } catch (const json::exception& e) {
    throw DataError("metrics.json: " + std::string(e.what()));
  }
  return r;
}

void write_roc_csv(const RocResult& roc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "fpr,tpr,threshold\n";
  for (std::size_t i = 0; i < roc.fpr.size(); ++i)
    out << csv_num(roc.fpr[i]) << ',' << csv_num(roc.tpr[i]) << ','
        << (std::isinf(roc.thresholds[i]) ? std::string("inf") : csv_num(roc.thresholds[i])) << '\n';
}

}  // namespace qvcbi
