#include "fedsilo/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace fedsilo {

ConfusionMatrix confusion(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                          double threshold) {
  if (probs.size() == 0) throw DataError("confusion: empty input");
  if (probs.size() != labels.size())
    throw DataError("confusion: probs and labels differ in length");
  ConfusionMatrix cm;
  for (long i = 0; i < probs.size(); ++i) {
    const bool pred = probs(i) >= threshold;
    const bool truth = labels(i) > 0.5;
    if (pred && truth)
      ++cm.tp;
    else if (pred && !truth)
      ++cm.fp;
    else if (!pred && truth)
      ++cm.fn;
    else
      ++cm.tn;
  }
  return cm;
}

Prf prf(const ConfusionMatrix& cm) {
  Prf out;
  if (cm.tp + cm.fp > 0)
    out.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
  if (cm.tp + cm.fn > 0)
    out.recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  if (out.precision && out.recall) {
    const double denom = *out.precision + *out.recall;
    // Both defined but zero (tp == 0 with both fp and fn present) is genuine
    // zero performance, not an undefined score.
    out.f1 = denom > 0.0 ? 2.0 * *out.precision * *out.recall / denom : 0.0;
  }
  return out;
}

std::optional<double> auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels) {
  if (scores.size() != labels.size())
    throw DataError("auc: scores and labels differ in length");
  const long n = scores.size();
  long n_pos = 0;
  for (long i = 0; i < n; ++i)
    if (labels(i) > 0.5) ++n_pos;
  const long n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  // Mann-Whitney statistic via average ranks: AUC = (R+ - n+(n+ + 1)/2) / (n+ n-).
  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0L);
  std::sort(order.begin(), order.end(),
            [&](long a, long b) { return scores(a) < scores(b); });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores(order[j + 1]) == scores(order[i])) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels(order[k]) > 0.5) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

MetricSet metrics_from_scores(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                              double threshold) {
  MetricSet out;
  const auto cm = confusion(probs, labels, threshold);
  const auto scores = prf(cm);
  out.precision = scores.precision;
  out.recall = scores.recall;
  out.f1 = scores.f1;
  out.auc = auc(probs, labels);
  out.support_pos = cm.tp + cm.fn;
  out.support_neg = cm.tn + cm.fp;
  return out;
}

MetricSet evaluate_partition(const ModelParams& params, const EncodedDataset& ds,
                             std::span<const int> indices, double threshold) {
  if (indices.empty()) throw DataError("evaluate_partition: no rows");
  Eigen::MatrixXd x(static_cast<long>(indices.size()), ds.width());
  Eigen::VectorXd y(static_cast<long>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    x.row(static_cast<long>(i)) = ds.design_matrix.row(indices[i]);
    y(static_cast<long>(i)) = ds.labels(indices[i]);
  }
  return metrics_from_scores(forward(params, x), y, threshold);
}

}  // namespace fedsilo
