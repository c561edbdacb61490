#pragma once

#include <Eigen/Core>
#include <optional>
#include <span>

#include "fedsilo/dataset.hpp"
#include "fedsilo/nn.hpp"

namespace fedsilo {

struct ConfusionMatrix {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;

  long total() const { return tp + fp + tn + fn; }
};

// Undefined metrics are nullopt, never zero: a silo with no positive test
// rows must stay distinguishable from one with true zero performance.
struct MetricSet {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> auc;
  long support_pos = 0;
  long support_neg = 0;

  bool degenerate() const { return support_pos == 0 || support_neg == 0; }
};

// Prediction is positive iff prob >= threshold. Throws DataError on empty
// input.
ConfusionMatrix confusion(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                          double threshold);

struct Prf {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

Prf prf(const ConfusionMatrix& cm);

// Rank-based (Mann-Whitney) AUC with average ranks on ties; nullopt when a
// class is empty.
std::optional<double> auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

MetricSet metrics_from_scores(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels,
                              double threshold);

// Forward + confusion + prf + auc over exactly the given rows.
MetricSet evaluate_partition(const ModelParams& params, const EncodedDataset& ds,
                             std::span<const int> indices, double threshold);

}  // namespace fedsilo
