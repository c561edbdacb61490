#include <cmath>
#include <optional>
#include <vector>

#include <doctest.h>

#include "fedsilo/metrics.hpp"
#include "fedsilo/rng.hpp"

using namespace fedsilo;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<long>(xs.size()));
  long i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

}  // namespace

TEST_CASE("confusion counts threshold crossings") {
  const auto cm = confusion(vec({0.9, 0.1}), vec({1, 0}), 0.5);
  CHECK(cm.tp == 1);
  CHECK(cm.tn == 1);
  CHECK(cm.fp == 0);
  CHECK(cm.fn == 0);
  CHECK(cm.total() == 2);
}

TEST_CASE("probability equal to the threshold counts as positive") {
  const auto cm = confusion(vec({0.5, 0.4999}), vec({1, 1}), 0.5);
  CHECK(cm.tp == 1);
  CHECK(cm.fn == 1);
}

TEST_CASE("all probabilities below threshold give no positive predictions") {
  const auto cm = confusion(vec({0.2, 0.3, 0.1}), vec({1, 0, 1}), 0.5);
  CHECK(cm.tp == 0);
  CHECK(cm.fp == 0);
  CHECK(cm.fn == 2);
  CHECK(cm.tn == 1);
}

TEST_CASE("confusion rejects empty input") {
  CHECK_THROWS_AS(confusion(Eigen::VectorXd(0), Eigen::VectorXd(0), 0.5), DataError);
}

TEST_CASE("confusion matches a per-row reference count on random data") {
  Rng rng(301);
  for (int trial = 0; trial < 20; ++trial) {
    const long n = 1 + static_cast<long>(rng.below(40));
    Eigen::VectorXd probs(n), labels(n);
    for (long i = 0; i < n; ++i) {
      probs(i) = rng.uniform();
      labels(i) = rng.below(2) ? 1.0 : 0.0;
    }
    long tp = 0, fp = 0, tn = 0, fn = 0;
    for (long i = 0; i < n; ++i) {
      const bool pred = probs(i) >= 0.5;
      const bool pos = labels(i) > 0.5;
      if (pred && pos) ++tp;
      if (pred && !pos) ++fp;
      if (!pred && !pos) ++tn;
      if (!pred && pos) ++fn;
    }
    const auto cm = confusion(probs, labels, 0.5);
    CHECK(cm.tp == tp);
    CHECK(cm.fp == fp);
    CHECK(cm.tn == tn);
    CHECK(cm.fn == fn);
  }
}

TEST_CASE("prf hand-computed example") {
  const Prf r = prf(ConfusionMatrix{10, 5, 0, 3});
  REQUIRE(r.precision.has_value());
  REQUIRE(r.recall.has_value());
  REQUIRE(r.f1.has_value());
  CHECK(*r.precision == doctest::Approx(10.0 / 15.0).epsilon(1e-12));
  CHECK(*r.recall == doctest::Approx(10.0 / 13.0).epsilon(1e-12));
  CHECK(*r.f1 == doctest::Approx(5.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("zero-division metrics become null, not zero") {
  const Prf r = prf(ConfusionMatrix{0, 0, 4, 3});  // nothing predicted positive
  CHECK_FALSE(r.precision.has_value());
  REQUIRE(r.recall.has_value());
  CHECK(*r.recall == 0.0);
  CHECK_FALSE(r.f1.has_value());
}

TEST_CASE("perfect classifier scores all ones") {
  const Prf r = prf(ConfusionMatrix{6, 0, 9, 0});
  CHECK(*r.precision == 1.0);
  CHECK(*r.recall == 1.0);
  CHECK(*r.f1 == 1.0);
}

TEST_CASE("both precision and recall zero give f1 zero") {
  const Prf r = prf(ConfusionMatrix{0, 2, 4, 3});
  CHECK(*r.precision == 0.0);
  CHECK(*r.recall == 0.0);
  REQUIRE(r.f1.has_value());
  CHECK(*r.f1 == 0.0);
}

TEST_CASE("f1 never exceeds max(precision, recall)") {
  Rng rng(307);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm;
    cm.tp = static_cast<long>(rng.below(20));
    cm.fp = static_cast<long>(rng.below(20));
    cm.tn = static_cast<long>(rng.below(20));
    cm.fn = static_cast<long>(rng.below(20));
    const Prf r = prf(cm);
    if (r.precision && r.recall) {
      CHECK(*r.f1 <= std::max(*r.precision, *r.recall) + 1e-12);
      CHECK(*r.f1 >= 0.0);
      CHECK(*r.f1 <= 1.0);
    }
  }
}

TEST_CASE("auc is 1 for perfectly separated scores") {
  CHECK(*auc(vec({0.9, 0.8, 0.2, 0.1}), vec({1, 1, 0, 0})) == doctest::Approx(1.0));
}

TEST_CASE("auc is one half when all scores tie") {
  CHECK(*auc(vec({0.4, 0.4, 0.4, 0.4}), vec({1, 0, 1, 0})) == doctest::Approx(0.5));
}

TEST_CASE("auc is null for single-class input") {
  CHECK_FALSE(auc(vec({0.1, 0.9}), vec({1, 1})).has_value());
  CHECK_FALSE(auc(vec({0.1, 0.9}), vec({0, 0})).has_value());
}

TEST_CASE("auc matches the quadratic pairwise oracle under heavy ties") {
  Rng rng(311);
  for (int trial = 0; trial < 100; ++trial) {
    const long n = 5 + static_cast<long>(rng.below(196));
    Eigen::VectorXd scores(n), labels(n);
    for (long i = 0; i < n; ++i) {
      scores(i) = 0.1 * static_cast<double>(rng.below(8));
      labels(i) = rng.below(2) ? 1.0 : 0.0;
    }
    labels(0) = 1.0;  // force both classes
    labels(1) = 0.0;

    double pairs = 0.0, favorable = 0.0;
    for (long i = 0; i < n; ++i) {
      if (labels(i) < 0.5) continue;
      for (long j = 0; j < n; ++j) {
        if (labels(j) > 0.5) continue;
        pairs += 1.0;
        if (scores(i) > scores(j))
          favorable += 1.0;
        else if (scores(i) == scores(j))
          favorable += 0.5;
      }
    }
    CHECK(*auc(scores, labels) == doctest::Approx(favorable / pairs).epsilon(1e-12));
  }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
  Rng rng(313);
  Eigen::VectorXd scores(60), labels(60);
  for (long i = 0; i < 60; ++i) {
    scores(i) = rng.uniform();
    labels(i) = rng.below(2) ? 1.0 : 0.0;
  }
  labels(0) = 1.0;
  labels(1) = 0.0;
  Eigen::VectorXd transformed = scores;
  for (long i = 0; i < 60; ++i) transformed(i) = std::exp(3.0 * scores(i)) - 0.5;
  CHECK(*auc(scores, labels) == doctest::Approx(*auc(transformed, labels)).epsilon(1e-14));
}

TEST_CASE("metrics_from_scores flags degenerate slices") {
  const MetricSet m = metrics_from_scores(vec({0.9, 0.2}), vec({0, 0}), 0.5);
  CHECK(m.degenerate());
  CHECK_FALSE(m.recall.has_value());
  CHECK_FALSE(m.f1.has_value());
  CHECK_FALSE(m.auc.has_value());
  CHECK(m.support_pos == 0);
  CHECK(m.support_neg == 2);
}

// ---------------------------------------------------------------------------
// evaluate_partition over a real model and dataset
// ---------------------------------------------------------------------------

namespace {

EncodedDataset tiny_dataset() {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 4;
  synth.rows_per_silo = 50;
  return encode(filter_rows(generate_synthetic(synth, 99), synth.schema()),
                synth.schema());
}

}  // namespace

TEST_CASE("evaluate_partition over all rows equals pooled metrics") {
  const EncodedDataset ds = tiny_dataset();
  HighwayNetConfig cfg;
  cfg.input_dim = ds.width();
  cfg.hidden_width = 6;
  cfg.n_blocks = 1;
  cfg.init_seed = 5;
  const ModelParams params = init_model(cfg);

  std::vector<int> all(static_cast<std::size_t>(ds.row_count()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

  const MetricSet via_partition = evaluate_partition(params, ds, all, 0.5);
  const MetricSet direct =
      metrics_from_scores(forward(params, ds.design_matrix), ds.labels, 0.5);
  CHECK(via_partition.precision == direct.precision);
  CHECK(via_partition.recall == direct.recall);
  CHECK(via_partition.f1 == direct.f1);
  CHECK(via_partition.auc == direct.auc);
  CHECK(via_partition.support_pos == direct.support_pos);
}

TEST_CASE("confusion counts are additive over a disjoint partition") {
  const EncodedDataset ds = tiny_dataset();
  HighwayNetConfig cfg;
  cfg.input_dim = ds.width();
  cfg.hidden_width = 6;
  cfg.n_blocks = 1;
  cfg.init_seed = 6;
  const ModelParams params = init_model(cfg);
  const Eigen::VectorXd probs = forward(params, ds.design_matrix);

  const auto global = confusion(probs, ds.labels, 0.5);
  long tp = 0, fp = 0, tn = 0, fn = 0;
  std::map<int, std::vector<long>> by_silo;
  for (long i = 0; i < ds.row_count(); ++i) by_silo[ds.silo_ids[i]].push_back(i);
  for (const auto& [silo, rows] : by_silo) {
    Eigen::VectorXd p(static_cast<long>(rows.size())), y(static_cast<long>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p(static_cast<long>(i)) = probs(rows[i]);
      y(static_cast<long>(i)) = ds.labels(rows[i]);
    }
    const auto cm = confusion(p, y, 0.5);
    tp += cm.tp;
    fp += cm.fp;
    tn += cm.tn;
    fn += cm.fn;
  }
  CHECK(tp == global.tp);
  CHECK(fp == global.fp);
  CHECK(tn == global.tn);
  CHECK(fn == global.fn);
}

TEST_CASE("evaluate_partition rejects an empty index list") {
  const EncodedDataset ds = tiny_dataset();
  HighwayNetConfig cfg;
  cfg.input_dim = ds.width();
  cfg.hidden_width = 4;
  cfg.n_blocks = 1;
  const ModelParams params = init_model(cfg);
  CHECK_THROWS_AS(evaluate_partition(params, ds, {}, 0.5), DataError);
}
