#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <doctest.h>

#include "fedsilo/federation.hpp"
#include "fedsilo/rng.hpp"

using namespace fedsilo;

// ---------------------------------------------------------------------------
// Communication ledger
// ---------------------------------------------------------------------------

TEST_CASE("per-round bytes follow the strategy closed forms") {
  const std::uint64_t m = 1000;
  const auto selected = CommLedger::round_bytes(CostStrategy::kSelectedOnly, m, 12, 51);
  CHECK(selected.first == 12 * m);
  CHECK(selected.second == 12 * m);
  const auto broadcast = CommLedger::round_bytes(CostStrategy::kBroadcastAll, m, 12, 51);
  CHECK(broadcast.first == 12 * m);
  CHECK(broadcast.second == 51 * m);
}

TEST_CASE("ledger totals equal rounds times the closed form") {
  Rng rng(81);
  for (int trial = 0; trial < 30; ++trial) {
    CommLedger ledger;
    ledger.strategy = rng.below(2) ? CostStrategy::kBroadcastAll
                                   : CostStrategy::kSelectedOnly;
    ledger.model_bytes = 1 + rng.below(1 << 20);
    ledger.total_clients = 1 + static_cast<int>(rng.below(64));
    ledger.clients_per_round = 1 + static_cast<int>(rng.below(
                                       static_cast<std::uint64_t>(ledger.total_clients)));
    const int rounds = static_cast<int>(rng.below(40));
    for (int r = 0; r < rounds; ++r) ledger.add_round();

    const auto [up, down] =
        CommLedger::round_bytes(ledger.strategy, ledger.model_bytes,
                                ledger.clients_per_round, ledger.total_clients);
    CHECK(ledger.total_up() == static_cast<std::uint64_t>(rounds) * up);
    CHECK(ledger.total_down() == static_cast<std::uint64_t>(rounds) * down);
    CHECK(ledger.total_bytes() == ledger.total_up() + ledger.total_down());
  }
}

TEST_CASE("an empty ledger charges nothing") {
  CommLedger ledger;
  ledger.model_bytes = 123456;
  CHECK(ledger.total_bytes() == 0);
  CHECK(ledger.total_gb() == 0.0);
}

TEST_CASE("the study-scale cost arithmetic lands on the expected totals") {
  // 1,078 KB model, 12 of 51 clients, 200 rounds.
  const std::uint64_t m = 1078 * 1024;
  CommLedger selected;
  selected.strategy = CostStrategy::kSelectedOnly;
  selected.model_bytes = m;
  selected.clients_per_round = 12;
  selected.total_clients = 51;
  CommLedger broadcast = selected;
  broadcast.strategy = CostStrategy::kBroadcastAll;
  for (int r = 0; r < 200; ++r) {
    selected.add_round();
    broadcast.add_round();
  }
  CHECK(selected.total_bytes() == 200ULL * 24ULL * m);
  CHECK(selected.total_gb() == doctest::Approx(4.9346).epsilon(1e-4));
  CHECK(selected.total_gb() >= 4.93);
  CHECK(selected.total_gb() <= 4.94);
  // 24 model transfers per round is 25,872 KB, within 1 KB of 25,873.
  const double round_kb =
      static_cast<double>(selected.per_round[0].first + selected.per_round[0].second) /
      1024.0;
  CHECK(std::abs(round_kb - 25873.0) <= 1.0);
  CHECK(broadcast.total_bytes() == 200ULL * 63ULL * m);
  CHECK(std::abs(broadcast.total_gb() - 12.95) <= 0.01);
  const double reduction = 1.0 - static_cast<double>(selected.total_bytes()) /
                                     static_cast<double>(broadcast.total_bytes());
  CHECK(reduction >= 0.60);
}

TEST_CASE("strategy names round-trip") {
  CHECK(cost_strategy_from_string(to_string(CostStrategy::kSelectedOnly)) ==
        CostStrategy::kSelectedOnly);
  CHECK(cost_strategy_from_string(to_string(CostStrategy::kBroadcastAll)) ==
        CostStrategy::kBroadcastAll);
  CHECK_THROWS_AS(cost_strategy_from_string("carrier_pigeon"), ConfigError);
}

// ---------------------------------------------------------------------------
// Client sampling
// ---------------------------------------------------------------------------

TEST_CASE("sampling the full population returns every silo") {
  const auto silos = sample_clients(8, 8, 1, 0);
  CHECK(silos == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8});
}

TEST_CASE("sampling is a pure function of seed and round") {
  CHECK(sample_clients(51, 12, 5, 3) == sample_clients(51, 12, 5, 3));
  CHECK(sample_clients(51, 12, 5, 3) != sample_clients(51, 12, 5, 4));
  CHECK(sample_clients(51, 12, 5, 3) != sample_clients(51, 12, 6, 3));
}

TEST_CASE("draws are distinct, sorted, and in range") {
  for (int round = 0; round < 50; ++round) {
    const auto silos = sample_clients(51, 12, 77, round);
    REQUIRE(silos.size() == 12);
    CHECK(std::is_sorted(silos.begin(), silos.end()));
    std::set<int> unique(silos.begin(), silos.end());
    CHECK(unique.size() == 12);
    CHECK(*silos.begin() >= 1);
    CHECK(*silos.rbegin() <= 51);
  }
}

TEST_CASE("long-run selection frequency stays within three sigmas of 12/51") {
  const int rounds = 10000, total = 51, k = 12;
  std::vector<long> counts(total + 1, 0);
  for (int r = 0; r < rounds; ++r)
    for (int s : sample_clients(total, k, 19, r)) ++counts[s];

  const double expectation = rounds * static_cast<double>(k) / total;
  const double sigma = std::sqrt(rounds * (static_cast<double>(k) / total) *
                                 (1.0 - static_cast<double>(k) / total));
  for (int s = 1; s <= total; ++s)
    CHECK(std::abs(static_cast<double>(counts[s]) - expectation) <= 3.0 * sigma);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

namespace {

ModelParams random_params(std::uint64_t seed) {
  HighwayNetConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden_width = 4;
  cfg.n_blocks = 1;
  cfg.init_seed = seed;
  return init_model(cfg);
}

}  // namespace

TEST_CASE("aggregating one client is the identity") {
  ClientUpdate u{7, random_params(1), 123};
  const ModelParams out = fedavg_aggregate({u});
  CHECK(out.values == u.params.values);
}

TEST_CASE("identical updates average to themselves") {
  const ModelParams p = random_params(2);
  const ModelParams out =
      fedavg_aggregate({{1, p, 100}, {2, p, 250}, {3, p, 10}});
  for (std::size_t i = 0; i < p.values.size(); ++i)
    CHECK(out.values[i] == doctest::Approx(p.values[i]).epsilon(1e-15));
}

TEST_CASE("equal counts give the plain mean") {
  const ModelParams a = random_params(3);
  const ModelParams b = random_params(4);
  const ModelParams out = fedavg_aggregate({{1, a, 200}, {2, b, 200}});
  for (std::size_t i = 0; i < a.values.size(); ++i)
    CHECK(out.values[i] ==
          doctest::Approx(0.5 * (a.values[i] + b.values[i])).epsilon(1e-15));
}

TEST_CASE("counts 100 and 300 weigh the mean one to three") {
  const ModelParams a = random_params(5);
  const ModelParams b = random_params(6);
  const ModelParams out = fedavg_aggregate({{1, a, 100}, {2, b, 300}});
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double oracle = 0.25 * a.values[i] + 0.75 * b.values[i];
    CHECK(std::abs(out.values[i] - oracle) <= 1e-15);
  }
}

TEST_CASE("aggregation is bitwise independent of update order") {
  std::vector<ClientUpdate> updates;
  for (int u = 0; u < 6; ++u)
    updates.push_back({u + 1, random_params(10 + static_cast<std::uint64_t>(u)),
                       50 + 37 * u});
  const ModelParams forward_order = fedavg_aggregate(updates);
  std::reverse(updates.begin(), updates.end());
  const ModelParams reverse_order = fedavg_aggregate(updates);
  CHECK(forward_order.values == reverse_order.values);

  Rng rng(91);
  rng.shuffle(updates);
  CHECK(fedavg_aggregate(updates).values == forward_order.values);
}

TEST_CASE("rescaling every count leaves the aggregate unchanged") {
  std::vector<ClientUpdate> updates;
  for (int u = 0; u < 4; ++u)
    updates.push_back({u + 1, random_params(20 + static_cast<std::uint64_t>(u)),
                       10 + 13 * u});
  const ModelParams base = fedavg_aggregate(updates);
  for (auto& u : updates) u.example_count *= 9;
  const ModelParams scaled = fedavg_aggregate(updates);
  for (std::size_t i = 0; i < base.values.size(); ++i)
    CHECK(std::abs(scaled.values[i] - base.values[i]) <= 1e-15);
}

TEST_CASE("malformed update sets are rejected") {
  CHECK_THROWS_AS(fedavg_aggregate({}), ConfigError);

  ModelParams small = random_params(30);
  HighwayNetConfig big_cfg;
  big_cfg.input_dim = 3;
  big_cfg.hidden_width = 5;
  big_cfg.n_blocks = 1;
  ModelParams big = init_model(big_cfg);
  CHECK_THROWS_AS(fedavg_aggregate({{1, small, 10}, {2, big, 10}}), ConfigError);

  CHECK_THROWS_AS(fedavg_aggregate({{1, small, 0}}), DataError);
}

// ---------------------------------------------------------------------------
// Orchestration on a small synthetic study
// ---------------------------------------------------------------------------

namespace {

SplitPartition small_split(std::uint64_t seed, std::vector<int> forced_negative = {}) {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 5;
  synth.rows_per_silo = 60;
  synth.force_negative_silos = std::move(forced_negative);
  const SurveySchema schema = synth.schema();
  const EncodedDataset ds =
      encode(filter_rows(generate_synthetic(synth, seed), schema), schema);
  return split_and_partition(ds, 0.8, seed + 1);
}

FedConfig small_fed(std::uint64_t seed) {
  FedConfig fed;
  fed.n_rounds = 4;
  fed.clients_per_round = 3;
  fed.total_clients = 5;
  fed.local_epochs = 1;
  fed.batch_size = 16;
  fed.local_baseline_epochs = 3;
  fed.seed = seed;
  fed.net.hidden_width = 8;
  fed.net.n_blocks = 2;
  return fed;
}

}  // namespace

TEST_CASE("a federated run produces an internally consistent history") {
  const SplitPartition split = small_split(101);
  const FedConfig fed = small_fed(7);
  const FederatedResult result = run_federated(split, fed);

  REQUIRE(result.history.size() == 4);
  const auto [up, down] = CommLedger::round_bytes(
      fed.cost_strategy, result.ledger.model_bytes, fed.clients_per_round,
      fed.total_clients);
  for (std::size_t r = 0; r < result.history.size(); ++r) {
    const RoundRecord& rec = result.history[r];
    CHECK(rec.round == static_cast<int>(r) + 1);
    CHECK(rec.participants.size() == 3);
    CHECK(rec.per_silo.size() == 5);
    CHECK(rec.bytes_up == up);
    CHECK(rec.bytes_down == down);
  }
  CHECK(result.ledger.per_round.size() == 4);
  CHECK(result.ledger.model_bytes == param_byte_size(result.params));
  CHECK(result.pos_weight ==
        compute_class_weight(split.train.n_pos, split.train.n_neg, fed.gamma));
}

TEST_CASE("federated training is bitwise deterministic in the seed") {
  const SplitPartition split = small_split(102);
  const FederatedResult a = run_federated(split, small_fed(9));
  const FederatedResult b = run_federated(split, small_fed(9));
  CHECK(a.params.values == b.params.values);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t r = 0; r < a.history.size(); ++r) {
    CHECK(a.history[r].participants == b.history[r].participants);
    CHECK(a.history[r].global.f1 == b.history[r].global.f1);
  }
  const FederatedResult c = run_federated(split, small_fed(10));
  CHECK(a.params.values != c.params.values);
}

TEST_CASE("one client, one round degenerates to a single local fit") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 1;
  synth.rows_per_silo = 80;
  const SurveySchema schema = synth.schema();
  const EncodedDataset ds =
      encode(filter_rows(generate_synthetic(synth, 55), schema), schema);
  const SplitPartition split = split_and_partition(ds, 0.8, 56);

  FedConfig fed = small_fed(11);
  fed.n_rounds = 1;
  fed.clients_per_round = 1;
  fed.total_clients = 1;
  const FederatedResult fed_result = run_federated(split, fed);

  // Reproduce by hand: same init, same per-round derivation, one aggregate.
  HighwayNetConfig net = fed.net;
  net.input_dim = split.train.width();
  net.init_seed = derive_seed(fed.seed, "init");
  ModelParams manual = init_model(net);
  const double pos_weight =
      compute_class_weight(split.train.n_pos, split.train.n_neg, fed.gamma);
  train_local(manual, split.train, split.per_silo_train.at(1), {}, net,
              fed.local_epochs, fed.batch_size, pos_weight,
              derive_seed(fed.seed, "local", 0, 1));
  CHECK(fed_result.params.values == manual.values);
}

TEST_CASE("federated runs refuse zero rounds and absent silos") {
  const SplitPartition split = small_split(103);
  FedConfig fed = small_fed(13);
  fed.n_rounds = 0;
  CHECK_THROWS_AS(run_federated(split, fed), ConfigError);

  FedConfig too_many = small_fed(13);
  too_many.total_clients = 9;  // silos 6..9 have no data
  too_many.clients_per_round = 9;
  CHECK_THROWS_AS(run_federated(split, too_many), DataError);
}

TEST_CASE("config validation enforces the participation bounds") {
  FedConfig fed = small_fed(14);
  fed.clients_per_round = 6;  // exceeds total_clients = 5
  CHECK_THROWS_AS(fed.validate(), ConfigError);
  fed = small_fed(14);
  fed.gamma = 0.0;
  CHECK_THROWS_AS(fed.validate(), ConfigError);
  fed = small_fed(14);
  fed.n_rounds = -1;
  CHECK_THROWS_AS(fed.validate(), ConfigError);
}

TEST_CASE("zero centralized epochs report the untrained model once") {
  const SplitPartition split = small_split(104);
  FedConfig fed = small_fed(15);
  fed.n_rounds = 0;
  const CentralizedResult result = run_centralized(split, fed);
  REQUIRE(result.epoch_metrics.size() == 1);

  // The single entry must describe the freshly initialized model.
  HighwayNetConfig net = fed.net;
  net.input_dim = split.train.width();
  net.init_seed = derive_seed(fed.seed, "init_centralized");
  const ModelParams fresh = init_model(net);
  CHECK(result.params.values == fresh.values);
}

TEST_CASE("centralized training is deterministic and uses its own gamma") {
  const SplitPartition split = small_split(105);
  FedConfig fed = small_fed(16);
  fed.n_rounds = 3;
  const CentralizedResult a = run_centralized(split, fed);
  const CentralizedResult b = run_centralized(split, fed);
  CHECK(a.params.values == b.params.values);
  CHECK(a.epoch_metrics.size() == b.epoch_metrics.size());
  CHECK(a.pos_weight == compute_class_weight(split.train.n_pos, split.train.n_neg,
                                             fed.gamma_centralized));
}

TEST_CASE("local baselines report degenerate silos instead of averaging them") {
  const SplitPartition split = small_split(106, {2, 4});
  FedConfig fed = small_fed(17);
  const LocalBaselineResult result = run_local_baselines(split, fed, 2);

  REQUIRE(result.per_silo.size() == 5);
  for (int silo : {2, 4}) {
    const MetricSet& m = result.per_silo.at(silo);
    CHECK_FALSE(m.recall.has_value());
    CHECK_FALSE(m.f1.has_value());
    CHECK_FALSE(m.auc.has_value());
    CHECK(m.support_pos == 0);
    CHECK(std::count(result.excluded_silos.begin(), result.excluded_silos.end(),
                     silo) == 1);
    CHECK(std::count(result.degenerate_weight_silos.begin(),
                     result.degenerate_weight_silos.end(), silo) == 1);
  }

  // The macro average is the unweighted mean over silos with defined values,
  // and the exclusion list is exactly the undefined-F1 silos.
  double acc = 0.0;
  long defined = 0;
  for (const auto& [silo, m] : result.per_silo) {
    const bool listed = std::count(result.excluded_silos.begin(),
                                   result.excluded_silos.end(), silo) > 0;
    CHECK(listed == !m.f1.has_value());
    if (m.f1) {
      acc += *m.f1;
      ++defined;
    }
  }
  if (defined > 0) {
    REQUIRE(result.macro.f1.has_value());
    CHECK(*result.macro.f1 ==
          doctest::Approx(acc / static_cast<double>(defined)).epsilon(1e-12));
  } else {
    CHECK_FALSE(result.macro.f1.has_value());
  }
}

TEST_CASE("local baselines are deterministic") {
  const SplitPartition split = small_split(107);
  FedConfig fed = small_fed(18);
  const LocalBaselineResult a = run_local_baselines(split, fed, 2);
  const LocalBaselineResult b = run_local_baselines(split, fed, 2);
  REQUIRE(a.per_silo.size() == b.per_silo.size());
  for (const auto& [silo, m] : a.per_silo) {
    CHECK(m.f1 == b.per_silo.at(silo).f1);
    CHECK(m.auc == b.per_silo.at(silo).auc);
  }
}
