#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedsilo/dataset.hpp"
#include "fedsilo/metrics.hpp"
#include "fedsilo/nn.hpp"

namespace fedsilo {

enum class CostStrategy {
  kSelectedOnly,   // server exchanges models with selected clients only
  kBroadcastAll,   // every client downloads; selected clients upload
};

std::string to_string(CostStrategy s);
CostStrategy cost_strategy_from_string(const std::string& s);

struct FedConfig {
  int n_rounds = 200;
  int clients_per_round = 12;
  int total_clients = 51;
  CostStrategy cost_strategy = CostStrategy::kSelectedOnly;
  double gamma = 1.1835;              // federated class-weight factor
  double gamma_centralized = 1.182;   // centralized run uses this instead
  bool use_class_weight = true;       // false trains with pos_weight = 1
  int local_epochs = 1;
  int batch_size = 32;
  int local_baseline_epochs = 20;
  double metric_threshold = 0.5;
  std::uint64_t seed = 0;
  HighwayNetConfig net;

  void validate() const;  // throws ConfigError
};

struct ClientUpdate {
  int silo_id = 0;
  ModelParams params;
  long example_count = 0;
};

struct RoundRecord {
  int round = 0;
  std::vector<int> participants;          // sorted silo ids
  MetricSet global;                        // pooled test set
  std::map<int, MetricSet> per_silo;       // silo id -> its test slice
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
};

struct CommLedger {
  CostStrategy strategy = CostStrategy::kSelectedOnly;
  std::uint64_t model_bytes = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> per_round;  // (up, down)

  void add_round();
  std::uint64_t total_up() const;
  std::uint64_t total_down() const;
  std::uint64_t total_bytes() const { return total_up() + total_down(); }
  double total_gb() const;  // 1024^3 bytes per GB

  // Closed-form per-round bytes for a strategy.
  static std::pair<std::uint64_t, std::uint64_t> round_bytes(CostStrategy strategy,
                                                             std::uint64_t model_bytes,
                                                             int clients_per_round,
                                                             int total_clients);
  int clients_per_round = 0;
  int total_clients = 0;
};

// Uniform draw of clients_per_round silo ids (1-based) without replacement;
// a pure function of (seed, round_index).
std::vector<int> sample_clients(int total_clients, int clients_per_round,
                                std::uint64_t seed, int round_index);

// Example-count-weighted coordinate mean. Updates are combined in silo-id
// order, so the result is independent of list order. Throws ConfigError on
// mismatched layouts.
ModelParams fedavg_aggregate(const std::vector<ClientUpdate>& updates);

struct FederatedResult {
  ModelParams params;
  std::vector<RoundRecord> history;
  CommLedger ledger;
  double pos_weight = 0.0;
};

// FedAvg orchestration: per round, sample clients, locally train copies of
// the global model, aggregate, evaluate on the pooled test set and every
// silo slice, and charge the ledger. Deterministic in config.seed.
FederatedResult run_federated(const SplitPartition& data, const FedConfig& config);

struct CentralizedResult {
  ModelParams params;
  std::vector<MetricSet> epoch_metrics;  // pooled test set after each epoch
  double pos_weight = 0.0;
};

// Same architecture trained on the pooled training split for n_rounds
// epochs with gamma_centralized.
CentralizedResult run_centralized(const SplitPartition& data, const FedConfig& config);

struct LocalBaselineResult {
  std::map<int, MetricSet> per_silo;
  MetricSet macro;                     // unweighted mean over defined silos
  std::vector<int> excluded_silos;     // no defined F1 (e.g. zero test positives)
  std::vector<int> degenerate_weight_silos;  // no training positives; trained unweighted
};

// One independent model per silo, trained and evaluated on that silo only.
LocalBaselineResult run_local_baselines(const SplitPartition& data,
                                        const FedConfig& config, int epochs);

}  // namespace fedsilo
