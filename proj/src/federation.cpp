#include "fedsilo/federation.hpp"

#include <algorithm>
#include <cmath>

#include "fedsilo/rng.hpp"

namespace fedsilo {

std::string to_string(CostStrategy s) {
  return s == CostStrategy::kSelectedOnly ? "selected_only" : "broadcast_all";
}

CostStrategy cost_strategy_from_string(const std::string& s) {
  if (s == "selected_only") return CostStrategy::kSelectedOnly;
  if (s == "broadcast_all") return CostStrategy::kBroadcastAll;
  throw ConfigError("unknown cost strategy '" + s +
                    "' (expected 'selected_only' or 'broadcast_all')");
}

void FedConfig::validate() const {
  // n_rounds = 0 is legal only for the centralized path (initial-model
  // metrics); run_federated rejects it separately.
  if (n_rounds < 0) throw ConfigError("federation: n_rounds must be >= 0");
  if (total_clients < 1) throw ConfigError("federation: total_clients must be >= 1");
  if (clients_per_round < 1 || clients_per_round > total_clients)
    throw ConfigError("federation: clients_per_round must lie in [1, total_clients]");
  if (!(gamma > 0.0) || !(gamma_centralized > 0.0))
    throw ConfigError("federation: gamma factors must be positive");
  if (local_epochs < 1) throw ConfigError("federation: local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("federation: batch_size must be >= 1");
  if (local_baseline_epochs < 1)
    throw ConfigError("federation: local_baseline_epochs must be >= 1");
  if (!(metric_threshold >= 0.0 && metric_threshold <= 1.0))
    throw ConfigError("federation: metric_threshold must lie in [0, 1]");
  net.validate();
}

// ---------------------------------------------------------------------------
// Communication ledger
// ---------------------------------------------------------------------------

std::pair<std::uint64_t, std::uint64_t> CommLedger::round_bytes(CostStrategy strategy,
                                                                std::uint64_t model_bytes,
                                                                int clients_per_round,
                                                                int total_clients) {
  const std::uint64_t k = static_cast<std::uint64_t>(clients_per_round);
  const std::uint64_t all = static_cast<std::uint64_t>(total_clients);
  const std::uint64_t up = k * model_bytes;
  const std::uint64_t down =
      (strategy == CostStrategy::kSelectedOnly ? k : all) * model_bytes;
  return {up, down};
}

void CommLedger::add_round() {
  per_round.push_back(round_bytes(strategy, model_bytes, clients_per_round, total_clients));
}

std::uint64_t CommLedger::total_up() const {
  std::uint64_t acc = 0;
  for (const auto& [up, _] : per_round) acc += up;
  return acc;
}

std::uint64_t CommLedger::total_down() const {
  std::uint64_t acc = 0;
  for (const auto& [_, down] : per_round) acc += down;
  return acc;
}

double CommLedger::total_gb() const {
  return static_cast<double>(total_bytes()) / (1024.0 * 1024.0 * 1024.0);
}

// ---------------------------------------------------------------------------
// Client sampling and aggregation
// ---------------------------------------------------------------------------

std::vector<int> sample_clients(int total_clients, int clients_per_round,
                                std::uint64_t seed, int round_index) {
  if (clients_per_round < 1 || clients_per_round > total_clients)
    throw ConfigError("sample_clients: clients_per_round out of range");
  Rng rng(derive_seed(seed, "client_sample", static_cast<std::uint64_t>(round_index)));
  auto picks = rng.sample_without_replacement(total_clients, clients_per_round);
  std::vector<int> silos;
  silos.reserve(picks.size());
  for (int p : picks) silos.push_back(p + 1);
  std::sort(silos.begin(), silos.end());
  return silos;
}

ModelParams fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw ConfigError("fedavg: empty update set");
  std::vector<const ClientUpdate*> sorted;
  sorted.reserve(updates.size());
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) {
              return a->silo_id < b->silo_id;
            });

  const ModelParams& first = sorted.front()->params;
  long double total_weight = 0.0L;
  for (const auto* u : sorted) {
    if (!u->params.same_layout(first))
      throw ConfigError("fedavg: update layouts differ");
    if (u->example_count <= 0)
      throw DataError("fedavg: silo " + std::to_string(u->silo_id) +
                      " reports a non-positive example count");
    total_weight += static_cast<long double>(u->example_count);
  }

  // Extended-precision accumulation in a fixed (silo-id) order keeps the
  // result bitwise independent of the caller's update order.
  std::vector<long double> acc(first.values.size(), 0.0L);
  for (const auto* u : sorted) {
    const long double w = static_cast<long double>(u->example_count);
    for (std::size_t i = 0; i < acc.size(); ++i)
      acc[i] += w * static_cast<long double>(u->params.values[i]);
  }

  ModelParams out = first;
  for (std::size_t i = 0; i < acc.size(); ++i)
    out.values[i] = static_cast<double>(acc[i] / total_weight);
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace {

// Forward once over the pooled test set, then slice per silo.
void evaluate_round(const ModelParams& params, const SplitPartition& data,
                    double threshold, MetricSet& global,
                    std::map<int, MetricSet>& per_silo) {
  const Eigen::VectorXd probs = forward(params, data.test.design_matrix);
  global = metrics_from_scores(probs, data.test.labels, threshold);
  for (const auto& [silo, rows] : data.per_silo_test) {
    Eigen::VectorXd p(static_cast<long>(rows.size()));
    Eigen::VectorXd y(static_cast<long>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      p(static_cast<long>(i)) = probs(rows[i]);
      y(static_cast<long>(i)) = data.test.labels(rows[i]);
    }
    per_silo[silo] = metrics_from_scores(p, y, threshold);
  }
}

HighwayNetConfig wire_net(const FedConfig& config, const SplitPartition& data) {
  HighwayNetConfig net = config.net;
  if (net.input_dim == 0) net.input_dim = data.train.width();
  if (net.input_dim != data.train.width())
    throw ConfigError("net input_dim " + std::to_string(net.input_dim) +
                      " does not match data width " + std::to_string(data.train.width()));
  net.validate();
  return net;
}

double resolve_pos_weight(const FedConfig& config, long n_pos, long n_neg, double gamma) {
  if (!config.use_class_weight) return 1.0;
  return compute_class_weight(n_pos, n_neg, gamma);
}

std::vector<int> all_rows(const EncodedDataset& ds) {
  std::vector<int> rows(static_cast<std::size_t>(ds.row_count()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return rows;
}

}  // namespace

FederatedResult run_federated(const SplitPartition& data, const FedConfig& config) {
  config.validate();
  if (config.n_rounds < 1) throw ConfigError("federation: n_rounds must be >= 1");
  HighwayNetConfig net = wire_net(config, data);
  for (int silo = 1; silo <= config.total_clients; ++silo) {
    if (data.per_silo_train.find(silo) == data.per_silo_train.end())
      throw DataError("federation: silo " + std::to_string(silo) +
                      " has no training rows");
  }

  FederatedResult result;
  result.pos_weight =
      resolve_pos_weight(config, data.train.n_pos, data.train.n_neg, config.gamma);

  net.init_seed = derive_seed(config.seed, "init");
  ModelParams global = init_model(net);

  result.ledger.strategy = config.cost_strategy;
  result.ledger.model_bytes = param_byte_size(global);
  result.ledger.clients_per_round = config.clients_per_round;
  result.ledger.total_clients = config.total_clients;

  for (int round = 0; round < config.n_rounds; ++round) {
    const auto participants =
        sample_clients(config.total_clients, config.clients_per_round, config.seed, round);

    std::vector<ClientUpdate> updates;
    updates.reserve(participants.size());
    for (int silo : participants) {
      const auto& rows = data.per_silo_train.at(silo);
      ClientUpdate update;
      update.silo_id = silo;
      update.params = global;
      update.example_count = static_cast<long>(rows.size());
      train_local(update.params, data.train, rows, {}, net, config.local_epochs,
                  config.batch_size, result.pos_weight,
                  derive_seed(config.seed, "local", static_cast<std::uint64_t>(round),
                              static_cast<std::uint64_t>(silo)));
      updates.push_back(std::move(update));
    }
    global = fedavg_aggregate(updates);
    result.ledger.add_round();

    RoundRecord record;
    record.round = round + 1;
    record.participants = participants;
    std::tie(record.bytes_up, record.bytes_down) = result.ledger.per_round.back();
    evaluate_round(global, data, config.metric_threshold, record.global, record.per_silo);
    result.history.push_back(std::move(record));
  }

  result.params = std::move(global);
  return result;
}

CentralizedResult run_centralized(const SplitPartition& data, const FedConfig& config) {
  config.validate();
  HighwayNetConfig net = wire_net(config, data);

  CentralizedResult result;
  result.pos_weight = resolve_pos_weight(config, data.train.n_pos, data.train.n_neg,
                                         config.gamma_centralized);

  net.init_seed = derive_seed(config.seed, "init_centralized");
  result.params = init_model(net);

  std::vector<int> test_rows = all_rows(data.test);
  if (config.n_rounds == 0) {
    result.epoch_metrics.push_back(evaluate_partition(result.params, data.test, test_rows,
                                                      config.metric_threshold));
    return result;
  }

  // Carve a seeded validation slice out of the pooled training rows so the
  // early-stopping contract applies here too; the test set stays untouched
  // until evaluation.
  std::vector<int> fit_rows = all_rows(data.train);
  std::vector<int> val_rows;
  if (fit_rows.size() >= 2) {
    Rng rng(derive_seed(config.seed, "centralized_val"));
    rng.shuffle(fit_rows);
    const auto n = static_cast<long>(fit_rows.size());
    const long n_val = std::clamp(std::lround(0.1 * static_cast<double>(n)), 1L, n - 1);
    val_rows.assign(fit_rows.end() - n_val, fit_rows.end());
    fit_rows.resize(fit_rows.size() - static_cast<std::size_t>(n_val));
  }

  train_local(result.params, data.train, fit_rows, val_rows, net, config.n_rounds,
              config.batch_size, result.pos_weight,
              derive_seed(config.seed, "centralized"),
              [&](int, const ModelParams& params) {
                result.epoch_metrics.push_back(evaluate_partition(
                    params, data.test, test_rows, config.metric_threshold));
              });
  return result;
}

LocalBaselineResult run_local_baselines(const SplitPartition& data,
                                        const FedConfig& config, int epochs) {
  config.validate();
  if (epochs < 1) throw ConfigError("local baselines: epochs must be >= 1");
  HighwayNetConfig net = wire_net(config, data);

  LocalBaselineResult result;
  for (const auto& [silo, rows] : data.per_silo_train) {
    long n_pos = 0;
    for (int r : rows) n_pos += data.train.labels(r) > 0.5 ? 1 : 0;
    const long n_neg = static_cast<long>(rows.size()) - n_pos;

    double pos_weight = 1.0;
    if (config.use_class_weight && n_pos > 0 && n_neg > 0) {
      pos_weight = compute_class_weight(n_pos, n_neg, config.gamma);
    } else if (config.use_class_weight) {
      // Weighting is undefined without both classes; fall back to the
      // unweighted loss instead of aborting the whole sweep.
      result.degenerate_weight_silos.push_back(silo);
    }

    net.init_seed = derive_seed(config.seed, "init_local", static_cast<std::uint64_t>(silo));
    ModelParams params = init_model(net);
    train_local(params, data.train, rows, {}, net, epochs, config.batch_size, pos_weight,
                derive_seed(config.seed, "local_baseline", static_cast<std::uint64_t>(silo)));

    const auto& test_rows = data.per_silo_test.at(silo);
    result.per_silo[silo] =
        evaluate_partition(params, data.test, test_rows, config.metric_threshold);
  }

  // Macro scores: unweighted means over silos where the metric is defined.
  // Silos with no defined F1 are reported rather than silently averaged in.
  auto mean_of = [&](auto pick) -> std::optional<double> {
    double acc = 0.0;
    long n = 0;
    for (const auto& [silo, m] : result.per_silo) {
      if (auto v = pick(m)) {
        acc += *v;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
  };
  result.macro.precision = mean_of([](const MetricSet& m) { return m.precision; });
  result.macro.recall = mean_of([](const MetricSet& m) { return m.recall; });
  result.macro.f1 = mean_of([](const MetricSet& m) { return m.f1; });
  result.macro.auc = mean_of([](const MetricSet& m) { return m.auc; });
  for (const auto& [silo, m] : result.per_silo) {
    result.macro.support_pos += m.support_pos;
    result.macro.support_neg += m.support_neg;
    if (!m.f1.has_value()) result.excluded_silos.push_back(silo);
  }
  return result;
}

}  // namespace fedsilo
