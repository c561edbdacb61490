#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedsilo/cli.hpp"
#include "fedsilo/rng.hpp"
#include "io_util.hpp"

namespace fedsilo {

namespace fs = std::filesystem;
using nlohmann::json;
using ioutil::format_double;
using ioutil::opt_cell;

namespace {

class PhaseTimer {
 public:
  explicit PhaseTimer(RunManifest& manifest, std::string name)
      : manifest_(manifest), name_(std::move(name)),
        start_(std::chrono::steady_clock::now()) {}
  ~PhaseTimer() {
    const auto stop = std::chrono::steady_clock::now();
    manifest_.phase_seconds[name_] =
        std::chrono::duration<double>(stop - start_).count();
  }

 private:
  RunManifest& manifest_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "'");
}

RunManifest open_manifest(const ExperimentConfig& config) {
  ensure_dir(config.output_dir);
  RunManifest manifest = RunManifest::load(config.output_dir);
  manifest.config_hash = config.config_hash();
  manifest.seed = config.seed;
  manifest.tool_version = kToolVersion;
  return manifest;
}

void write_run_inputs(const ExperimentConfig& config, const SurveySchema& schema,
                      RunManifest& manifest) {
  ioutil::write_text_file(config.output_dir + "/config.json",
                          config.canonical_json() + "\n");
  manifest.add_file("config.json");
  ioutil::write_text_file(config.output_dir + "/schema.json",
                          schema.to_json_text() + "\n");
  manifest.add_file("schema.json");
}

std::string metric_row(const MetricSet& m) {
  std::ostringstream row;
  row << opt_cell(m.precision) << ',' << opt_cell(m.recall) << ',' << opt_cell(m.f1)
      << ',' << opt_cell(m.auc);
  return row.str();
}

void write_rounds_csv(const std::string& path, const std::vector<RoundRecord>& history) {
  std::ostringstream out;
  out << "round,silo,precision,recall,f1,auc,bytes_up,bytes_down\n";
  for (const auto& rec : history) {
    out << rec.round << ",GLOBAL," << metric_row(rec.global) << ',' << rec.bytes_up
        << ',' << rec.bytes_down << '\n';
    for (const auto& [silo, m] : rec.per_silo)
      out << rec.round << ',' << silo << ',' << metric_row(m) << ',' << rec.bytes_up
          << ',' << rec.bytes_down << '\n';
  }
  ioutil::write_text_file(path, out.str());
}

void write_silos_csv(const std::string& path, const std::map<int, MetricSet>& per_silo) {
  std::ostringstream out;
  out << "silo,precision,recall,f1,auc,support_pos,support_neg\n";
  for (const auto& [silo, m] : per_silo)
    out << silo << ',' << metric_row(m) << ',' << m.support_pos << ',' << m.support_neg
        << '\n';
  ioutil::write_text_file(path, out.str());
}

json metric_json(const MetricSet& m) {
  auto cell = [](const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
  };
  return json{{"precision", cell(m.precision)}, {"recall", cell(m.recall)},
              {"f1", cell(m.f1)},               {"auc", cell(m.auc)},
              {"support_pos", m.support_pos},   {"support_neg", m.support_neg}};
}

std::map<int, MetricSet> per_silo_metrics(const ModelParams& params,
                                          const SplitPartition& split,
                                          double threshold) {
  std::map<int, MetricSet> out;
  for (const auto& [silo, rows] : split.per_silo_test)
    out[silo] = evaluate_partition(params, split.test, rows, threshold);
  return out;
}

void train_federated(const ExperimentConfig& config, const PreparedData& data,
                     RunManifest& manifest) {
  FederatedResult result;
  {
    PhaseTimer timer(manifest, "train_federated");
    result = run_federated(data.split, data.fed);
  }
  write_rounds_csv(config.output_dir + "/rounds_federated.csv", result.history);
  manifest.add_file("rounds_federated.csv");
  write_silos_csv(config.output_dir + "/silos_federated.csv",
                  result.history.back().per_silo);
  manifest.add_file("silos_federated.csv");
  save_params(result.params, config.output_dir + "/model_federated.bin");
  manifest.add_file("model_federated.bin");

  const auto& ledger = result.ledger;
  json doc;
  doc["strategy"] = to_string(ledger.strategy);
  doc["model_bytes"] = ledger.model_bytes;
  doc["rounds"] = ledger.per_round.size();
  doc["clients_per_round"] = ledger.clients_per_round;
  doc["total_clients"] = ledger.total_clients;
  doc["total_up_bytes"] = ledger.total_up();
  doc["total_down_bytes"] = ledger.total_down();
  doc["total_bytes"] = ledger.total_bytes();
  doc["total_gb"] = ledger.total_gb();
  doc["pos_weight"] = result.pos_weight;
  ioutil::write_text_file(config.output_dir + "/ledger_federated.json",
                          doc.dump(2) + "\n");
  manifest.add_file("ledger_federated.json");
}

void train_centralized(const ExperimentConfig& config, const PreparedData& data,
                       RunManifest& manifest) {
  CentralizedResult result;
  {
    PhaseTimer timer(manifest, "train_centralized");
    result = run_centralized(data.split, data.fed);
  }
  std::ostringstream out;
  out << "epoch,precision,recall,f1,auc\n";
  for (std::size_t e = 0; e < result.epoch_metrics.size(); ++e)
    out << e + 1 << ',' << metric_row(result.epoch_metrics[e]) << '\n';
  ioutil::write_text_file(config.output_dir + "/epochs_centralized.csv", out.str());
  manifest.add_file("epochs_centralized.csv");

  write_silos_csv(config.output_dir + "/silos_centralized.csv",
                  per_silo_metrics(result.params, data.split, data.fed.metric_threshold));
  manifest.add_file("silos_centralized.csv");
  save_params(result.params, config.output_dir + "/model_centralized.bin");
  manifest.add_file("model_centralized.bin");
}

void train_local_baselines(const ExperimentConfig& config, const PreparedData& data,
                           RunManifest& manifest) {
  LocalBaselineResult result;
  {
    PhaseTimer timer(manifest, "train_local_baselines");
    result = run_local_baselines(data.split, data.fed, data.fed.local_baseline_epochs);
  }
  write_silos_csv(config.output_dir + "/silos_local.csv", result.per_silo);
  manifest.add_file("silos_local.csv");

  json doc;
  doc["macro"] = metric_json(result.macro);
  doc["excluded_silos"] = result.excluded_silos;
  doc["degenerate_weight_silos"] = result.degenerate_weight_silos;
  doc["epochs"] = data.fed.local_baseline_epochs;
  ioutil::write_text_file(config.output_dir + "/local_baselines.json",
                          doc.dump(2) + "\n");
  manifest.add_file("local_baselines.json");
}

}  // namespace

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_generate_data(const ExperimentConfig& config, const std::string& csv_override) {
  config.validate();
  if (config.source != ExperimentConfig::Source::kSynthetic)
    throw ConfigError("generate-data needs a synthetic data source");

  RunManifest manifest = open_manifest(config);
  const SurveySchema schema = config.synthetic.schema();
  const std::string csv_path =
      csv_override.empty() ? config.output_dir + "/synthetic.csv" : csv_override;
  {
    PhaseTimer timer(manifest, "generate_data");
    const RawSurveyTable table =
        generate_synthetic(config.synthetic, derive_seed(config.seed, "data"));
    write_survey_csv(table, schema, csv_path, config.delimiter);
  }
  ioutil::write_text_file(config.output_dir + "/schema.json",
                          schema.to_json_text() + "\n");
  manifest.add_file("schema.json");

  // Only artifacts inside the run directory belong in the manifest.
  std::error_code ec;
  const fs::path rel = fs::relative(csv_path, config.output_dir, ec);
  if (!ec && !rel.empty() && rel.native().rfind("..", 0) != 0)
    manifest.add_file(rel.string());
  manifest.save(config.output_dir);
}

void cmd_train(const ExperimentConfig& config, const std::string& mode) {
  config.validate();
  if (mode != "federated" && mode != "centralized" && mode != "local-baselines" &&
      mode != "all")
    throw ConfigError("unknown train mode '" + mode +
                      "' (expected federated, centralized, local-baselines, or all)");

  RunManifest manifest = open_manifest(config);
  PreparedData data;
  {
    PhaseTimer timer(manifest, "prepare_data");
    data = prepare_data(config);
  }
  write_run_inputs(config, data.schema, manifest);

  if (mode == "federated" || mode == "all") train_federated(config, data, manifest);
  if (mode == "centralized" || mode == "all") train_centralized(config, data, manifest);
  if (mode == "local-baselines" || mode == "all")
    train_local_baselines(config, data, manifest);
  manifest.save(config.output_dir);
}

void cmd_explain(const ExperimentConfig& config, const std::string& model_override) {
  config.validate();
  RunManifest manifest = open_manifest(config);
  PreparedData data;
  {
    PhaseTimer timer(manifest, "prepare_data");
    data = prepare_data(config);
  }
  write_run_inputs(config, data.schema, manifest);

  std::string model_path = model_override;
  if (model_path.empty()) {
    for (const char* candidate : {"/model_federated.bin", "/model_centralized.bin"}) {
      if (fs::exists(config.output_dir + candidate)) {
        model_path = config.output_dir + candidate;
        break;
      }
    }
    if (model_path.empty())
      throw DataError("no trained model in '" + config.output_dir +
                      "'; run the train subcommand first or pass --model");
  }
  const ModelParams params = load_params(model_path);
  if (params.input_dim != data.dataset.width())
    throw DataError("incompatible model: expects " + std::to_string(params.input_dim) +
                    " input columns, data has " + std::to_string(data.dataset.width()));

  const EncodedDataset& test = data.split.test;
  if (config.explain.instances > test.row_count())
    throw ConfigError("explain.instances exceeds the test set size (" +
                      std::to_string(test.row_count()) + ")");

  GroupStructure structure =
      players_from_dataset(test, config.explain.use_derived_views);

  std::vector<int> train_rows(static_cast<std::size_t>(data.split.train.row_count()));
  for (std::size_t i = 0; i < train_rows.size(); ++i) train_rows[i] = static_cast<int>(i);
  const BackgroundSet background = sample_background(
      data.split.train, train_rows, config.explain.background_size, config.seed);

  Rng picker(derive_seed(config.seed, "explain_instances"));
  auto instance_rows = picker.sample_without_replacement(
      static_cast<int>(test.row_count()), config.explain.instances);
  std::sort(instance_rows.begin(), instance_rows.end());

  const ModelFn model = probability_model(params);
  const std::string& method = config.explain.method;

  std::vector<Attribution> attributions;
  attributions.reserve(instance_rows.size());
  {
    PhaseTimer timer(manifest, "explain");
    for (std::size_t i = 0; i < instance_rows.size(); ++i) {
      const Eigen::RowVectorXd x = test.design_matrix.row(instance_rows[i]);
      Attribution a;
      if (method == "shapley_exact")
        a = shapley_exact(model, x, structure.players, background);
      else if (method == "shapley_sampled")
        a = shapley_sampled(model, x, structure.players, background,
                            config.explain.n_permutations,
                            derive_seed(config.seed, "explain_sampling",
                                        static_cast<std::uint64_t>(instance_rows[i])));
      else if (method == "owen_exact")
        a = owen_exact(model, x, structure, background);
      else
        a = owen_sampled(model, x, structure, background, config.explain.n_permutations,
                         derive_seed(config.seed, "explain_sampling",
                                     static_cast<std::uint64_t>(instance_rows[i])));
      a.instance_index = instance_rows[i];
      attributions.push_back(std::move(a));
    }
  }

  // Boundary re-check of the efficiency invariant before anything is written.
  const bool exact = method == "shapley_exact" || method == "owen_exact";
  double max_residual = 0.0;
  for (const auto& a : attributions)
    max_residual = std::max(max_residual, std::abs(a.efficiency_residual));
  if (exact && max_residual > 1e-6)
    throw std::runtime_error("attribution efficiency residual " +
                             format_double(max_residual) + " exceeds 1e-6");

  std::ostringstream acsv;
  acsv << "instance_id,player,value,base_value,method,n_permutations\n";
  for (const auto& a : attributions)
    for (std::size_t p = 0; p < structure.players.size(); ++p)
      acsv << a.instance_index << ',' << structure.players[p].name << ','
           << format_double(a.values[p]) << ',' << format_double(a.base_value) << ','
           << a.method << ',' << a.n_permutations << '\n';
  ioutil::write_text_file(config.output_dir + "/attributions.csv", acsv.str());
  manifest.add_file("attributions.csv");

  const AttributionSummary summary =
      summarize_attributions(attributions, structure.players);
  std::ostringstream scsv;
  scsv << "player,mean_abs_value,stddev\n";
  for (std::size_t p = 0; p < summary.player_names.size(); ++p)
    scsv << summary.player_names[p] << ',' << format_double(summary.mean_abs[p]) << ','
         << format_double(summary.stddev[p]) << '\n';
  ioutil::write_text_file(config.output_dir + "/attribution_summary.csv", scsv.str());
  manifest.add_file("attribution_summary.csv");

  const auto bins = bin_distributions(attributions, instance_rows, test,
                                      structure.players, config.explain.bins);
  std::ostringstream bcsv;
  bcsv << "bin_name,instance_id,value,label\n";
  for (const auto& bin : bins)
    for (const auto& entry : bin.entries)
      bcsv << bin.name << ','
           << instance_rows[static_cast<std::size_t>(entry.attribution_index)] << ','
           << format_double(entry.value) << ',' << entry.label << '\n';
  ioutil::write_text_file(config.output_dir + "/attribution_bins.csv", bcsv.str());
  manifest.add_file("attribution_bins.csv");

  json meta;
  meta["method"] = method;
  meta["instances"] = static_cast<int>(attributions.size());
  meta["background_size"] = config.explain.background_size;
  meta["n_permutations"] = exact ? 0 : config.explain.n_permutations;
  meta["max_efficiency_residual"] = max_residual;
  meta["bins"] = json::array();
  for (const auto& bin : bins)
    meta["bins"].push_back({{"name", bin.name},
                            {"count", bin.entries.size()},
                            {"no_positives", bin.no_positives}});
  ioutil::write_text_file(config.output_dir + "/explain_meta.json", meta.dump(2) + "\n");
  manifest.add_file("explain_meta.json");
  manifest.save(config.output_dir);
}

}  // namespace fedsilo
