#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedsilo/dataset.hpp"
#include "fedsilo/explain.hpp"
#include "fedsilo/federation.hpp"

namespace fedsilo {

// ---------------------------------------------------------------------------
// Experiment configuration (fail-closed JSON)
// ---------------------------------------------------------------------------

struct ExplainSettings {
  std::string method = "owen_exact";  // shapley_exact|shapley_sampled|owen_exact|owen_sampled
  int instances = 25;
  int background_size = 100;
  int n_permutations = 200;  // sampled methods only
  bool use_derived_views = true;
  std::vector<BinSelector> bins;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";

  enum class Source { kSynthetic, kCsv };
  Source source = Source::kSynthetic;
  std::string csv_path;
  std::string schema_path;
  char delimiter = ',';
  SynthesisConfig synthetic = SynthesisConfig::defaults();

  double train_ratio = 0.8;
  FedConfig fed;
  bool total_clients_explicit = false;  // else inferred from the data's silo count
  ExplainSettings explain;

  void validate() const;  // throws ConfigError
  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_text(const std::string& text);

  // Stable serialization of the effective config; hashed into the manifest.
  std::string canonical_json() const;
  std::string config_hash() const;  // 16 hex digits
};

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string tool_version;
  std::map<std::string, double> phase_seconds;
  std::vector<std::string> files;  // relative to the run directory, sorted

  void add_file(const std::string& relative_path);

  // Load-or-create against a run directory; save() re-checks that every
  // listed file exists.
  static RunManifest load(const std::string& run_dir);
  void save(const std::string& run_dir) const;
};

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct PreparedData {
  SurveySchema schema;
  RawSurveyTable table;  // filtered rows
  EncodedDataset dataset;
  SplitPartition split;
  FedConfig fed;  // config.fed with total_clients/input width wired to the data
};

// Loads or synthesizes, filters, encodes, and splits; deterministic in the
// config seed.
PreparedData prepare_data(const ExperimentConfig& config);

// Subcommand bodies. Each writes its artifacts under config.output_dir,
// updates manifest.json there, and throws module errors upward.
void cmd_generate_data(const ExperimentConfig& config,
                       const std::string& csv_override = "");
void cmd_train(const ExperimentConfig& config, const std::string& mode);
void cmd_explain(const ExperimentConfig& config, const std::string& model_override = "");
void cmd_report(const std::string& run_dir, bool svg = true);

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace fedsilo
