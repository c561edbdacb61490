#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedsilo/errors.hpp"

namespace fedsilo {

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

struct FeatureSpec {
  std::string name;
  std::vector<int> codes;           // allowed category codes, duplicate-free
  std::vector<int> excluded_codes;  // codes that force row removal
};

struct TargetSpec {
  std::string name;
  int positive_code = 1;
  int negative_code = 2;
  std::vector<int> excluded_codes;
};

struct SiloSpec {
  std::string name;
  int silo_count = 0;  // codes 1..silo_count index silos
};

// A derived view re-expresses a source feature's codes through a total
// mapping (e.g. a composite gender/age code split into a gender-only code).
struct ViewSpec {
  std::string name;
  std::string source;        // source feature name
  std::map<int, int> mapping;  // source code -> derived code, total over source codes
};

struct SurveySchema {
  std::vector<FeatureSpec> features;
  TargetSpec target;
  SiloSpec silo;
  std::vector<ViewSpec> views;

  // Throws ConfigError on empty/duplicate code sets, equal target codes,
  // unknown view sources, or non-total view mappings.
  void validate() const;

  int feature_index(const std::string& name) const;  // -1 if absent

  static SurveySchema from_json_file(const std::string& path);
  static SurveySchema from_json_text(const std::string& text);
  std::string to_json_text() const;
};

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

// Filtered integer-coded rows in canonical column order: schema features
// first, then target, then silo.
struct RawSurveyTable {
  std::vector<std::vector<int>> rows;
  std::size_t n_features = 0;
  std::size_t dropped_excluded = 0;  // rows removed by explicit exclusion codes
  std::size_t dropped_invalid = 0;   // rows with codes outside allowed sets

  std::size_t row_count() const { return rows.size(); }
  int target_code(std::size_t r) const { return rows[r][n_features]; }
  int silo_code(std::size_t r) const { return rows[r][n_features + 1]; }
};

// One contiguous one-hot block of the design matrix.
struct FeatureSpan {
  std::string name;
  int begin = 0;
  int width = 0;
  std::vector<int> codes;  // codes[i] is hot at column begin+i
  bool is_view = false;
  int source_feature = -1;  // index into spans of the view's source, else -1
};

struct EncodedDataset {
  Eigen::MatrixXd design_matrix;  // rows x total one-hot width
  Eigen::VectorXd labels;         // 1.0 positive, 0.0 negative
  std::vector<int> silo_ids;
  std::vector<FeatureSpan> feature_spans;
  long n_pos = 0;
  long n_neg = 0;

  long row_count() const { return design_matrix.rows(); }
  int width() const { return static_cast<int>(design_matrix.cols()); }
  int span_index(const std::string& name) const;  // -1 if absent

  // Code whose one-hot cell is set for `row` inside `span`.
  int active_code(long row, const FeatureSpan& span) const;

  EncodedDataset subset(const std::vector<int>& row_indices) const;
};

struct SplitPartition {
  EncodedDataset train;
  EncodedDataset test;
  std::map<int, std::vector<int>> per_silo_train;  // silo id -> rows of `train`
  std::map<int, std::vector<int>> per_silo_test;   // silo id -> rows of `test`
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Reads a delimited UTF-8 file with a header row, keeps only schema columns
// (extra columns ignored, order-independent), and drops rows carrying
// excluded or out-of-set codes. Drop counts are reported on the table.
// Throws DataError for a missing column (named) or an unparseable cell
// (with its row number).
RawSurveyTable load_and_filter(const std::string& path, const SurveySchema& schema,
                               char delimiter = ',');

// Filtering core shared by load_and_filter and the in-memory synthetic path:
// drops excluded/out-of-set rows and accumulates the drop counters.
RawSurveyTable filter_rows(RawSurveyTable table, const SurveySchema& schema);

// One-hot encodes a filtered table; derived views are appended as extra
// feature spans after the raw features.
EncodedDataset encode(const RawSurveyTable& table, const SurveySchema& schema);

// Inverse of encode for round-trip checks: recovers the code table by
// argmax within each non-view span (target/silo are carried through).
RawSurveyTable decode_by_argmax(const EncodedDataset& ds, const SurveySchema& schema);

// Deterministic per-silo stratified split. Every silo needs >= 2 rows.
SplitPartition split_and_partition(const EncodedDataset& ds, double ratio,
                                   std::uint64_t seed);

// Positive-class loss weight (n_neg / n_pos) * gamma.
double compute_class_weight(long n_pos, long n_neg, double gamma);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticFeature {
  std::string name;
  int categories = 0;
  // Latent logistic coefficient per category; defaults to an evenly spaced
  // ramp of the built-in strength when empty.
  std::vector<double> coef;
  std::vector<ViewSpec> views;  // `source` left empty, filled on demand
};

struct SynthesisConfig {
  int silos = 51;
  int rows_per_silo = 500;
  double target_positive_rate = 0.186;
  double perturbation_scale = 0.4;   // sd of per-silo coefficient noise
  double excluded_answer_rate = 0.035;  // rows given a filtered-out target code
  std::vector<int> force_negative_silos;  // silos generated with no positives
  std::vector<SyntheticFeature> features;  // empty -> built-in default set

  void validate() const;  // throws ConfigError
  SurveySchema schema() const;

  static SynthesisConfig defaults();
};

// Deterministic generator: feature codes drawn uniformly, labels from a
// per-silo-perturbed logistic model whose bias is calibrated so the kept
// rows hit the target positive rate in expectation.
RawSurveyTable generate_synthetic(const SynthesisConfig& config, std::uint64_t seed);

// Per-silo coefficient table actually used by the generator (exposed for
// inspection; silo is 1-based).
std::vector<std::vector<double>> silo_coefficients(const SynthesisConfig& config,
                                                   std::uint64_t seed, int silo);

// Writes a table in the same CSV dialect load_and_filter consumes.
void write_survey_csv(const RawSurveyTable& table, const SurveySchema& schema,
                      const std::string& path, char delimiter = ',');

}  // namespace fedsilo
