#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "fedsilo/dataset.hpp"
#include "fedsilo/rng.hpp"

using namespace fedsilo;
namespace fs = std::filesystem;

namespace {

SurveySchema small_schema() {
  SurveySchema schema;
  schema.features = {{"q1", {1, 2, 3}, {}}, {"q2", {1, 2, 3, 4}, {}}};
  schema.target = {"t", 1, 2, {3, 4}};
  schema.silo = {"s", 5};
  return schema;
}

std::string write_temp(const std::string& name, const std::string& body) {
  fs::create_directories("test_tmp");
  const std::string path = "test_tmp/" + name;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << body;
  return path;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schema validation and JSON round-trip
// ---------------------------------------------------------------------------

TEST_CASE("schema validation catches structural defects") {
  SurveySchema ok = small_schema();
  CHECK_NOTHROW(ok.validate());

  SurveySchema empty_codes = small_schema();
  empty_codes.features[0].codes.clear();
  CHECK_THROWS_AS(empty_codes.validate(), ConfigError);

  SurveySchema duplicate_codes = small_schema();
  duplicate_codes.features[1].codes = {1, 2, 2};
  CHECK_THROWS_AS(duplicate_codes.validate(), ConfigError);

  SurveySchema equal_target = small_schema();
  equal_target.target.negative_code = equal_target.target.positive_code;
  CHECK_THROWS_AS(equal_target.validate(), ConfigError);

  SurveySchema bad_source = small_schema();
  bad_source.views = {{"v", "missing", {{1, 1}, {2, 1}, {3, 2}}}};
  CHECK_THROWS_AS(bad_source.validate(), ConfigError);

  SurveySchema partial_mapping = small_schema();
  partial_mapping.views = {{"v", "q1", {{1, 1}, {2, 1}}}};  // code 3 unmapped
  CHECK_THROWS_AS(partial_mapping.validate(), ConfigError);
}

TEST_CASE("schema survives a JSON round-trip") {
  SurveySchema schema = small_schema();
  schema.views = {{"q1_coarse", "q1", {{1, 1}, {2, 1}, {3, 2}}}};
  const SurveySchema back = SurveySchema::from_json_text(schema.to_json_text());
  CHECK(back.features.size() == 2);
  CHECK(back.features[1].codes == std::vector<int>{1, 2, 3, 4});
  CHECK(back.target.excluded_codes == std::vector<int>{3, 4});
  CHECK(back.silo.silo_count == 5);
  REQUIRE(back.views.size() == 1);
  CHECK(back.views[0].mapping.at(3) == 2);
  CHECK_NOTHROW(back.validate());
}

TEST_CASE("schema JSON parsing is fail-closed") {
  CHECK_THROWS_AS(SurveySchema::from_json_text("{not json"), ConfigError);
  CHECK_THROWS_AS(
      SurveySchema::from_json_text(
          R"({"features": [{"name": "a", "codes": [1, 2]}],
              "target": {"name": "t", "positive_code": 1, "negative_code": 2},
              "silo": {"name": "s", "silo_count": 3},
              "surprise": true})"),
      ConfigError);
}

// ---------------------------------------------------------------------------
// load_and_filter
// ---------------------------------------------------------------------------

namespace {

// A 1000-row file whose first 215 rows answer the target with the two
// refusal codes; an independent scan of the text recounts them.
std::string thousand_row_csv(int* excluded_oracle) {
  std::ostringstream body;
  body << "q1,q2,t,s\n";
  int excluded = 0;
  for (int i = 0; i < 1000; ++i) {
    int t;
    if (i < 108)
      t = 3;
    else if (i < 215)
      t = 4;
    else
      t = (i % 5 == 0) ? 1 : 2;
    body << 1 + i % 3 << ',' << 1 + i % 4 << ',' << t << ',' << 1 + i % 5 << '\n';
  }
  // Independent oracle: re-scan the emitted text for refusal answers.
  std::istringstream scan(body.str());
  std::string line;
  std::getline(scan, line);
  while (std::getline(scan, line)) {
    const auto second_comma = line.find(',', line.find(',') + 1);
    const auto third_comma = line.find(',', second_comma + 1);
    const std::string cell = line.substr(second_comma + 1, third_comma - second_comma - 1);
    if (cell == "3" || cell == "4") ++excluded;
  }
  *excluded_oracle = excluded;
  return body.str();
}

}  // namespace

TEST_CASE("load_and_filter drops refusal-coded rows, keeping the rest") {
  int oracle = 0;
  const std::string path = write_temp("thousand.csv", thousand_row_csv(&oracle));
  const RawSurveyTable table = load_and_filter(path, small_schema());
  CHECK(oracle == 215);
  CHECK(table.row_count() == 1000 - static_cast<std::size_t>(oracle));
  CHECK(table.dropped_excluded == static_cast<std::size_t>(oracle));
  CHECK(table.dropped_invalid == 0);
  for (std::size_t r = 0; r < table.row_count(); ++r) {
    const int t = table.target_code(r);
    CHECK((t == 1 || t == 2));
  }
}

TEST_CASE("a clean file passes through with zero drops") {
  const std::string path = write_temp("clean.csv", "q1,q2,t,s\n1,1,1,1\n2,4,2,5\n3,2,1,3\n");
  const RawSurveyTable table = load_and_filter(path, small_schema());
  CHECK(table.row_count() == 3);
  CHECK(table.dropped_excluded == 0);
  CHECK(table.dropped_invalid == 0);
  CHECK(table.rows[1] == std::vector<int>{2, 4, 2, 5});
}

TEST_CASE("out-of-set codes are dropped and counted separately") {
  const std::string path =
      write_temp("invalid.csv", "q1,q2,t,s\n1,1,1,1\n9,1,2,1\n1,1,2,6\n2,2,3,1\n");
  const RawSurveyTable table = load_and_filter(path, small_schema());
  CHECK(table.row_count() == 1);
  CHECK(table.dropped_invalid == 2);   // bad q1 code, bad silo code
  CHECK(table.dropped_excluded == 1);  // target refusal
}

TEST_CASE("missing schema column is named in the error") {
  const std::string path = write_temp("missing.csv", "q1,q2,t\n1,1,1\n");
  CHECK_THROWS_WITH_AS(load_and_filter(path, small_schema()),
                       doctest::Contains("'s'"), DataError);
}

TEST_CASE("unparseable cell reports its line number") {
  const std::string path = write_temp("bad_cell.csv", "q1,q2,t,s\n1,1,1,1\n1,huh,2,1\n");
  CHECK_THROWS_WITH_AS(load_and_filter(path, small_schema()),
                       doctest::Contains("line 3"), DataError);
}

TEST_CASE("extra columns are ignored and header order is free") {
  const std::string path =
      write_temp("extra.csv", "note,s,t,q2,q1\n77,1,1,4,3\n88,2,2,1,1\n");
  const RawSurveyTable table = load_and_filter(path, small_schema());
  CHECK(table.row_count() == 2);
  // Canonical order: features, then target, then silo.
  CHECK(table.rows[0] == std::vector<int>{3, 4, 1, 1});
  CHECK(table.rows[1] == std::vector<int>{1, 1, 2, 2});
}

TEST_CASE("alternate delimiters are honored") {
  const std::string path = write_temp("semi.csv", "q1;q2;t;s\n1;2;1;1\n");
  const RawSurveyTable table = load_and_filter(path, small_schema(), ';');
  CHECK(table.row_count() == 1);
  CHECK(table.rows[0] == std::vector<int>{1, 2, 1, 1});
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

TEST_CASE("one-hot width is the sum of category counts") {
  RawSurveyTable table;
  table.n_features = 2;
  table.rows = {{1, 4, 1, 1}, {3, 2, 2, 2}, {2, 1, 1, 5}};
  const EncodedDataset ds = encode(table, small_schema());
  CHECK(ds.width() == 7);  // 3 + 4 categories
  for (long r = 0; r < ds.row_count(); ++r)
    CHECK(ds.design_matrix.row(r).sum() == doctest::Approx(2.0));
  CHECK(ds.labels(0) == 1.0);
  CHECK(ds.labels(1) == 0.0);
  CHECK(ds.n_pos == 2);
  CHECK(ds.n_neg == 1);
  CHECK(ds.silo_ids == std::vector<int>{1, 2, 5});
}

TEST_CASE("derived views light up the mapped cell") {
  SurveySchema schema;
  schema.features = {{"ga", {1, 2, 3, 4, 5, 6}, {}}};
  schema.target = {"t", 1, 2, {}};
  schema.silo = {"s", 2};
  schema.views = {{"ga_gender", "ga", {{1, 1}, {2, 1}, {3, 1}, {4, 2}, {5, 2}, {6, 2}}}};

  RawSurveyTable table;
  table.n_features = 1;
  table.rows = {{3, 1, 1}, {5, 2, 2}};
  const EncodedDataset ds = encode(table, schema);

  CHECK(ds.width() == 6 + 2);
  const int view_span = ds.span_index("ga_gender");
  REQUIRE(view_span >= 0);
  const FeatureSpan& span = ds.feature_spans[static_cast<std::size_t>(view_span)];
  CHECK(span.is_view);
  CHECK(span.source_feature == ds.span_index("ga"));
  CHECK(ds.active_code(0, span) == 1);  // composite code 3 -> first derived code
  CHECK(ds.active_code(1, span) == 2);  // composite code 5 -> second derived code
}

TEST_CASE("encode then argmax-decode reproduces the filtered table") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 3;
  synth.rows_per_silo = 40;
  const SurveySchema schema = synth.schema();
  const RawSurveyTable table = filter_rows(generate_synthetic(synth, 5), schema);
  const RawSurveyTable back = decode_by_argmax(encode(table, schema), schema);
  REQUIRE(back.row_count() == table.row_count());
  CHECK(back.rows == table.rows);
}

// ---------------------------------------------------------------------------
// split_and_partition
// ---------------------------------------------------------------------------

namespace {

EncodedDataset synthetic_encoded(int silos, int rows_per_silo, std::uint64_t seed) {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = silos;
  synth.rows_per_silo = rows_per_silo;
  return encode(filter_rows(generate_synthetic(synth, seed), synth.schema()),
                synth.schema());
}

}  // namespace

TEST_CASE("ten rows in one silo split 8/2 at ratio 0.8") {
  SurveySchema schema = small_schema();
  schema.silo.silo_count = 1;
  RawSurveyTable table;
  table.n_features = 2;
  for (int i = 0; i < 10; ++i) table.rows.push_back({1 + i % 3, 1 + i % 4, 1 + i % 2, 1});
  const SplitPartition split = split_and_partition(encode(table, schema), 0.8, 77);
  CHECK(split.train.row_count() == 8);
  CHECK(split.test.row_count() == 2);
}

TEST_CASE("every silo lands within 1/n of the requested ratio") {
  const EncodedDataset ds = synthetic_encoded(6, 90, 21);
  const SplitPartition split = split_and_partition(ds, 0.8, 9);

  std::map<int, long> totals;
  for (int s : ds.silo_ids) ++totals[s];
  for (const auto& [silo, total] : totals) {
    const auto train_n = static_cast<double>(split.per_silo_train.at(silo).size());
    const double frac = train_n / static_cast<double>(total);
    CHECK(std::abs(frac - 0.8) <= 1.0 / static_cast<double>(total) + 1e-12);
  }
}

TEST_CASE("split is disjoint, exhaustive, and per-silo lists partition each side") {
  const EncodedDataset ds = synthetic_encoded(5, 60, 31);
  const SplitPartition split = split_and_partition(ds, 0.75, 123);

  CHECK(split.train.row_count() + split.test.row_count() == ds.row_count());

  // Each side's per-silo index lists cover that side exactly once.
  for (const auto* side : {&split.per_silo_train, &split.per_silo_test}) {
    const EncodedDataset& data =
        side == &split.per_silo_train ? split.train : split.test;
    std::vector<int> seen(static_cast<std::size_t>(data.row_count()), 0);
    for (const auto& [silo, rows] : *side)
      for (int r : rows) {
        REQUIRE(r >= 0);
        REQUIRE(r < data.row_count());
        CHECK(data.silo_ids[static_cast<std::size_t>(r)] == silo);
        ++seen[static_cast<std::size_t>(r)];
      }
    for (int count : seen) CHECK(count == 1);
  }

  // Rows are preserved: multiset of (silo, label, row-sum) matches.
  auto fingerprint = [](const EncodedDataset& d) {
    std::multiset<std::pair<int, double>> acc;
    for (long r = 0; r < d.row_count(); ++r)
      acc.insert({d.silo_ids[static_cast<std::size_t>(r)],
                  d.labels(r) + 10.0 * d.design_matrix.row(r).dot(
                                           Eigen::RowVectorXd::LinSpaced(
                                               d.width(), 1.0, d.width()))});
    return acc;
  };
  auto whole = fingerprint(ds);
  auto trained = fingerprint(split.train);
  auto tested = fingerprint(split.test);
  trained.insert(tested.begin(), tested.end());
  CHECK(trained == whole);
}

TEST_CASE("splits are bitwise reproducible by seed") {
  const EncodedDataset ds = synthetic_encoded(4, 50, 41);
  const SplitPartition a = split_and_partition(ds, 0.8, 555);
  const SplitPartition b = split_and_partition(ds, 0.8, 555);
  CHECK(a.train.design_matrix == b.train.design_matrix);
  CHECK(a.test.design_matrix == b.test.design_matrix);
  CHECK(a.per_silo_train == b.per_silo_train);
  const SplitPartition c = split_and_partition(ds, 0.8, 556);
  CHECK(a.train.design_matrix != c.train.design_matrix);
}

TEST_CASE("a silo with fewer than two rows fails the split") {
  SurveySchema schema = small_schema();
  schema.silo.silo_count = 2;
  RawSurveyTable table;
  table.n_features = 2;
  table.rows = {{1, 1, 1, 1}, {2, 2, 2, 1}, {3, 3, 1, 2}};  // silo 2 has one row
  CHECK_THROWS_WITH_AS(split_and_partition(encode(table, schema), 0.8, 1),
                       doctest::Contains("silo 2"), DataError);
}

TEST_CASE("split rejects ratios outside (0, 1)") {
  const EncodedDataset ds = synthetic_encoded(3, 30, 51);
  CHECK_THROWS_AS(split_and_partition(ds, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split_and_partition(ds, 1.0, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// compute_class_weight
// ---------------------------------------------------------------------------

TEST_CASE("balanced classes with unit gamma weigh 1") {
  CHECK(compute_class_weight(250, 250, 1.0) == 1.0);
}

TEST_CASE("imbalance example under both gamma settings") {
  CHECK(compute_class_weight(180, 785, 1.1835) ==
        doctest::Approx(5.161375).epsilon(1e-12));
  CHECK(compute_class_weight(180, 785, 1.182) ==
        doctest::Approx(785.0 * 1.182 / 180.0).epsilon(1e-15));
  CHECK(compute_class_weight(180, 785, 1.182) ==
        doctest::Approx(5.1548333333333334).epsilon(1e-12));
}

TEST_CASE("class weight grows with gamma and with the imbalance ratio") {
  CHECK(compute_class_weight(100, 300, 1.2) > compute_class_weight(100, 300, 1.1));
  CHECK(compute_class_weight(100, 400, 1.1) > compute_class_weight(100, 300, 1.1));
  CHECK(compute_class_weight(90, 300, 1.1) > compute_class_weight(100, 300, 1.1));
}

TEST_CASE("degenerate class counts are rejected") {
  CHECK_THROWS_AS(compute_class_weight(0, 100, 1.0), DataError);
  CHECK_THROWS_AS(compute_class_weight(100, 0, 1.0), DataError);
  CHECK_THROWS_AS(compute_class_weight(10, 10, 0.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

TEST_CASE("default synthesis yields 25,500 rows near the target positive rate") {
  const SynthesisConfig synth = SynthesisConfig::defaults();
  const RawSurveyTable raw = generate_synthetic(synth, 1);
  CHECK(raw.row_count() == 25500);

  std::set<int> silos;
  long pos_all = 0;
  for (std::size_t r = 0; r < raw.row_count(); ++r) {
    silos.insert(raw.silo_code(r));
    if (raw.target_code(r) == 1) ++pos_all;
  }
  CHECK(silos.size() == 51);
  const double rate_all =
      static_cast<double>(pos_all) / static_cast<double>(raw.row_count());
  CHECK(rate_all >= 0.166);
  CHECK(rate_all <= 0.206);

  const RawSurveyTable kept = filter_rows(raw, synth.schema());
  long pos_kept = 0;
  for (std::size_t r = 0; r < kept.row_count(); ++r)
    if (kept.target_code(r) == 1) ++pos_kept;
  const double rate_kept =
      static_cast<double>(pos_kept) / static_cast<double>(kept.row_count());
  CHECK(rate_kept >= 0.166);
  CHECK(rate_kept <= 0.206);
}

TEST_CASE("synthesis is deterministic by seed") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 4;
  synth.rows_per_silo = 60;
  const RawSurveyTable a = generate_synthetic(synth, 7);
  const RawSurveyTable b = generate_synthetic(synth, 7);
  CHECK(a.rows == b.rows);
  const RawSurveyTable c = generate_synthetic(synth, 8);
  CHECK(a.rows != c.rows);
}

TEST_CASE("zero perturbation collapses all silos onto one generating model") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.perturbation_scale = 0.0;
  const auto first = silo_coefficients(synth, 3, 1);
  for (int silo = 2; silo <= 5; ++silo) CHECK(silo_coefficients(synth, 3, silo) == first);

  SynthesisConfig jittered = SynthesisConfig::defaults();
  jittered.perturbation_scale = 0.4;
  CHECK(silo_coefficients(jittered, 3, 1) != silo_coefficients(jittered, 3, 2));
}

TEST_CASE("forced-negative silos produce no positive rows") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 5;
  synth.rows_per_silo = 70;
  synth.force_negative_silos = {2, 4};
  const RawSurveyTable raw = generate_synthetic(synth, 13);
  for (std::size_t r = 0; r < raw.row_count(); ++r) {
    const int silo = raw.silo_code(r);
    if (silo == 2 || silo == 4) CHECK(raw.target_code(r) != 1);
  }
}

TEST_CASE("synthesis config rejects infeasible settings") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.rows_per_silo = 0;
  CHECK_THROWS_AS(synth.validate(), ConfigError);

  SynthesisConfig rate = SynthesisConfig::defaults();
  rate.target_positive_rate = 0.0;
  CHECK_THROWS_AS(rate.validate(), ConfigError);
  rate.target_positive_rate = 1.0;
  CHECK_THROWS_AS(rate.validate(), ConfigError);

  SynthesisConfig force = SynthesisConfig::defaults();
  force.silos = 4;
  force.force_negative_silos = {9};
  CHECK_THROWS_AS(force.validate(), ConfigError);
}

TEST_CASE("written CSV reloads to the same filtered table") {
  SynthesisConfig synth = SynthesisConfig::defaults();
  synth.silos = 3;
  synth.rows_per_silo = 50;
  const SurveySchema schema = synth.schema();
  const RawSurveyTable raw = generate_synthetic(synth, 17);

  const std::string path = "test_tmp/roundtrip.csv";
  fs::create_directories("test_tmp");
  write_survey_csv(raw, schema, path);

  const RawSurveyTable from_disk = load_and_filter(path, schema);
  const RawSurveyTable in_memory = filter_rows(raw, schema);
  CHECK(from_disk.rows == in_memory.rows);
  CHECK(from_disk.dropped_excluded == in_memory.dropped_excluded);
  CHECK(from_disk.dropped_invalid == in_memory.dropped_invalid);
}

TEST_CASE("the default schema wires the paired gender and age views") {
  const SurveySchema schema = SynthesisConfig::defaults().schema();
  CHECK_NOTHROW(schema.validate());
  REQUIRE(schema.views.size() == 2);
  CHECK(schema.views[0].source == schema.views[1].source);

  int composite = schema.feature_index(schema.views[0].source);
  REQUIRE(composite >= 0);
  const auto& codes = schema.features[static_cast<std::size_t>(composite)].codes;
  // Both views must map every composite code (validated above) onto a
  // smaller code set than the composite itself.
  std::set<int> gender_codes, age_codes;
  for (int code : codes) {
    gender_codes.insert(schema.views[0].mapping.at(code));
    age_codes.insert(schema.views[1].mapping.at(code));
  }
  CHECK(gender_codes.size() < codes.size());
  CHECK(age_codes.size() < codes.size());
  CHECK(gender_codes.size() * age_codes.size() == codes.size());
}
