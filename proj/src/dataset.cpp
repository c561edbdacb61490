#include "fedsilo/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedsilo/rng.hpp"

namespace fedsilo {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& context) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* k) { return key == k; }) == allowed.end()) {
      throw ConfigError(context + ": unknown key '" + key + "'");
    }
  }
}

std::vector<int> int_list(const json& arr, const std::string& context) {
  if (!arr.is_array()) throw ConfigError(context + ": expected an array of integers");
  std::vector<int> out;
  for (const auto& v : arr) {
    if (!v.is_number_integer()) throw ConfigError(context + ": expected integers");
    out.push_back(v.get<int>());
  }
  return out;
}

void require_unique_nonempty(const std::vector<int>& codes, const std::string& what) {
  if (codes.empty()) throw ConfigError(what + ": code set is empty");
  std::set<int> seen(codes.begin(), codes.end());
  if (seen.size() != codes.size()) throw ConfigError(what + ": duplicate codes");
}

}  // namespace

// ---------------------------------------------------------------------------
// SurveySchema
// ---------------------------------------------------------------------------

void SurveySchema::validate() const {
  if (features.empty()) throw ConfigError("schema: no features");
  std::set<std::string> names;
  for (const auto& f : features) {
    if (f.name.empty()) throw ConfigError("schema: feature with empty name");
    if (!names.insert(f.name).second)
      throw ConfigError("schema: duplicate column name '" + f.name + "'");
    require_unique_nonempty(f.codes, "feature '" + f.name + "'");
  }
  if (target.name.empty()) throw ConfigError("schema: target has no name");
  if (!names.insert(target.name).second)
    throw ConfigError("schema: duplicate column name '" + target.name + "'");
  if (target.positive_code == target.negative_code)
    throw ConfigError("schema: target positive and negative codes are equal");
  if (silo.name.empty()) throw ConfigError("schema: silo column has no name");
  if (!names.insert(silo.name).second)
    throw ConfigError("schema: duplicate column name '" + silo.name + "'");
  if (silo.silo_count < 1) throw ConfigError("schema: silo_count must be >= 1");

  for (const auto& v : views) {
    if (!names.insert(v.name).second)
      throw ConfigError("schema: duplicate column name '" + v.name + "'");
    int src = feature_index(v.source);
    if (src < 0)
      throw ConfigError("schema: view '" + v.name + "' has unknown source '" + v.source +
                        "'");
    // Mapping must be total over the source feature's allowed codes.
    for (int code : features[src].codes) {
      if (v.mapping.find(code) == v.mapping.end())
        throw ConfigError("schema: view '" + v.name + "' mapping misses source code " +
                          std::to_string(code));
    }
  }
}

int SurveySchema::feature_index(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return static_cast<int>(i);
  return -1;
}

SurveySchema SurveySchema::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("schema: invalid JSON: ") + e.what());
  }
  check_keys(doc, {"features", "target", "silo", "views"}, "schema");
  SurveySchema schema;
  if (!doc.contains("features") || !doc.contains("target") || !doc.contains("silo"))
    throw ConfigError("schema: 'features', 'target' and 'silo' are required");

  for (const auto& f : doc["features"]) {
    check_keys(f, {"name", "codes", "excluded_codes"}, "schema feature");
    FeatureSpec spec;
    spec.name = f.at("name").get<std::string>();
    spec.codes = int_list(f.at("codes"), "feature '" + spec.name + "' codes");
    if (f.contains("excluded_codes"))
      spec.excluded_codes =
          int_list(f["excluded_codes"], "feature '" + spec.name + "' excluded_codes");
    schema.features.push_back(std::move(spec));
  }

  const auto& t = doc["target"];
  check_keys(t, {"name", "positive_code", "negative_code", "excluded_codes"},
             "schema target");
  schema.target.name = t.at("name").get<std::string>();
  schema.target.positive_code = t.at("positive_code").get<int>();
  schema.target.negative_code = t.at("negative_code").get<int>();
  if (t.contains("excluded_codes"))
    schema.target.excluded_codes = int_list(t["excluded_codes"], "target excluded_codes");

  const auto& s = doc["silo"];
  check_keys(s, {"name", "silo_count"}, "schema silo");
  schema.silo.name = s.at("name").get<std::string>();
  schema.silo.silo_count = s.at("silo_count").get<int>();

  if (doc.contains("views")) {
    for (const auto& v : doc["views"]) {
      check_keys(v, {"name", "source", "mapping"}, "schema view");
      ViewSpec view;
      view.name = v.at("name").get<std::string>();
      view.source = v.at("source").get<std::string>();
      for (const auto& [key, val] : v.at("mapping").items()) {
        int code = 0;
        auto [p, ec] = std::from_chars(key.data(), key.data() + key.size(), code);
        if (ec != std::errc() || p != key.data() + key.size())
          throw ConfigError("schema: view '" + view.name + "' mapping key '" + key +
                            "' is not an integer");
        view.mapping[code] = val.get<int>();
      }
      schema.views.push_back(std::move(view));
    }
  }
  schema.validate();
  return schema;
}

SurveySchema SurveySchema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("schema: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string SurveySchema::to_json_text() const {
  json doc;
  doc["features"] = json::array();
  for (const auto& f : features) {
    json jf{{"name", f.name}, {"codes", f.codes}};
    if (!f.excluded_codes.empty()) jf["excluded_codes"] = f.excluded_codes;
    doc["features"].push_back(jf);
  }
  doc["target"] = {{"name", target.name},
                   {"positive_code", target.positive_code},
                   {"negative_code", target.negative_code}};
  if (!target.excluded_codes.empty())
    doc["target"]["excluded_codes"] = target.excluded_codes;
  doc["silo"] = {{"name", silo.name}, {"silo_count", silo.silo_count}};
  if (!views.empty()) {
    doc["views"] = json::array();
    for (const auto& v : views) {
      json mapping = json::object();
      for (const auto& [code, derived] : v.mapping) mapping[std::to_string(code)] = derived;
      doc["views"].push_back({{"name", v.name}, {"source", v.source}, {"mapping", mapping}});
    }
  }
  return doc.dump(2);
}

// ---------------------------------------------------------------------------
// Loading and filtering
// ---------------------------------------------------------------------------

namespace {

enum class RowFate { kKeep, kExcluded, kInvalid };

RowFate classify_row(const std::vector<int>& row, const SurveySchema& schema) {
  const std::size_t nf = schema.features.size();
  // Explicit exclusion codes take precedence over out-of-set codes.
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& ex = schema.features[f].excluded_codes;
    if (std::find(ex.begin(), ex.end(), row[f]) != ex.end()) return RowFate::kExcluded;
  }
  const int tcode = row[nf];
  const auto& tex = schema.target.excluded_codes;
  if (std::find(tex.begin(), tex.end(), tcode) != tex.end()) return RowFate::kExcluded;

  for (std::size_t f = 0; f < nf; ++f) {
    const auto& codes = schema.features[f].codes;
    if (std::find(codes.begin(), codes.end(), row[f]) == codes.end())
      return RowFate::kInvalid;
  }
  if (tcode != schema.target.positive_code && tcode != schema.target.negative_code)
    return RowFate::kInvalid;
  const int silo = row[nf + 1];
  if (silo < 1 || silo > schema.silo.silo_count) return RowFate::kInvalid;
  return RowFate::kKeep;
}

std::vector<std::string_view> split_line(std::string_view line, char delimiter) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(delimiter, start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

}  // namespace

RawSurveyTable filter_rows(RawSurveyTable table, const SurveySchema& schema) {
  RawSurveyTable out;
  out.n_features = table.n_features;
  out.dropped_excluded = table.dropped_excluded;
  out.dropped_invalid = table.dropped_invalid;
  out.rows.reserve(table.rows.size());
  for (auto& row : table.rows) {
    switch (classify_row(row, schema)) {
      case RowFate::kKeep:
        out.rows.push_back(std::move(row));
        break;
      case RowFate::kExcluded:
        ++out.dropped_excluded;
        break;
      case RowFate::kInvalid:
        ++out.dropped_invalid;
        break;
    }
  }
  return out;
}

RawSurveyTable load_and_filter(const std::string& path, const SurveySchema& schema,
                               char delimiter) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");

  std::string header_line;
  if (!std::getline(in, header_line)) throw DataError("data file '" + path + "' is empty");
  auto header = split_line(header_line, delimiter);
  std::vector<std::string> header_names;
  header_names.reserve(header.size());
  for (auto h : header) header_names.emplace_back(trim(h));

  auto column_of = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header_names.size(); ++i)
      if (header_names[i] == name) return static_cast<int>(i);
    return -1;
  };

  const std::size_t nf = schema.features.size();
  std::vector<int> col_index(nf + 2);
  for (std::size_t f = 0; f < nf; ++f) {
    col_index[f] = column_of(schema.features[f].name);
    if (col_index[f] < 0)
      throw DataError("schema error: column '" + schema.features[f].name +
                      "' not found in '" + path + "'");
  }
  col_index[nf] = column_of(schema.target.name);
  if (col_index[nf] < 0)
    throw DataError("schema error: column '" + schema.target.name + "' not found in '" +
                    path + "'");
  col_index[nf + 1] = column_of(schema.silo.name);
  if (col_index[nf + 1] < 0)
    throw DataError("schema error: column '" + schema.silo.name + "' not found in '" +
                    path + "'");

  RawSurveyTable table;
  table.n_features = nf;
  std::string line;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_line(line, delimiter);
    if (fields.size() != header_names.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header_names.size()) + " fields, found " +
                      std::to_string(fields.size()));
    std::vector<int> row(nf + 2);
    for (std::size_t c = 0; c < nf + 2; ++c) {
      std::string_view cell = trim(fields[static_cast<std::size_t>(col_index[c])]);
      int value = 0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (ec != std::errc() || p != cell.data() + cell.size()) {
        const std::string col_name = c < nf ? schema.features[c].name
                                    : c == nf ? schema.target.name
                                              : schema.silo.name;
        throw DataError("line " + std::to_string(line_no) + ", column '" + col_name +
                        "': cannot parse '" + std::string(cell) + "' as an integer code");
      }
      row[c] = value;
    }
    table.rows.push_back(std::move(row));
  }
  return filter_rows(std::move(table), schema);
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

EncodedDataset encode(const RawSurveyTable& table, const SurveySchema& schema) {
  schema.validate();
  const std::size_t nf = schema.features.size();
  if (table.n_features != nf)
    throw DataError("encode: table has " + std::to_string(table.n_features) +
                    " features, schema has " + std::to_string(nf));

  EncodedDataset ds;
  int col = 0;
  for (std::size_t f = 0; f < nf; ++f) {
    FeatureSpan span;
    span.name = schema.features[f].name;
    span.begin = col;
    span.width = static_cast<int>(schema.features[f].codes.size());
    span.codes = schema.features[f].codes;
    ds.feature_spans.push_back(std::move(span));
    col += static_cast<int>(schema.features[f].codes.size());
  }
  for (const auto& view : schema.views) {
    std::set<int> derived;
    for (const auto& [_, d] : view.mapping) derived.insert(d);
    FeatureSpan span;
    span.name = view.name;
    span.begin = col;
    span.width = static_cast<int>(derived.size());
    span.codes.assign(derived.begin(), derived.end());
    span.is_view = true;
    span.source_feature = schema.feature_index(view.source);
    ds.feature_spans.push_back(std::move(span));
    col += static_cast<int>(derived.size());
  }

  const long n = static_cast<long>(table.rows.size());
  ds.design_matrix = Eigen::MatrixXd::Zero(n, col);
  ds.labels.resize(n);
  ds.silo_ids.resize(static_cast<std::size_t>(n));

  auto hot_index = [](const std::vector<int>& codes, int code) {
    auto it = std::find(codes.begin(), codes.end(), code);
    return static_cast<int>(it - codes.begin());
  };

  for (long r = 0; r < n; ++r) {
    const auto& row = table.rows[static_cast<std::size_t>(r)];
    for (std::size_t f = 0; f < nf; ++f) {
      const auto& span = ds.feature_spans[f];
      ds.design_matrix(r, span.begin + hot_index(span.codes, row[f])) = 1.0;
    }
    for (std::size_t v = 0; v < schema.views.size(); ++v) {
      const auto& view = schema.views[v];
      const auto& span = ds.feature_spans[nf + v];
      const int src = schema.feature_index(view.source);
      const int derived = view.mapping.at(row[static_cast<std::size_t>(src)]);
      ds.design_matrix(r, span.begin + hot_index(span.codes, derived)) = 1.0;
    }
    const int tcode = row[nf];
    ds.labels(r) = tcode == schema.target.positive_code ? 1.0 : 0.0;
    ds.silo_ids[static_cast<std::size_t>(r)] = row[nf + 1];
  }
  ds.n_pos = static_cast<long>(ds.labels.sum());
  ds.n_neg = n - ds.n_pos;
  return ds;
}

int EncodedDataset::span_index(const std::string& name) const {
  for (std::size_t i = 0; i < feature_spans.size(); ++i)
    if (feature_spans[i].name == name) return static_cast<int>(i);
  return -1;
}

int EncodedDataset::active_code(long row, const FeatureSpan& span) const {
  for (int j = 0; j < span.width; ++j)
    if (design_matrix(row, span.begin + j) > 0.5) return span.codes[static_cast<std::size_t>(j)];
  throw DataError("row " + std::to_string(row) + " has no active cell in span '" +
                  span.name + "'");
}

EncodedDataset EncodedDataset::subset(const std::vector<int>& row_indices) const {
  EncodedDataset out;
  out.feature_spans = feature_spans;
  const long n = static_cast<long>(row_indices.size());
  out.design_matrix.resize(n, design_matrix.cols());
  out.labels.resize(n);
  out.silo_ids.resize(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const int r = row_indices[static_cast<std::size_t>(i)];
    out.design_matrix.row(i) = design_matrix.row(r);
    out.labels(i) = labels(r);
    out.silo_ids[static_cast<std::size_t>(i)] = silo_ids[static_cast<std::size_t>(r)];
  }
  out.n_pos = static_cast<long>(out.labels.sum());
  out.n_neg = n - out.n_pos;
  return out;
}

RawSurveyTable decode_by_argmax(const EncodedDataset& ds, const SurveySchema& schema) {
  RawSurveyTable table;
  table.n_features = schema.features.size();
  const long n = ds.row_count();
  table.rows.reserve(static_cast<std::size_t>(n));
  for (long r = 0; r < n; ++r) {
    std::vector<int> row(table.n_features + 2);
    for (std::size_t f = 0; f < table.n_features; ++f) {
      const auto& span = ds.feature_spans[f];
      int best = 0;
      for (int j = 1; j < span.width; ++j)
        if (ds.design_matrix(r, span.begin + j) > ds.design_matrix(r, span.begin + best))
          best = j;
      row[f] = span.codes[static_cast<std::size_t>(best)];
    }
    row[table.n_features] =
        ds.labels(r) > 0.5 ? schema.target.positive_code : schema.target.negative_code;
    row[table.n_features + 1] = ds.silo_ids[static_cast<std::size_t>(r)];
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

SplitPartition split_and_partition(const EncodedDataset& ds, double ratio,
                                   std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("split ratio must lie strictly between 0 and 1");

  std::map<int, std::vector<int>> by_silo;
  for (long r = 0; r < ds.row_count(); ++r)
    by_silo[ds.silo_ids[static_cast<std::size_t>(r)]].push_back(static_cast<int>(r));

  for (const auto& [silo, rows] : by_silo)
    if (rows.size() < 2)
      throw DataError("silo " + std::to_string(silo) + " has fewer than 2 rows");

  SplitPartition part;
  part.seed = seed;
  std::vector<int> train_rows, test_rows;
  for (auto& [silo, rows] : by_silo) {
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(silo)));
    rng.shuffle(rows);
    const long n = static_cast<long>(rows.size());
    long n_train = std::lround(ratio * static_cast<double>(n));
    n_train = std::clamp(n_train, 1L, n - 1);  // keep both sides non-empty
    auto& tr = part.per_silo_train[silo];
    auto& te = part.per_silo_test[silo];
    for (long i = 0; i < n; ++i) {
      if (i < n_train) {
        tr.push_back(static_cast<int>(train_rows.size()));
        train_rows.push_back(rows[static_cast<std::size_t>(i)]);
      } else {
        te.push_back(static_cast<int>(test_rows.size()));
        test_rows.push_back(rows[static_cast<std::size_t>(i)]);
      }
    }
  }
  part.train = ds.subset(train_rows);
  part.test = ds.subset(test_rows);
  return part;
}

double compute_class_weight(long n_pos, long n_neg, double gamma) {
  if (gamma <= 0.0) throw ConfigError("class weight gamma must be positive");
  if (n_pos <= 0)
    throw DataError("degenerate class: no positive examples, weighting undefined");
  if (n_neg <= 0)
    throw DataError("degenerate class: no negative examples, weighting undefined");
  return (static_cast<double>(n_neg) / static_cast<double>(n_pos)) * gamma;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

std::vector<double> ramp_coefficients(int categories, double strength) {
  std::vector<double> coef(static_cast<std::size_t>(categories));
  if (categories == 1) {
    coef[0] = 0.0;
    return coef;
  }
  for (int i = 0; i < categories; ++i)
    coef[static_cast<std::size_t>(i)] =
        strength * (-1.0 + 2.0 * static_cast<double>(i) / (categories - 1));
  return coef;
}

}  // namespace

SynthesisConfig SynthesisConfig::defaults() {
  SynthesisConfig cfg;
  auto plain = [](const std::string& name, int cats, double strength) {
    SyntheticFeature f;
    f.name = name;
    f.categories = cats;
    f.coef = ramp_coefficients(cats, strength);
    return f;
  };

  // Composite demographic feature: codes 1-6 male by age bin, 7-12 female.
  // Both components carry signal so the derived views are informative.
  SyntheticFeature ga;
  ga.name = "gender_age";
  ga.categories = 12;
  ga.coef.resize(12);
  for (int c = 0; c < 12; ++c) {
    const double gender = c < 6 ? -1.0 : 1.0;
    const double age = -1.0 + 2.0 * static_cast<double>(c % 6) / 5.0;
    ga.coef[static_cast<std::size_t>(c)] = 1.6 * (0.75 * age + 0.25 * gender);
  }
  ViewSpec gender_view;
  gender_view.name = "gender_age_gender";
  ViewSpec age_view;
  age_view.name = "gender_age_age";
  for (int c = 1; c <= 12; ++c) {
    gender_view.mapping[c] = c <= 6 ? 1 : 2;
    age_view.mapping[c] = (c - 1) % 6 + 1;
  }
  ga.views = {gender_view, age_view};

  cfg.features.push_back(std::move(ga));
  cfg.features.push_back(plain("annual_income", 9, 0.6));
  cfg.features.push_back(plain("employment", 9, 1.2));
  cfg.features.push_back(plain("education", 8, 0.7));
  cfg.features.push_back(plain("marital_status", 6, 0.9));
  cfg.features.push_back(plain("living_arrangements", 6, 0.8));
  cfg.features.push_back(plain("financial_children", 6, 1.0));
  cfg.features.push_back(plain("health_insurance", 2, 0.5));
  cfg.features.push_back(plain("stock_investments", 3, 0.05));
  cfg.features.push_back(plain("financial_education", 3, 0.2));
  cfg.features.push_back(plain("spending_vs_income", 3, 0.4));
  return cfg;
}

void SynthesisConfig::validate() const {
  if (silos < 1) throw ConfigError("synthetic: silos must be >= 1");
  if (rows_per_silo < 1) throw ConfigError("synthetic: rows_per_silo must be >= 1");
  if (!(target_positive_rate > 0.0 && target_positive_rate < 1.0))
    throw ConfigError("synthetic: target_positive_rate must lie strictly in (0, 1)");
  if (perturbation_scale < 0.0)
    throw ConfigError("synthetic: perturbation_scale must be >= 0");
  if (excluded_answer_rate < 0.0 || excluded_answer_rate >= 1.0)
    throw ConfigError("synthetic: excluded_answer_rate must lie in [0, 1)");
  if (features.empty()) throw ConfigError("synthetic: no features");
  for (const auto& f : features) {
    if (f.categories < 2)
      throw ConfigError("synthetic: feature '" + f.name + "' needs >= 2 categories");
    if (!f.coef.empty() && f.coef.size() != static_cast<std::size_t>(f.categories))
      throw ConfigError("synthetic: feature '" + f.name +
                        "' coef length does not match categories");
  }
  for (int s : force_negative_silos)
    if (s < 1 || s > silos)
      throw ConfigError("synthetic: force_negative silo " + std::to_string(s) +
                        " out of range");
}

SurveySchema SynthesisConfig::schema() const {
  validate();
  SurveySchema schema;
  for (const auto& f : features) {
    FeatureSpec spec;
    spec.name = f.name;
    for (int c = 1; c <= f.categories; ++c) spec.codes.push_back(c);
    schema.features.push_back(std::move(spec));
    for (const auto& v : f.views) {
      ViewSpec view = v;
      view.source = f.name;
      schema.views.push_back(std::move(view));
    }
  }
  schema.target.name = "dca_contact";
  schema.target.positive_code = 1;
  schema.target.negative_code = 2;
  schema.target.excluded_codes = {3, 4};  // "don't know" / "prefer not to say"
  schema.silo.name = "state";
  schema.silo.silo_count = silos;
  schema.validate();
  return schema;
}

std::vector<std::vector<double>> silo_coefficients(const SynthesisConfig& config,
                                                   std::uint64_t seed, int silo) {
  config.validate();
  std::vector<std::vector<double>> coef;
  coef.reserve(config.features.size());
  Rng rng(derive_seed(seed, "silo_coef", static_cast<std::uint64_t>(silo)));
  for (const auto& f : config.features) {
    std::vector<double> base =
        f.coef.empty() ? ramp_coefficients(f.categories, 1.0) : f.coef;
    for (auto& c : base) c += config.perturbation_scale * rng.normal();
    coef.push_back(std::move(base));
  }
  return coef;
}

RawSurveyTable generate_synthetic(const SynthesisConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t nf = config.features.size();

  RawSurveyTable table;
  table.n_features = nf;

  struct PendingRow {
    std::size_t index;
    double logit;
    double label_draw;
    bool forced_negative;
  };
  std::vector<PendingRow> pending;

  for (int silo = 1; silo <= config.silos; ++silo) {
    const auto coef = silo_coefficients(config, seed, silo);
    const bool forced =
        std::find(config.force_negative_silos.begin(), config.force_negative_silos.end(),
                  silo) != config.force_negative_silos.end();
    Rng rng(derive_seed(seed, "synth_rows", static_cast<std::uint64_t>(silo)));
    for (int r = 0; r < config.rows_per_silo; ++r) {
      std::vector<int> row(nf + 2);
      double logit = 0.0;
      for (std::size_t f = 0; f < nf; ++f) {
        const int cat = static_cast<int>(
            rng.below(static_cast<std::uint64_t>(config.features[f].categories)));
        row[f] = cat + 1;
        logit += coef[f][static_cast<std::size_t>(cat)];
      }
      const double excluded_draw = rng.uniform();
      const double label_draw = rng.uniform();
      row[nf + 1] = silo;
      if (excluded_draw < config.excluded_answer_rate) {
        // Non-binary answer to the target question; removed by filtering.
        row[nf] = 3 + static_cast<int>(rng.below(2));
        table.rows.push_back(std::move(row));
        continue;
      }
      pending.push_back(PendingRow{table.rows.size(), logit, label_draw, forced});
      row[nf] = 2;  // placeholder, resolved after bias calibration
      table.rows.push_back(std::move(row));
    }
  }

  // Calibrate the global intercept so kept, unforced rows hit the target
  // positive rate in expectation.
  std::vector<double> logits;
  for (const auto& p : pending)
    if (!p.forced_negative) logits.push_back(p.logit);
  if (logits.empty()) throw ConfigError("synthetic: no rows eligible for positive labels");

  auto mean_rate = [&](double bias) {
    double acc = 0.0;
    for (double l : logits) acc += 1.0 / (1.0 + std::exp(-(l + bias)));
    return acc / static_cast<double>(logits.size());
  };
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_rate(mid) < config.target_positive_rate)
      lo = mid;
    else
      hi = mid;
  }
  const double bias = 0.5 * (lo + hi);

  for (const auto& p : pending) {
    const double prob =
        p.forced_negative ? 0.0 : 1.0 / (1.0 + std::exp(-(p.logit + bias)));
    table.rows[p.index][nf] = p.label_draw < prob ? 1 : 2;
  }
  return table;
}

void write_survey_csv(const RawSurveyTable& table, const SurveySchema& schema,
                      const std::string& path, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (std::size_t f = 0; f < schema.features.size(); ++f)
    out << schema.features[f].name << delimiter;
  out << schema.target.name << delimiter << schema.silo.name << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << delimiter;
      out << row[c];
    }
    out << "\n";
  }
  if (!out) throw DataError("failed while writing '" + path + "'");
}

}  // namespace fedsilo
