#include "fedsilo/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "fedsilo/rng.hpp"
#include "io_util.hpp"

namespace fedsilo {

using nlohmann::json;
using ioutil::check_keys;

namespace {

double number(const json& v, const std::string& context) {
  if (!v.is_number()) throw ConfigError(context + ": expected a number");
  return v.get<double>();
}

int integer(const json& v, const std::string& context) {
  if (!v.is_number_integer()) throw ConfigError(context + ": expected an integer");
  return v.get<int>();
}

bool boolean(const json& v, const std::string& context) {
  if (!v.is_boolean()) throw ConfigError(context + ": expected a boolean");
  return v.get<bool>();
}

std::string text(const json& v, const std::string& context) {
  if (!v.is_string()) throw ConfigError(context + ": expected a string");
  return v.get<std::string>();
}

std::vector<double> ramp(int categories, double strength) {
  std::vector<double> coef(static_cast<std::size_t>(categories), 0.0);
  if (categories < 2) return coef;
  for (int i = 0; i < categories; ++i)
    coef[static_cast<std::size_t>(i)] =
        strength * (-1.0 + 2.0 * static_cast<double>(i) / (categories - 1));
  return coef;
}

ViewSpec parse_view(const json& v) {
  check_keys(v, {"name", "mapping"}, "synthetic view");
  ViewSpec view;
  view.name = text(v.at("name"), "view name");
  if (!v.contains("mapping") || !v["mapping"].is_object())
    throw ConfigError("synthetic view '" + view.name + "': mapping object required");
  for (const auto& [key, val] : v["mapping"].items())
    view.mapping[std::stoi(key)] = integer(val, "view mapping value");
  return view;
}

SyntheticFeature parse_feature(const json& f) {
  check_keys(f, {"name", "categories", "strength", "coef", "views"}, "synthetic feature");
  SyntheticFeature feat;
  feat.name = text(f.at("name"), "feature name");
  feat.categories = integer(f.at("categories"), "feature '" + feat.name + "' categories");
  if (f.contains("coef") && f.contains("strength"))
    throw ConfigError("feature '" + feat.name + "': give either coef or strength");
  if (f.contains("coef")) {
    for (const auto& c : f["coef"])
      feat.coef.push_back(number(c, "feature '" + feat.name + "' coef"));
  } else if (f.contains("strength")) {
    feat.coef = ramp(feat.categories, number(f["strength"], "feature strength"));
  }
  if (f.contains("views"))
    for (const auto& v : f["views"]) feat.views.push_back(parse_view(v));
  return feat;
}

void parse_synthetic(const json& s, SynthesisConfig& synth) {
  check_keys(s,
             {"silos", "rows_per_silo", "target_positive_rate", "perturbation_scale",
              "excluded_answer_rate", "force_negative_silos", "features"},
             "data.synthetic");
  if (s.contains("silos")) synth.silos = integer(s["silos"], "synthetic.silos");
  if (s.contains("rows_per_silo"))
    synth.rows_per_silo = integer(s["rows_per_silo"], "synthetic.rows_per_silo");
  if (s.contains("target_positive_rate"))
    synth.target_positive_rate =
        number(s["target_positive_rate"], "synthetic.target_positive_rate");
  if (s.contains("perturbation_scale"))
    synth.perturbation_scale =
        number(s["perturbation_scale"], "synthetic.perturbation_scale");
  if (s.contains("excluded_answer_rate"))
    synth.excluded_answer_rate =
        number(s["excluded_answer_rate"], "synthetic.excluded_answer_rate");
  if (s.contains("force_negative_silos")) {
    synth.force_negative_silos.clear();
    for (const auto& v : s["force_negative_silos"])
      synth.force_negative_silos.push_back(integer(v, "force_negative_silos entry"));
  }
  if (s.contains("features")) {
    synth.features.clear();
    for (const auto& f : s["features"]) synth.features.push_back(parse_feature(f));
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (source == Source::kCsv) {
    if (csv_path.empty() || schema_path.empty())
      throw ConfigError("config: csv source needs both csv_path and schema_path");
  } else {
    synthetic.validate();
  }
  if (output_dir.empty()) throw ConfigError("config: output_dir is empty");
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw ConfigError("config: split.train_ratio must lie strictly in (0, 1)");
  fed.validate();

  static const std::set<std::string> kMethods = {"shapley_exact", "shapley_sampled",
                                                 "owen_exact", "owen_sampled"};
  if (!kMethods.count(explain.method))
    throw ConfigError("config: unknown attribution method '" + explain.method + "'");
  if (explain.instances < 1)
    throw ConfigError("config: explain.instances must be >= 1");
  if (explain.background_size < 1)
    throw ConfigError("config: explain.background_size must be >= 1");
  if (explain.n_permutations < 1)
    throw ConfigError("config: explain.n_permutations must be >= 1");
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(doc, {"seed", "output_dir", "data", "split", "model", "federation",
                   "metrics", "explain"},
             "config");

  ExperimentConfig cfg;
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer() || doc["seed"].get<long long>() < 0)
      throw ConfigError("config: seed must be a non-negative integer");
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("output_dir")) cfg.output_dir = text(doc["output_dir"], "output_dir");

  if (doc.contains("data")) {
    const auto& d = doc["data"];
    check_keys(d, {"source", "csv_path", "schema_path", "delimiter", "synthetic"},
               "data");
    if (d.contains("source")) {
      const std::string s = text(d["source"], "data.source");
      if (s == "synthetic")
        cfg.source = Source::kSynthetic;
      else if (s == "csv")
        cfg.source = Source::kCsv;
      else
        throw ConfigError("data.source must be 'synthetic' or 'csv', got '" + s + "'");
    }
    if (d.contains("csv_path")) cfg.csv_path = text(d["csv_path"], "data.csv_path");
    if (d.contains("schema_path"))
      cfg.schema_path = text(d["schema_path"], "data.schema_path");
    if (d.contains("delimiter")) {
      const std::string s = text(d["delimiter"], "data.delimiter");
      if (s.size() != 1) throw ConfigError("data.delimiter must be a single character");
      cfg.delimiter = s[0];
    }
    if (d.contains("synthetic")) parse_synthetic(d["synthetic"], cfg.synthetic);
  }

  if (doc.contains("split")) {
    check_keys(doc["split"], {"train_ratio"}, "split");
    if (doc["split"].contains("train_ratio"))
      cfg.train_ratio = number(doc["split"]["train_ratio"], "split.train_ratio");
  }

  if (doc.contains("model")) {
    const auto& m = doc["model"];
    check_keys(m,
               {"hidden_width", "n_blocks", "gate_bias_init", "learning_rate", "beta1",
                "beta2", "epsilon", "early_stop_patience"},
               "model");
    auto& net = cfg.fed.net;
    if (m.contains("hidden_width"))
      net.hidden_width = integer(m["hidden_width"], "model.hidden_width");
    if (m.contains("n_blocks")) net.n_blocks = integer(m["n_blocks"], "model.n_blocks");
    if (m.contains("gate_bias_init"))
      net.gate_bias_init = number(m["gate_bias_init"], "model.gate_bias_init");
    if (m.contains("learning_rate"))
      net.learning_rate = number(m["learning_rate"], "model.learning_rate");
    if (m.contains("beta1")) net.beta1 = number(m["beta1"], "model.beta1");
    if (m.contains("beta2")) net.beta2 = number(m["beta2"], "model.beta2");
    if (m.contains("epsilon")) net.epsilon = number(m["epsilon"], "model.epsilon");
    if (m.contains("early_stop_patience"))
      net.early_stop_patience =
          integer(m["early_stop_patience"], "model.early_stop_patience");
  }

  if (doc.contains("federation")) {
    const auto& f = doc["federation"];
    check_keys(f,
               {"rounds", "clients_per_round", "total_clients", "cost_strategy", "gamma",
                "gamma_centralized", "use_class_weight", "local_epochs", "batch_size",
                "local_baseline_epochs"},
               "federation");
    if (f.contains("rounds")) cfg.fed.n_rounds = integer(f["rounds"], "federation.rounds");
    if (f.contains("clients_per_round"))
      cfg.fed.clients_per_round =
          integer(f["clients_per_round"], "federation.clients_per_round");
    if (f.contains("total_clients")) {
      cfg.fed.total_clients = integer(f["total_clients"], "federation.total_clients");
      cfg.total_clients_explicit = true;
    }
    if (f.contains("cost_strategy"))
      cfg.fed.cost_strategy =
          cost_strategy_from_string(text(f["cost_strategy"], "federation.cost_strategy"));
    if (f.contains("gamma")) cfg.fed.gamma = number(f["gamma"], "federation.gamma");
    if (f.contains("gamma_centralized"))
      cfg.fed.gamma_centralized =
          number(f["gamma_centralized"], "federation.gamma_centralized");
    if (f.contains("use_class_weight"))
      cfg.fed.use_class_weight = boolean(f["use_class_weight"], "use_class_weight");
    if (f.contains("local_epochs"))
      cfg.fed.local_epochs = integer(f["local_epochs"], "federation.local_epochs");
    if (f.contains("batch_size"))
      cfg.fed.batch_size = integer(f["batch_size"], "federation.batch_size");
    if (f.contains("local_baseline_epochs"))
      cfg.fed.local_baseline_epochs =
          integer(f["local_baseline_epochs"], "federation.local_baseline_epochs");
  }

  if (doc.contains("metrics")) {
    check_keys(doc["metrics"], {"threshold"}, "metrics");
    if (doc["metrics"].contains("threshold"))
      cfg.fed.metric_threshold = number(doc["metrics"]["threshold"], "metrics.threshold");
  }

  if (doc.contains("explain")) {
    const auto& e = doc["explain"];
    check_keys(e,
               {"method", "instances", "background_size", "n_permutations",
                "use_derived_views", "bins"},
               "explain");
    if (e.contains("method")) cfg.explain.method = text(e["method"], "explain.method");
    if (e.contains("instances"))
      cfg.explain.instances = integer(e["instances"], "explain.instances");
    if (e.contains("background_size"))
      cfg.explain.background_size =
          integer(e["background_size"], "explain.background_size");
    if (e.contains("n_permutations"))
      cfg.explain.n_permutations =
          integer(e["n_permutations"], "explain.n_permutations");
    if (e.contains("use_derived_views"))
      cfg.explain.use_derived_views =
          boolean(e["use_derived_views"], "explain.use_derived_views");
    if (e.contains("bins")) {
      for (const auto& b : e["bins"]) {
        check_keys(b, {"player", "code"}, "explain bin");
        BinSelector bin;
        bin.player = text(b.at("player"), "bin player");
        bin.code = integer(b.at("code"), "bin code");
        cfg.explain.bins.push_back(std::move(bin));
      }
    }
  }

  cfg.fed.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string ExperimentConfig::canonical_json() const {
  json doc;
  doc["seed"] = seed;
  doc["output_dir"] = output_dir;
  doc["data"]["source"] = source == Source::kSynthetic ? "synthetic" : "csv";
  if (source == Source::kCsv) {
    doc["data"]["csv_path"] = csv_path;
    doc["data"]["schema_path"] = schema_path;
    doc["data"]["delimiter"] = std::string(1, delimiter);
  } else {
    auto& s = doc["data"]["synthetic"];
    s["silos"] = synthetic.silos;
    s["rows_per_silo"] = synthetic.rows_per_silo;
    s["target_positive_rate"] = synthetic.target_positive_rate;
    s["perturbation_scale"] = synthetic.perturbation_scale;
    s["excluded_answer_rate"] = synthetic.excluded_answer_rate;
    s["force_negative_silos"] = synthetic.force_negative_silos;
    s["features"] = json::array();
    for (const auto& f : synthetic.features) {
      json jf{{"name", f.name}, {"categories", f.categories}, {"coef", f.coef}};
      if (!f.views.empty()) {
        jf["views"] = json::array();
        for (const auto& v : f.views) {
          json mapping = json::object();
          for (const auto& [code, derived] : v.mapping)
            mapping[std::to_string(code)] = derived;
          jf["views"].push_back({{"name", v.name}, {"mapping", mapping}});
        }
      }
      s["features"].push_back(std::move(jf));
    }
  }
  doc["split"]["train_ratio"] = train_ratio;
  auto& m = doc["model"];
  m["hidden_width"] = fed.net.hidden_width;
  m["n_blocks"] = fed.net.n_blocks;
  m["gate_bias_init"] = fed.net.gate_bias_init;
  m["learning_rate"] = fed.net.learning_rate;
  m["beta1"] = fed.net.beta1;
  m["beta2"] = fed.net.beta2;
  m["epsilon"] = fed.net.epsilon;
  m["early_stop_patience"] = fed.net.early_stop_patience;
  auto& f = doc["federation"];
  f["rounds"] = fed.n_rounds;
  f["clients_per_round"] = fed.clients_per_round;
  if (total_clients_explicit) f["total_clients"] = fed.total_clients;
  f["cost_strategy"] = to_string(fed.cost_strategy);
  f["gamma"] = fed.gamma;
  f["gamma_centralized"] = fed.gamma_centralized;
  f["use_class_weight"] = fed.use_class_weight;
  f["local_epochs"] = fed.local_epochs;
  f["batch_size"] = fed.batch_size;
  f["local_baseline_epochs"] = fed.local_baseline_epochs;
  doc["metrics"]["threshold"] = fed.metric_threshold;
  auto& e = doc["explain"];
  e["method"] = explain.method;
  e["instances"] = explain.instances;
  e["background_size"] = explain.background_size;
  e["n_permutations"] = explain.n_permutations;
  e["use_derived_views"] = explain.use_derived_views;
  e["bins"] = json::array();
  for (const auto& b : explain.bins)
    e["bins"].push_back({{"player", b.player}, {"code", b.code}});
  return doc.dump(2);
}

std::string ExperimentConfig::config_hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_json())));
  return buf;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void RunManifest::add_file(const std::string& relative_path) {
  if (std::find(files.begin(), files.end(), relative_path) == files.end())
    files.push_back(relative_path);
  std::sort(files.begin(), files.end());
}

RunManifest RunManifest::load(const std::string& run_dir) {
  RunManifest manifest;
  const std::string path = run_dir + "/manifest.json";
  if (!std::filesystem::exists(path)) return manifest;
  json doc;
  try {
    doc = json::parse(ioutil::read_text_file(path));
  } catch (const json::exception& e) {
    throw DataError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  if (doc.contains("config_hash")) manifest.config_hash = doc["config_hash"];
  if (doc.contains("seed")) manifest.seed = doc["seed"].get<std::uint64_t>();
  if (doc.contains("tool_version")) manifest.tool_version = doc["tool_version"];
  if (doc.contains("phase_seconds"))
    for (const auto& [k, v] : doc["phase_seconds"].items())
      manifest.phase_seconds[k] = v.get<double>();
  if (doc.contains("files"))
    for (const auto& fpath : doc["files"]) manifest.files.push_back(fpath.get<std::string>());
  return manifest;
}

void RunManifest::save(const std::string& run_dir) const {
  for (const auto& fpath : files)
    if (!std::filesystem::exists(run_dir + "/" + fpath))
      throw DataError("manifest lists missing file '" + fpath + "'");
  json doc;
  doc["config_hash"] = config_hash;
  doc["seed"] = seed;
  doc["tool_version"] = tool_version;
  doc["phase_seconds"] = json::object();
  for (const auto& [k, v] : phase_seconds) doc["phase_seconds"][k] = v;
  doc["files"] = files;
  ioutil::write_text_file(run_dir + "/manifest.json", doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& config) {
  config.validate();
  PreparedData out;
  if (config.source == ExperimentConfig::Source::kSynthetic) {
    out.schema = config.synthetic.schema();
    out.table = filter_rows(
        generate_synthetic(config.synthetic, derive_seed(config.seed, "data")),
        out.schema);
  } else {
    out.schema = SurveySchema::from_json_file(config.schema_path);
    out.table = load_and_filter(config.csv_path, out.schema, config.delimiter);
  }
  if (out.table.rows.empty()) throw DataError("no rows survive filtering");
  out.dataset = encode(out.table, out.schema);
  out.split = split_and_partition(out.dataset, config.train_ratio,
                                  derive_seed(config.seed, "split"));
  out.fed = config.fed;
  out.fed.seed = config.seed;
  if (!config.total_clients_explicit)
    out.fed.total_clients = out.schema.silo.silo_count;
  return out;
}

}  // namespace fedsilo
