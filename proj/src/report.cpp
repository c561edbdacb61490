#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedsilo/cli.hpp"
#include "io_util.hpp"

namespace fedsilo {

namespace fs = std::filesystem;
using nlohmann::json;
using ioutil::format_double;

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::istringstream in(ioutil::read_text_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find(',', start);
      if (pos == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::optional<double> parse_cell(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return std::stod(cell);
}

std::string show(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string("n/a");
}

struct SiloRow {
  int silo = 0;
  std::optional<double> precision, recall, f1, auc;
};

std::vector<SiloRow> read_silos(const std::string& path) {
  std::vector<SiloRow> out;
  const auto rows = read_csv(path);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    SiloRow row;
    row.silo = std::stoi(rows[r][0]);
    row.precision = parse_cell(rows[r][1]);
    row.recall = parse_cell(rows[r][2]);
    row.f1 = parse_cell(rows[r][3]);
    row.auc = parse_cell(rows[r][4]);
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dependency-free SVG emitters
// ---------------------------------------------------------------------------

constexpr int kPlotW = 560;
constexpr int kPlotH = 420;
constexpr int kMargin = 56;

double sx(double v) { return kMargin + v * (kPlotW - 2 * kMargin); }
double sy(double v) { return kPlotH - kMargin - v * (kPlotH - 2 * kMargin); }

std::string svg_scatter(const std::vector<std::pair<double, double>>& points,
                        const std::string& x_label, const std::string& y_label) {
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kPlotW << "' height='"
      << kPlotH << "' viewBox='0 0 " << kPlotW << ' ' << kPlotH << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    svg << "<line x1='" << sx(v) << "' y1='" << sy(0) << "' x2='" << sx(v) << "' y2='"
        << sy(1) << "' stroke='#dddddd'/>\n";
    svg << "<line x1='" << sx(0) << "' y1='" << sy(v) << "' x2='" << sx(1) << "' y2='"
        << sy(v) << "' stroke='#dddddd'/>\n";
    svg << "<text x='" << sx(v) << "' y='" << sy(0) + 18
        << "' font-size='11' text-anchor='middle'>" << format_double(v) << "</text>\n";
    svg << "<text x='" << sx(0) - 8 << "' y='" << sy(v) + 4
        << "' font-size='11' text-anchor='end'>" << format_double(v) << "</text>\n";
  }
  svg << "<line x1='" << sx(0) << "' y1='" << sy(0) << "' x2='" << sx(1) << "' y2='"
      << sy(0) << "' stroke='black'/>\n";
  svg << "<line x1='" << sx(0) << "' y1='" << sy(0) << "' x2='" << sx(0) << "' y2='"
      << sy(1) << "' stroke='black'/>\n";
  svg << "<text x='" << kPlotW / 2 << "' y='" << kPlotH - 10
      << "' font-size='13' text-anchor='middle'>" << x_label << "</text>\n";
  svg << "<text x='16' y='" << kPlotH / 2
      << "' font-size='13' text-anchor='middle' transform='rotate(-90 16 "
      << kPlotH / 2 << ")'>" << y_label << "</text>\n";
  for (const auto& [x, y] : points)
    svg << "<circle cx='" << sx(x) << "' cy='" << sy(y)
        << "' r='4' fill='#33679e' fill-opacity='0.7'/>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::string svg_bars(const std::vector<std::pair<std::string, double>>& bars,
                     const std::string& value_label) {
  const int row_h = 26;
  const int label_w = 190;
  const int width = 560;
  const int height = 48 + row_h * static_cast<int>(bars.size());
  double max_v = 1e-300;
  for (const auto& [_, v] : bars) max_v = std::max(max_v, v);

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
      << height << "' viewBox='0 0 " << width << ' ' << height << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << label_w << "' y='16' font-size='13'>" << value_label
      << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double y = 28 + row_h * static_cast<double>(i);
    const double w = (width - label_w - 24) * bars[i].second / max_v;
    svg << "<text x='" << label_w - 8 << "' y='" << y + 15
        << "' font-size='12' text-anchor='end'>" << bars[i].first << "</text>\n";
    svg << "<rect x='" << label_w << "' y='" << y << "' width='" << std::max(w, 0.5)
        << "' height='" << row_h - 8 << "' fill='#33679e'/>\n";
    svg << "<text x='" << label_w + w + 6 << "' y='" << y + 15 << "' font-size='11'>"
        << format_double(bars[i].second) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

void cmd_report(const std::string& run_dir, bool svg) {
  if (!fs::exists(run_dir + "/manifest.json"))
    throw DataError("'" + run_dir + "' is not a run directory (no manifest.json)");
  RunManifest manifest = RunManifest::load(run_dir);

  std::ostringstream report;
  report << "run report\n==========\n";
  report << "directory:   " << run_dir << '\n';
  report << "config hash: " << manifest.config_hash << '\n';
  report << "seed:        " << manifest.seed << "\n\n";

  // Final pooled metrics: prefer the federated round history, fall back to
  // the centralized epoch history.
  std::optional<double> gp, gr, gf, ga;
  if (fs::exists(run_dir + "/rounds_federated.csv")) {
    const auto rows = read_csv(run_dir + "/rounds_federated.csv");
    for (std::size_t r = rows.size(); r-- > 1;) {
      if (rows[r][1] == "GLOBAL") {
        gp = parse_cell(rows[r][2]);
        gr = parse_cell(rows[r][3]);
        gf = parse_cell(rows[r][4]);
        ga = parse_cell(rows[r][5]);
        report << "final federated metrics (round " << rows[r][0] << ")\n";
        break;
      }
    }
  } else if (fs::exists(run_dir + "/epochs_centralized.csv")) {
    const auto rows = read_csv(run_dir + "/epochs_centralized.csv");
    if (rows.size() > 1) {
      const auto& last = rows.back();
      gp = parse_cell(last[1]);
      gr = parse_cell(last[2]);
      gf = parse_cell(last[3]);
      ga = parse_cell(last[4]);
      report << "final centralized metrics (epoch " << last[0] << ")\n";
    }
  }
  if (gp || gr || gf || ga) {
    report << "  precision: " << show(gp) << "\n  recall:    " << show(gr)
           << "\n  f1:        " << show(gf) << "\n  auc:       " << show(ga) << "\n\n";
  }

  std::string silo_csv;
  for (const char* name : {"/silos_federated.csv", "/silos_centralized.csv",
                           "/silos_local.csv"}) {
    if (fs::exists(run_dir + name)) {
      silo_csv = run_dir + name;
      break;
    }
  }

  std::vector<SiloRow> silos;
  if (!silo_csv.empty()) {
    silos = read_silos(silo_csv);
    const SiloRow* best = nullptr;
    const SiloRow* worst = nullptr;
    std::vector<int> undefined;
    for (const auto& s : silos) {
      if (!s.f1) {
        undefined.push_back(s.silo);
        continue;
      }
      if (!best || *s.f1 > *best->f1) best = &s;
      if (!worst || *s.f1 < *worst->f1) worst = &s;
    }
    report << "per-silo spread (" << silos.size() << " silos, "
           << silos.size() - undefined.size() << " with defined f1)\n";
    if (best)
      report << "  best f1:  silo " << best->silo << " (" << show(best->f1) << ")\n";
    if (worst)
      report << "  worst f1: silo " << worst->silo << " (" << show(worst->f1) << ")\n";
    if (!undefined.empty()) {
      report << "  f1 n/a:  ";
      for (std::size_t i = 0; i < undefined.size(); ++i)
        report << (i ? ", " : " ") << "silo " << undefined[i];
      report << '\n';
    }
    report << '\n';
  }

  if (fs::exists(run_dir + "/ledger_federated.json")) {
    const json ledger = json::parse(ioutil::read_text_file(run_dir + "/ledger_federated.json"));
    report << "communication (" << ledger["strategy"].get<std::string>() << ")\n";
    report << "  model bytes:  " << ledger["model_bytes"].get<std::uint64_t>() << '\n';
    report << "  rounds:       " << ledger["rounds"].get<std::uint64_t>() << '\n';
    report << "  total up:     " << ledger["total_up_bytes"].get<std::uint64_t>()
           << " bytes\n";
    report << "  total down:   " << ledger["total_down_bytes"].get<std::uint64_t>()
           << " bytes\n";
    report << "  total:        " << ledger["total_bytes"].get<std::uint64_t>()
           << " bytes (" << format_double(ledger["total_gb"].get<double>()) << " GB)\n\n";
  }

  if (fs::exists(run_dir + "/local_baselines.json")) {
    const json local = json::parse(ioutil::read_text_file(run_dir + "/local_baselines.json"));
    auto jopt = [](const json& v) -> std::string {
      return v.is_null() ? "n/a" : format_double(v.get<double>());
    };
    report << "local baselines (macro over defined silos)\n";
    report << "  f1:  " << jopt(local["macro"]["f1"]) << '\n';
    report << "  auc: " << jopt(local["macro"]["auc"]) << '\n';
    report << "  excluded silos: " << local["excluded_silos"].size() << '\n';
    report << "  degenerate-weight silos: " << local["degenerate_weight_silos"].size()
           << "\n\n";
  }

  std::vector<std::pair<std::string, double>> importances;
  if (fs::exists(run_dir + "/attribution_summary.csv")) {
    const auto rows = read_csv(run_dir + "/attribution_summary.csv");
    for (std::size_t r = 1; r < rows.size(); ++r)
      importances.emplace_back(rows[r][0], std::stod(rows[r][1]));
    std::stable_sort(importances.begin(), importances.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    report << "top features by mean |attribution|\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, importances.size()); ++i)
      report << "  " << i + 1 << ". " << importances[i].first << "  "
             << format_double(importances[i].second) << '\n';
    report << '\n';
  }

  ioutil::write_text_file(run_dir + "/report.txt", report.str());
  manifest.add_file("report.txt");

  if (svg) {
    if (!silos.empty()) {
      std::vector<std::pair<double, double>> pr, fa;
      for (const auto& s : silos) {
        if (s.precision && s.recall) pr.emplace_back(*s.precision, *s.recall);
        if (s.f1 && s.auc) fa.emplace_back(*s.f1, *s.auc);
      }
      ioutil::write_text_file(run_dir + "/precision_recall.svg",
                              svg_scatter(pr, "precision", "recall"));
      manifest.add_file("precision_recall.svg");
      ioutil::write_text_file(run_dir + "/f1_auc.svg", svg_scatter(fa, "f1", "auc"));
      manifest.add_file("f1_auc.svg");
    }
    if (!importances.empty()) {
      const std::size_t top = std::min<std::size_t>(10, importances.size());
      std::vector<std::pair<std::string, double>> bars(importances.begin(),
                                                       importances.begin() + top);
      ioutil::write_text_file(run_dir + "/feature_importance.svg",
                              svg_bars(bars, "mean |attribution|"));
      manifest.add_file("feature_importance.svg");
    }
  }
  manifest.save(run_dir);
}

}  // namespace fedsilo
