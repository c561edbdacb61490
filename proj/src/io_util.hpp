#pragma once

#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fedsilo/errors.hpp"

namespace fedsilo::ioutil {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << content;
  if (!out) throw DataError("failed while writing '" + path + "'");
}

inline void check_keys(const nlohmann::json& obj,
                       std::initializer_list<const char*> allowed,
                       const std::string& context) {
  if (!obj.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (key == k) ok = true;
    if (!ok) throw ConfigError(context + ": unknown key '" + key + "'");
  }
}

// Stable decimal rendering for CSV cells; %.10g keeps files readable and is
// deterministic for a fixed build.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string opt_cell(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

}  // namespace fedsilo::ioutil
