#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace pnsmc {

/// Validation of emitted files against the schema files shipped in
/// schemas/. JSON outputs use the JSON-Schema keywords type, properties,
/// required, additionalProperties, items, enum, minimum and maximum. CSV
/// outputs use a small descriptor: {"format": "csv", "header_pattern": regex,
/// "string_columns": [...]} where every other cell must parse as a number
/// (inf/nan allowed).
namespace schema {

inline std::filesystem::path default_dir() {
#ifdef PNSMC_SCHEMA_DIR
  return PNSMC_SCHEMA_DIR;
#else
  return "schemas";
#endif
}

inline nlohmann::json load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("schema file not found: " + file.string());
  return nlohmann::json::parse(in);
}

namespace detail {

inline bool has_type(const nlohmann::ordered_json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (t == "number") return v.is_number();
  return false;
}

inline void validate(const nlohmann::ordered_json& v, const nlohmann::json& s, const std::string& path,
                     std::vector<std::string>& errors) {
  if (s.contains("type")) {
    bool ok = false;
    if (s["type"].is_array()) {
      for (const auto& t : s["type"]) ok = ok || has_type(v, t.get<std::string>());
    } else {
      ok = has_type(v, s["type"].get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": expected type " + s["type"].dump());
      return;
    }
  }
  if (s.contains("enum")) {
    bool ok = false;
    for (const auto& e : s["enum"]) ok = ok || nlohmann::json(v) == e;
    if (!ok) errors.push_back(path + ": value not in enum " + s["enum"].dump());
  }
  if (v.is_number()) {
    if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>())
      errors.push_back(path + ": below minimum " + s["minimum"].dump());
    if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>())
      errors.push_back(path + ": above maximum " + s["maximum"].dump());
  }
  if (v.is_object()) {
    if (s.contains("required"))
      for (const auto& r : s["required"])
        if (!v.contains(r.get<std::string>())) errors.push_back(path + ": missing required key '" + r.get<std::string>() + "'");
    const bool closed = s.contains("additionalProperties") && s["additionalProperties"].is_boolean() &&
                        !s["additionalProperties"].get<bool>();
    for (const auto& [k, child] : v.items()) {
      if (s.contains("properties") && s["properties"].contains(k))
        validate(child, s["properties"][k], path + "." + k, errors);
      else if (closed)
        errors.push_back(path + ": unexpected key '" + k + "'");
    }
  }
  if (v.is_array() && s.contains("items"))
    for (std::size_t i = 0; i < v.size(); ++i) validate(v[i], s["items"], path + "[" + std::to_string(i) + "]", errors);
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Violations of `doc` against `schema`; empty when valid.
inline std::vector<std::string> check_json(const nlohmann::ordered_json& doc, const nlohmann::json& schema) {
  std::vector<std::string> errors;
  detail::validate(doc, schema, "$", errors);
  return errors;
}

/// Violations of a CSV file against a CSV descriptor.
inline std::vector<std::string> check_csv(const std::filesystem::path& file, const nlohmann::json& schema) {
  std::vector<std::string> errors;
  std::ifstream in(file, std::ios::binary);
  if (!in) return {file.string() + ": cannot open"};
  std::string header;
  if (!std::getline(in, header)) return {file.string() + ": missing header"};
  const std::regex pattern(schema.at("header_pattern").get<std::string>());
  if (!std::regex_match(header, pattern)) errors.push_back(file.string() + ": header '" + header + "' does not match schema");
  const auto names = detail::split(header);
  std::vector<bool> is_string(names.size(), false);
  if (schema.contains("string_columns"))
    for (const auto& c : schema["string_columns"])
      for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == c.get<std::string>()) is_string[i] = true;
  std::string line;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    const auto cells = detail::split(line);
    if (cells.size() != names.size()) {
      errors.push_back(file.string() + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                       " fields, header has " + std::to_string(names.size()));
      if (errors.size() > 10) break;
      continue;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (is_string[i]) continue;
      char* end = nullptr;
      std::strtod(cells[i].c_str(), &end);
      if (cells[i].empty() || *end != '\0') {
        errors.push_back(file.string() + ": row " + std::to_string(row) + ", column '" + names[i] + "' is not numeric");
        break;
      }
    }
    if (errors.size() > 10) break;
  }
  return errors;
}

/// Checks `file` against the schema file `schema_name` in `dir`; JSON or
/// CSV according to the descriptor's "format".
inline std::vector<std::string> check_file(const std::filesystem::path& file, const std::string& schema_name,
                                           const std::filesystem::path& dir = default_dir()) {
  const nlohmann::json s = load(dir / schema_name);
  if (s.contains("format") && s["format"] == "csv") return check_csv(file, s);
  std::ifstream in(file);
  if (!in) return {file.string() + ": cannot open"};
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    return {file.string() + ": " + e.what()};
  }
  auto errors = check_json(doc, s);
  for (auto& e : errors) e = file.string() + ": " + e;
  return errors;
}

}  // namespace schema
}  // namespace pnsmc
