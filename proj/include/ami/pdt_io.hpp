#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ami/error.hpp"
#include "ami/pdt.hpp"

namespace ami {

inline constexpr int kPdtFormatVersion = 1;

inline nlohmann::json pdt_to_json(const Pdt& pdt) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < pdt.node_count(); ++i) {
    const auto row = pdt.node_values(i);
    nodes.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {
      {"version", kPdtFormatVersion},
      {"n_actions", pdt.n_actions()},
      {"depth", pdt.depth()},
      {"temperature", pdt.temperature()},
      {"node_kind", pdt.kind() == NodeKind::logit ? "logit" : "literal"},
      {"nodes", std::move(nodes)},
  };
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* name) {
  auto it = obj.find(name);
  if (it == obj.end()) fail(ErrorKind::parse_error, std::string("missing field '") + name + "'");
  return *it;
}

inline int int_field(const nlohmann::json& obj, const char* name) {
  const auto& v = field(obj, name);
  if (!v.is_number_integer()) fail(ErrorKind::parse_error, std::string("field '") + name + "' is not an integer");
  return v.get<int>();
}

}  // namespace detail

inline Pdt pdt_from_json(const nlohmann::json& doc) {
  using detail::field;
  using detail::int_field;
  if (!doc.is_object()) fail(ErrorKind::parse_error, "model document is not an object");
  const int version = int_field(doc, "version");
  if (version != kPdtFormatVersion)
    fail(ErrorKind::unsupported_version, "model format version " + std::to_string(version));
  const int n = int_field(doc, "n_actions");
  const int k = int_field(doc, "depth");
  if (n < 2) fail(ErrorKind::parse_error, "field 'n_actions' must be at least 2");
  if (k < 1) fail(ErrorKind::parse_error, "field 'depth' must be at least 1");
  const auto& tau_json = field(doc, "temperature");
  if (!tau_json.is_number()) fail(ErrorKind::parse_error, "field 'temperature' is not a number");
  const double tau = tau_json.get<double>();
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorKind::parse_error, "field 'temperature' must be positive");
  const auto& kind_json = field(doc, "node_kind");
  NodeKind kind;
  if (kind_json == "logit") {
    kind = NodeKind::logit;
  } else if (kind_json == "literal") {
    kind = NodeKind::literal;
  } else {
    fail(ErrorKind::parse_error, "field 'node_kind' must be \"logit\" or \"literal\"");
  }
  std::size_t expected = 0;
  try {
    expected = pdt_node_count(n, k);
  } catch (const Error&) {
    fail(ErrorKind::parse_error, "fields 'n_actions'/'depth' describe an oversized tree");
  }
  const auto& nodes = field(doc, "nodes");
  if (!nodes.is_array()) fail(ErrorKind::parse_error, "field 'nodes' is not an array");
  if (nodes.size() != expected)
    fail(ErrorKind::parse_error, "field 'nodes' has " + std::to_string(nodes.size()) +
                                     " entries, expected " + std::to_string(expected));
  std::vector<double> values;
  values.reserve(expected * static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& row = nodes[i];
    if (!row.is_array() || row.size() != static_cast<std::size_t>(n))
      fail(ErrorKind::parse_error, "field 'nodes[" + std::to_string(i) + "]' must hold n_actions numbers");
    for (const auto& v : row) {
      if (!v.is_number()) fail(ErrorKind::parse_error, "field 'nodes[" + std::to_string(i) + "]' holds a non-number");
      values.push_back(v.get<double>());
    }
  }
  try {
    return Pdt(n, k, tau, kind, std::move(values));
  } catch (const Error& e) {
    fail(ErrorKind::parse_error, std::string("field 'nodes': ") + e.what());
  }
}

inline void save_pdt(const Pdt& pdt, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io_error, "cannot write " + path.string());
  out << pdt_to_json(pdt).dump() << '\n';
  if (!out) fail(ErrorKind::io_error, "write failed for " + path.string());
}

inline Pdt load_pdt(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io_error, "cannot read " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse_error, path.string() + ": " + e.what());
  }
  return pdt_from_json(doc);
}

}  // namespace ami
