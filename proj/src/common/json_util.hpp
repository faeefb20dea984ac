#pragma once

#include <cmath>
#include <initializer_list>
#include <string>

#include "cifs/errors.hpp"
#include "json.hpp"

namespace cifs::json_util {

/// Rejects keys outside `allowed` so a misspelt option fails loudly.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                               const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + what);
  }
}

/// j[key] converted to T, or `fallback` when absent. Type errors become ConfigError.
template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_required(const nlohmann::json& j, const char* key, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(what + " is missing '" + key + "'");
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

/// A pixel-unit quantity written as a number, "a/b" (e.g. "8/255") or "eps/b"
/// (a fraction of `epsilon`, when given).
inline double pixel_value(const nlohmann::json& v, const std::string& what,
                          double epsilon = std::nan("")) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw ConfigError(what + " must be a number or a fraction string");
  const auto s = v.get<std::string>();
  const auto slash = s.find('/');
  try {
    if (slash == std::string::npos) return std::stod(s);
    const std::string num = s.substr(0, slash);
    const double den = std::stod(s.substr(slash + 1));
    if (num == "eps") {
      if (std::isnan(epsilon)) throw ConfigError(what + ": 'eps/...' needs an epsilon");
      return epsilon / den;
    }
    return std::stod(num) / den;
  } catch (const std::logic_error&) {
    throw ConfigError(what + ": cannot parse '" + s + "'");
  }
}

}  // namespace cifs::json_util
