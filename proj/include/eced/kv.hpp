// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>

#include "eced/errors.hpp"

namespace eced {

// Flat key=value record used for architecture echoes inside checkpoints.
using KeyValues = std::map<std::string, std::string>;

// Shortest text that parses back to the same double.
inline std::string kv_format(double v) {
  char buf[32];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string kv_serialize(const KeyValues& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return os.str();
}

inline KeyValues kv_parse(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed record line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline int kv_int(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("missing record key: " + key);
  return std::stoi(it->second);
}

inline double kv_double(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("missing record key: " + key);
  return std::stod(it->second);
}

}  // namespace eced
