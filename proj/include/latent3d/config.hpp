#ifndef LATENT3D_CONFIG_HPP
#define LATENT3D_CONFIG_HPP

// Structured config files. TOML is read with CLI11's TOML reader and turned
// into JSON; JSON files are accepted as well. Values are merged onto a
// struct's defaults, so a file only needs the keys it changes.

#include <charconv>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "latent3d/errors.hpp"
#include "latent3d/io.hpp"

namespace latent3d {

namespace config_detail {

inline nlohmann::json scalar(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  {
    long long v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return v;
  }
  {
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size() && !s.empty()) return v;
  }
  return s;
}

inline std::string toml_scalar(const nlohmann::json& v) {
  if (v.is_string()) {
    std::string out = "\"";
    for (char c : v.get<std::string>()) {
      if (c == '"' || c == '\\') out += '\\';
      out += c;
    }
    return out + "\"";
  }
  if (v.is_number_float()) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v.get<double>());
    std::string s(buf, r.ptr);
    if (s.find_first_of(".eE") == std::string::npos && s.find_first_of("in") == std::string::npos) s += ".0";
    return s;
  }
  return v.dump();
}

inline void emit_table(const nlohmann::json& obj, const std::string& prefix, std::string& out) {
  for (const auto& [k, v] : obj.items()) {
    if (v.is_object() || v.is_null()) continue;
    out += k + " = ";
    if (v.is_array()) {
      out += "[";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i].is_array() || v[i].is_object()) throw ValidationError("TOML writer: nested arrays are not supported (" + k + ")");
        out += (i ? ", " : "") + toml_scalar(v[i]);
      }
      out += "]\n";
    } else {
      out += toml_scalar(v) + "\n";
    }
  }
  for (const auto& [k, v] : obj.items()) {
    if (!v.is_object()) continue;
    const std::string name = prefix.empty() ? k : prefix + "." + k;
    out += "\n[" + name + "]\n";
    emit_table(v, name, out);
  }
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

/// Drops a trailing comment, honouring quotes; nullopt if a quote is left open.
inline std::optional<std::string> strip_comment(const std::string& s) {
  char q = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (q) {
      if (c == '\\' && q == '"') ++i;
      else if (c == q) q = 0;
    } else if (c == '"' || c == '\'') {
      q = c;
    } else if (c == '#') {
      return trim(s.substr(0, i));
    }
  }
  if (q) return std::nullopt;
  return trim(s);
}

inline int bracket_delta(const std::string& s) {
  int d = 0;
  char q = 0;
  for (char c : s) {
    if (q) {
      if (c == q) q = 0;
    } else if (c == '"' || c == '\'') {
      q = c;
    } else {
      d += c == '[' ? 1 : c == ']' ? -1 : 0;
    }
  }
  return d;
}

/// CLI11's reader is INI-tolerant: it turns a bare word into a flag and keeps
/// a commented table header as a key. Reject what TOML rejects before handing
/// the text over, and strip comments from headers.
inline std::string checked_toml(const std::string& text, const std::string& name) {
  std::istringstream is(text);
  std::string line, out;
  int depth = 0;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    auto fail = [&](const std::string& why) {
      throw ValidationError(name + ":" + std::to_string(no) + ": " + why + ": '" + trim(line) + "'");
    };
    const auto body = strip_comment(line);
    if (!body) fail("unterminated string");
    if (depth > 0) {
      depth += bracket_delta(*body);
      out += line + "\n";
      continue;
    }
    if (body->empty()) {
      out += "\n";
      continue;
    }
    if (body->front() == '[') {
      if (body->back() != ']' || body->find('=') != std::string::npos) fail("malformed table header");
      out += *body + "\n";
      continue;
    }
    const auto eq = body->find('=');
    if (eq == std::string::npos || trim(body->substr(0, eq)).empty()) fail("expected 'key = value'");
    const std::string value = trim(body->substr(eq + 1));
    if (value.empty() || value.front() == '=') fail("missing value");
    if (value.front() == '[') depth = bracket_delta(value);
    out += line + "\n";
  }
  if (depth != 0) throw ValidationError(name + ": unterminated array");
  return out;
}

}  // namespace config_detail

inline nlohmann::json parse_toml(const std::string& text, const std::string& name = "config") {
  std::istringstream is(config_detail::checked_toml(text, name));
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(is);
  } catch (const CLI::Error& e) {
    throw ValidationError(name + ": " + e.what());
  }
  nlohmann::json root = nlohmann::json::object();
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    nlohmann::json* node = &root;
    for (const auto& p : it.parents) node = &(*node)[p];
    if (it.inputs.size() == 1 && it.inputs[0].size() >= 2 && it.inputs[0].front() == '[' && it.inputs[0].back() == ']') {
      (*node)[it.name] = nlohmann::json::array();
    } else if (it.inputs.size() == 1) {
      (*node)[it.name] = config_detail::scalar(it.inputs[0]);
    } else {
      auto arr = nlohmann::json::array();
      for (const auto& s : it.inputs) arr.push_back(config_detail::scalar(s));
      (*node)[it.name] = arr;
    }
  }
  return root;
}

inline std::string to_toml(const nlohmann::json& obj) {
  if (!obj.is_object()) throw ValidationError("TOML writer: top level must be a table");
  std::string out;
  config_detail::emit_table(obj, "", out);
  return out;
}

/// JSON for *.json files, TOML otherwise.
inline nlohmann::json read_config_file(const fs::path& path) {
  const std::string text = read_file(path);
  if (path.extension() == ".json") {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("'" + path.string() + "': " + e.what());
    }
  }
  return parse_toml(text, path.string());
}

/// Overlays `patch` on `base`, recursing into tables. Unknown keys are
/// rejected, except under tables that are empty by default; a scalar given where the default is an array becomes a
/// one-element array, and integers are accepted where reals are expected.
inline void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "") {
  for (const auto& [k, v] : patch.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!base.contains(k)) throw ValidationError("unknown config key '" + path + "'");
    auto& b = base[k];
    if (b.is_object()) {
      if (!v.is_object()) throw ValidationError("config key '" + path + "' must be a table");
      // An empty default table is a free-form map (e.g. step -> command).
      if (b.empty()) b = v;
      else merge_into(b, v, path);
    } else if (b.is_array() && !v.is_array()) {
      b = nlohmann::json::array({v});
    } else {
      b = v;
    }
  }
}

template <typename T>
T config_from(const nlohmann::json& patch, T defaults = T{}) {
  nlohmann::json j = defaults;
  merge_into(j, patch);
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid config value: ") + e.what());
  }
}

}  // namespace latent3d

#endif
