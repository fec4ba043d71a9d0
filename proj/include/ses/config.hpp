#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ses {

enum class ValueType { integer, number, boolean, string };

struct OptionSpec {
  std::string key;
  ValueType type;
  nlohmann::json default_value;  // null: no default
  bool required = false;
  std::string help;
};

/// Known commands, in display order.
const std::vector<std::string>& commands();
/// Option table of a command; throws ConfigError for unknown commands.
const std::vector<OptionSpec>& command_options(const std::string& command);

/// Effective options of one command after defaults, file values and flags.
struct RunConfig {
  std::string command;
  nlohmann::json options = nlohmann::json::object();  // only keys with a value
  std::map<std::string, std::string> provenance;      // key -> default | file | flag

  bool has(const std::string& key) const { return options.contains(key); }
  std::string str(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  double number(const std::string& key) const;
  bool flag(const std::string& key) const;

  /// {"command": ..., key: value...}; parse_config of this yields an equal config.
  nlohmann::json to_json() const;
  /// One "key = value (source)" line per option.
  std::string describe() const;
  bool operator==(const RunConfig& o) const { return command == o.command && options == o.options; }
};

/// Merges defaults, then `file` (may be null or an object, optionally with a
/// matching "command" key), then `flags` (raw strings keyed by option name).
/// Unknown keys, type mismatches and missing required options raise
/// ConfigError naming the keys involved.
RunConfig parse_config(const std::string& command, const nlohmann::json& file,
                       const std::map<std::string, std::string>& flags);

/// Reads a JSON config file.
nlohmann::json read_config_file(const std::string& path);

}  // namespace ses
