#include "ses/config.hpp"

#include "ses/error.hpp"

#include <fstream>
#include <sstream>

namespace ses {

using nlohmann::json;

namespace {

OptionSpec req(std::string key, ValueType t, std::string help) { return {std::move(key), t, nullptr, true, std::move(help)}; }
OptionSpec opt(std::string key, ValueType t, json def, std::string help) {
  return {std::move(key), t, std::move(def), false, std::move(help)};
}

const std::map<std::string, std::vector<OptionSpec>>& table() {
  using V = ValueType;
  static const std::map<std::string, std::vector<OptionSpec>> t{
      {"gen-data",
       {req("out", V::string, "output directory"), req("seed", V::integer, "random seed"),
        opt("n_per_class", V::integer, 500, "images per class"), opt("side", V::integer, 32, "image side in pixels"),
        opt("val_fraction", V::number, 0.2, "fraction of each class held out for validation")}},
      {"train",
       {req("data", V::string, "dataset directory"), req("out", V::string, "checkpoint directory"),
        req("seed", V::integer, "random seed"), opt("epochs", V::integer, 20, "training epochs"),
        opt("batch_size", V::integer, 32, "minibatch size"), opt("lr", V::number, 0.05, "base learning rate"),
        opt("momentum", V::number, 0.9, "SGD momentum"), opt("weight_decay", V::number, 1e-4, "weight decay"),
        opt("widths", V::string, "32,64", "stage widths"), opt("blocks", V::string, "2,2", "SES blocks per stage"),
        opt("k", V::integer, 7, "footprint side"), opt("r1", V::integer, 1, "value reduction"),
        opt("r2", V::integer, 4, "query/key reduction"), opt("r3", V::integer, 4, "value channels per mask"),
        opt("rnm_r", V::number, 0.005, "RNM noise variance"),
        opt("rnm_routing", V::string, "qk", "qk|q|k|v|qv|kv|qkv|none"),
        opt("positional_encoding", V::boolean, false, "relative offsets into the mask regressor"),
        opt("transformation_embedding", V::boolean, true, "mask embedding after aggregation"),
        opt("max_train", V::integer, 0, "use at most this many training images (0: all)"),
        opt("log", V::string, "", "metrics file (default <out>/metrics.jsonl)")}},
      {"evaluate",
       {req("model", V::string, "checkpoint directory"), req("data", V::string, "dataset directory"),
        opt("split", V::string, "val", "manifest split"),
        opt("rnm_r", V::number, nullptr, "override RNM noise variance"),
        opt("rnm_routing", V::string, nullptr, "override RNM routing")}},
      {"eval-aemd",
       {req("model", V::string, "checkpoint directory"), req("data", V::string, "dataset directory"),
        req("seed", V::integer, "random seed"), req("out", V::string, "report path"),
        opt("transform", V::string, "rotation", "rotation|reflection|skew|scale|identity"),
        opt("n", V::integer, 100, "evaluation images"), opt("split", V::string, "val", "manifest split"),
        opt("max_attempts", V::integer, 20, "transform redraws per image"),
        opt("angle", V::number, nullptr, "fixed rotation angle in degrees"),
        opt("axis", V::string, nullptr, "fixed reflection axis vertical|horizontal"),
        opt("shear", V::number, nullptr, "fixed shear"), opt("shear_axis", V::string, nullptr, "shear axis x|y"),
        opt("factor", V::number, nullptr, "fixed scale factor")}},
      {"export-masks",
       {req("model", V::string, "checkpoint directory"), req("image", V::string, "input PGM"),
        req("center_y", V::integer, "centre row in feature cells"),
        req("center_x", V::integer, "centre column in feature cells"), req("out", V::string, "output directory"),
        opt("layer", V::integer, 0, "SES block index")}},
      {"gradcheck",
       {req("seed", V::integer, "random seed"), opt("seeds", V::integer, 10, "number of seeds"),
        opt("tolerance", V::number, 1e-4, "maximum relative error")}},
      {"emd-selftest",
       {req("seed", V::integer, "random seed"), opt("instances_1d", V::integer, 200, "collinear instances"),
        opt("instances_2d", V::integer, 50, "enumeration instances"),
        opt("triples", V::integer, 500, "metric-axiom triples")}},
  };
  return t;
}

const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::integer: return "an integer";
    case ValueType::number: return "a number";
    case ValueType::boolean: return "a boolean";
    case ValueType::string: return "a string";
  }
  return "?";
}

bool matches(const json& v, ValueType t) {
  switch (t) {
    case ValueType::integer: return v.is_number_integer();
    case ValueType::number: return v.is_number();
    case ValueType::boolean: return v.is_boolean();
    case ValueType::string: return v.is_string();
  }
  return false;
}

json from_flag(const OptionSpec& spec, const std::string& raw) {
  auto bad = [&] { return ConfigError("flag --" + spec.key + " expects " + type_name(spec.type) + ", got '" + raw + "'"); };
  switch (spec.type) {
    case ValueType::string: return raw;
    case ValueType::boolean:
      if (raw == "true" || raw == "1") return true;
      if (raw == "false" || raw == "0") return false;
      throw bad();
    case ValueType::integer: {
      std::size_t pos = 0;
      long long v = 0;
      try {
        v = std::stoll(raw, &pos);
      } catch (const std::exception&) {
        throw bad();
      }
      if (pos != raw.size()) throw bad();
      return v;
    }
    case ValueType::number: {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(raw, &pos);
      } catch (const std::exception&) {
        throw bad();
      }
      if (pos != raw.size()) throw bad();
      return v;
    }
  }
  throw bad();
}

const OptionSpec* find(const std::vector<OptionSpec>& specs, const std::string& key) {
  for (const auto& s : specs)
    if (s.key == key) return &s;
  return nullptr;
}

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"gen-data", "train", "evaluate", "eval-aemd", "export-masks", "gradcheck",
                                          "emd-selftest"};
  return c;
}

const std::vector<OptionSpec>& command_options(const std::string& command) {
  auto it = table().find(command);
  if (it == table().end()) throw ConfigError("unknown command '" + command + "'");
  return it->second;
}

RunConfig parse_config(const std::string& command, const json& file, const std::map<std::string, std::string>& flags) {
  const auto& specs = command_options(command);
  RunConfig rc;
  rc.command = command;
  for (const auto& s : specs)
    if (!s.default_value.is_null()) {
      rc.options[s.key] = s.default_value;
      rc.provenance[s.key] = "default";
    }

  if (!file.is_null()) {
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (key == "command") {
        if (!value.is_string() || value.get<std::string>() != command)
          throw ConfigError("config file is for command '" + value.dump() + "', not '" + command + "'");
        continue;
      }
      const OptionSpec* s = find(specs, key);
      if (!s) throw ConfigError("unknown key '" + key + "' for command " + command);
      if (!matches(value, s->type)) throw ConfigError("key '" + key + "' must be " + type_name(s->type));
      rc.options[key] = s->type == ValueType::number ? json(value.get<double>()) : value;
      rc.provenance[key] = "file";
    }
  }
  for (const auto& [key, raw] : flags) {
    const OptionSpec* s = find(specs, key);
    if (!s) throw ConfigError("unknown key '" + key + "' for command " + command);
    rc.options[key] = from_flag(*s, raw);
    rc.provenance[key] = "flag";
  }

  std::string missing;
  for (const auto& s : specs)
    if (s.required && !rc.options.contains(s.key)) missing += (missing.empty() ? "" : ", ") + s.key;
  if (!missing.empty()) throw ConfigError(command + " is missing required fields: " + missing);
  for (const auto& s : specs)
    if (s.type == ValueType::integer && rc.options.contains(s.key) && rc.options[s.key].get<long long>() < 0)
      throw ConfigError("key '" + s.key + "' must be non-negative");
  return rc;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

namespace {

const json& lookup(const RunConfig& rc, const std::string& key) {
  if (!rc.options.contains(key)) throw ConfigError("option '" + key + "' has no value");
  return rc.options.at(key);
}

}  // namespace

std::string RunConfig::str(const std::string& key) const { return lookup(*this, key).get<std::string>(); }
std::int64_t RunConfig::integer(const std::string& key) const { return lookup(*this, key).get<std::int64_t>(); }
std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }
double RunConfig::number(const std::string& key) const { return lookup(*this, key).get<double>(); }
bool RunConfig::flag(const std::string& key) const { return lookup(*this, key).get<bool>(); }

json RunConfig::to_json() const {
  json j = options;
  j["command"] = command;
  return j;
}

std::string RunConfig::describe() const {
  std::ostringstream out;
  for (const auto& [key, value] : options.items()) {
    auto it = provenance.find(key);
    out << key << " = " << value.dump() << " (" << (it == provenance.end() ? "?" : it->second) << ")\n";
  }
  return out.str();
}

}  // namespace ses
