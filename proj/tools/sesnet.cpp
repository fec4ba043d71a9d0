// Command-line front end: gen-data, train, evaluate, eval-aemd,
// export-masks, gradcheck, emd-selftest.

#include "ses/config.hpp"
#include "ses/dataset.hpp"
#include "ses/emd.hpp"
#include "ses/emd_oracles.hpp"
#include "ses/error.hpp"
#include "ses/export.hpp"
#include "ses/gradcheck.hpp"
#include "ses/harness.hpp"
#include "ses/model.hpp"
#include "ses/pnm.hpp"
#include "ses/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ses;

namespace {

std::vector<std::size_t> parse_list(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' must be a comma-separated list of positive integers");
    }
  }
  if (out.empty()) throw ConfigError("key '" + key + "' is empty");
  return out;
}

int cmd_gen_data(const RunConfig& rc) {
  DatasetOptions o;
  o.n_per_class = rc.count("n_per_class");
  o.side = rc.count("side");
  o.val_fraction = rc.number("val_fraction");
  o.seed = static_cast<std::uint64_t>(rc.integer("seed"));
  const auto entries = gen_dataset(rc.str("out"), o);
  std::cout << json{{"images", entries.size()}, {"dir", rc.str("out")}}.dump() << '\n';
  return 0;
}

int cmd_train(const RunConfig& rc) {
  NetworkConfig net_cfg;
  const auto widths = parse_list(rc.str("widths"), "widths");
  const auto blocks = parse_list(rc.str("blocks"), "blocks");
  if (widths.size() != blocks.size()) throw ConfigError("'widths' and 'blocks' must have the same length");
  net_cfg.stages.clear();
  for (std::size_t i = 0; i < widths.size(); ++i) net_cfg.stages.push_back({widths[i], blocks[i]});
  net_cfg.k = rc.count("k");
  net_cfg.r1 = rc.count("r1");
  net_cfg.r2 = rc.count("r2");
  net_cfg.r3 = rc.count("r3");
  net_cfg.rnm.r = rc.number("rnm_r");
  net_cfg.rnm.routing = Routing::parse(rc.str("rnm_routing"));
  net_cfg.positional_encoding = rc.flag("positional_encoding");
  net_cfg.transformation_embedding = rc.flag("transformation_embedding");

  TrainConfig tc;
  tc.epochs = rc.count("epochs");
  tc.batch_size = rc.count("batch_size");
  tc.lr = rc.number("lr");
  tc.momentum = rc.number("momentum");
  tc.weight_decay = rc.number("weight_decay");
  tc.seed = static_cast<std::uint64_t>(rc.integer("seed"));

  Dataset train_set = load_split(rc.str("data"), "train");
  const Dataset val = load_split(rc.str("data"), "val");
  if (const auto cap = rc.count("max_train"); cap > 0 && cap < train_set.size()) {
    train_set.images.resize(cap);
    train_set.labels.resize(cap);
    train_set.paths.resize(cap);
  }
  net_cfg.in_channels = train_set.images.front().size(0);

  Network net = Network::init(net_cfg, tc.seed);
  fs::create_directories(rc.str("out"));
  const std::string log_path = rc.str("log").empty() ? (fs::path(rc.str("out")) / "metrics.jsonl").string() : rc.str("log");
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path);
  const TrainResult res = train(net, tc, train_set, val, &log);
  save_checkpoint(rc.str("out"), net, tc.seed);
  std::ofstream(fs::path(rc.str("out")) / "run_config.json") << rc.to_json().dump(2) << '\n';
  const auto& last = res.history.back();
  std::cout << json{{"initial_loss", res.initial_loss()}, {"final_loss", res.final_loss()}, {"val_acc", last.val_acc},
                    {"checkpoint", rc.str("out")}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& rc) {
  Network net = load_checkpoint(rc.str("model"));
  RNMConfig rnm = net.config().rnm;
  if (rc.has("rnm_r")) rnm.r = rc.number("rnm_r");
  if (rc.has("rnm_routing")) rnm.routing = Routing::parse(rc.str("rnm_routing"));
  net.set_rnm(rnm);
  const Dataset data = load_split(rc.str("data"), rc.str("split"));
  const EvalResult r = evaluate(net, data);
  json per_class = json::object();
  for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c)
    per_class[c < kNumShapeClasses ? to_string(static_cast<ShapeClass>(c)) : std::to_string(c)] = r.per_class_accuracy[c];
  std::cout << json{{"split", rc.str("split")}, {"n", r.n}, {"accuracy", r.accuracy}, {"loss", r.loss},
                    {"per_class_accuracy", per_class}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval_aemd(const RunConfig& rc) {
  Network net = load_checkpoint(rc.str("model"));
  const Dataset data = load_split(rc.str("data"), rc.str("split"));
  std::vector<ImageGrid> images;
  for (const auto& t : data.images) images.emplace_back(t);

  AEMDOptions o;
  o.kind = parse_transform_kind(rc.str("transform"));
  o.n = rc.count("n");
  o.seed = static_cast<std::uint64_t>(rc.integer("seed"));
  o.max_attempts = rc.count("max_attempts");
  if (rc.has("angle") || rc.has("axis") || rc.has("shear") || rc.has("factor")) {
    TransformParams p;
    p.kind = o.kind;
    if (rc.has("angle")) p.angle_deg = rc.number("angle");
    if (rc.has("axis")) {
      const auto a = rc.str("axis");
      if (a != "vertical" && a != "horizontal") throw ConfigError("key 'axis' must be vertical or horizontal");
      p.axis = a == "vertical" ? ReflectAxis::vertical : ReflectAxis::horizontal;
    }
    if (rc.has("shear")) p.shear = rc.number("shear");
    if (rc.has("shear_axis")) {
      const auto a = rc.str("shear_axis");
      if (a != "x" && a != "y") throw ConfigError("key 'shear_axis' must be x or y");
      p.shear_axis = a == "x" ? ShearAxis::x : ShearAxis::y;
    }
    if (rc.has("factor")) p.factor = rc.number("factor");
    make_transform(p, images.front().center());  // range check before any work
    o.fixed = p;
  }
  const AEMDReport report = aemd(NetworkSampler(net), images, o);
  std::ofstream out(rc.str("out"));
  if (!out) throw IoError("cannot write " + rc.str("out"));
  out << json(report).dump(2) << '\n';
  std::cout << json{{"transform", to_string(o.kind)}, {"n", o.n}, {"aemd", report.aemd}, {"report", rc.str("out")}}.dump()
            << '\n';
  return 0;
}

int cmd_export_masks(const RunConfig& rc) {
  Network net = load_checkpoint(rc.str("model"));
  ImageGrid img = to_grid(read_pnm(rc.str("image")));
  if (img.channels() != net.config().in_channels)
    throw ValueError("image has " + std::to_string(img.channels()) + " channels, model expects " +
                     std::to_string(net.config().in_channels));
  const auto files = export_masks(net, img, rc.count("layer"), rc.count("center_y"), rc.count("center_x"), rc.str("out"));
  std::cout << json{{"files", files}}.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const RunConfig& rc) {
  const double tol = rc.number("tolerance");
  const auto seed = static_cast<std::uint64_t>(rc.integer("seed"));
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (std::size_t s = 0; s < rc.count("seeds"); ++s)
    for (const auto& e : gradcheck_suite(seed + s)) {
      if (!worst.count(e.name)) order.push_back(e.name);
      worst[e.name] = std::max(worst[e.name], e.result.max_rel_error);
    }
  bool ok = true;
  for (const auto& name : order) {
    const bool pass = worst[name] < tol;
    ok = ok && pass;
    std::cout << (pass ? "ok   " : "FAIL ") << name << " max_rel_error=" << worst[name] << '\n';
  }
  if (!ok) throw NumericError("gradient check exceeded tolerance " + std::to_string(tol));
  return 0;
}

int cmd_emd_selftest(const RunConfig& rc) {
  EmdSelftestOptions o;
  o.instances_1d = rc.count("instances_1d");
  o.instances_2d = rc.count("instances_2d");
  o.triples = rc.count("triples");
  o.seed = static_cast<std::uint64_t>(rc.integer("seed"));
  const EmdSelftestResult r = emd_selftest(o);
  std::cout << json{{"max_err_1d", r.max_err_1d},
                    {"max_err_enumeration", r.max_err_enumeration},
                    {"max_axiom_violation", r.max_axiom_violation}}
                   .dump()
            << '\n';
  if (!r.ok()) throw NumericError("EMD self-test failed");
  return 0;
}

std::string flag_name(const std::string& key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

}  // namespace

int main(int argc, char** argv) {
  ses::retain_freed_memory();
  CLI::App app{"Sampling-equivariant self-attention toolkit"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App* app;
    std::string config_path;
    std::map<std::string, std::string> raw;
  };
  std::map<std::string, Sub> subs;
  for (const auto& name : commands()) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name);
    s.app->add_option("--config", s.config_path, "JSON config file; flags override its values");
    for (const auto& spec : command_options(name)) {
      s.app->add_option_function<std::string>(
          flag_name(spec.key), [&s, key = spec.key](const std::string& v) { s.raw[key] = v; }, spec.help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  }

  try {
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      const json file = s.config_path.empty() ? json() : read_config_file(s.config_path);
      const RunConfig rc = parse_config(name, file, s.raw);
      std::cerr << "config (" << name << "):\n" << rc.describe();
      if (name == "gen-data") return cmd_gen_data(rc);
      if (name == "train") return cmd_train(rc);
      if (name == "evaluate") return cmd_evaluate(rc);
      if (name == "eval-aemd") return cmd_eval_aemd(rc);
      if (name == "export-masks") return cmd_export_masks(rc);
      if (name == "gradcheck") return cmd_gradcheck(rc);
      if (name == "emd-selftest") return cmd_emd_selftest(rc);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
