#include "ses/model.hpp"

#include "ses/error.hpp"
#include "ses/ops.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

namespace ses {

namespace fs = std::filesystem;
using nlohmann::json;

SESLayerConfig NetworkConfig::layer_config(std::size_t width) const {
  SESLayerConfig c;
  c.c_in = c.c_out = width;
  c.k = k;
  c.r1 = r1;
  c.r2 = r2;
  c.r3 = r3;
  c.positional_encoding = positional_encoding;
  c.transformation_embedding = transformation_embedding;
  return c;
}

void NetworkConfig::validate() const {
  if (in_channels == 0 || num_classes < 2) throw ValueError("network needs input channels and >= 2 classes");
  if (stages.empty()) throw ValueError("network needs at least one stage");
  for (const auto& s : stages) {
    if (s.width == 0 || s.blocks == 0) throw ValueError("stage width and block count must be positive");
    layer_config(s.width).validate();
  }
  rnm.validate();
}

bool NetworkConfig::operator==(const NetworkConfig& o) const {
  auto same_stages = stages.size() == o.stages.size();
  for (std::size_t i = 0; same_stages && i < stages.size(); ++i)
    same_stages = stages[i].width == o.stages[i].width && stages[i].blocks == o.stages[i].blocks;
  return same_stages && in_channels == o.in_channels && num_classes == o.num_classes && k == o.k && r1 == o.r1 &&
         r2 == o.r2 && r3 == o.r3 && positional_encoding == o.positional_encoding &&
         transformation_embedding == o.transformation_embedding && rnm.r == o.rnm.r &&
         rnm.routing == o.rnm.routing;
}

NetworkConfig NetworkConfig::san_ablation() const {
  NetworkConfig c = *this;
  c.positional_encoding = true;
  c.transformation_embedding = false;
  return c;
}

void to_json(json& j, const NetworkConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back({{"width", s.width}, {"blocks", s.blocks}});
  j = json{{"in_channels", c.in_channels},
           {"num_classes", c.num_classes},
           {"stages", stages},
           {"k", c.k},
           {"r1", c.r1},
           {"r2", c.r2},
           {"r3", c.r3},
           {"positional_encoding", c.positional_encoding},
           {"transformation_embedding", c.transformation_embedding},
           {"rnm_r", c.rnm.r},
           {"rnm_routing", c.rnm.routing.str()}};
}

void from_json(const json& j, NetworkConfig& c) {
  static const std::set<std::string> known{"in_channels", "num_classes", "stages", "k", "r1", "r2", "r3",
                                           "positional_encoding", "transformation_embedding", "rnm_r",
                                           "rnm_routing"};
  if (!j.is_object()) throw ConfigError("network config must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown network config key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(std::string("network config key '") + key + "' has the wrong type");
    }
  };
  get("in_channels", c.in_channels);
  get("num_classes", c.num_classes);
  get("k", c.k);
  get("r1", c.r1);
  get("r2", c.r2);
  get("r3", c.r3);
  get("positional_encoding", c.positional_encoding);
  get("transformation_embedding", c.transformation_embedding);
  get("rnm_r", c.rnm.r);
  if (j.contains("rnm_routing")) {
    std::string routing;
    get("rnm_routing", routing);
    c.rnm.routing = Routing::parse(routing);
  }
  if (j.contains("stages")) {
    if (!j["stages"].is_array()) throw ConfigError("network config key 'stages' must be an array");
    c.stages.clear();
    for (const auto& s : j["stages"]) {
      if (!s.is_object() || !s.contains("width") || !s.contains("blocks") || s.size() != 2 ||
          !s["width"].is_number_unsigned() || !s["blocks"].is_number_unsigned())
        throw ConfigError("each entry of 'stages' needs unsigned 'width' and 'blocks'");
      c.stages.push_back({s["width"].get<std::size_t>(), s["blocks"].get<std::size_t>()});
    }
  }
}

Network Network::init(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network net;
  net.cfg_ = cfg;
  net.seed_ = seed;
  Rng rng(seed);
  net.stem_ = Linear::init(cfg.in_channels, cfg.stages.front().width, rng);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (s > 0) net.transitions_.push_back(Linear::init(cfg.stages[s - 1].width, cfg.stages[s].width, rng));
    for (std::size_t b = 0; b < cfg.stages[s].blocks; ++b) {
      SESBlock blk;
      blk.rnm_bn = BatchNorm::init(cfg.stages[s].width);
      blk.ses = SESLayer::init(cfg.layer_config(cfg.stages[s].width), rng);
      blk.stage = s;
      blk.noise = Rng(seed + 1000 + net.blocks_.size());
      net.blocks_.push_back(std::move(blk));
    }
  }
  net.final_bn_ = BatchNorm::init(cfg.stages.back().width);
  net.head_ = Linear::init(cfg.stages.back().width, cfg.num_classes, rng);
  return net;
}

std::size_t Network::block_stride(std::size_t b) const { return std::size_t{1} << blocks_.at(b).stage; }

void Network::set_rnm(const RNMConfig& rnm) {
  rnm.validate();
  cfg_.rnm = rnm;
}

Tensor Network::forward(const Tensor& x, Mode mode, std::vector<Tensor>* masks) {
  if (x.rank() != 4 || x.size(1) != cfg_.in_channels)
    throw ShapeError("network input must be [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     to_string(x.shape()));
  if (masks) masks->clear();
  Tensor h = linear_forward(stem_, x, 1);
  std::size_t stage = 0;
  for (auto& blk : blocks_) {
    if (blk.stage != stage) {
      h = maxpool2(h);
      h = linear_forward(transitions_[stage], h, 1);
      stage = blk.stage;
    }
    RNMOutput r = rnm_forward(blk.rnm_bn, h, cfg_.rnm, mode, blk.noise, 1);
    Tensor clean = relu(r.clean);
    Tensor noisy = r.perturbed.same_storage(r.clean) ? clean : relu(r.perturbed);
    const Routing& rt = cfg_.rnm.routing;
    Tensor m;
    Tensor y = ses_forward(blk.ses, rt.v ? noisy : clean, rt.q ? noisy : clean, rt.k ? noisy : clean, mode,
                           masks ? &m : nullptr);
    if (masks) masks->push_back(m);
    h = add(h, y);
  }
  h = maxpool2(h);
  h = relu(batchnorm_forward(final_bn_, h, mode, 1));
  return linear_forward(head_, global_avg_pool(h), 1);
}

ParamList Network::parameters() {
  ParamList out;
  stem_.collect("stem", out);
  for (std::size_t t = 0; t < transitions_.size(); ++t) transitions_[t].collect("transition" + std::to_string(t), out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    blocks_[b].rnm_bn.collect(p + ".rnm", out);
    blocks_[b].ses.collect(p + ".ses", out);
  }
  final_bn_.collect("final_bn", out);
  head_.collect("head", out);
  return out;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters())
    if (p.trainable) n += p.tensor->numel();
  return n;
}

void save_checkpoint(const std::string& dir, Network& net, std::uint64_t seed) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  json params = json::array();
  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + dir + "/params.bin");
  for (const auto& p : net.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.tensor->shape()}, {"trainable", p.trainable}});
    save_tensor(bin, *p.tensor);
  }
  if (!bin) throw IoError("write failed: " + dir + "/params.bin");
  json manifest{{"format", "sesnet-checkpoint"}, {"version", 1}, {"seed", seed}, {"network", net.config()},
                {"params", params}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + dir + "/manifest.json");
}

Network load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(dir + "/manifest.json: " + e.what());
  }
  if (manifest.value("format", "") != "sesnet-checkpoint" || manifest.value("version", 0) != 1)
    throw IoError(dir + ": not a version-1 checkpoint");
  const NetworkConfig cfg = manifest.at("network").get<NetworkConfig>();
  const auto seed = manifest.value("seed", std::uint64_t{0});
  Network net = Network::init(cfg, seed);

  std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!bin) throw IoError("no params.bin in " + dir);
  auto params = net.parameters();
  const auto& listed = manifest.at("params");
  if (listed.size() != params.size())
    throw IoError(dir + ": checkpoint lists " + std::to_string(listed.size()) + " tensors, network has " +
                  std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != params[i].name)
      throw IoError(dir + ": tensor " + std::to_string(i) + " is '" + listed[i].at("name").get<std::string>() +
                    "', expected '" + params[i].name + "'");
    Tensor t = load_tensor(bin);
    if (t.shape() != params[i].tensor->shape())
      throw IoError(dir + ": tensor '" + params[i].name + "' has shape " + to_string(t.shape()) + ", expected " +
                    to_string(params[i].tensor->shape()));
    auto dst = params[i].tensor->mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  return net;
}

}  // namespace ses
