#include "d2sdk/checkpoint.hpp"

#include "d2sdk/errors.hpp"

#include <fstream>
#include <sstream>

namespace d2sdk {

namespace {

constexpr const char* kFormat = "d2sdk-checkpoint";
constexpr int kVersion = 1;

nlohmann::json to_json(const ParamRecord& r) {
  return {{"name", r.name}, {"shape", r.shape}, {"values", r.values}};
}

ParamRecord record_from_json(const nlohmann::json& j) {
  ParamRecord r;
  r.name = j.at("name").get<std::string>();
  r.shape = j.at("shape").get<Shape>();
  r.values = j.at("values").get<std::vector<double>>();
  if (static_cast<Index>(r.values.size()) != shape_numel(r.shape)) {
    throw IoError("checkpoint: parameter '" + r.name + "' has " + std::to_string(r.values.size()) +
                  " values for shape " + shape_str(r.shape));
  }
  return r;
}

ParamRecord record_of(const std::string& name, const Tensor& t) {
  return {name, t.shape(), std::vector<double>(t.flat().begin(), t.flat().end())};
}

}  // namespace

std::string group_name(const NamedParam& p) {
  switch (p.group) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Expert: return "expert." + std::to_string(p.domain);
    case ParamGroup::Global: return "global";
  }
  return "?";
}

Checkpoint make_checkpoint(const Model& model, std::string tag, int epoch) {
  Checkpoint c;
  c.config = model.config();
  c.tag = std::move(tag);
  c.epoch = epoch;
  for (const auto& p : model.params()) {
    const std::string g = group_name(p);
    if (c.groups.empty() || c.groups.back().name != g) c.groups.push_back({g, {}});
    c.groups.back().params.push_back(record_of(p.name, p.tensor));
  }
  return c;
}

void load_parameters(Model& model, const Checkpoint& checkpoint) {
  std::size_t matched = 0;
  for (const auto& group : checkpoint.groups) {
    for (const auto& r : group.params) {
      const NamedParam* p = model.find(r.name);
      if (!p) throw IoError("checkpoint: model has no parameter '" + r.name + "'");
      if (p->tensor.shape() != r.shape) {
        throw IoError("checkpoint: shape " + shape_str(r.shape) + " for '" + r.name + "' does not match " +
                      shape_str(p->tensor.shape()));
      }
      Tensor t = p->tensor;
      std::copy(r.values.begin(), r.values.end(), t.mutable_value().data());
      ++matched;
    }
  }
  if (matched != model.params().size()) {
    throw IoError("checkpoint: covers " + std::to_string(matched) + " of " +
                  std::to_string(model.params().size()) + " model parameters");
  }
}

std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : c.groups) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& r : g.params) params.push_back(to_json(r));
    groups.push_back({{"name", g.name}, {"params", params}});
  }
  nlohmann::json momentum = nlohmann::json::array();
  for (const auto& r : c.momentum) momentum.push_back(to_json(r));
  nlohmann::json j = {{"format", kFormat},   {"version", kVersion}, {"tag", c.tag},
                      {"epoch", c.epoch},    {"config", c.config},  {"groups", groups},
                      {"momentum", momentum}, {"rng_state", c.rng_state}};
  return j.dump() + "\n";
}

Checkpoint parse_checkpoint(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", "") != kFormat) throw IoError("checkpoint: not a d2sdk checkpoint");
  if (j.value("version", 0) != kVersion) throw IoError("checkpoint: unsupported version");
  Checkpoint c;
  c.tag = j.at("tag").get<std::string>();
  c.epoch = j.at("epoch").get<int>();
  c.config = j.at("config");
  for (const auto& g : j.at("groups")) {
    ParamGroupRecord rec{g.at("name").get<std::string>(), {}};
    for (const auto& p : g.at("params")) rec.params.push_back(record_from_json(p));
    c.groups.push_back(std::move(rec));
  }
  for (const auto& m : j.at("momentum")) c.momentum.push_back(record_from_json(m));
  c.rng_state = j.at("rng_state").get<std::string>();
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << serialize_checkpoint(checkpoint);
  if (!out) throw IoError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace d2sdk
