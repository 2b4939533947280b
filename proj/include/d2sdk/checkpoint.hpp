#pragma once

// Self-describing checkpoint container: configuration echo, parameters grouped
// as backbone / expert k / global, momentum buffers and the trainer RNG state.
// Serialised as compact JSON; doubles are written in shortest round-trip form,
// so save -> load -> save reproduces the same bytes.

#include "d2sdk/model.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace d2sdk {

struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const ParamRecord&) const = default;
};

struct ParamGroupRecord {
  std::string name;  // "backbone", "expert.<k>", "global"
  std::vector<ParamRecord> params;

  bool operator==(const ParamGroupRecord&) const = default;
};

struct Checkpoint {
  nlohmann::json config;
  std::string tag;  // e.g. "initial", "last-epoch", "validation-best"
  int epoch = -1;
  std::vector<ParamGroupRecord> groups;
  std::vector<ParamRecord> momentum;
  std::string rng_state;

  bool operator==(const Checkpoint&) const = default;
};

std::string group_name(const NamedParam& p);

Checkpoint make_checkpoint(const Model& model, std::string tag, int epoch);
// Copies values into `model` by name; shapes must match.
void load_parameters(Model& model, const Checkpoint& checkpoint);

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace d2sdk
