#pragma once

// SGD with momentum and a single step decay, per-epoch evaluation and model
// selection snapshots.

#include "d2sdk/checkpoint.hpp"
#include "d2sdk/data.hpp"
#include "d2sdk/model.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace d2sdk {

struct OptimConfig {
  double lr0 = 0.001;
  int batch_size = 32;
  int epochs = 80;
  double decay_factor = 0.1;
  double decay_at_fraction = 0.8;
  double momentum = 0.9;
  double weight_decay = 0.0;
  // Every batch cycles through the source domains instead of drawing from the
  // pooled training set.
  bool stratified = false;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);

// First epoch that uses the decayed rate, ceil(decay_at_fraction * epochs).
int decay_epoch(const OptimConfig& oc);
double lr_at(int epoch, const OptimConfig& oc);

struct SgdState {
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<Matrix> velocity;  // one per parameter, created on first use
};

// v = momentum * v + g + weight_decay * w; w -= lr * v; grads are zeroed.
void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr);

enum class SelectionPolicy { LastEpoch, ValidationBest, TestBest };
inline constexpr std::array<SelectionPolicy, 3> kSelectionPolicies{
    SelectionPolicy::LastEpoch, SelectionPolicy::ValidationBest, SelectionPolicy::TestBest};
std::string to_string(SelectionPolicy p);

// Counts every read of target-domain samples, keyed by purpose.
struct TargetAccessLog {
  std::map<std::string, std::size_t> reads;

  void record(const std::string& purpose, std::size_t samples) { reads[purpose] += samples; }
  std::size_t count(const std::string& purpose) const;
};

// Purposes used by the trainer.
inline constexpr const char* kAccessTraining = "training";
inline constexpr const char* kAccessLastEpoch = "last-epoch";
inline constexpr const char* kAccessValidationBest = "validation-best";
inline constexpr const char* kAccessTestBest = "test-best";
inline constexpr const char* kAccessEvaluation = "evaluation";

struct LossSummary {
  double total = 0.0;
  double domain = 0.0;
  double global = 0.0;

  bool operator==(const LossSummary&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossSummary train;               // sample-weighted means over the epoch
  double val_accuracy = 0.0;       // pooled source validation
  std::vector<double> target_accuracy;  // per target set; empty when not monitored

  bool operator==(const EpochRecord&) const = default;
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainState {
  int epoch = 0;
  SgdState sgd;
  Rng rng;
  int best_val_epoch = -1;
  double best_val_accuracy = -1.0;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  // Monitor target accuracy every epoch; needed only for the test-best policy.
  bool monitor_targets = true;
  int eval_batch = 250;
  std::ostream* epoch_log = nullptr;  // one JSON record per line
  std::function<void(const EpochRecord&)> on_epoch;
};

struct PolicyOutcome {
  SelectionPolicy policy;
  std::vector<int> epochs;              // selected epoch per target set
  std::vector<double> target_accuracy;  // per target set
};

struct TrainResult {
  Checkpoint final_checkpoint;            // last epoch, with momentum and RNG state
  std::vector<Checkpoint> policy_checkpoints;  // one per available policy
  std::vector<EpochRecord> epochs;
  std::vector<PolicyOutcome> outcomes;    // last-epoch, validation-best, test-best when monitored
  std::vector<std::string> target_names;
  TargetAccessLog access;

  const PolicyOutcome* outcome(SelectionPolicy p) const;
};

// Top-1 accuracy of `model` on the given samples; inference mode, fixed chunking.
double evaluate_accuracy(const Model& model, std::span<const DomainSample> samples, int eval_batch = 250);

Checkpoint make_train_checkpoint(const Model& model, const TrainState& state, std::string tag, int epoch);

TrainResult train_run(Model& model, const DatasetBundle& bundle, const OptimConfig& oc,
                      const TrainOptions& options = {});

}  // namespace d2sdk
