#pragma once

// Leave-one-domain-out experiments over seeds, the sub-model ablation, lambda
// and Transformer sweeps, model-selection comparison and report output.

#include "d2sdk/data.hpp"
#include "d2sdk/model.hpp"
#include "d2sdk/trainer.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace d2sdk {

struct TransformerGrid {
  std::vector<int> layers{2, 3, 4, 5};
  std::vector<int> heads{2, 4, 8, 16};
  // 512..4096 for a 1024-wide MLP, scaled to the desk default of 64.
  std::vector<int> ff_dims{32, 64, 128, 256};

  bool operator==(const TransformerGrid&) const = default;
};

struct ExperimentPlan {
  std::string name = "experiment";
  SyntheticConfig dataset;
  std::optional<std::string> dataset_path;  // exported dataset, overrides `dataset`
  std::vector<int> held_out;                // empty selects every domain
  std::vector<Variant> variants{Variant::Full};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  OptimConfig optim = [] {
    OptimConfig o;
    o.epochs = 40;
    return o;
  }();
  ModelConfig model;  // K, N_C and D_in are taken from the dataset
  double val_fraction = 0.1;
  std::vector<double> lambda_grid{0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01};
  TransformerGrid transformer_grid;
  // Extra target per fold: mix of the fold's first two source domains.
  bool mixed_target = true;
  double mix_fraction = 0.5;
  // Per-epoch target monitoring, required for the test-best policy.
  bool monitor_targets = true;
  int jobs = 1;

  bool operator==(const ExperimentPlan&) const = default;
};

// 10 seeds and 80 epochs instead of the desk defaults of 5 and 40.
void make_paper_faithful(ExperimentPlan& plan);

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);
ExperimentPlan load_plan(const std::string& path);

// Resolves the dataset and checks every field; throws before any training.
Dataset prepare_plan(const ExperimentPlan& plan);

struct RunRecord {
  std::string row;  // variant name or sweep setting
  Variant variant = Variant::Full;
  int held_out = 0;
  std::uint64_t seed = 0;
  nlohmann::json model;  // effective ModelConfig
  std::vector<std::string> targets;
  std::map<std::string, std::vector<double>> accuracy;    // policy -> per target
  std::map<std::string, std::vector<int>> selected_epoch;  // policy -> per target
  std::map<std::string, std::size_t> target_reads;         // purpose -> samples
  std::vector<EpochRecord> epochs;

  bool operator==(const RunRecord&) const = default;
};

struct ExperimentReport {
  std::string kind;  // lodo, ablation, lambda-sweep, transformer-sweep, selection
  nlohmann::json plan;
  std::vector<std::string> rows;
  std::vector<int> domains;
  std::vector<std::string> notes;
  std::vector<RunRecord> runs;  // sorted by (row, held-out domain, seed)
  double wall_clock_seconds = 0.0;  // text output only, so structured bytes stay reproducible

  // Ignores wall-clock time.
  bool operator==(const ExperimentReport& o) const;
};

using ProgressFn = std::function<void(const RunRecord&, std::size_t done, std::size_t total)>;

ExperimentReport run_lodo(const ExperimentPlan& plan, const ProgressFn& progress = {});
ExperimentReport run_ablation(const ExperimentPlan& plan, const ProgressFn& progress = {});
ExperimentReport run_lambda_sweep(const ExperimentPlan& plan, const ProgressFn& progress = {});
ExperimentReport run_transformer_sweep(const ExperimentPlan& plan, const ProgressFn& progress = {});
ExperimentReport run_selection_report(const ExperimentPlan& plan, const ProgressFn& progress = {});

struct Cell {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over seeds
  int n = 0;
};

struct TableRow {
  std::string label;
  std::vector<Cell> cells;  // one per held-out domain
  Cell ave;                 // mean of the per-domain means; std over per-seed averages
};

struct Table {
  std::string policy;
  std::string target;
  std::vector<std::string> columns;
  std::vector<TableRow> rows;
};

// One row per report row, one column per held-out domain plus "Ave.".
Table aggregate(const ExperimentReport& report, SelectionPolicy policy, std::size_t target = 0);

struct GapStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  int n = 0;
};

// test-best minus last-epoch accuracy per report row, on the held-out domain.
std::map<std::string, GapStats> selection_gaps(const ExperimentReport& report);

nlohmann::json report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);
std::string format_report_text(const ExperimentReport& report);

enum class ReportFormat { TableText, Structured };

// Writes <dir>/<kind>.txt and/or <dir>/<kind>.json and returns the paths.
std::vector<std::string> emit_report(const ExperimentReport& report, const std::string& dir,
                                     std::vector<ReportFormat> formats = {ReportFormat::TableText,
                                                                          ReportFormat::Structured});

}  // namespace d2sdk
