#include "d2sdk/harness.hpp"

#include "d2sdk/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace d2sdk {

namespace {

constexpr const char* kReportFormat = "d2sdk-report";
constexpr int kReportVersion = 1;
constexpr std::uint32_t kMixedTargetStream = 0x4D00u;

struct RunSpec {
  std::string row;
  ModelConfig model;
  int held_out;
  std::uint64_t seed;
};

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string lambda_label(double l) {
  std::ostringstream s;
  s << "lambda=" << l;
  return s.str();
}

std::vector<int> resolved_domains(const ExperimentPlan& plan, const Dataset& data) {
  if (!plan.held_out.empty()) return plan.held_out;
  std::vector<int> ids;
  for (const auto& s : data.config.domains) ids.push_back(s.id);
  return ids;
}

ModelConfig base_model(const ExperimentPlan& plan, const Dataset& data) {
  ModelConfig m = plan.model;
  m.num_domains = static_cast<int>(data.config.domains.size()) - 1;
  m.num_classes = data.config.num_classes;
  m.input_dim = data.config.input_dim;
  return m;
}

RunRecord execute(const RunSpec& spec, const ExperimentPlan& plan, const Dataset& data) {
  DatasetBundle bundle = make_lodo_split(data, spec.held_out, plan.val_fraction, spec.seed);
  if (plan.mixed_target && bundle.num_sources() >= 2) {
    const auto mix = mix_domains(data.spec(bundle.sources[0].domain_id), data.spec(bundle.sources[1].domain_id),
                                 plan.mix_fraction);
    const std::uint64_t mix_seed = stream_rng(spec.seed, kMixedTargetStream)();
    bundle.targets.push_back({"mixed", sample_mixed(mix, data.prototypes, data.config.n_per_class, mix_seed).samples});
  }
  ModelConfig mc = spec.model;
  mc.seed = spec.seed;
  Model model(mc);
  TrainOptions opt;
  opt.seed = spec.seed;
  opt.monitor_targets = plan.monitor_targets;
  TrainResult res = train_run(model, bundle, plan.optim, opt);

  RunRecord r;
  r.row = spec.row;
  r.variant = mc.variant;
  r.held_out = spec.held_out;
  r.seed = spec.seed;
  r.model = mc;
  r.targets = res.target_names;
  r.targets[0] = "held-out";
  for (const auto& o : res.outcomes) {
    r.accuracy[to_string(o.policy)] = o.target_accuracy;
    r.selected_epoch[to_string(o.policy)] = o.epochs;
  }
  r.target_reads = res.access.reads;
  r.epochs = std::move(res.epochs);
  return r;
}

std::vector<RunRecord> execute_all(const std::vector<RunSpec>& specs, const ExperimentPlan& plan,
                                   const Dataset& data, const ProgressFn& progress) {
  std::vector<RunRecord> out(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0}, done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < specs.size();) {
      try {
        out[i] = execute(specs[i], plan, data);
      } catch (...) {
        errors[i] = std::current_exception();
        continue;
      }
      const std::size_t d = ++done;
      if (progress) {
        std::lock_guard lock(progress_mutex);
        progress(out[i], d, specs.size());
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(plan.jobs, static_cast<int>(specs.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// Specs are built in (row, domain, seed) order, so the merged result is
// independent of completion order.
ExperimentReport run_specs(std::string kind, std::vector<std::string> rows, std::vector<RunSpec> specs,
                           const ExperimentPlan& plan, const Dataset& data, std::vector<std::string> notes,
                           const ProgressFn& progress) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport r;
  r.kind = std::move(kind);
  r.plan = plan;
  r.rows = std::move(rows);
  r.domains = resolved_domains(plan, data);
  notes.push_back("data splits, initialisation and batch order are re-seeded with every seed");
  notes.push_back("accuracy is top-1 with ties resolved to the lowest class index");
  r.notes = std::move(notes);
  r.runs = execute_all(specs, plan, data, progress);
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<RunSpec> grid(const std::vector<std::pair<std::string, ModelConfig>>& rows, const ExperimentPlan& plan,
                          const Dataset& data) {
  std::vector<RunSpec> specs;
  for (const auto& [label, mc] : rows) {
    mc.validate();
    for (int d : resolved_domains(plan, data)) {
      for (auto seed : plan.seeds) specs.push_back({label, mc, d, seed});
    }
  }
  return specs;
}

ExperimentReport run_rows(std::string kind, const std::vector<std::pair<std::string, ModelConfig>>& rows,
                          const ExperimentPlan& plan, const Dataset& data, std::vector<std::string> notes,
                          const ProgressFn& progress) {
  std::vector<std::string> labels;
  for (const auto& r : rows) labels.push_back(r.first);
  auto specs = grid(rows, plan, data);
  return run_specs(std::move(kind), std::move(labels), std::move(specs), plan, data, std::move(notes), progress);
}

std::vector<std::pair<std::string, ModelConfig>> variant_rows(const ModelConfig& base,
                                                              std::span<const Variant> variants) {
  std::vector<std::pair<std::string, ModelConfig>> rows;
  for (Variant v : variants) {
    ModelConfig m = base;
    m.variant = v;
    rows.emplace_back(to_string(v), m);
  }
  return rows;
}

Variant sweep_variant(const ExperimentPlan& plan) { return plan.variants.empty() ? Variant::Full : plan.variants.front(); }

Cell stats(const std::vector<double>& xs) {
  Cell c;
  c.n = static_cast<int>(xs.size());
  if (xs.empty()) return c;
  c.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - c.mean) * (x - c.mean);
    c.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return c;
}

}  // namespace

void make_paper_faithful(ExperimentPlan& plan) {
  plan.seeds.clear();
  for (std::uint64_t s = 0; s < 10; ++s) plan.seeds.push_back(s);
  plan.optim.epochs = 80;
}

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  std::vector<std::string> variants;
  for (Variant v : p.variants) variants.push_back(to_string(v));
  j = {{"name", p.name},
       {"dataset", p.dataset},
       {"held_out", p.held_out},
       {"variants", variants},
       {"seeds", p.seeds},
       {"optim", p.optim},
       {"model", p.model},
       {"val_fraction", p.val_fraction},
       {"lambda_grid", p.lambda_grid},
       {"transformer_grid",
        {{"layers", p.transformer_grid.layers},
         {"heads", p.transformer_grid.heads},
         {"ff_dims", p.transformer_grid.ff_dims}}},
       {"mixed_target", p.mixed_target},
       {"mix_fraction", p.mix_fraction},
       {"monitor_targets", p.monitor_targets},
       {"jobs", p.jobs}};
  if (p.dataset_path) j["dataset_path"] = *p.dataset_path;
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  ExperimentPlan d;
  p.name = j.value("name", d.name);
  p.dataset = j.value("dataset", d.dataset);
  p.dataset_path.reset();
  if (j.contains("dataset_path") && !j["dataset_path"].is_null()) p.dataset_path = j["dataset_path"].get<std::string>();
  p.held_out = j.value("held_out", d.held_out);
  p.variants.clear();
  if (j.contains("variants")) {
    for (const auto& v : j["variants"]) p.variants.push_back(parse_variant(v.get<std::string>()));
  } else {
    p.variants = d.variants;
  }
  p.seeds = j.value("seeds", d.seeds);
  p.optim = j.contains("optim") ? j["optim"].get<OptimConfig>() : d.optim;
  if (j.contains("optim") && !j["optim"].contains("epochs")) p.optim.epochs = d.optim.epochs;
  p.model = j.value("model", d.model);
  p.val_fraction = j.value("val_fraction", d.val_fraction);
  p.lambda_grid = j.value("lambda_grid", d.lambda_grid);
  p.transformer_grid = d.transformer_grid;
  if (j.contains("transformer_grid")) {
    const auto& g = j["transformer_grid"];
    p.transformer_grid.layers = g.value("layers", d.transformer_grid.layers);
    p.transformer_grid.heads = g.value("heads", d.transformer_grid.heads);
    p.transformer_grid.ff_dims = g.value("ff_dims", d.transformer_grid.ff_dims);
  }
  p.mixed_target = j.value("mixed_target", d.mixed_target);
  p.mix_fraction = j.value("mix_fraction", d.mix_fraction);
  p.monitor_targets = j.value("monitor_targets", d.monitor_targets);
  p.jobs = j.value("jobs", d.jobs);
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in).get<ExperimentPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

Dataset prepare_plan(const ExperimentPlan& plan) {
  if (plan.seeds.empty()) throw ConfigError("plan: seed list is empty");
  if (plan.variants.empty()) throw ConfigError("plan: variant list is empty");
  if (!(plan.val_fraction > 0.0 && plan.val_fraction < 1.0)) throw ConfigError("plan: val_fraction must lie in (0, 1)");
  if (!(plan.mix_fraction >= 0.0 && plan.mix_fraction <= 1.0)) throw ConfigError("plan: mix_fraction must lie in [0, 1]");
  if (plan.jobs < 1) throw ConfigError("plan: jobs must be >= 1");
  plan.optim.validate();
  Dataset data = plan.dataset_path ? load_dataset(*plan.dataset_path) : generate_dataset(plan.dataset);
  if (data.config.domains.size() < 2) throw ConfigError("plan: leave-one-domain-out needs at least two domains");
  for (int d : plan.held_out) data.spec(d);
  std::vector<int> sorted = plan.held_out;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("plan: duplicate held-out domain");
  base_model(plan, data).validate();
  for (double l : plan.lambda_grid) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("plan: lambda grid value " + g17(l) + " outside [0, 1]");
  }
  return data;
}

bool ExperimentReport::operator==(const ExperimentReport& o) const {
  return kind == o.kind && plan == o.plan && rows == o.rows && domains == o.domains && notes == o.notes &&
         runs == o.runs;
}

ExperimentReport run_lodo(const ExperimentPlan& plan, const ProgressFn& progress) {
  Dataset data = prepare_plan(plan);
  return run_rows("lodo", variant_rows(base_model(plan, data), plan.variants), plan, data, {}, progress);
}

ExperimentReport run_ablation(const ExperimentPlan& plan, const ProgressFn& progress) {
  Dataset data = prepare_plan(plan);
  const Variant rows[] = {Variant::ConvExp, Variant::TEExp, Variant::TD, Variant::Full};
  return run_rows("ablation", variant_rows(base_model(plan, data), rows), plan, data, {}, progress);
}

ExperimentReport run_lambda_sweep(const ExperimentPlan& plan, const ProgressFn& progress) {
  Dataset data = prepare_plan(plan);
  if (plan.lambda_grid.empty()) throw ConfigError("plan: lambda grid is empty");
  std::vector<std::pair<std::string, ModelConfig>> rows;
  for (double l : plan.lambda_grid) {
    ModelConfig m = base_model(plan, data);
    m.variant = sweep_variant(plan);
    m.lambda = l;
    rows.emplace_back(lambda_label(l), m);
  }
  return run_rows("lambda-sweep", rows, plan, data, {"variant " + to_string(sweep_variant(plan))}, progress);
}

ExperimentReport run_transformer_sweep(const ExperimentPlan& plan, const ProgressFn& progress) {
  Dataset data = prepare_plan(plan);
  const auto& g = plan.transformer_grid;
  if (g.layers.empty() && g.heads.empty() && g.ff_dims.empty()) throw ConfigError("plan: transformer grid is empty");
  ModelConfig base = base_model(plan, data);
  base.variant = sweep_variant(plan);
  std::vector<std::pair<std::string, ModelConfig>> rows;
  for (int l : g.layers) {
    ModelConfig m = base;
    m.num_layers = l;
    rows.emplace_back("L=" + std::to_string(l), m);
  }
  for (int h : g.heads) {
    ModelConfig m = base;
    m.num_heads = h;
    rows.emplace_back("heads=" + std::to_string(h), m);
  }
  for (int f : g.ff_dims) {
    ModelConfig m = base;
    m.ff_dim = f;
    rows.emplace_back("d_ff=" + std::to_string(f), m);
  }
  std::vector<std::string> notes{
      "variant " + to_string(base.variant),
      "one parameter varied at a time from L=" + std::to_string(base.num_layers) +
          ", heads=" + std::to_string(base.num_heads) + ", d_ff=" + std::to_string(base.ff_dim),
      "full-scale grid L {2,3,4,5}, heads {2,4,8,16}, d_ff {512,1024,2048,4096}; d_ff scaled by 1/16 to the "
      "desk model"};
  return run_rows("transformer-sweep", rows, plan, data, std::move(notes), progress);
}

ExperimentReport run_selection_report(const ExperimentPlan& plan, const ProgressFn& progress) {
  ExperimentPlan p = plan;
  p.monitor_targets = true;
  Dataset data = prepare_plan(p);
  return run_rows("selection", variant_rows(base_model(p, data), p.variants), p, data,
                  {"test-best picks the epoch with the highest held-out accuracy; reporting only"}, progress);
}

Table aggregate(const ExperimentReport& report, SelectionPolicy policy, std::size_t target) {
  const std::string key = to_string(policy);
  Table t;
  t.policy = key;
  for (int d : report.domains) t.columns.push_back("domain-" + std::to_string(d));
  t.columns.push_back("Ave.");
  for (const auto& row : report.rows) {
    TableRow tr;
    tr.label = row;
    std::map<std::uint64_t, std::vector<double>> per_seed;
    std::vector<double> means;
    for (int d : report.domains) {
      std::vector<double> xs;
      for (const auto& run : report.runs) {
        if (run.row != row || run.held_out != d) continue;
        auto it = run.accuracy.find(key);
        if (it == run.accuracy.end() || target >= it->second.size()) continue;
        if (t.target.empty()) t.target = run.targets[target];
        xs.push_back(it->second[target]);
        per_seed[run.seed].push_back(it->second[target]);
      }
      tr.cells.push_back(stats(xs));
      means.push_back(tr.cells.back().mean);
    }
    std::vector<double> seed_aves;
    for (const auto& [seed, v] : per_seed) {
      if (v.size() == report.domains.size()) {
        seed_aves.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
      }
    }
    tr.ave = stats(seed_aves);
    tr.ave.mean = means.empty() ? 0.0 : std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
    t.rows.push_back(std::move(tr));
  }
  return t;
}

std::map<std::string, GapStats> selection_gaps(const ExperimentReport& report) {
  std::map<std::string, GapStats> out;
  for (const auto& row : report.rows) {
    GapStats g;
    double sum = 0.0;
    for (const auto& run : report.runs) {
      if (run.row != row) continue;
      auto tb = run.accuracy.find(kAccessTestBest);
      auto le = run.accuracy.find(kAccessLastEpoch);
      if (tb == run.accuracy.end() || le == run.accuracy.end()) continue;
      const double gap = tb->second[0] - le->second[0];
      g.min = g.n == 0 ? gap : std::min(g.min, gap);
      g.max = g.n == 0 ? gap : std::max(g.max, gap);
      sum += gap;
      ++g.n;
    }
    if (g.n > 0) {
      g.mean = sum / g.n;
      out[row] = g;
    }
  }
  return out;
}

nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : run.epochs) epochs.push_back(to_json(e));
    runs.push_back({{"row", run.row},
                    {"variant", to_string(run.variant)},
                    {"held_out", run.held_out},
                    {"seed", run.seed},
                    {"model", run.model},
                    {"targets", run.targets},
                    {"accuracy", run.accuracy},
                    {"selected_epoch", run.selected_epoch},
                    {"target_reads", run.target_reads},
                    {"epochs", epochs}});
  }
  return {{"format", kReportFormat}, {"version", kReportVersion}, {"kind", r.kind},   {"plan", r.plan},
          {"rows", r.rows},          {"domains", r.domains},       {"notes", r.notes}, {"runs", runs}};
}

ExperimentReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kReportFormat || j.at("version").get<int>() != kReportVersion) {
      throw IoError("report: unsupported format");
    }
    ExperimentReport r;
    r.kind = j.at("kind").get<std::string>();
    r.plan = j.at("plan");
    r.rows = j.at("rows").get<std::vector<std::string>>();
    r.domains = j.at("domains").get<std::vector<int>>();
    r.notes = j.at("notes").get<std::vector<std::string>>();
    for (const auto& jr : j.at("runs")) {
      RunRecord run;
      run.row = jr.at("row").get<std::string>();
      run.variant = parse_variant(jr.at("variant").get<std::string>());
      run.held_out = jr.at("held_out").get<int>();
      run.seed = jr.at("seed").get<std::uint64_t>();
      run.model = jr.at("model");
      run.targets = jr.at("targets").get<std::vector<std::string>>();
      run.accuracy = jr.at("accuracy").get<std::map<std::string, std::vector<double>>>();
      run.selected_epoch = jr.at("selected_epoch").get<std::map<std::string, std::vector<int>>>();
      run.target_reads = jr.at("target_reads").get<std::map<std::string, std::size_t>>();
      for (const auto& je : jr.at("epochs")) {
        EpochRecord e;
        e.epoch = je.at("epoch").get<int>();
        e.lr = je.at("lr").get<double>();
        e.train.total = je.at("loss").at("total").get<double>();
        e.train.domain = je.at("loss").at("domain").get<double>();
        e.train.global = je.at("loss").at("global").get<double>();
        e.val_accuracy = je.at("val_acc").get<double>();
        if (je.contains("test_acc")) e.target_accuracy = je["test_acc"].get<std::vector<double>>();
        run.epochs.push_back(std::move(e));
      }
      r.runs.push_back(std::move(run));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: ") + e.what());
  }
}

std::string format_report_text(const ExperimentReport& r) {
  std::ostringstream out;
  out << "d2sdk report: " << r.kind << "\n";
  out << "plan: " << r.plan.dump() << "\n";
  out << "runs: " << r.runs.size() << "\n";
  for (const auto& n : r.notes) out << "note: " << n << "\n";
  char wall[64];
  std::snprintf(wall, sizeof wall, "%.1f", r.wall_clock_seconds);
  out << "wall-clock: " << wall << " s\n";

  std::size_t n_targets = 0;
  for (const auto& run : r.runs) n_targets = std::max(n_targets, run.targets.size());
  std::vector<Table> tables;
  for (std::size_t t = 0; t < n_targets; ++t) {
    for (SelectionPolicy p : kSelectionPolicies) {
      bool present = false;
      for (const auto& run : r.runs) present = present || run.accuracy.count(to_string(p));
      if (present) tables.push_back(aggregate(r, p, t));
    }
  }

  for (const auto& t : tables) {
    out << "\naccuracy (%) on " << t.target << " target, policy " << t.policy << ", mean (std) over seeds\n";
    std::vector<std::vector<std::string>> grid{{"method"}};
    for (const auto& c : t.columns) grid[0].push_back(c);
    for (const auto& row : t.rows) {
      std::vector<std::string> line{row.label};
      for (const auto& c : row.cells) line.push_back(pct(c.mean) + " (" + pct(c.std) + ")");
      line.push_back(pct(row.ave.mean));
      grid.push_back(std::move(line));
    }
    std::vector<std::size_t> width(grid[0].size(), 0);
    for (const auto& line : grid) {
      for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    }
    for (const auto& line : grid) {
      for (std::size_t i = 0; i < line.size(); ++i) {
        out << line[i] << std::string(width[i] - line[i].size() + (i + 1 < line.size() ? 2 : 0), ' ');
      }
      out << "\n";
    }
  }

  if (r.kind == "selection") {
    out << "\ntest-best minus last-epoch on the held-out domain (percentage points)\n";
    for (const auto& [row, g] : selection_gaps(r)) {
      out << row << "  mean " << pct(g.mean) << "  min " << pct(g.min) << "  max " << pct(g.max) << "  runs " << g.n
          << "\n";
    }
  }

  out << "\nfull-precision means: mean <target> <policy> <method> <column> <value>\n";
  for (const auto& t : tables) {
    for (const auto& row : t.rows) {
      for (std::size_t c = 0; c < row.cells.size(); ++c) {
        out << "mean " << t.target << ' ' << t.policy << ' ' << row.label << ' ' << t.columns[c] << ' '
            << g17(row.cells[c].mean) << "\n";
      }
      out << "mean " << t.target << ' ' << t.policy << ' ' << row.label << " Ave. " << g17(row.ave.mean) << "\n";
    }
  }
  return out.str();
}

std::vector<std::string> emit_report(const ExperimentReport& report, const std::string& dir,
                                     std::vector<ReportFormat> formats) {
  if (report.runs.empty()) throw ContractError("emit_report: report has no runs");
  if (report.kind.empty()) throw ContractError("emit_report: report has no kind");
  if (formats.empty()) throw ContractError("emit_report: no output format requested");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  std::vector<std::string> paths;
  for (ReportFormat f : formats) {
    const bool text = f == ReportFormat::TableText;
    const std::string path = (std::filesystem::path(dir) / (report.kind + (text ? ".txt" : ".json"))).string();
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << (text ? format_report_text(report) : report_to_json(report).dump(1) + "\n");
    if (!out) throw IoError("write failed for '" + path + "'");
    paths.push_back(path);
  }
  return paths;
}

}  // namespace d2sdk
