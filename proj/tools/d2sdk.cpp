// Command-line entry point: leave-one-domain-out runs, ablation, sweeps,
// model-selection report, dataset export and gradient check.

#include "d2sdk/errors.hpp"
#include "d2sdk/gradcheck.hpp"
#include "d2sdk/harness.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace d2sdk;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> variants;
  std::optional<int> epochs;
  std::vector<int> held_out;
  std::optional<int> jobs;
  bool paper_faithful = false;
  bool quiet = false;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON experiment plan")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Single seed");
  app->add_option("--seeds", o.seeds, "Seed list")->delimiter(',');
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--variant", o.variants, "Variant(s): ERM, ConvExp, TEExp, TD, Full, WeightedMoE")->delimiter(',');
  app->add_option("--epochs", o.epochs, "Training epochs");
  app->add_option("--held-out", o.held_out, "Held-out domain id(s)")->delimiter(',');
  app->add_option("--jobs", o.jobs, "Concurrent runs");
  app->add_flag("--paper-faithful", o.paper_faithful, "10 seeds and 80 epochs");
  app->add_flag("--quiet", o.quiet, "No progress lines");
}

// Config file first, then the paper-faithful switch, then explicit flags.
ExperimentPlan build_plan(const CommonOptions& o) {
  ExperimentPlan plan = o.config.empty() ? ExperimentPlan{} : load_plan(o.config);
  if (o.paper_faithful) make_paper_faithful(plan);
  if (o.seed) plan.seeds = {*o.seed};
  if (!o.seeds.empty()) plan.seeds = o.seeds;
  if (o.epochs) plan.optim.epochs = *o.epochs;
  if (!o.variants.empty()) {
    plan.variants.clear();
    for (const auto& v : o.variants) plan.variants.push_back(parse_variant(v));
  }
  if (!o.held_out.empty()) plan.held_out = o.held_out;
  if (o.jobs) plan.jobs = *o.jobs;
  return plan;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int fail(const std::string& code, const std::string& msg) {
  std::cerr << "error: code=" << code << " msg=" << quote(msg) << "\n";
  return code == "usage" ? 2 : 1;
}

ProgressFn progress_printer(bool quiet) {
  if (quiet) return {};
  return [](const RunRecord& r, std::size_t done, std::size_t total) {
    const auto& acc = r.accuracy.at(kAccessLastEpoch);
    std::fprintf(stderr, "[%zu/%zu] %s domain-%d seed %llu: held-out %.2f%%", done, total, r.row.c_str(), r.held_out,
                 static_cast<unsigned long long>(r.seed), 100.0 * acc[0]);
    if (acc.size() > 1) std::fprintf(stderr, ", mixed %.2f%%", 100.0 * acc[1]);
    std::fprintf(stderr, "\n");
  };
}

void write_epoch_logs(const ExperimentReport& report, const std::string& dir) {
  const auto logs = std::filesystem::path(dir) / "logs";
  std::filesystem::create_directories(logs);
  for (const auto& run : report.runs) {
    const auto name = report.kind + "_" + run.row + "_domain-" + std::to_string(run.held_out) + "_seed-" +
                      std::to_string(run.seed) + ".jsonl";
    std::ofstream out(logs / name);
    if (!out) throw IoError("cannot write epoch log '" + (logs / name).string() + "'");
    for (const auto& e : run.epochs) out << to_json(e).dump() << "\n";
  }
}

int run_experiment(const CommonOptions& o, ExperimentReport (*runner)(const ExperimentPlan&, const ProgressFn&)) {
  const ExperimentPlan plan = build_plan(o);
  ExperimentReport report = runner(plan, progress_printer(o.quiet));
  const auto paths = emit_report(report, o.out);
  write_epoch_logs(report, o.out);
  std::cout << format_report_text(report);
  for (const auto& p : paths) std::cerr << "wrote " << p << "\n";
  return 0;
}

int gen_data(const CommonOptions& o, const std::string& file) {
  ExperimentPlan plan = build_plan(o);
  if (o.seed) plan.dataset.seed = *o.seed;
  Dataset data = plan.dataset_path ? load_dataset(*plan.dataset_path) : generate_dataset(plan.dataset);
  std::filesystem::create_directories(o.out);
  const auto path = (std::filesystem::path(o.out) / file).string();
  save_dataset(data, path);
  std::size_t n = 0;
  for (const auto& d : data.samples) n += d.size();
  std::cout << "wrote " << path << " (" << data.config.domains.size() << " domains, " << n << " samples)\n";
  return 0;
}

// Mixed domain/global loss of a small model on two random samples against central differences.
int grad_check(const CommonOptions& o, double tol) {
  ModelConfig c;
  c.num_domains = 2;
  c.num_classes = 3;
  c.input_dim = 8;
  c.backbone_hidden = 16;
  c.shared_dim = 16;
  c.model_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ff_dim = 16;
  c.seed = o.seed.value_or(0);
  c.variant = o.variants.empty() ? Variant::Full : parse_variant(o.variants.front());
  Model model(c);
  Rng rng = stream_rng(c.seed, 0x6C00u);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix xv(2, c.input_dim);
  for (Index i = 0; i < xv.size(); ++i) xv.data()[i] = n(rng);
  Tensor x(xv);
  const std::vector<int> y{1, 2}, z{0, 1};
  std::vector<std::string> names;
  for (const auto& p : model.params()) names.push_back(p.name);
  GradCheckOptions opt;
  opt.tol = tol;
  const auto report = gradient_check(
      [&](Tape& t) { return compute_loss(t, model.forward(t, x), y, z, c.lambda).total; }, model.tensors(), names, opt);
  std::printf("variant %s: %zu coordinates checked, %zu kinks excluded, max relative error %.3e (%s)\n",
              to_string(c.variant).c_str(), report.checked, report.kinks_excluded, report.max_rel_error,
              report.worst.c_str());
  if (!report.passed) {
    std::ostringstream msg;
    msg << "gradient check failed: max relative error " << report.max_rel_error << " >= " << tol;
    return fail("numeric", msg.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain mixture-of-experts Transformer: training and evaluation harness"};
  app.require_subcommand(1);

  CommonOptions o;
  std::string data_file = "dataset.txt";
  double tol = 1e-4;
  struct Cmd {
    const char* name;
    const char* help;
    ExperimentReport (*runner)(const ExperimentPlan&, const ProgressFn&);
  };
  const Cmd experiments[] = {
      {"lodo", "Leave-one-domain-out accuracy table over seeds", run_lodo},
      {"ablate", "Sub-model ablation: ConvExp, TEExp, TD, Full", run_ablation},
      {"sweep-lambda", "Sensitivity to the loss weight lambda", run_lambda_sweep},
      {"sweep-transformer", "Sensitivity to depth, heads and MLP width", run_transformer_sweep},
      {"select-report", "Compare last-epoch, validation-best and test-best selection", run_selection_report},
  };
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& c : experiments) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    subs.emplace_back(sub, &c);
  }
  auto* gen = app.add_subcommand("gen-data", "Export the synthetic dataset as text");
  add_common(gen, o);
  gen->add_option("--file", data_file, "File name inside --out");
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full loss");
  add_common(gc, o);
  gc->add_option("--tol", tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) return run_experiment(o, cmd->runner);
    }
    if (gen->parsed()) return gen_data(o, data_file);
    if (gc->parsed()) return grad_check(o, tol);
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return fail("usage", "no subcommand");
}
