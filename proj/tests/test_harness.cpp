#include "doctest.h"

#include "d2sdk/errors.hpp"
#include "d2sdk/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace d2sdk;

namespace {

ExperimentPlan tiny_plan() {
  ExperimentPlan p;
  p.name = "tiny";
  p.dataset.n_per_class = 8;
  p.dataset.seed = 2;
  p.variants = {Variant::ERM, Variant::Full};
  p.seeds = {0, 1};
  p.optim.epochs = 2;
  p.optim.lr0 = 0.01;
  p.optim.batch_size = 16;
  p.model.backbone_hidden = 16;
  p.model.shared_dim = 16;
  p.model.model_dim = 8;
  p.model.num_layers = 1;
  p.model.ff_dim = 16;
  p.lambda_grid = {0.5, 0.1};
  p.transformer_grid = {{1, 2}, {1, 2}, {8}};
  return p;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("d2sdk_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("plan JSON round-trip, defaults and paper-faithful switch") {
  ExperimentPlan p = tiny_plan();
  p.dataset_path = "data.txt";
  CHECK(nlohmann::json(p).get<ExperimentPlan>() == p);

  ExperimentPlan d = nlohmann::json::object().get<ExperimentPlan>();
  CHECK(d == ExperimentPlan{});
  CHECK(d.seeds.size() == 5);
  CHECK(d.optim.epochs == 40);
  CHECK(d.optim.lr0 == 0.001);
  CHECK(d.optim.batch_size == 32);
  CHECK(d.lambda_grid == std::vector<double>{0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01});
  make_paper_faithful(d);
  CHECK(d.seeds.size() == 10);
  CHECK(d.optim.epochs == 80);

  auto partial = nlohmann::json::parse(R"({"optim": {"lr0": 0.01}, "variants": ["ERM", "TD"]})").get<ExperimentPlan>();
  CHECK(partial.optim.epochs == 40);
  CHECK(partial.optim.lr0 == 0.01);
  CHECK(partial.variants == std::vector<Variant>{Variant::ERM, Variant::TD});
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"variants": ["Nope"]})").get<ExperimentPlan>(), ConfigError);

  auto dir = scratch_dir("plan");
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "plan.json");
    f << nlohmann::json(tiny_plan()).dump(2);
  }
  CHECK(load_plan((dir / "plan.json").string()) == tiny_plan());
  CHECK_THROWS_AS(load_plan((dir / "missing.json").string()), IoError);
}

TEST_CASE("invalid plans fail before training and before any file is written") {
  auto dir = scratch_dir("invalid");
  ExperimentPlan p = tiny_plan();
  p.seeds.clear();
  CHECK_THROWS_AS(run_lodo(p), ConfigError);
  p = tiny_plan();
  p.held_out = {7};
  CHECK_THROWS_AS(run_lodo(p), IndexError);
  p = tiny_plan();
  p.model.num_heads = 3;
  CHECK_THROWS_AS(run_lodo(p), ConfigError);
  p = tiny_plan();
  p.variants.clear();
  CHECK_THROWS_AS(run_lodo(p), ConfigError);
  CHECK_THROWS_AS(emit_report(ExperimentReport{}, dir.string()), ContractError);
  CHECK_FALSE(std::filesystem::exists(dir));
}

TEST_CASE("lodo report: table shape, Ave., policy ordering and target hygiene") {
  const ExperimentPlan plan = tiny_plan();
  ExperimentReport r = run_lodo(plan);
  CHECK(r.kind == "lodo");
  CHECK(r.rows == std::vector<std::string>{"ERM", "Full"});
  CHECK(r.domains == std::vector<int>{0, 1, 2, 3});
  REQUIRE(r.runs.size() == 2 * 4 * 2);
  for (std::size_t i = 1; i < r.runs.size(); ++i) {
    const auto& a = r.runs[i - 1];
    const auto& b = r.runs[i];
    const auto ra = std::find(r.rows.begin(), r.rows.end(), a.row) - r.rows.begin();
    const auto rb = std::find(r.rows.begin(), r.rows.end(), b.row) - r.rows.begin();
    CHECK(std::tie(ra, a.held_out, a.seed) < std::tie(rb, b.held_out, b.seed));
  }
  for (const auto& run : r.runs) {
    CHECK(run.targets == std::vector<std::string>{"held-out", "mixed"});
    CHECK(run.epochs.size() == 2);
    for (std::size_t t = 0; t < 2; ++t) {
      const double tb = run.accuracy.at("test-best")[t];
      CHECK(tb >= run.accuracy.at("last-epoch")[t]);
      CHECK(tb >= run.accuracy.at("validation-best")[t]);
    }
    CHECK(run.target_reads.count("training") == 0);
    CHECK(run.target_reads.count("last-epoch") == 0);
    CHECK(run.target_reads.count("validation-best") == 0);
  }

  Table t = aggregate(r, SelectionPolicy::LastEpoch);
  CHECK(t.columns == std::vector<std::string>{"domain-0", "domain-1", "domain-2", "domain-3", "Ave."});
  CHECK(t.target == "held-out");
  for (const auto& row : t.rows) {
    double sum = 0;
    for (const auto& c : row.cells) {
      CHECK(c.n == 2);
      sum += c.mean;
    }
    CHECK(std::abs(row.ave.mean - sum / 4.0) < 1e-12);
  }
  CHECK(aggregate(r, SelectionPolicy::TestBest, 1).target == "mixed");
}

TEST_CASE("reports are reproducible, thread-count independent and round-trip") {
  ExperimentPlan plan = tiny_plan();
  plan.held_out = {1, 3};
  ExperimentReport a = run_lodo(plan);
  ExperimentReport b = run_lodo(plan);
  const std::string bytes = report_to_json(a).dump(1);
  CHECK(report_to_json(b).dump(1) == bytes);
  plan.jobs = 3;
  ExperimentReport c = run_lodo(plan);
  c.plan = a.plan;  // the job count is part of the echoed plan
  CHECK(report_to_json(c).dump(1) == bytes);

  ExperimentReport back = report_from_json(nlohmann::json::parse(bytes));
  CHECK(back == a);
  CHECK(report_to_json(back).dump(1) == bytes);
  CHECK_THROWS_AS(report_from_json(nlohmann::json::parse(R"({"format":"x","version":1})")), IoError);
}

TEST_CASE("text-table means match a recomputation from the structured records") {
  ExperimentPlan plan = tiny_plan();
  ExperimentReport r = run_lodo(plan);
  auto dir = scratch_dir("emit");
  auto paths = emit_report(r, dir.string());
  REQUIRE(paths.size() == 2);
  std::ifstream jf(paths[1]);
  ExperimentReport structured = report_from_json(nlohmann::json::parse(jf));
  CHECK(structured == r);

  std::ifstream tf(paths[0]);
  int checked = 0;
  for (std::string line; std::getline(tf, line);) {
    if (line.rfind("mean ", 0) != 0) continue;
    std::istringstream s(line);
    std::string tag, target, policy, method, column;
    double value;
    s >> tag >> target >> policy >> method >> column >> value;
    const std::size_t ti = target == "held-out" ? 0 : 1;
    std::vector<double> domain_means;
    for (int d : structured.domains) {
      double sum = 0;
      int n = 0;
      for (const auto& run : structured.runs) {
        if (run.row == method && run.held_out == d) {
          sum += run.accuracy.at(policy)[ti];
          ++n;
        }
      }
      domain_means.push_back(sum / n);
    }
    double expected;
    if (column == "Ave.") {
      expected = 0;
      for (double m : domain_means) expected += m / static_cast<double>(domain_means.size());
    } else {
      expected = domain_means[std::stoi(column.substr(7))];
    }
    CHECK(std::abs(value - expected) < 1e-12);
    ++checked;
  }
  CHECK(checked == 2 * 3 * 2 * 5);
}

TEST_CASE("ablation, sweeps and selection report rows") {
  ExperimentPlan plan = tiny_plan();
  plan.held_out = {0};
  plan.seeds = {3};
  plan.optim.epochs = 1;

  auto abl = run_ablation(plan);
  CHECK(abl.rows == std::vector<std::string>{"ConvExp", "TEExp", "TD", "Full"});
  CHECK(abl.runs.size() == 4);

  auto lam = run_lambda_sweep(plan);
  CHECK(lam.rows == std::vector<std::string>{"lambda=0.5", "lambda=0.1"});
  CHECK(lam.runs[0].model.at("lambda").get<double>() == 0.5);
  CHECK(lam.runs[0].variant == Variant::ERM);  // first listed variant is swept

  plan.variants = {Variant::Full};
  auto tr = run_transformer_sweep(plan);
  CHECK(tr.rows == std::vector<std::string>{"L=1", "L=2", "heads=1", "heads=2", "d_ff=8"});
  CHECK(tr.runs[1].model.at("L").get<int>() == 2);
  CHECK(tr.runs[2].model.at("num_heads").get<int>() == 1);
  CHECK(tr.runs[4].model.at("d_ff").get<int>() == 8);

  plan.monitor_targets = false;
  auto sel = run_selection_report(plan);
  CHECK(sel.runs[0].accuracy.count("test-best") == 1);
  auto gaps = selection_gaps(sel);
  CHECK(gaps.at("Full").n == 1);
  CHECK(gaps.at("Full").min >= 0.0);
  CHECK(format_report_text(sel).find("test-best minus last-epoch") != std::string::npos);
}
