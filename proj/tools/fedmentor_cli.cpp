// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// fedmentor: run, sweep and report federated adapter experiments.
//
//   fedmentor run --config PATH [--seed N] [--rounds R] [--out DIR]
//   fedmentor sweep --config PATH --domain NAME --eps 0.1,0.5,1.0 [--out DIR]
//   fedmentor report DIR [--plot-csv PATH]
//
// Exit codes: 0 success, 2 invalid configuration, 3 runtime failure;
// command-line usage errors use CLI11's codes.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedmentor/fedmentor.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

fedmentor::RunConfig load(const std::string& path,
                          std::optional<std::uint64_t> seed,
                          std::optional<std::size_t> rounds) {
  fedmentor::RunConfig c = fedmentor::load_config(path);
  if (seed) c.seed = *seed;
  if (rounds) {
    if (*rounds < 1) throw fedmentor::ConfigError("--rounds", "must be >= 1");
    c.rounds = *rounds;
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated low-rank adapter training with domain-aware noise"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs", domain, report_dir, plot_csv;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  std::vector<double> eps_values;

  auto* run = app.add_subcommand("run", "Train and write run artifacts");
  run->add_option("--config", config_path, "Config file (JSON)")->required();
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--rounds", rounds, "Override the number of rounds");
  run->add_option("--out", out_dir, "Parent directory for the run directory");

  auto* sw = app.add_subcommand("sweep", "Vary one domain's privacy budget");
  sw->add_option("--config", config_path, "Config file (JSON)")->required();
  sw->add_option("--domain", domain, "Domain whose budget is varied")->required();
  sw->add_option("--eps", eps_values, "Budgets, comma separated")
      ->required()
      ->delimiter(',');
  sw->add_option("--seed", seed, "Override the config seed");
  sw->add_option("--rounds", rounds, "Override the number of rounds");
  sw->add_option("--out", out_dir, "Parent directory for the sweep output");

  auto* rep = app.add_subcommand("report", "Summarize a run directory");
  rep->add_option("dir", report_dir, "Run directory")->required();
  rep->add_option("--plot-csv", plot_csv, "Also write a plot-ready CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = load(config_path, seed, rounds);
      const auto result = fedmentor::run_experiment(cfg);
      const auto dir = fedmentor::make_run_dir(out_dir, cfg.seed);
      fedmentor::write_run_artifacts(dir, result);
      const auto& last = result.records.back();
      std::cout << "rounds: " << result.records.size() << "\n"
                << "final accuracy: "
                << last.utilities.at(fedmentor::kAccuracy) << "\n"
                << "total comm bytes: "
                << result.broadcast_bytes + result.upload_bytes << "\n"
                << "run dir: " << dir.string() << "\n";
    } else if (*sw) {
      const auto cfg = load(config_path, seed, rounds);
      const auto rows = fedmentor::sweep(cfg, domain, eps_values);
      const auto dir = fedmentor::make_run_dir(
          std::filesystem::path(out_dir) / ("sweep_" + domain), cfg.seed);
      std::ostringstream csv;
      fedmentor::write_summary_csv(csv, rows);
      fedmentor::write_text(dir / "sweep.csv", csv.str());
      fedmentor::write_text(dir / "config.json",
                            fedmentor::to_json(cfg).dump(2) + "\n");
      std::cout << csv.str() << "sweep dir: " << dir.string() << "\n";
    } else if (*rep) {
      fedmentor::report(report_dir, std::cout, plot_csv);
    }
  } catch (const fedmentor::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
