// Command-line driver for the distillation and architecture search pipeline.
//
//   autoadr <stage> CONFIG [--seed N]
//
// Exit status: 0 on success, 1 when a stage fails, 2 on usage or config errors.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "autoadr/errors.hpp"
#include "autoadr/pipeline.hpp"

namespace {

struct Command {
  std::string name;
  std::optional<autoadr::Stage> stage;  // empty: every stage
  CLI::App* app = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Distill a relevance teacher into a searched twin-tower student."};
  cli.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::vector<Command> commands;
  const std::pair<const char*, const char*> help[] = {
      {"teacher-train", "Generate the corpus and train the cross-encoder teacher"},
      {"teacher-score", "Score the train and validation splits with the frozen teacher"},
      {"supernet-train", "Train the weight-sharing supernet on teacher soft targets"},
      {"search", "Rank budget-feasible candidate genomes with the frozen supernet"},
      {"hp-search", "Tune retraining hyperparameters for the best genome"},
      {"retrain", "Retrain the best genome from scratch with the tuned hyperparameters"},
      {"eval", "Evaluate student and teacher on the test split"},
  };
  for (std::size_t i = 0; i < std::size(help); ++i) {
    commands.push_back({help[i].first, autoadr::kAllStages[i], nullptr});
  }
  commands.push_back({"pipeline", std::nullopt, nullptr});
  for (auto& c : commands) {
    const char* description = c.stage ? help[static_cast<std::size_t>(*c.stage)].second
                                      : "Run every stage, reusing completed ones";
    c.app = cli.add_subcommand(c.name, description);
    c.app->add_option("config", config_path, "Path to the JSON config file")
        ->required()
        ->check(CLI::ExistingFile);
    c.app->add_option("--seed", seed, "Seed for data, initialization and search")->capture_default_str();
  }

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : 2;
  }

  std::optional<autoadr::PipelineRun> run;
  try {
    run.emplace(autoadr::load_config(config_path), seed, autoadr::utc_timestamp());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  run->log = [](const std::string& line) { std::cerr << line << '\n'; };

  try {
    for (const auto& c : commands) {
      if (!c.app->parsed()) continue;
      if (c.stage) run->run(*c.stage);
      else run->run_all();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n'
              << "artifacts of completed stages are kept in " << run->artifact_dir().string() << '\n';
    return 1;
  }
  std::cout << run->report_dir().string() << '\n';
  return 0;
}
