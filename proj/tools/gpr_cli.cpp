// gpr: command-line front end to the experiment pipeline.
// Exit codes: 0 success, 1 usage error, 2 configuration error, 3 stage failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gpr/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "experiment config (JSON)");
  cmd->add_option("-s,--set", c.overrides, "override a config value, e.g. --set gan.batch_size=8")->take_all();
  cmd->add_option("-o,--output-dir", c.output_dir, "output directory (overrides output_dir)");
  cmd->add_flag("-f,--force", c.force, "re-run stages even when their outputs are current");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

gpr::Pipeline make_pipeline(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (!c.output_dir.empty()) overrides.push_back("output_dir=\"" + c.output_dir + "\"");
  std::optional<std::filesystem::path> path;
  if (!c.config_path.empty()) path = c.config_path;
  gpr::PipelineOptions opts;
  opts.force = c.force;
  if (!c.quiet) opts.log = [](const std::string& line) { std::cerr << line << std::endl; };
  return gpr::Pipeline(gpr::load_config(path, overrides), opts);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative-prior MRI reconstruction experiments"};
  app.require_subcommand(1);
  Common common;
  std::size_t sample_count = 16;
  std::uint64_t sample_seed = 0;

  struct Command {
    const char* name;
    const char* help;
    void (gpr::Pipeline::*stage)();
  };
  const std::vector<Command> commands{
      {"gen-data", "draw the phantom training set and the held-out target", &gpr::Pipeline::gen_data},
      {"train-gan", "train the progressive generator, checkpointing each stage", &gpr::Pipeline::train_gan},
      {"make-mask", "build the k-space sampling mask", &gpr::Pipeline::make_mask},
      {"simulate", "simulate noisy undersampled k-space of the target", &gpr::Pipeline::simulate},
      {"reconstruct", "run every configured reconstruction method", &gpr::Pipeline::reconstruct},
      {"evaluate", "score reconstructions and write the report", &gpr::Pipeline::evaluate},
      {"run", "all stages end to end", &gpr::Pipeline::run},
  };
  std::vector<std::pair<CLI::App*, void (gpr::Pipeline::*)()>> stages;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, common);
    stages.emplace_back(sub, c.stage);
  }
  CLI::App* sample = app.add_subcommand("sample", "write images drawn from the trained generator");
  add_common(sample, common);
  sample->add_option("-n,--count", sample_count, "number of samples");
  sample->add_option("--seed", sample_seed, "latent seed");

  CLI::App* show = app.add_subcommand("show-config", "print the resolved config with defaults");
  add_common(show, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (show->parsed()) {
      std::vector<std::string> overrides = common.overrides;
      std::optional<std::filesystem::path> path;
      if (!common.config_path.empty()) path = common.config_path;
      if (!common.output_dir.empty()) overrides.push_back("output_dir=\"" + common.output_dir + "\"");
      std::cout << gpr::load_config(path, overrides).resolved.dump(2) << "\n";
      return 0;
    }
    gpr::Pipeline pipeline = make_pipeline(common);
    if (sample->parsed()) {
      pipeline.sample(sample_count, sample_seed);
      return 0;
    }
    for (const auto& [sub, stage] : stages) {
      if (sub->parsed()) (pipeline.*stage)();
    }
    return 0;
  } catch (const gpr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const gpr::StageError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
