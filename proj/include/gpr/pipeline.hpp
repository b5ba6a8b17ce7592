#pragma once

// Experiment pipeline: a JSON config drives gen-data -> train-gan ->
// make-mask -> simulate -> reconstruct -> evaluate, with every output under
// one directory and each stage skipped when its inputs are unchanged.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpr/data.hpp"
#include "gpr/gan.hpp"
#include "gpr/recon.hpp"

namespace gpr {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline const std::vector<std::string> kMethods{"zf", "pls-tv", "csgm", "iagan", "iagan-tv"};
bool is_generative(const std::string& method);

struct ExperimentConfig {
  std::filesystem::path output_dir;
  PhantomSpec phantom;
  std::size_t train_count = 500;
  // Ground truth: a held-out phantom drawn with this seed, or a tensor file.
  std::uint64_t target_seed = 1000;
  std::optional<std::filesystem::path> target_file;
  GanArchitecture architecture;
  TrainConfig training;
  std::uint64_t init_seed = 1;
  double acceleration = 4.0;
  std::size_t calibration = 8;
  std::uint64_t mask_seed = 0;
  double noise_sigma = 0.01;
  std::uint64_t noise_seed = 0;
  std::vector<std::string> methods;
  std::map<std::string, ReconConfig> recon;
  std::map<std::string, std::vector<double>> lambda_grid;
  Json resolved;  // the full document with defaults filled in
};

/// Every key with its default value.
Json default_config();
/// Validates against the schema (unknown keys, types, ranges) and fills defaults.
ExperimentConfig parse_config(const Json& doc);
/// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
void apply_override(Json& doc, const std::string& assignment);
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides);

struct PipelineOptions {
  bool force = false;
  std::function<void(const std::string&)> log;  // progress lines; silent if empty
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig config, PipelineOptions options = {});

  void gen_data();
  void train_gan();
  void make_mask();
  void simulate();
  void reconstruct();
  void evaluate();
  /// All stages in order; GAN training only when a generative method is requested.
  void run();
  /// Writes count samples of the trained generator as PNG and one tensor file.
  void sample(std::size_t count, std::uint64_t seed);

  const ExperimentConfig& config() const noexcept { return config_; }
  std::filesystem::path path(const std::string& relative) const { return config_.output_dir / relative; }
  std::filesystem::path checkpoint_path(std::size_t stage) const;
  std::filesystem::path mask_path() const;

 private:
  bool up_to_date(const std::string& stage, const std::string& key, const std::vector<std::filesystem::path>& outputs);
  void stamp(const std::string& stage, const std::string& key);
  std::string stage_key(const std::string& stage) const;
  void log(const std::string& line) const;
  template <class F>
  void guarded(const std::string& stage, F&& body);

  GeneratorModel load_generator() const;

  ExperimentConfig config_;
  PipelineOptions options_;
  std::set<std::string> completed_;  // stages finished by this instance
};

/// Reads a generator checkpoint archive plus its JSON sidecar.
GeneratorModel load_generator_checkpoint(const std::filesystem::path& archive);

}  // namespace gpr
