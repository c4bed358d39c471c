#pragma once

// Command-line stages: collect, train, calibrate, align, decode, eval, e2e.
// Each stage reads artifacts named in the config, writes its own artifact
// plus "<artifact>.manifest.json", and reports progress on `log`.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tp/sim_oracle.hpp"

namespace tp {

struct PipelineConfig {
  double tau = 0.4;
  std::size_t d_prime = 64;
  int layer = 16;
  int n_b = 5;
  std::size_t k_candidates = 5;
  std::size_t max_tokens = 64;
  bool per_sentence_budget = false;
  std::uint64_t seed = 0;
  double split = 0.8;
  std::vector<double> alphas{0.01, 0.05, 0.1};
  int epochs = 30;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  bool downsample = false;

  std::string mode = "truthprint";  // greedy | truthprint
  std::string oracle = "synthetic";  // synthetic | script | trace-replay
  std::size_t images = 500;
  std::uint64_t first_image = 1000000;
  std::size_t train_images = 1000;
  SynthConfig synth;

  std::string vocab;
  std::string traces;
  std::string states;
  std::string detector;
  std::string bundle;
  std::string source_states;
  std::string target_states;
  std::string source_anchors;
  std::string target_anchors;
  std::string script;
  std::string references;
  std::string out;
};

/// Throws ConfigError listing every offending key.
void validate(const PipelineConfig& cfg);
/// Unknown keys and type mismatches are reported together.
PipelineConfig pipeline_config_from_json(const std::string& text);
std::string to_json(const PipelineConfig& cfg);
/// 16 hex digits of FNV-1a over the canonical JSON form.
std::string config_hash(const PipelineConfig& cfg);

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitMissing = 3, kExitRuntime = 4 };

/// Runs one stage and maps failures to exit codes, printing the error to `err`.
int run_stage(const std::string& stage, const PipelineConfig& cfg, std::ostream& log, std::ostream& err);

const std::vector<std::string>& stage_names();

}  // namespace tp
