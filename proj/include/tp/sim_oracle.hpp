#pragma once

// Oracles for tests and synthetic experiments.
//
// ScriptedOracle replays a prefix -> step table. SyntheticOracle is a toy
// captioner over a fixed image world: every caption is a few sentences of
// filler words with object slots, and the token before each slot decides
// whether the slot is "prone" to hallucination. Prone triggers carry low
// top-1 confidence, and the state feeding a hallucinated object is drawn
// around mu_hall instead of mu_truth. Choosing a lower-ranked trigger escapes
// the prone draw. All randomness is keyed by (seed, image, prefix), so
// re-stepping a prefix after a traceback sees the same world.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tp/decoder.hpp"
#include "tp/rng.hpp"
#include "tp/trace.hpp"
#include "tp/vocabulary.hpp"

namespace tp {

struct ScriptTable {
  std::map<std::vector<TokenId>, OracleStep> steps;
  std::optional<OracleStep> fallback;  // used for prefixes with no entry
};

class ScriptedOracle : public Oracle {
 public:
  explicit ScriptedOracle(ScriptTable table) : table_(std::move(table)) {}
  /// Throws ScriptError naming the step index and prefix when unscripted.
  OracleStep step(std::span<const TokenId> prefix) const override;

 private:
  ScriptTable table_;
};

/// {"steps":[{"prefix":[...],"candidates":[[id,"text",prob],...],"hidden":[...]}],
///  "default":{"candidates":...,"hidden":...}}
ScriptTable script_table_from_json(const std::string& text);
std::string to_json(const ScriptTable& table);

/// Replays a recorded trace: the step at prefix z_<i returns token i's
/// candidates with the layer state of token i-1 (zeros at i = 0).
ScriptTable script_from_trace(const Trace& trace, int layer, std::size_t dim);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  bool operator==(const IntRange&) const = default;
};

struct SynthConfig {
  std::size_t d = 64;
  double gap = 4.0;  // ‖mu_hall − mu_truth‖, mu_truth = 0
  double noise_sigma = 1.0;
  double p_hall = 0.3;
  double p_hall_alt = 0.05;
  Range conf_low{0.15, 0.35};
  Range conf_high{0.6, 0.95};
  IntRange sentences{2, 4};
  IntRange sentence_len{6, 10};  // content tokens before the period
  IntRange object_slots{1, 2};
  int present_objects = 4;
  double p_drop = 0.3;        // re-selected trigger turns the slot into filler
  double p_alt_filler = 0.3;  // lower-ranked candidate at an object slot is a filler word
  std::size_t k = 5;
  int layer = 16;
  std::uint64_t seed = 1;
  std::vector<std::string> objects;  // empty: built-in list
  std::vector<std::string> fillers;  // empty: built-in list

  bool operator==(const SynthConfig&) const = default;
};

/// Throws ConfigError listing every invalid field.
void validate(const SynthConfig& cfg);
std::string to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const std::string& text);

const std::vector<std::string>& default_objects();
const std::vector<std::string>& default_fillers();

/// Vocabulary of the configured objects.
Vocabulary synth_vocabulary(const SynthConfig& cfg);

class SyntheticOracle : public Oracle {
 public:
  SyntheticOracle(const SynthConfig& cfg, std::uint64_t image);

  OracleStep step(std::span<const TokenId> prefix) const override;

  const std::set<std::string>& present() const { return present_; }
  std::size_t max_length() const;
  std::uint64_t image() const { return image_; }
  const std::vector<double>& mu_hall() const { return mu_hall_; }

 private:
  struct Sentence {
    int length = 0;
    std::vector<int> slots;
  };

  OracleStep draw(std::span<const TokenId> prefix, bool* prone) const;
  std::vector<double> hidden(rng::Engine& eng, bool hallucinated) const;
  std::vector<Candidate> fill(rng::Engine& eng, double top1, std::vector<Candidate> picks) const;
  Candidate filler(rng::Engine& eng) const;
  Candidate object(rng::Engine& eng, bool hallucinated) const;

  SynthConfig cfg_;
  std::uint64_t image_;
  std::uint64_t key_;
  std::vector<std::string> objects_;
  std::vector<std::string> fillers_;
  std::set<std::string> present_;
  std::vector<std::size_t> present_idx_, absent_idx_;
  std::vector<Sentence> layout_;
  std::vector<double> mu_hall_;
};

/// Greedy captions for images [first, first + n) with layer states recorded,
/// objects marked and reference objects set to the present objects.
std::vector<Trace> synthetic_corpus(const SynthConfig& cfg, std::size_t n_traces, std::uint64_t first_image = 0);

}  // namespace tp
