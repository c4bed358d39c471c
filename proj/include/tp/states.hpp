#pragma once

// Labeled one-step-ahead states: for every object token z_i the hidden state
// of z_{i-1} (the state whose next-token prediction produced the object),
// labeled 1 when the object is absent from the trace's reference objects.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tp/trace.hpp"
#include "tp/vocabulary.hpp"

namespace tp {

struct LabeledState {
  std::vector<double> vector;
  int label = 0;  // 1 hallucinated, 0 truthful
  std::string trace_id;
  std::size_t position = 0;  // index of the object token

  bool operator==(const LabeledState&) const = default;
};

/// Collects human-readable notes about skipped or dropped inputs.
struct Diagnostics {
  std::vector<std::string> messages;
  void note(std::string m) { messages.push_back(std::move(m)); }
};

/// Flags tokens whose detokenized text completes a vocabulary entry (longest
/// match; multi-token objects flagged at their final token). Sets is_object
/// and object on the trace and returns the flagged indices in order.
std::vector<std::size_t> identify_object_tokens(Trace& trace, const Vocabulary& vocabulary);

/// Object completed at the very end of the running detokenized text. Shared
/// by trace labeling and online decoding so both agree on objecthood.
std::optional<Vocabulary::Match> object_completed_by(std::string_view detokenized, const Vocabulary& vocabulary);

std::vector<LabeledState> collect_labeled_states(const Trace& trace, int layer,
                                                 const Vocabulary* vocabulary = nullptr,
                                                 Diagnostics* diagnostics = nullptr);

/// Deterministic stratified split: each class is shuffled and divided so both
/// sides keep the overall positive rate; sides are then shuffled.
std::pair<std::vector<LabeledState>, std::vector<LabeledState>> split_states(
    const std::vector<LabeledState>& states, double ratio, std::uint64_t seed);

/// Optional balancing step: randomly drops majority-class states until both
/// classes have equal counts.
std::vector<LabeledState> downsample_majority(const std::vector<LabeledState>& states, std::uint64_t seed);

// tpstates: header line {"format":"tpstates","version":1,"dim":d,"count":n,...}
// then one JSON object per state.
struct StatesFile {
  std::size_t dim = 0;
  std::string config_hash;
  std::vector<LabeledState> states;
};

void write_states(const std::filesystem::path& path, const std::vector<LabeledState>& states,
                  const std::string& config_hash = "");
StatesFile read_states(const std::filesystem::path& path);

}  // namespace tp
