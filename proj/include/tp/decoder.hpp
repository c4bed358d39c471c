#pragma once

// Greedy and TruthPrInt decoding over an abstract next-token oracle.
//
// TruthPrInt generates one sentence at a time. Each object token is scored
// on the hidden state that produced it; a score >= tau flags the token. A
// sentence with flags is truncated at the lowest-confidence position between
// the sentence start and the first flag, and regenerated with a different
// candidate there. Once the traceback budget n_b is spent, a fallback pass
// takes the least-flagged pass, cuts it at its first flag and regenerates it
// with the second candidate wherever the first one would be flagged.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tp/trace.hpp"
#include "tp/vocabulary.hpp"

namespace tp {

class DetectorModel;
struct AlignmentBundle;

inline constexpr std::string_view kEosText = "</s>";

struct OracleStep {
  std::vector<Candidate> candidates;  // prob non-increasing
  std::vector<double> hidden;         // state whose next-token prediction this step realizes
};

/// Deterministic next-token source: the same prefix always yields the same
/// step. The prompt/image context belongs to the oracle instance.
class Oracle {
 public:
  virtual ~Oracle() = default;
  virtual OracleStep step(std::span<const TokenId> prefix) const = 0;
  virtual bool is_terminal(const Candidate& token) const { return token.token_text == kEosText; }
};

/// Hidden state -> detector score in (0, 1).
using Scorer = std::function<double(std::span<const double>)>;

/// Scores source-domain states through `bundle` when given. The model and
/// bundle must outlive the scorer.
Scorer make_scorer(const DetectorModel& detector, const AlignmentBundle* bundle = nullptr);

/// True iff the next token is an object and its score reaches tau.
bool detect_step(const Scorer& scorer, std::span<const double> hidden, bool next_token_is_object, double tau);
bool detect_step(const DetectorModel& detector, const AlignmentBundle* bundle, std::span<const double> hidden,
                 bool next_token_is_object, double tau);

/// argmin of confidences over [sentence_start, size); earliest index on ties.
std::size_t traceback_point(std::span<const double> confidences, std::size_t sentence_start);

std::optional<std::size_t> find_first_hallucination(const std::vector<bool>& flags);

struct DecodeConfig {
  double tau = 0.4;
  int n_b = 5;
  std::size_t max_tokens = 64;
  int layer = 16;
  std::size_t k_candidates = 5;
  const Vocabulary* vocabulary = nullptr;
  // false: one traceback budget for the whole caption
  bool per_sentence_budget = false;
};

void validate(const DecodeConfig& config);

struct PassRecord {
  std::size_t pass = 0;
  bool fallback = false;
  std::size_t sentence_start = 0;
  std::vector<TokenId> tokens;                              // whole sequence after the pass
  std::vector<std::size_t> flags;                           // flagged positions in this sentence
  std::vector<std::pair<std::size_t, double>> scores;       // scored positions in this sentence
  std::optional<std::size_t> traceback_index;
  std::vector<int> rank_vector;
  int count = 0;
};

struct DecodeResult {
  Trace trace;  // tokens with candidates and object marks; no hidden states
  std::vector<PassRecord> passes;
  std::vector<int> counts;  // c, length n_b + 1
  int backtraces = 0;
  std::size_t oracle_steps = 0;
  std::vector<std::string> diagnostics;

  std::vector<TokenId> token_ids() const;
  std::string text() const;
};

DecodeResult decode_greedy(const Oracle& oracle, const DecodeConfig& config);
DecodeResult decode_truthprint(const Oracle& oracle, const Scorer& scorer, const DecodeConfig& config);

/// One JSON object per line: {pass, tokens, flags, scores, traceback_index,
/// rank_vector, count, fallback, sentence_start}.
std::string pass_records_jsonl(const std::vector<PassRecord>& passes);

}  // namespace tp
