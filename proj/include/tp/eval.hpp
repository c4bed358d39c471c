#pragma once

// Caption-level hallucination metrics.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tp/states.hpp"
#include "tp/trace.hpp"
#include "tp/vocabulary.hpp"

namespace tp {

struct ChairResult {
  double chair_s = 0.0;  // captions with a hallucinated object / captions
  double chair_i = 0.0;  // hallucinated mentions / mentions
  std::size_t n_sentences = 0;
  std::size_t n_hall_sentences = 0;
  std::size_t n_objects = 0;
  std::size_t n_hall_objects = 0;

  bool operator==(const ChairResult&) const = default;
};

/// Each caption is the list of canonical objects it mentions (repeats count
/// as separate mentions). Throws UndefinedMetricError for zero captions or
/// zero mentions, ContractViolation for unequal lengths.
ChairResult chair_metrics(const std::vector<std::vector<std::string>>& captions,
                          const std::vector<std::set<std::string>>& references);

/// Object mentions of a marked trace, in order.
std::vector<std::string> caption_objects(const Trace& trace);

/// Reference objects canonicalized through `vocabulary` (lowercased without one).
std::set<std::string> canonical_references(const Trace& trace, const Vocabulary* vocabulary = nullptr);

ChairResult chair_for_traces(const std::vector<Trace>& traces, const Vocabulary* vocabulary = nullptr);

struct PmcStats {
  double mean_pmc_hall = 0.0;
  double mean_pmc_truth = 0.0;
  std::size_t n_hall = 0;
  std::size_t n_truth = 0;
};

/// Minimum top-1 confidence over tokens strictly before `position` in its
/// sentence; nullopt at a sentence start.
std::optional<double> preceding_min_confidence(const Trace& trace, std::size_t position);

/// PMC of every marked object, averaged per label (hallucinated = absent from
/// the references). Sentence-initial objects are skipped with a diagnostic.
/// Throws UndefinedMetricError when either class is empty.
PmcStats pmc_stats(const std::vector<Trace>& traces, const Vocabulary* vocabulary = nullptr,
                   Diagnostics* diagnostics = nullptr);

struct PrecisionF {
  double precision = 0.0;
  double recall = 0.0;
  double f_beta = 0.0;
};

PrecisionF precision_fbeta(std::size_t tp, std::size_t fp, std::size_t fn, double beta = 0.1);

/// 100 − (CHAIR_S% + CHAIR_I%)/2.
double truthfulness_score(const ChairResult& chair);

struct ReportSection {
  std::string name;
  ChairResult chair;
  std::optional<PmcStats> pmc;
  std::map<std::string, double> extra;
};

/// Stable-key JSON report; fractions plus percent renderings.
std::string report_json(const std::vector<ReportSection>& sections);
std::string report_text(const std::vector<ReportSection>& sections);

}  // namespace tp
