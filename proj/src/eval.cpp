#include "tp/eval.hpp"

#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "tp/error.hpp"

namespace tp {

ChairResult chair_metrics(const std::vector<std::vector<std::string>>& captions,
                          const std::vector<std::set<std::string>>& references) {
  if (captions.size() != references.size()) throw ContractViolation("chair: captions and references differ in length");
  if (captions.empty()) throw UndefinedMetricError("chair: no captions");
  ChairResult r;
  r.n_sentences = captions.size();
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::size_t hall = 0;
    for (const auto& o : captions[i]) hall += !references[i].count(o);
    r.n_objects += captions[i].size();
    r.n_hall_objects += hall;
    r.n_hall_sentences += hall > 0;
  }
  if (r.n_objects == 0) throw UndefinedMetricError("chair: no object mentions");
  r.chair_s = static_cast<double>(r.n_hall_sentences) / static_cast<double>(r.n_sentences);
  r.chair_i = static_cast<double>(r.n_hall_objects) / static_cast<double>(r.n_objects);
  return r;
}

std::vector<std::string> caption_objects(const Trace& trace) {
  std::vector<std::string> out;
  for (const auto& t : trace.tokens)
    if (t.is_object) out.push_back(t.object);
  return out;
}

std::set<std::string> canonical_references(const Trace& trace, const Vocabulary* vocabulary) {
  std::set<std::string> out;
  for (const auto& r : trace.reference_objects) out.insert(vocabulary ? vocabulary->canonicalize(r) : ascii_lower(r));
  return out;
}

ChairResult chair_for_traces(const std::vector<Trace>& traces, const Vocabulary* vocabulary) {
  std::vector<std::vector<std::string>> captions;
  std::vector<std::set<std::string>> refs;
  for (const auto& t : traces) {
    captions.push_back(caption_objects(t));
    refs.push_back(canonical_references(t, vocabulary));
  }
  return chair_metrics(captions, refs);
}

std::optional<double> preceding_min_confidence(const Trace& trace, std::size_t position) {
  if (position >= trace.tokens.size()) throw ContractViolation("pmc: position out of range");
  std::optional<double> best;
  for (std::size_t i = position; i-- > 0;) {
    if (trace.tokens[i].is_sentence_end) break;
    const double c = trace.tokens[i].top1_confidence();
    if (!best || c < *best) best = c;
  }
  return best;
}

PmcStats pmc_stats(const std::vector<Trace>& traces, const Vocabulary* vocabulary, Diagnostics* diagnostics) {
  PmcStats s;
  double sum_h = 0.0, sum_t = 0.0;
  std::size_t skipped = 0;
  for (const auto& t : traces) {
    const auto refs = canonical_references(t, vocabulary);
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
      if (!t.tokens[i].is_object) continue;
      const auto pmc = preceding_min_confidence(t, i);
      if (!pmc) {
        ++skipped;
        continue;
      }
      if (refs.count(t.tokens[i].object)) {
        sum_t += *pmc;
        ++s.n_truth;
      } else {
        sum_h += *pmc;
        ++s.n_hall;
      }
    }
  }
  if (skipped && diagnostics) {
    diagnostics->note("pmc: skipped " + std::to_string(skipped) + " sentence-initial object(s)");
  }
  if (s.n_hall == 0 || s.n_truth == 0) throw UndefinedMetricError("pmc: need both hallucinated and truthful objects");
  s.mean_pmc_hall = sum_h / static_cast<double>(s.n_hall);
  s.mean_pmc_truth = sum_t / static_cast<double>(s.n_truth);
  return s;
}

PrecisionF precision_fbeta(std::size_t tp, std::size_t fp, std::size_t fn, double beta) {
  if (tp + fp == 0 || tp + fn == 0) throw UndefinedMetricError("precision/recall: zero denominator");
  PrecisionF r;
  r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double b2 = beta * beta;
  const double den = b2 * r.precision + r.recall;
  r.f_beta = den == 0.0 ? 0.0 : (1.0 + b2) * r.precision * r.recall / den;
  return r;
}

double truthfulness_score(const ChairResult& c) { return 100.0 - (100.0 * c.chair_s + 100.0 * c.chair_i) / 2.0; }

namespace {

nlohmann::ordered_json section_json(const ReportSection& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["n_captions"] = s.chair.n_sentences;
  j["n_hall_captions"] = s.chair.n_hall_sentences;
  j["n_objects"] = s.chair.n_objects;
  j["n_hall_objects"] = s.chair.n_hall_objects;
  j["chair_s"] = s.chair.chair_s;
  j["chair_i"] = s.chair.chair_i;
  j["chair_s_percent"] = 100.0 * s.chair.chair_s;
  j["chair_i_percent"] = 100.0 * s.chair.chair_i;
  j["truthfulness"] = truthfulness_score(s.chair);
  if (s.pmc) {
    j["pmc_hall"] = s.pmc->mean_pmc_hall;
    j["pmc_truth"] = s.pmc->mean_pmc_truth;
    j["pmc_n_hall"] = s.pmc->n_hall;
    j["pmc_n_truth"] = s.pmc->n_truth;
  }
  for (const auto& [k, v] : s.extra) j[k] = v;
  return j;
}

}  // namespace

std::string report_json(const std::vector<ReportSection>& sections) {
  nlohmann::ordered_json j;
  j["format"] = "tpreport";
  j["version"] = 1;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : sections) arr.push_back(section_json(s));
  j["sections"] = arr;
  return j.dump(2) + "\n";
}

std::string report_text(const std::vector<ReportSection>& sections) {
  std::string out;
  char buf[256];
  for (const auto& s : sections) {
    std::snprintf(buf, sizeof buf, "%-12s CHAIR_S %6.2f%%  CHAIR_I %6.2f%%  truthfulness %6.2f  (%zu captions, %zu objects)\n",
                  s.name.c_str(), 100.0 * s.chair.chair_s, 100.0 * s.chair.chair_i, truthfulness_score(s.chair),
                  s.chair.n_sentences, s.chair.n_objects);
    out += buf;
    if (s.pmc) {
      std::snprintf(buf, sizeof buf, "%-12s PMC hallucinated %.3f (n=%zu)  truthful %.3f (n=%zu)\n", "",
                    s.pmc->mean_pmc_hall, s.pmc->n_hall, s.pmc->mean_pmc_truth, s.pmc->n_truth);
      out += buf;
    }
    for (const auto& [k, v] : s.extra) {
      std::snprintf(buf, sizeof buf, "%-12s %s %g\n", "", k.c_str(), v);
      out += buf;
    }
  }
  return out;
}

}  // namespace tp
