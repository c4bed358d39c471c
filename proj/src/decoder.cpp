#include "tp/decoder.hpp"

#include <cmath>
#include <json.hpp>
#include <limits>
#include <set>

#include "tp/comnhallu.hpp"
#include "tp/detector.hpp"
#include "tp/error.hpp"

namespace tp {

namespace {

constexpr double kNoScore = std::numeric_limits<double>::quiet_NaN();

struct Slot {
  TokenRecord rec;
  double score = kNoScore;
  bool flag = false;
};

enum class Mode { kGreedy, kRank, kFallback };
enum class End { kSentence, kEos, kLimit };

class Run {
 public:
  Run(const Oracle& oracle, const Scorer* scorer, const DecodeConfig& cfg, std::size_t step_cap)
      : oracle_(oracle), scorer_(scorer), cfg_(cfg), cap_(step_cap) {}

  DecodeResult greedy() {
    End end;
    do {
      end = generate(Mode::kGreedy);
    } while (end == End::kSentence);
    return finish(end);
  }

  DecodeResult truthprint() {
    const auto n_b = static_cast<std::size_t>(cfg_.n_b);
    result_.counts.assign(n_b + 1, 0);
    std::size_t k = 0;
    std::size_t s = 0;
    std::vector<SentencePass> tried;
    End end;
    for (;;) {
      bumped_.clear();
      end = generate(Mode::kRank);
      const int count = count_flags(s);
      result_.counts[k] = count;
      PassRecord rec = record(false, s, count);

      if (count > 0 && k < n_b) {
        const std::size_t first = first_flag(s);
        std::vector<double> conf;
        for (std::size_t i = 0; i <= first; ++i) conf.push_back(seq_[i].rec.top1_confidence());
        const std::size_t ik = traceback_point(conf, s);
        rec.traceback_index = ik;
        result_.passes.push_back(std::move(rec));
        tried.push_back(capture(s, count, end));

        if (!bumped_.count(ik)) ++rank_at(ik);
        r_.resize(ik + 1);
        truncate(ik);
        ++k;
        ++result_.backtraces;
        result_.counts[k] = 0;
        continue;
      }

      result_.passes.push_back(std::move(rec));
      if (count > 0) {
        tried.push_back(capture(s, count, end));
        end = fallback(s, tried);
      }
      if (end != End::kSentence) break;

      s = seq_.size();
      r_.resize(std::min(r_.size(), s));
      tried.clear();
      if (cfg_.per_sentence_budget) {
        k = 0;
        std::fill(result_.counts.begin(), result_.counts.end(), 0);
      }
      result_.counts[k] = 0;
    }
    return finish(end);
  }

 private:
  struct SentencePass {
    std::vector<Slot> slots;  // positions [s, end)
    int count = 0;
    std::size_t first_flag = 0;
    End end = End::kSentence;
  };

  End fallback(std::size_t s, const std::vector<SentencePass>& tried) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < tried.size(); ++i)
      if (tried[i].count < tried[best].count) best = i;
    const auto& pick = tried[best];

    truncate(s);
    for (std::size_t i = 0; i < pick.first_flag - s; ++i) append(pick.slots[i]);
    End end = generate(Mode::kFallback);
    const int count = count_flags(s);
    result_.passes.push_back(record(true, s, count));

    // Ties go to the fallback pass.
    if (count > pick.count) {
      truncate(s);
      for (const auto& slot : pick.slots) append(slot);
      end = pick.end;
      result_.diagnostics.push_back("fallback pass at " + std::to_string(s) + " kept pass with fewer flags");
    }
    return end;
  }

  SentencePass capture(std::size_t s, int count, End end) const {
    SentencePass p;
    p.slots.assign(seq_.begin() + static_cast<std::ptrdiff_t>(s), seq_.end());
    p.count = count;
    p.first_flag = count > 0 ? first_flag(s) : seq_.size();
    p.end = end;
    return p;
  }

  int count_flags(std::size_t s) const {
    int c = 0;
    for (std::size_t i = s; i < seq_.size(); ++i) c += seq_[i].flag;
    return c;
  }

  std::size_t first_flag(std::size_t s) const {
    std::vector<bool> flags;
    for (std::size_t i = s; i < seq_.size(); ++i) flags.push_back(seq_[i].flag);
    return s + *find_first_hallucination(flags);
  }

  PassRecord record(bool fallback, std::size_t s, int count) {
    PassRecord p;
    p.pass = result_.passes.size();
    p.fallback = fallback;
    p.sentence_start = s;
    p.tokens = ids();
    for (std::size_t i = s; i < seq_.size(); ++i) {
      if (seq_[i].flag) p.flags.push_back(i);
      if (!std::isnan(seq_[i].score)) p.scores.emplace_back(i, seq_[i].score);
    }
    for (std::size_t i = 0; i < seq_.size(); ++i) p.rank_vector.push_back(i < r_.size() ? r_[i] : 0);
    p.count = count;
    return p;
  }

  int& rank_at(std::size_t i) {
    if (r_.size() <= i) r_.resize(i + 1, 0);
    return r_[i];
  }

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    out.reserve(seq_.size());
    for (const auto& s : seq_) out.push_back(s.rec.token_id);
    return out;
  }

  void truncate(std::size_t n) {
    if (n >= seq_.size()) return;
    text_.resize(offsets_[n]);
    seq_.resize(n);
    offsets_.resize(n);
  }

  void append(Slot slot) {
    offsets_.push_back(text_.size());
    text_ += slot.rec.token_text;
    seq_.push_back(std::move(slot));
  }

  std::optional<Vocabulary::Match> object_for(const std::string& token_text) const {
    if (!cfg_.vocabulary) return std::nullopt;
    return object_completed_by(text_ + token_text, *cfg_.vocabulary);
  }

  End generate(Mode mode) {
    for (;;) {
      if (seq_.size() >= cfg_.max_tokens) return End::kLimit;
      if (steps_ >= cap_) {
        result_.diagnostics.push_back("oracle step budget of " + std::to_string(cap_) + " reached");
        return End::kLimit;
      }
      const auto prefix = ids();
      OracleStep step = oracle_.step(prefix);
      ++steps_;
      if (step.candidates.empty()) {
        throw ContractViolation("oracle returned no candidates at step " + std::to_string(seq_.size()));
      }
      const std::size_t i = seq_.size();
      const std::size_t n_cand = step.candidates.size();

      Slot slot;
      std::size_t rank = 0;
      std::optional<Vocabulary::Match> obj;
      if (mode == Mode::kRank) {
        rank = static_cast<std::size_t>(rank_at(i));
        if (rank >= n_cand) {
          result_.diagnostics.push_back("rank-exhausted at position " + std::to_string(i) + ": rank " +
                                        std::to_string(rank) + " clamped to " + std::to_string(n_cand - 1));
          rank = n_cand - 1;
        }
        obj = object_for(step.candidates[rank].token_text);
      } else if (mode == Mode::kFallback) {
        obj = object_for(step.candidates[0].token_text);
        if (obj && scorer_ && n_cand > 1) {
          slot.score = (*scorer_)(step.hidden);
          if (slot.score >= cfg_.tau) {
            rank = 1;
            obj = object_for(step.candidates[1].token_text);
          }
        }
      } else {
        obj = object_for(step.candidates[0].token_text);
      }

      if (obj && scorer_) {
        if (std::isnan(slot.score)) slot.score = (*scorer_)(step.hidden);
        slot.flag = slot.score >= cfg_.tau;
      }
      if (slot.flag && mode == Mode::kRank) {
        ++rank_at(i);
        bumped_.insert(i);
      }

      const Candidate& chosen = step.candidates[rank];
      const bool eos = oracle_.is_terminal(chosen);
      slot.rec.token_id = chosen.token_id;
      slot.rec.token_text = chosen.token_text;
      slot.rec.candidates = std::move(step.candidates);
      slot.rec.is_object = obj.has_value();
      if (obj) slot.rec.object = obj->canonical;
      slot.rec.is_sentence_end = eos || is_sentence_end_text(chosen.token_text);
      const bool sentence_end = slot.rec.is_sentence_end;
      append(std::move(slot));
      if (eos) return End::kEos;
      if (sentence_end) return End::kSentence;
    }
  }

  DecodeResult finish(End end) {
    for (auto& s : seq_) result_.trace.tokens.push_back(std::move(s.rec));
    const bool closed = !result_.trace.tokens.empty() && result_.trace.tokens.back().is_sentence_end;
    result_.trace.truncated = end == End::kLimit && !closed;
    result_.oracle_steps = steps_;
    return std::move(result_);
  }

  const Oracle& oracle_;
  const Scorer* scorer_;
  const DecodeConfig& cfg_;
  std::size_t cap_;
  std::size_t steps_ = 0;
  std::vector<Slot> seq_;
  std::vector<std::size_t> offsets_;
  std::string text_;
  std::vector<int> r_;
  std::set<std::size_t> bumped_;
  DecodeResult result_;
};

}  // namespace

Scorer make_scorer(const DetectorModel& detector, const AlignmentBundle* bundle) {
  if (bundle) {
    return [&detector, bundle](std::span<const double> h) {
      return detector_forward(detector, project_state(h, Domain::kSource, *bundle));
    };
  }
  return [&detector](std::span<const double> h) { return detector_forward(detector, h); };
}

bool detect_step(const Scorer& scorer, std::span<const double> hidden, bool next_token_is_object, double tau) {
  return next_token_is_object && scorer(hidden) >= tau;
}

bool detect_step(const DetectorModel& detector, const AlignmentBundle* bundle, std::span<const double> hidden,
                 bool next_token_is_object, double tau) {
  return detect_step(make_scorer(detector, bundle), hidden, next_token_is_object, tau);
}

std::size_t traceback_point(std::span<const double> confidences, std::size_t sentence_start) {
  if (sentence_start >= confidences.size()) throw ContractViolation("traceback_point: empty sentence range");
  std::size_t best = sentence_start;
  for (std::size_t i = sentence_start + 1; i < confidences.size(); ++i)
    if (confidences[i] < confidences[best]) best = i;
  return best;
}

std::optional<std::size_t> find_first_hallucination(const std::vector<bool>& flags) {
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) return i;
  return std::nullopt;
}

void validate(const DecodeConfig& c) {
  if (!(c.tau > 0.0 && c.tau < 1.0)) throw ConfigError("decode: tau must lie in (0, 1)");
  if (c.n_b < 0) throw ConfigError("decode: n_b must be non-negative");
  if (c.max_tokens < 1) throw ConfigError("decode: max_tokens must be at least 1");
}

std::vector<TokenId> DecodeResult::token_ids() const {
  std::vector<TokenId> out;
  for (const auto& t : trace.tokens) out.push_back(t.token_id);
  return out;
}

std::string DecodeResult::text() const {
  std::string out;
  for (const auto& t : trace.tokens) out += t.token_text;
  return out;
}

DecodeResult decode_greedy(const Oracle& oracle, const DecodeConfig& config) {
  validate(config);
  return Run(oracle, nullptr, config, std::numeric_limits<std::size_t>::max()).greedy();
}

DecodeResult decode_truthprint(const Oracle& oracle, const Scorer& scorer, const DecodeConfig& config) {
  validate(config);
  const std::size_t cap = (static_cast<std::size_t>(config.n_b) + 2) * config.max_tokens;
  return Run(oracle, &scorer, config, cap).truthprint();
}

std::string pass_records_jsonl(const std::vector<PassRecord>& passes) {
  std::string out;
  for (const auto& p : passes) {
    nlohmann::ordered_json j;
    j["pass"] = p.pass;
    j["fallback"] = p.fallback;
    j["sentence_start"] = p.sentence_start;
    j["tokens"] = p.tokens;
    j["flags"] = p.flags;
    auto scores = nlohmann::ordered_json::array();
    for (const auto& [i, s] : p.scores) scores.push_back({i, s});
    j["scores"] = scores;
    j["traceback_index"] = p.traceback_index ? nlohmann::ordered_json(*p.traceback_index) : nlohmann::ordered_json();
    j["rank_vector"] = p.rank_vector;
    j["count"] = p.count;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace tp
