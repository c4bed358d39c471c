#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "decoder_scripts.hpp"
#include "test_support.hpp"
#include "tp/error.hpp"
#include "tp/eval.hpp"
#include "tp/sim_oracle.hpp"
#include "tp/states.hpp"

using namespace tp;
using tp::testing::script_step;

namespace {

SynthConfig small(std::uint64_t seed = 1, std::size_t d = 8) {
  SynthConfig c;
  c.seed = seed;
  c.d = d;
  return c;
}

std::vector<LabeledState> labeled(const std::vector<Trace>& traces, const SynthConfig& cfg) {
  const auto vocab = synth_vocabulary(cfg);
  std::vector<LabeledState> out;
  for (const auto& t : traces) {
    auto s = collect_labeled_states(t, cfg.layer, &vocab);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace

TEST_CASE("scripted oracle lookups") {
  ScriptTable t;
  t.steps[{}] = script_step({{1, " a", 0.6}, {2, " b", 0.4}}, 0.25);
  t.steps[{1}] = script_step({{3, ".", 1.0}, {4, "!", 0.0}});
  ScriptedOracle o(t);
  const std::vector<TokenId> empty;
  const auto first = o.step(empty);
  CHECK(first.candidates.front().token_text == " a");
  CHECK(first.hidden == std::vector<double>{0.25});
  const std::vector<TokenId> one{1};
  CHECK(o.step(one).candidates == o.step(one).candidates);

  const std::vector<TokenId> unknown{7, 8};
  try {
    o.step(unknown);
    FAIL("expected ScriptError");
  } catch (const ScriptError& e) {
    CHECK(std::string(e.what()).find("[7,8]") != std::string::npos);
  }

  t.fallback = script_step({{9, "</s>", 1.0}, {4, "!", 0.0}});
  CHECK(ScriptedOracle(t).step(unknown).candidates.front().token_id == 9);
}

TEST_CASE("synth config validation lists every problem") {
  auto c = small();
  c.p_hall_alt = 0.5;
  c.conf_low = {0.2, 0.7};
  c.k = 1;
  try {
    validate(c);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("p_hall_alt") != std::string::npos);
    CHECK(msg.find("conf_low must lie strictly below") != std::string::npos);
    CHECK(msg.find("k must") != std::string::npos);
  }
  auto zero = small();
  zero.p_hall = zero.p_hall_alt = 0.0;
  CHECK_NOTHROW(validate(zero));
  auto dup = small();
  dup.objects = {"dog", "a"};
  CHECK_THROWS_AS(validate(dup), ConfigError);
}

TEST_CASE("synth config JSON round trip and key checks") {
  auto c = small(9, 12);
  c.conf_low = {0.1, 0.2};
  c.objects = {"dog", "cat", "cow", "fox", "owl", "bee"};
  CHECK(synth_config_from_json(to_json(c)) == c);
  CHECK(synth_config_from_json("{}") == SynthConfig{});
  try {
    synth_config_from_json(R"({"gap": 2, "colour": 1, "k": "five"})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("colour: unknown key") != std::string::npos);
    CHECK(std::string(e.what()).find("k: wrong type") != std::string::npos);
  }
}

TEST_CASE("synthetic steps are replay stable") {
  const auto cfg = small(3);
  const SyntheticOracle a(cfg, 17), b(cfg, 17);
  rng::Engine eng(5);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<TokenId> prefix;
    const auto depth = eng.below(30);
    for (std::uint64_t i = 0; i < depth; ++i) {
      const auto step = a.step(prefix);
      prefix.push_back(step.candidates[eng.below(step.candidates.size())].token_id);
    }
    const auto s1 = a.step(prefix), s2 = a.step(prefix), s3 = b.step(prefix);
    CHECK(s1.candidates == s2.candidates);
    CHECK(s1.hidden == s2.hidden);
    CHECK(s1.candidates == s3.candidates);
    CHECK(s1.hidden == s3.hidden);
    REQUIRE(s1.candidates.size() == cfg.k);
    for (std::size_t r = 1; r < s1.candidates.size(); ++r) {
      CHECK(s1.candidates[r].prob <= s1.candidates[r - 1].prob);
      CHECK(s1.candidates[r].token_id != s1.candidates[0].token_id);
    }
  }
}

TEST_CASE("p_hall = 0 gives no hallucinations") {
  auto cfg = small(2);
  cfg.p_hall = cfg.p_hall_alt = 0.0;
  const auto traces = synthetic_corpus(cfg, 200);
  for (const auto& s : labeled(traces, cfg)) CHECK(s.label == 0);
  const auto vocab = synth_vocabulary(cfg);
  const auto chair = chair_for_traces(traces, &vocab);
  CHECK(chair.chair_s == 0.0);
  CHECK(chair.chair_i == 0.0);
}

TEST_CASE("planted hallucination rate over 10k slots") {
  const auto cfg = small(4);
  const auto states = labeled(synthetic_corpus(cfg, 2400), cfg);
  REQUIRE(states.size() >= 10000);
  double pos = 0;
  for (const auto& s : states) pos += s.label;
  CHECK(std::abs(pos / static_cast<double>(states.size()) - 0.30) <= 0.02);
}

TEST_CASE("PMC gap reflects the confidence ranges") {
  const auto cfg = small(6);
  const auto traces = synthetic_corpus(cfg, 1000);
  const auto vocab = synth_vocabulary(cfg);
  const auto p = pmc_stats(traces, &vocab);
  const double want = ((cfg.conf_high.lo + cfg.conf_high.hi) / 2 - (cfg.conf_low.lo + cfg.conf_low.hi) / 2) / 2;
  MESSAGE("PMC hallucinated " << p.mean_pmc_hall << ", truthful " << p.mean_pmc_truth);
  CHECK(p.mean_pmc_hall < p.mean_pmc_truth);
  CHECK(p.mean_pmc_truth - p.mean_pmc_hall >= want);
}

TEST_CASE("ground truth, confidence and hidden state agree") {
  const auto cfg = small(7, 16);
  const auto traces = synthetic_corpus(cfg, 1500);
  const SyntheticOracle probe(cfg, 0);
  const auto& mu = probe.mu_hall();
  std::vector<double> truth_sum(cfg.d, 0.0);
  double hall_proj = 0.0, truth_proj = 0.0;
  std::size_t n_hall = 0, n_truth = 0;
  for (const auto& t : traces) {
    const auto refs = canonical_references(t);
    for (std::size_t i = 1; i < t.tokens.size(); ++i) {
      if (!t.tokens[i].is_object) continue;
      const bool hall = !refs.count(t.tokens[i].object);
      const double conf = t.tokens[i - 1].top1_confidence();
      const auto& range = hall ? cfg.conf_low : cfg.conf_high;
      CHECK(conf >= range.lo);
      CHECK(conf <= range.hi);
      const auto& h = t.tokens[i - 1].hidden.at(cfg.layer);
      double proj = 0.0;
      for (std::size_t j = 0; j < h.size(); ++j) proj += h[j] * mu[j] / cfg.gap;
      if (hall) {
        hall_proj += proj;
        ++n_hall;
      } else {
        truth_proj += proj;
        ++n_truth;
        for (std::size_t j = 0; j < h.size(); ++j) truth_sum[j] += h[j];
      }
    }
  }
  REQUIRE(n_hall > 100);
  REQUIRE(n_truth > 100);
  const double se_h = cfg.noise_sigma / std::sqrt(static_cast<double>(n_hall));
  const double se_t = cfg.noise_sigma / std::sqrt(static_cast<double>(n_truth));
  CHECK(std::abs(hall_proj / static_cast<double>(n_hall) - cfg.gap) <= 3 * se_h);
  CHECK(std::abs(truth_proj / static_cast<double>(n_truth)) <= 3 * se_t);
  for (double s : truth_sum) CHECK(std::abs(s / static_cast<double>(n_truth)) <= 3 * se_t);
}

TEST_CASE("synthetic corpus traces are well formed") {
  const auto cfg = small(8);
  const auto traces = synthetic_corpus(cfg, 20, 100);
  for (const auto& t : traces) {
    CHECK(t.trace_id.rfind("synth-8-", 0) == 0);
    CHECK(t.tokens.back().token_text == "</s>");
    CHECK_FALSE(t.truncated);
    CHECK(t.reference_objects.size() == static_cast<std::size_t>(cfg.present_objects));
    for (const auto& tok : t.tokens) {
      CHECK(tok.candidates.size() == cfg.k);
      CHECK(tok.hidden.at(cfg.layer).size() == cfg.d);
    }
  }
  CHECK_NOTHROW(validate_traces(traces, infer_header(traces)));
  CHECK(synthetic_corpus(cfg, 3, 100)[2] == traces[2]);
}

TEST_CASE("trace replay reproduces the recorded caption") {
  const auto cfg = small(9);
  const auto vocab = synth_vocabulary(cfg);
  for (const auto& t : synthetic_corpus(cfg, 10)) {
    ScriptedOracle replay(script_from_trace(t, cfg.layer, cfg.d));
    DecodeConfig dc;
    dc.vocabulary = &vocab;
    dc.max_tokens = t.tokens.size();
    const auto r = decode_greedy(replay, dc);
    CHECK(r.token_ids() == [&] {
      std::vector<TokenId> ids;
      for (const auto& tok : t.tokens) ids.push_back(tok.token_id);
      return ids;
    }());
    std::vector<TokenId> prefix{t.tokens[0].token_id, t.tokens[1].token_id};
    CHECK(replay.step(prefix).hidden == t.tokens[1].hidden.at(cfg.layer));
  }
}

TEST_CASE("re-selecting a prone trigger escapes the hallucination") {
  // Across many images, objects that follow a rank-1 trigger are hallucinated
  // far less often than greedy ones.
  const auto cfg = small(10);
  std::size_t alt_objects = 0, alt_hall = 0, greedy_hall = 0, greedy_objects = 0;
  for (std::uint64_t img = 0; img < 400; ++img) {
    const SyntheticOracle o(cfg, img);
    std::vector<TokenId> prefix;
    for (int i = 0; i < 60; ++i) {
      const auto step = o.step(prefix);
      const auto& top = step.candidates.front();
      if (top.token_text == "</s>") break;
      if (top.token_id >= 1000) {
        // this is an object slot; try the alternative trigger
        auto alt = prefix;
        alt.back() = o.step(std::span(prefix).first(prefix.size() - 1)).candidates[1].token_id;
        const auto alt_step = o.step(alt).candidates.front();
        if (alt_step.token_id >= 1000) {
          ++alt_objects;
          alt_hall += !o.present().count(alt_step.token_text.substr(1));
        }
        ++greedy_objects;
        greedy_hall += !o.present().count(top.token_text.substr(1));
      }
      prefix.push_back(top.token_id);
    }
  }
  const double greedy_rate = static_cast<double>(greedy_hall) / static_cast<double>(greedy_objects);
  const double alt_rate = static_cast<double>(alt_hall) / static_cast<double>(alt_objects);
  CHECK(greedy_rate > 0.25);
  CHECK(alt_rate < 0.1);
}

TEST_CASE("script tables round trip through JSON") {
  const auto vocab = tp::testing::scenario_vocabulary();
  auto s = tp::testing::single_backtrace_scenario(&vocab);
  s.table.fallback = script_step({{2, "</s>", 1.0}, {3, ".", 0.0}});
  const auto back = script_table_from_json(to_json(s.table));
  CHECK(to_json(back) == to_json(s.table));
  const auto r = decode_truthprint(ScriptedOracle(back), tp::testing::first_coordinate_scorer(), s.config);
  CHECK(tp::testing::scenario_mismatch(s, r) == "");
  CHECK_THROWS_AS(script_table_from_json(R"({"steps":[{"prefix":[]}]})"), ScriptError);
}
