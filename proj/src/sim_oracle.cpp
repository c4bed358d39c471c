#include "tp/sim_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "tp/error.hpp"

namespace tp {

namespace {

constexpr TokenId kEosId = 2;
constexpr TokenId kPunctId = 10;
constexpr TokenId kFillerId = 100;
constexpr TokenId kObjectId = 1000;
constexpr std::size_t kMaxK = 8;

std::string prefix_string(std::span<const TokenId> prefix) {
  std::string s = "[";
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(prefix[i]);
  }
  return s + "]";
}

bool ends_sentence(TokenId id) {
  return (id >= kEosId && id < kEosId + static_cast<TokenId>(kMaxK)) ||
         (id >= kPunctId && id < kPunctId + static_cast<TokenId>(kMaxK));
}

int draw_int(rng::Engine& eng, IntRange r) {
  return r.lo + static_cast<int>(eng.below(static_cast<std::uint64_t>(r.hi - r.lo + 1)));
}

}  // namespace

OracleStep ScriptedOracle::step(std::span<const TokenId> prefix) const {
  auto it = table_.steps.find(std::vector<TokenId>(prefix.begin(), prefix.end()));
  if (it != table_.steps.end()) return it->second;
  if (table_.fallback) return *table_.fallback;
  throw ScriptError("script has no step " + std::to_string(prefix.size()) + " for prefix " + prefix_string(prefix));
}

namespace {

nlohmann::json step_json(const OracleStep& s) {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& x : s.candidates) c.push_back({x.token_id, x.token_text, x.prob});
  return {{"candidates", c}, {"hidden", s.hidden}};
}

OracleStep step_from_json(const nlohmann::json& j) {
  OracleStep s;
  for (const auto& c : j.at("candidates")) {
    s.candidates.push_back({c.at(0).get<TokenId>(), c.at(1).get<std::string>(), c.at(2).get<double>()});
  }
  if (s.candidates.empty()) throw ScriptError("script step has no candidates");
  s.hidden = j.value("hidden", std::vector<double>{});
  return s;
}

}  // namespace

ScriptTable script_table_from_json(const std::string& text) {
  ScriptTable t;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& e : j.at("steps")) {
      const auto prefix = e.at("prefix").get<std::vector<TokenId>>();
      if (!t.steps.emplace(prefix, step_from_json(e)).second) {
        throw ScriptError("script lists prefix " + prefix_string(prefix) + " twice");
      }
    }
    if (j.contains("default")) t.fallback = step_from_json(j.at("default"));
  } catch (const nlohmann::json::exception& e) {
    throw ScriptError(std::string("malformed script: ") + e.what());
  }
  return t;
}

std::string to_json(const ScriptTable& t) {
  nlohmann::ordered_json j;
  auto steps = nlohmann::ordered_json::array();
  for (const auto& [prefix, step] : t.steps) {
    nlohmann::ordered_json e;
    e["prefix"] = prefix;
    const auto s = step_json(step);
    e["candidates"] = s["candidates"];
    e["hidden"] = s["hidden"];
    steps.push_back(e);
  }
  j["steps"] = steps;
  if (t.fallback) j["default"] = step_json(*t.fallback);
  return j.dump() + "\n";
}

ScriptTable script_from_trace(const Trace& trace, int layer, std::size_t dim) {
  ScriptTable t;
  std::vector<TokenId> prefix;
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    OracleStep s;
    s.candidates = trace.tokens[i].candidates;
    if (i == 0) {
      s.hidden.assign(dim, 0.0);
    } else {
      auto it = trace.tokens[i - 1].hidden.find(layer);
      if (it == trace.tokens[i - 1].hidden.end()) {
        throw FormatError(trace.trace_id + ": token " + std::to_string(i - 1) + " has no layer " +
                          std::to_string(layer));
      }
      s.hidden = it->second;
    }
    t.steps.emplace(prefix, std::move(s));
    prefix.push_back(trace.tokens[i].token_id);
  }
  return t;
}

const std::vector<std::string>& default_objects() {
  static const std::vector<std::string> v = {
      "dog",   "cat",    "car",   "bus",    "train", "person", "bicycle", "horse", "sheep", "cow",
      "bird",  "boat",   "chair", "table",  "bench", "clock",  "cup",     "bowl",  "pizza", "cake",
      "bed",   "laptop", "phone", "book",   "vase",  "kite",   "umbrella", "bottle", "truck", "couch"};
  return v;
}

const std::vector<std::string>& default_fillers() {
  static const std::vector<std::string> v = {
      "a",     "the",   "with",  "near",  "on",     "in",     "of",    "and",   "is",    "are",
      "there", "small", "large", "red",   "white",  "black",  "green", "old",   "young", "next",
      "to",    "by",    "some",  "two",   "three",  "sitting", "standing", "under", "over", "behind",
      "front", "side",  "view",  "scene", "picture", "image",  "street", "room",  "field", "water"};
  return v;
}

void validate(const SynthConfig& c) {
  std::vector<std::string> bad;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  check(c.d >= 1, "d must be positive");
  check(c.gap >= 0.0, "gap must be non-negative");
  check(c.noise_sigma > 0.0, "noise_sigma must be positive");
  check(unit(c.p_hall), "p_hall must lie in [0, 1]");
  check(c.p_hall_alt >= 0.0, "p_hall_alt must be non-negative");
  check(c.p_hall_alt < c.p_hall || (c.p_hall == 0.0 && c.p_hall_alt == 0.0), "p_hall_alt must be below p_hall");
  for (const auto& [name, r] : {std::pair{"conf_low", c.conf_low}, std::pair{"conf_high", c.conf_high}}) {
    check(r.lo > 0.0 && r.lo <= r.hi && r.hi < 1.0, std::string(name) + " must satisfy 0 < lo <= hi < 1");
  }
  check(c.conf_low.hi < c.conf_high.lo, "conf_low must lie strictly below conf_high");
  check(c.sentences.lo >= 1 && c.sentences.lo <= c.sentences.hi, "sentences must satisfy 1 <= lo <= hi");
  check(c.sentence_len.lo >= 2 && c.sentence_len.lo <= c.sentence_len.hi, "sentence_len must satisfy 2 <= lo <= hi");
  check(c.object_slots.lo >= 0 && c.object_slots.lo <= c.object_slots.hi, "object_slots must satisfy 0 <= lo <= hi");
  check(2 * c.object_slots.hi <= c.sentence_len.lo, "object_slots.hi must be at most sentence_len.lo / 2");
  check(unit(c.p_drop), "p_drop must lie in [0, 1]");
  check(unit(c.p_alt_filler), "p_alt_filler must lie in [0, 1]");
  check(c.k >= 2 && c.k <= kMaxK, "k must lie in [2, 8]");
  const auto& objects = c.objects.empty() ? default_objects() : c.objects;
  const auto& fillers = c.fillers.empty() ? default_fillers() : c.fillers;
  check(c.present_objects >= 1 && static_cast<std::size_t>(c.present_objects) < objects.size(),
        "present_objects must lie in [1, number of objects)");
  check(fillers.size() >= c.k, "need at least k fillers");
  std::set<std::string> seen;
  for (const auto& w : objects) {
    check(!w.empty() && w.find(' ') == std::string::npos, "object '" + w + "' must be a single word");
    check(seen.insert(ascii_lower(w)).second, "duplicate word '" + w + "'");
  }
  for (const auto& w : fillers) {
    check(!w.empty() && w.find(' ') == std::string::npos, "filler '" + w + "' must be a single word");
    check(seen.insert(ascii_lower(w)).second, "duplicate word '" + w + "'");
  }
  if (!bad.empty()) {
    std::string msg = "synthetic config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
}

std::string to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["d"] = c.d;
  j["gap"] = c.gap;
  j["noise_sigma"] = c.noise_sigma;
  j["p_hall"] = c.p_hall;
  j["p_hall_alt"] = c.p_hall_alt;
  j["conf_low"] = {c.conf_low.lo, c.conf_low.hi};
  j["conf_high"] = {c.conf_high.lo, c.conf_high.hi};
  j["sentences"] = {c.sentences.lo, c.sentences.hi};
  j["sentence_len"] = {c.sentence_len.lo, c.sentence_len.hi};
  j["object_slots"] = {c.object_slots.lo, c.object_slots.hi};
  j["present_objects"] = c.present_objects;
  j["p_drop"] = c.p_drop;
  j["p_alt_filler"] = c.p_alt_filler;
  j["k"] = c.k;
  j["layer"] = c.layer;
  j["seed"] = c.seed;
  j["objects"] = c.objects;
  j["fillers"] = c.fillers;
  return j.dump(2);
}

SynthConfig synth_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("synthetic config: expected a JSON object");
  SynthConfig c;
  std::vector<std::string> bad;
  auto range = [](const nlohmann::json& v) {
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument("range");
    return Range{v[0].get<double>(), v[1].get<double>()};
  };
  auto irange = [](const nlohmann::json& v) {
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument("range");
    return IntRange{v[0].get<int>(), v[1].get<int>()};
  };
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "d") c.d = v.get<std::size_t>();
      else if (key == "gap") c.gap = v.get<double>();
      else if (key == "noise_sigma") c.noise_sigma = v.get<double>();
      else if (key == "p_hall") c.p_hall = v.get<double>();
      else if (key == "p_hall_alt") c.p_hall_alt = v.get<double>();
      else if (key == "conf_low") c.conf_low = range(v);
      else if (key == "conf_high") c.conf_high = range(v);
      else if (key == "sentences") c.sentences = irange(v);
      else if (key == "sentence_len") c.sentence_len = irange(v);
      else if (key == "object_slots") c.object_slots = irange(v);
      else if (key == "present_objects") c.present_objects = v.get<int>();
      else if (key == "p_drop") c.p_drop = v.get<double>();
      else if (key == "p_alt_filler") c.p_alt_filler = v.get<double>();
      else if (key == "k") c.k = v.get<std::size_t>();
      else if (key == "layer") c.layer = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "objects") c.objects = v.get<std::vector<std::string>>();
      else if (key == "fillers") c.fillers = v.get<std::vector<std::string>>();
      else bad.push_back(key + ": unknown key");
    } catch (const std::exception&) {
      bad.push_back(key + ": wrong type");
    }
  }
  if (!bad.empty()) {
    std::string msg = "synthetic config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
  validate(c);
  return c;
}

Vocabulary synth_vocabulary(const SynthConfig& cfg) {
  std::map<std::string, std::vector<std::string>> entries;
  for (const auto& o : cfg.objects.empty() ? default_objects() : cfg.objects) entries[o] = {};
  return Vocabulary::from_entries(entries);
}

SyntheticOracle::SyntheticOracle(const SynthConfig& cfg, std::uint64_t image)
    : cfg_(cfg), image_(image), key_(rng::mix(cfg.seed, image)) {
  validate(cfg_);
  objects_ = cfg_.objects.empty() ? default_objects() : cfg_.objects;
  fillers_ = cfg_.fillers.empty() ? default_fillers() : cfg_.fillers;

  rng::Engine world(rng::mix(key_, 0x5157));
  std::vector<std::size_t> idx(objects_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  world.shuffle(idx);
  const auto n_present = static_cast<std::size_t>(cfg_.present_objects);
  present_idx_.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_present));
  absent_idx_.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_present), idx.end());
  for (auto i : present_idx_) present_.insert(objects_[i]);

  const int n_sent = draw_int(world, cfg_.sentences);
  for (int j = 0; j < n_sent; ++j) {
    rng::Engine e(rng::mix(key_, 0x1000 + static_cast<std::uint64_t>(j)));
    Sentence s;
    s.length = draw_int(e, cfg_.sentence_len);
    const int want = draw_int(e, cfg_.object_slots);
    std::vector<int> pos;
    for (int p = 1; p < s.length; ++p) pos.push_back(p);
    e.shuffle(pos);
    for (int p : pos) {
      if (static_cast<int>(s.slots.size()) == want) break;
      const bool spaced = std::all_of(s.slots.begin(), s.slots.end(), [p](int q) { return std::abs(p - q) >= 2; });
      if (spaced) s.slots.push_back(p);
    }
    std::sort(s.slots.begin(), s.slots.end());
    layout_.push_back(std::move(s));
  }

  rng::Engine dir(rng::mix(cfg_.seed, 0x77));
  mu_hall_.resize(cfg_.d);
  double norm = 0.0;
  for (double& x : mu_hall_) {
    x = dir.normal();
    norm += x * x;
  }
  for (double& x : mu_hall_) x *= cfg_.gap / std::sqrt(norm);
}

std::size_t SyntheticOracle::max_length() const {
  std::size_t n = 1;
  for (const auto& s : layout_) n += static_cast<std::size_t>(s.length) + 1;
  return n;
}

std::vector<double> SyntheticOracle::hidden(rng::Engine& eng, bool hallucinated) const {
  std::vector<double> h(cfg_.d);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double mu = hallucinated ? mu_hall_[i] : 0.0;
    h[i] = static_cast<float>(mu + cfg_.noise_sigma * eng.normal());
  }
  return h;
}

Candidate SyntheticOracle::filler(rng::Engine& eng) const {
  const auto i = static_cast<std::size_t>(eng.below(fillers_.size()));
  return {kFillerId + static_cast<TokenId>(i), " " + fillers_[i], 0.0};
}

Candidate SyntheticOracle::object(rng::Engine& eng, bool hallucinated) const {
  const auto& pool = hallucinated ? absent_idx_ : present_idx_;
  const auto i = pool[static_cast<std::size_t>(eng.below(pool.size()))];
  return {kObjectId + static_cast<TokenId>(i), " " + objects_[i], 0.0};
}

std::vector<Candidate> SyntheticOracle::fill(rng::Engine& eng, double top1, std::vector<Candidate> picks) const {
  double rem = 1.0 - top1;
  double prev = top1;
  for (std::size_t r = 0; r < picks.size(); ++r) {
    if (r == 0) {
      picks[r].prob = top1;
      continue;
    }
    const double p = std::min(prev, rem * eng.uniform());
    picks[r].prob = p;
    rem -= p;
    prev = p;
  }
  return picks;
}

OracleStep SyntheticOracle::step(std::span<const TokenId> prefix) const { return draw(prefix, nullptr); }

OracleStep SyntheticOracle::draw(std::span<const TokenId> prefix, bool* prone_out) const {
  rng::Engine eng(rng::hash_ids(key_, prefix));
  std::size_t j = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (ends_sentence(prefix[i])) {
      ++j;
      start = i + 1;
    }
  }
  const int p = static_cast<int>(prefix.size() - start);
  OracleStep out;

  auto distinct = [&](std::vector<Candidate>& picks, auto&& next) {
    while (picks.size() < cfg_.k) {
      Candidate c;
      bool fresh = false;
      for (int tries = 0; tries < 64 && !fresh; ++tries) {
        c = next();
        fresh = std::none_of(picks.begin(), picks.end(), [&](const Candidate& x) { return x.token_id == c.token_id; });
      }
      for (std::size_t f = 0; !fresh; ++f) {
        c = {kFillerId + static_cast<TokenId>(f), " " + fillers_[f], 0.0};
        fresh = std::none_of(picks.begin(), picks.end(), [&](const Candidate& x) { return x.token_id == c.token_id; });
      }
      picks.push_back(c);
    }
  };
  auto filler_step = [&](double top1) {
    std::vector<Candidate> picks;
    distinct(picks, [&] { return filler(eng); });
    out.candidates = fill(eng, top1, std::move(picks));
    out.hidden = hidden(eng, false);
    return out;
  };

  if (j >= layout_.size()) {
    std::vector<Candidate> picks;
    for (std::size_t r = 0; r < cfg_.k; ++r) picks.push_back({kEosId + static_cast<TokenId>(r), std::string(kEosText), 0.0});
    out.candidates = fill(eng, eng.uniform(cfg_.conf_high.lo, cfg_.conf_high.hi), std::move(picks));
    out.hidden = hidden(eng, false);
    return out;
  }
  const Sentence& sen = layout_[j];
  if (p >= sen.length) {
    static const char* const marks[] = {".", "!", "?"};
    std::vector<Candidate> picks;
    for (std::size_t r = 0; r < cfg_.k; ++r) picks.push_back({kPunctId + static_cast<TokenId>(r), marks[r % 3], 0.0});
    out.candidates = fill(eng, eng.uniform(cfg_.conf_high.lo, cfg_.conf_high.hi), std::move(picks));
    out.hidden = hidden(eng, false);
    return out;
  }
  const bool slot = std::find(sen.slots.begin(), sen.slots.end(), p) != sen.slots.end();
  const bool trigger = std::find(sen.slots.begin(), sen.slots.end(), p + 1) != sen.slots.end();

  if (trigger) {
    const bool prone = eng.uniform() < cfg_.p_hall;
    if (prone_out) *prone_out = prone;
    const Range r = prone ? cfg_.conf_low : cfg_.conf_high;
    return filler_step(eng.uniform(r.lo, r.hi));
  }
  if (!slot) return filler_step(eng.uniform(cfg_.conf_high.lo, cfg_.conf_high.hi));

  bool prone = false;
  const OracleStep before = draw(prefix.first(prefix.size() - 1), &prone);
  bool hall;
  if (prefix.back() == before.candidates.front().token_id) {
    hall = prone;
  } else if (eng.uniform() < cfg_.p_drop) {
    return filler_step(eng.uniform(cfg_.conf_high.lo, cfg_.conf_high.hi));
  } else {
    hall = eng.uniform() < cfg_.p_hall_alt;
  }
  std::vector<Candidate> picks{object(eng, hall)};
  distinct(picks, [&] {
    if (eng.uniform() < cfg_.p_alt_filler) return filler(eng);
    return object(eng, eng.uniform() < cfg_.p_hall_alt);
  });
  out.candidates = fill(eng, eng.uniform(cfg_.conf_high.lo, cfg_.conf_high.hi), std::move(picks));
  out.hidden = hidden(eng, hall);
  return out;
}

std::vector<Trace> synthetic_corpus(const SynthConfig& cfg, std::size_t n_traces, std::uint64_t first_image) {
  validate(cfg);
  const Vocabulary vocab = synth_vocabulary(cfg);
  std::vector<Trace> out;
  out.reserve(n_traces);
  for (std::size_t t = 0; t < n_traces; ++t) {
    const std::uint64_t image = first_image + t;
    const SyntheticOracle oracle(cfg, image);
    DecodeConfig dc;
    dc.max_tokens = oracle.max_length();
    dc.k_candidates = cfg.k;
    dc.layer = cfg.layer;
    dc.vocabulary = &vocab;
    auto res = decode_greedy(oracle, dc);
    Trace tr = std::move(res.trace);
    tr.trace_id = "synth-" + std::to_string(cfg.seed) + "-" + std::to_string(image);
    tr.image_ref = "synthetic:" + std::to_string(image);
    tr.prompt = "Describe the image.";
    tr.reference_objects = oracle.present();
    std::vector<TokenId> prefix;
    for (auto& tok : tr.tokens) {
      prefix.push_back(tok.token_id);
      tok.hidden[cfg.layer] = oracle.step(prefix).hidden;
    }
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace tp
