#include "tp/states.hpp"

#include <cmath>
#include <json.hpp>
#include <sstream>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"
#include "tp/rng.hpp"

namespace tp {

std::optional<Vocabulary::Match> object_completed_by(std::string_view detokenized, const Vocabulary& vocabulary) {
  return vocabulary.match_suffix(detokenized);
}

std::vector<std::size_t> identify_object_tokens(Trace& trace, const Vocabulary& vocabulary) {
  if (vocabulary.empty()) throw ConfigError("identify_object_tokens: empty vocabulary");
  std::vector<std::size_t> hits;
  std::string text;
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    auto& tok = trace.tokens[i];
    text += tok.token_text;
    auto m = object_completed_by(text, vocabulary);
    tok.is_object = m.has_value();
    tok.object = m ? m->canonical : std::string();
    if (m) hits.push_back(i);
  }
  return hits;
}

std::vector<LabeledState> collect_labeled_states(const Trace& trace, int layer, const Vocabulary* vocabulary,
                                                 Diagnostics* diagnostics) {
  std::set<std::string> refs;
  for (const auto& r : trace.reference_objects) {
    refs.insert(vocabulary ? vocabulary->canonicalize(r) : ascii_lower(r));
  }

  std::vector<LabeledState> out;
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    const auto& tok = trace.tokens[i];
    if (!tok.is_object) continue;
    if (i == 0) {
      if (diagnostics) diagnostics->note(trace.trace_id + ": object token at position 0 skipped (no preceding state)");
      continue;
    }
    const auto& prev = trace.tokens[i - 1];
    auto it = prev.hidden.find(layer);
    if (it == prev.hidden.end()) {
      throw ContractViolation(trace.trace_id + ": token " + std::to_string(i - 1) + " has no hidden state at layer " +
                              std::to_string(layer));
    }
    const std::string canonical = vocabulary ? vocabulary->canonicalize(tok.object) : ascii_lower(tok.object);
    out.push_back({it->second, refs.count(canonical) ? 0 : 1, trace.trace_id, i});
  }
  return out;
}

std::pair<std::vector<LabeledState>, std::vector<LabeledState>> split_states(const std::vector<LabeledState>& states,
                                                                             double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractViolation("split_states: ratio must lie in (0, 1)");
  if (states.empty()) throw EmptySplitError("split_states: no states to split");

  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < states.size(); ++i) by_class[states[i].label != 0].push_back(i);

  // Largest-remainder allocation of the training quota across classes.
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(states.size())));
  std::size_t quota[2];
  double remainder[2];
  std::size_t assigned = 0;
  for (int c = 0; c < 2; ++c) {
    const double exact = ratio * static_cast<double>(by_class[c].size());
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - std::floor(exact);
    assigned += quota[c];
  }
  while (assigned < n_train) {
    const int c = remainder[1] > remainder[0] ? 1 : 0;
    const int pick = quota[c] < by_class[c].size() ? c : 1 - c;
    ++quota[pick];
    remainder[pick] = -1.0;
    ++assigned;
  }

  rng::Engine eng(seed);
  std::vector<LabeledState> train, val;
  for (int c = 0; c < 2; ++c) {
    auto idx = by_class[c];
    eng.shuffle(idx);
    for (std::size_t j = 0; j < idx.size(); ++j) (j < quota[c] ? train : val).push_back(states[idx[j]]);
  }
  eng.shuffle(train);
  eng.shuffle(val);
  return {std::move(train), std::move(val)};
}

std::vector<LabeledState> downsample_majority(const std::vector<LabeledState>& states, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < states.size(); ++i) by_class[states[i].label != 0].push_back(i);
  const std::size_t keep = std::min(by_class[0].size(), by_class[1].size());
  rng::Engine eng(seed);
  std::vector<bool> selected(states.size(), false);
  for (auto& idx : by_class) {
    eng.shuffle(idx);
    for (std::size_t j = 0; j < keep; ++j) selected[idx[j]] = true;
  }
  std::vector<LabeledState> out;
  for (std::size_t i = 0; i < states.size(); ++i)
    if (selected[i]) out.push_back(states[i]);
  return out;
}

void write_states(const std::filesystem::path& path, const std::vector<LabeledState>& states,
                  const std::string& config_hash) {
  using ojson = nlohmann::ordered_json;
  const std::size_t dim = states.empty() ? 0 : states.front().vector.size();
  ojson head;
  head["format"] = "tpstates";
  head["version"] = 1;
  head["dim"] = dim;
  head["count"] = states.size();
  head["config_hash"] = config_hash;
  std::string out = head.dump() + "\n";
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& s = states[i];
    if (s.vector.size() != dim) throw FormatError("write_states: state " + std::to_string(i) + " has wrong dimension");
    ojson j;
    j["trace_id"] = s.trace_id;
    j["position"] = s.position;
    j["label"] = s.label;
    j["vector"] = s.vector;
    out += j.dump() + "\n";
  }
  io::write_file(path, out);
}

StatesFile read_states(const std::filesystem::path& path) {
  using Kind = ParseError::Kind;
  if (!std::filesystem::exists(path)) throw IoError("missing states file " + path.string());
  std::istringstream in(io::read_file(path));
  std::string line;
  StatesFile out;
  if (!std::getline(in, line)) throw ParseError(Kind::kHeader, 0, "empty states file");
  try {
    auto head = nlohmann::json::parse(line);
    if (head.value("format", "") != "tpstates") throw ParseError(Kind::kHeader, 0, "not a tpstates file");
    if (head.at("version").get<int>() != 1) throw ParseError(Kind::kVersion, 0, "unsupported states version");
    out.dim = head.at("dim").get<std::size_t>();
    out.config_hash = head.value("config_hash", "");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(Kind::kHeader, 0, e.what());
  }
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      LabeledState s;
      s.trace_id = j.at("trace_id").get<std::string>();
      s.position = j.at("position").get<std::size_t>();
      s.label = j.at("label").get<int>();
      s.vector = j.at("vector").get<std::vector<double>>();
      if (s.vector.size() != out.dim) throw ParseError(Kind::kDimension, record, "state vector length mismatch");
      if (s.label != 0 && s.label != 1) throw ParseError(Kind::kSyntax, record, "label must be 0 or 1");
      out.states.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(Kind::kSyntax, record, e.what());
    }
    ++record;
  }
  return out;
}

}  // namespace tp
