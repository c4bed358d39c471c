#include "tp/trace.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"

namespace tp {

using ojson = nlohmann::ordered_json;

namespace io {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on " + path.string());
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path() && !path.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

}  // namespace io

namespace {

constexpr int kVersion = 1;

std::string where(std::size_t trace, std::size_t token) {
  return "trace " + std::to_string(trace) + " token " + std::to_string(token);
}

}  // namespace

bool is_sentence_end_text(std::string_view text) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  return text == "." || text == "!" || text == "?";
}

TraceFiles trace_paths(const std::filesystem::path& stem) {
  return {std::filesystem::path(stem.string() + ".jsonl"), std::filesystem::path(stem.string() + ".bin")};
}

TraceHeader infer_header(std::span<const Trace> traces) {
  TraceHeader h;
  for (const auto& t : traces) {
    if (t.tokens.empty()) continue;
    const auto& tok = t.tokens.front();
    h.k = tok.candidates.size();
    for (const auto& [layer, v] : tok.hidden) {
      h.layers.push_back(layer);
      h.dim = v.size();
    }
    break;
  }
  return h;
}

void validate_traces(std::span<const Trace> traces, const TraceHeader& header) {
  for (std::size_t ti = 0; ti < traces.size(); ++ti) {
    const auto& t = traces[ti];
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
      const auto& tok = t.tokens[i];
      if (tok.candidates.size() != header.k) {
        throw FormatError(where(ti, i) + ": " + std::to_string(tok.candidates.size()) +
                          " candidates, header says " + std::to_string(header.k));
      }
      bool chosen_present = false;
      for (std::size_t c = 0; c < tok.candidates.size(); ++c) {
        const double p = tok.candidates[c].prob;
        if (!(p >= 0.0 && p <= 1.0)) throw FormatError(where(ti, i) + ": probability outside [0,1]");
        if (c > 0 && p > tok.candidates[c - 1].prob) {
          throw FormatError(where(ti, i) + ": candidates not sorted by probability");
        }
        chosen_present |= tok.candidates[c].token_id == tok.token_id;
      }
      if (!chosen_present && header.k > 0) {
        throw FormatError(where(ti, i) + ": chosen token missing from candidates");
      }
      if (tok.hidden.size() != header.layers.size()) {
        throw FormatError(where(ti, i) + ": layer set differs from header");
      }
      for (int layer : header.layers) {
        auto it = tok.hidden.find(layer);
        if (it == tok.hidden.end()) throw FormatError(where(ti, i) + ": missing layer " + std::to_string(layer));
        if (it->second.size() != header.dim) {
          throw FormatError(where(ti, i) + ": hidden length " + std::to_string(it->second.size()) +
                            " != dim " + std::to_string(header.dim));
        }
      }
    }
    if (!t.tokens.empty() && !t.truncated && !t.tokens.back().is_sentence_end) {
      throw FormatError("trace " + std::to_string(ti) + ": does not end at a sentence end");
    }
  }
}

SerializedTraces serialize_traces(std::span<const Trace> traces, const TraceHeader& header) {
  validate_traces(traces, header);
  SerializedTraces out;

  ojson head;
  head["format"] = "tptrace";
  head["version"] = kVersion;
  head["dim"] = header.dim;
  head["layers"] = header.layers;
  head["k"] = header.k;
  head["endianness"] = "little";
  out.metadata = head.dump() + "\n";

  std::uint64_t offset = 0;
  for (const auto& t : traces) {
    ojson j;
    j["trace_id"] = t.trace_id;
    j["prompt"] = t.prompt;
    j["image_ref"] = t.image_ref;
    j["reference_objects"] = t.reference_objects;
    j["truncated"] = t.truncated;
    ojson toks = ojson::array();
    for (const auto& tok : t.tokens) {
      ojson r;
      r["id"] = tok.token_id;
      r["text"] = tok.token_text;
      ojson cands = ojson::array();
      for (const auto& c : tok.candidates) cands.push_back(ojson::array({c.token_id, c.token_text, c.prob}));
      r["candidates"] = std::move(cands);
      ojson offsets = ojson::array();
      for (int layer : header.layers) {
        offsets.push_back(offset);
        for (double v : tok.hidden.at(layer)) io::append_le(out.blob, static_cast<float>(v));
        offset += header.dim;
      }
      r["hs_offset"] = std::move(offsets);
      r["hs_len"] = header.dim;
      r["is_object"] = tok.is_object;
      if (tok.is_object) r["object"] = tok.object;
      r["sentence_end"] = tok.is_sentence_end;
      toks.push_back(std::move(r));
    }
    j["tokens"] = std::move(toks);
    out.metadata += j.dump() + "\n";
  }
  return out;
}

TraceFiles write_traces(std::span<const Trace> traces, const TraceHeader& header,
                        const std::filesystem::path& stem) {
  auto ser = serialize_traces(traces, header);
  auto paths = trace_paths(stem);
  io::write_file(paths.metadata, ser.metadata);
  io::write_file(paths.blob, ser.blob);
  return paths;
}

TraceFiles write_traces(std::span<const Trace> traces, const std::filesystem::path& stem) {
  return write_traces(traces, infer_header(traces), stem);
}

TraceCorpus parse_traces(const std::string& metadata, const std::string& blob) {
  using Kind = ParseError::Kind;
  TraceCorpus corpus;
  std::istringstream lines(metadata);
  std::string line;
  if (!std::getline(lines, line)) throw ParseError(Kind::kHeader, 0, "missing header line");

  ojson head;
  try {
    head = ojson::parse(line);
    if (head.value("format", "") != "tptrace") throw ParseError(Kind::kHeader, 0, "not a tptrace file");
    if (head.at("version").get<int>() != kVersion) {
      throw ParseError(Kind::kVersion, 0, "unsupported version " + head.at("version").dump());
    }
    if (head.value("endianness", "little") != "little") throw ParseError(Kind::kHeader, 0, "unsupported endianness");
    corpus.header.dim = head.at("dim").get<std::size_t>();
    corpus.header.layers = head.at("layers").get<std::vector<int>>();
    corpus.header.k = head.at("k").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(Kind::kHeader, 0, std::string("bad header: ") + e.what());
  }

  const std::size_t dim = corpus.header.dim;
  const std::size_t n_elems = blob.size() / 4;
  std::size_t record = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    Trace t;
    try {
      auto j = ojson::parse(line);
      t.trace_id = j.at("trace_id").get<std::string>();
      t.prompt = j.at("prompt").get<std::string>();
      t.image_ref = j.at("image_ref").get<std::string>();
      for (const auto& o : j.at("reference_objects")) t.reference_objects.insert(o.get<std::string>());
      t.truncated = j.value("truncated", false);
      for (const auto& r : j.at("tokens")) {
        TokenRecord tok;
        tok.token_id = r.at("id").get<TokenId>();
        tok.token_text = r.at("text").get<std::string>();
        for (const auto& c : r.at("candidates")) {
          tok.candidates.push_back({c.at(0).get<TokenId>(), c.at(1).get<std::string>(), c.at(2).get<double>()});
        }
        if (r.at("hs_len").get<std::size_t>() != dim) {
          throw ParseError(Kind::kDimension, record,
                           "token " + std::to_string(t.tokens.size()) + " references " +
                               r.at("hs_len").dump() + " values, header dim is " + std::to_string(dim));
        }
        const auto& offsets = r.at("hs_offset");
        if (offsets.size() != corpus.header.layers.size()) {
          throw ParseError(Kind::kDimension, record, "token " + std::to_string(t.tokens.size()) +
                                                         " has wrong number of layer offsets");
        }
        for (std::size_t li = 0; li < offsets.size(); ++li) {
          const auto off = offsets[li].get<std::int64_t>();
          if (off < 0 || (dim > 0 && static_cast<std::uint64_t>(off) * 4 >= blob.size())) {
            throw ParseError(Kind::kOffset, record,
                             "token " + std::to_string(t.tokens.size()) + " offset " + std::to_string(off) +
                                 " outside blob of " + std::to_string(n_elems) + " values");
          }
          const auto start = static_cast<std::size_t>(off);
          if (start + dim > n_elems) {
            throw ParseError(Kind::kTruncated, record,
                             "token " + std::to_string(t.tokens.size()) + " needs values [" +
                                 std::to_string(start) + ", " + std::to_string(start + dim) +
                                 ") but blob holds " + std::to_string(n_elems));
          }
          std::vector<double> v(dim);
          for (std::size_t e = 0; e < dim; ++e) v[e] = io::read_le<float>(blob, (start + e) * 4);
          tok.hidden.emplace(corpus.header.layers[li], std::move(v));
        }
        tok.is_object = r.value("is_object", false);
        if (tok.is_object) tok.object = r.value("object", "");
        tok.is_sentence_end = r.value("sentence_end", false);
        t.tokens.push_back(std::move(tok));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(Kind::kSyntax, record, e.what());
    }
    corpus.traces.push_back(std::move(t));
    ++record;
  }
  return corpus;
}

TraceCorpus read_traces(const std::filesystem::path& stem) {
  auto paths = trace_paths(stem);
  if (!std::filesystem::exists(paths.metadata)) throw IoError("missing trace metadata " + paths.metadata.string());
  if (!std::filesystem::exists(paths.blob)) throw IoError("missing trace blob " + paths.blob.string());
  return parse_traces(io::read_file(paths.metadata), io::read_file(paths.blob));
}

}  // namespace tp
