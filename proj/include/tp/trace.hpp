#pragma once

// Token traces and the tptrace file pair.
//
//   <stem>.jsonl  header line, then one JSON object per trace
//   <stem>.bin    little-endian float32 hidden vectors; record r, layer l
//                 occupies elements [hs_offset, hs_offset + dim)

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tp {

using TokenId = std::int32_t;

struct Candidate {
  TokenId token_id = 0;
  std::string token_text;
  double prob = 0.0;

  bool operator==(const Candidate&) const = default;
};

struct TokenRecord {
  TokenId token_id = 0;
  std::string token_text;
  std::vector<Candidate> candidates;          // prob non-increasing, length K
  std::map<int, std::vector<double>> hidden;  // layer -> state of this token
  bool is_object = false;
  std::string object;  // canonical object name when is_object
  bool is_sentence_end = false;

  double top1_confidence() const { return candidates.empty() ? 0.0 : candidates.front().prob; }

  bool operator==(const TokenRecord&) const = default;
};

struct Trace {
  std::string trace_id;
  std::string prompt;
  std::string image_ref;
  std::vector<TokenRecord> tokens;
  std::set<std::string> reference_objects;
  // Generation stopped at max_tokens rather than at a sentence end.
  bool truncated = false;

  bool operator==(const Trace&) const = default;
};

struct TraceHeader {
  std::size_t dim = 0;
  std::vector<int> layers;
  std::size_t k = 0;

  bool operator==(const TraceHeader&) const = default;
};

struct TraceFiles {
  std::filesystem::path metadata;
  std::filesystem::path blob;
};

TraceFiles trace_paths(const std::filesystem::path& stem);

/// Header implied by the first token of the first trace; empty list gives
/// an all-zero header.
TraceHeader infer_header(std::span<const Trace> traces);

/// Throws FormatError naming the trace/token that breaks the header contract.
void validate_traces(std::span<const Trace> traces, const TraceHeader& header);

TraceFiles write_traces(std::span<const Trace> traces, const std::filesystem::path& stem);
TraceFiles write_traces(std::span<const Trace> traces, const TraceHeader& header,
                        const std::filesystem::path& stem);

struct TraceCorpus {
  TraceHeader header;
  std::vector<Trace> traces;
};

/// Throws IoError when files are missing and ParseError (with the record
/// index) on malformed content.
TraceCorpus read_traces(const std::filesystem::path& stem);

/// In-memory serialization used by the writer; exposed for byte-level tests.
struct SerializedTraces {
  std::string metadata;
  std::string blob;
};
SerializedTraces serialize_traces(std::span<const Trace> traces, const TraceHeader& header);
TraceCorpus parse_traces(const std::string& metadata, const std::string& blob);

bool is_sentence_end_text(std::string_view text);

}  // namespace tp
