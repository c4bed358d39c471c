#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tp {

/// Object-synonym table: surface forms (single words or multi-word spellings)
/// mapped to canonical object names. Matching is ASCII case-insensitive.
class Vocabulary {
 public:
  struct Match {
    std::string canonical;
    std::size_t length = 0;  // characters of the matched surface form
  };

  Vocabulary() = default;

  /// Each entry: canonical name plus synonyms; the canonical name is itself
  /// a surface form.
  static Vocabulary from_entries(const std::map<std::string, std::vector<std::string>>& entries);

  /// "canonical<TAB>syn1,syn2,..." per line; blank lines and '#' comments skipped.
  static Vocabulary parse(std::string_view text);
  static Vocabulary load(const std::filesystem::path& path);

  std::string serialize() const;

  bool empty() const { return forms_.empty(); }
  std::size_t size() const { return canonical_.size(); }

  /// Longest surface form that ends exactly at the end of `text` and starts
  /// at a word boundary.
  std::optional<Match> match_suffix(std::string_view text) const;

  /// Canonical name for a surface form or canonical name; lowercase passthrough
  /// for unknown words.
  std::string canonicalize(std::string_view word) const;

  const std::map<std::string, std::set<std::string>>& entries() const { return canonical_; }

 private:
  void add(std::string canonical, const std::vector<std::string>& synonyms);

  std::unordered_map<std::string, std::string> forms_;  // lowercase form -> canonical
  std::map<std::string, std::set<std::string>> canonical_;
  std::set<std::size_t> lengths_;
};

std::string ascii_lower(std::string_view s);

}  // namespace tp
