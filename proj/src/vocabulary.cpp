#include "tp/vocabulary.hpp"

#include <cctype>
#include <sstream>

#include "tp/binary_io.hpp"
#include "tp/error.hpp"

namespace tp {

namespace {

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

// Collapse runs of whitespace to one space.
std::string normalize_form(std::string_view s) {
  std::string out;
  bool space = false;
  for (char ch : trim(s)) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void Vocabulary::add(std::string canonical, const std::vector<std::string>& synonyms) {
  canonical = normalize_form(canonical);
  if (canonical.empty()) throw ConfigError("vocabulary: empty canonical name");
  auto& syns = canonical_[canonical];
  auto insert = [&](const std::string& form) {
    if (form.empty()) return;
    auto [it, fresh] = forms_.emplace(form, canonical);
    if (!fresh && it->second != canonical) {
      throw ConfigError("vocabulary: form '" + form + "' maps to both '" + it->second + "' and '" + canonical + "'");
    }
    lengths_.insert(form.size());
  };
  insert(canonical);
  for (const auto& s : synonyms) {
    auto form = normalize_form(s);
    if (form.empty() || form == canonical) continue;
    syns.insert(form);
    insert(form);
  }
}

Vocabulary Vocabulary::from_entries(const std::map<std::string, std::vector<std::string>>& entries) {
  Vocabulary v;
  for (const auto& [canonical, syns] : entries) v.add(canonical, syns);
  return v;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  Vocabulary v;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto tab = line.find('\t');
    std::string canonical = line.substr(0, tab);
    std::vector<std::string> syns;
    if (tab != std::string::npos) {
      std::istringstream rest(line.substr(tab + 1));
      std::string s;
      while (std::getline(rest, s, ',')) syns.push_back(s);
    }
    v.add(canonical, syns);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& [canonical, syns] : canonical_) {
    out += canonical;
    out += '\t';
    bool first = true;
    for (const auto& s : syns) {
      if (!first) out += ',';
      out += s;
      first = false;
    }
    out += '\n';
  }
  return out;
}

std::optional<Vocabulary::Match> Vocabulary::match_suffix(std::string_view text) const {
  if (text.empty() || std::isspace(static_cast<unsigned char>(text.back()))) return std::nullopt;
  for (auto it = lengths_.rbegin(); it != lengths_.rend(); ++it) {
    const std::size_t len = *it;
    if (len > text.size()) continue;
    const std::size_t start = text.size() - len;
    if (start > 0 && is_word_char(text[start - 1])) continue;
    auto found = forms_.find(normalize_form(text.substr(start)));
    // normalize_form trims, so the slice must not begin with whitespace.
    if (found != forms_.end() && !std::isspace(static_cast<unsigned char>(text[start]))) {
      return Match{found->second, len};
    }
  }
  return std::nullopt;
}

std::string Vocabulary::canonicalize(std::string_view word) const {
  auto form = normalize_form(word);
  auto it = forms_.find(form);
  return it == forms_.end() ? form : it->second;
}

}  // namespace tp
