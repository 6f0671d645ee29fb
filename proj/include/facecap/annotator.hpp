#pragma once

// Deterministic gazetteer-based entity annotator. Real datasets carry
// offline NER annotations; this annotator exists for the synthetic fixture
// and for extracting entities from generated captions at evaluation time.

#include <algorithm>
#include <cctype>
#include <string>
#include <utility>
#include <vector>

#include "facecap/corpus.hpp"
#include "facecap/tokenizer.hpp"

namespace facecap {

struct GazetteerEntry {
  std::string phrase;
  EntityType type;
};

inline const std::vector<GazetteerEntry>& fixture_gazetteer() {
  static const std::vector<GazetteerEntry> g = {
      {"Maria Santos", EntityType::PERSON},  {"John Carver", EntityType::PERSON},
      {"Li Wei", EntityType::PERSON},        {"Amara Okafor", EntityType::PERSON},
      {"Peter Holm", EntityType::PERSON},    {"Sofia Reyes", EntityType::PERSON},
      {"David Stein", EntityType::PERSON},   {"Nadia Petrova", EntityType::PERSON},
      {"Omar Haddad", EntityType::PERSON},   {"Emma Laine", EntityType::PERSON},
      {"Carlos Mendes", EntityType::PERSON}, {"Ava Brennan", EntityType::PERSON},
      {"Lisbon", EntityType::GPE},           {"Oslo", EntityType::GPE},
      {"Nairobi", EntityType::GPE},          {"Toronto", EntityType::GPE},
      {"Jakarta", EntityType::GPE},          {"Geneva", EntityType::GPE},
      {"Boston", EntityType::GPE},           {"Cairo", EntityType::GPE},
      {"Northwind Labs", EntityType::ORG},   {"Helix Energy", EntityType::ORG},
      {"Civic Trust", EntityType::ORG},      {"Orbital Press", EntityType::ORG},
      {"Bluewater Group", EntityType::ORG},  {"Atlas Foundry", EntityType::ORG},
  };
  return g;
}

namespace detail {
inline std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}
}  // namespace detail

class RuleAnnotator {
 public:
  explicit RuleAnnotator(std::vector<GazetteerEntry> entries = fixture_gazetteer()) {
    for (auto& e : entries) {
      Entry x;
      x.tokens = split_words(detail::lower(e.phrase));
      x.type = e.type;
      entries_.push_back(std::move(x));
    }
    // Longest phrases first so multi-token names win over their parts.
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const Entry& a, const Entry& b) {
                       return a.tokens.size() > b.tokens.size();
                     });
  }

  std::vector<EntitySpan> annotate(const std::string& caption) const {
    auto tokens = split_words(caption);
    std::vector<std::string> low;
    low.reserve(tokens.size());
    for (const auto& t : tokens) low.push_back(detail::lower(t));
    std::vector<EntitySpan> spans;
    size_t i = 0;
    while (i < tokens.size()) {
      bool matched = false;
      for (const auto& e : entries_) {
        if (i + e.tokens.size() > tokens.size()) continue;
        bool ok = true;
        for (size_t k = 0; k < e.tokens.size(); ++k)
          if (low[i + k] != e.tokens[k]) {
            ok = false;
            break;
          }
        if (!ok) continue;
        EntitySpan sp;
        sp.start = static_cast<int>(i);
        sp.end = static_cast<int>(i + e.tokens.size());
        for (size_t k = 0; k < e.tokens.size(); ++k) {
          if (k) sp.surface += ' ';
          sp.surface += tokens[i + k];
        }
        sp.type = e.type;
        spans.push_back(std::move(sp));
        i += e.tokens.size();
        matched = true;
        break;
      }
      if (!matched) ++i;
    }
    return spans;
  }

 private:
  struct Entry {
    std::vector<std::string> tokens;
    EntityType type;
  };
  std::vector<Entry> entries_;
};

}  // namespace facecap
