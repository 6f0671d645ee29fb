#pragma once

// Deterministic hash tokenizer. Words are lowercased, whitespace-split and
// hashed (FNV-1a) into a fixed-size vocabulary; special tokens occupy the
// first ids.

#include <cctype>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

namespace facecap {

struct SpecialTokens {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kEnt = 3;     // <ENT> name-chain separator
  static constexpr int kNoName = 4;  // <NONAME> alignment target
  static constexpr int kFirstWord = 5;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

class HashTokenizer {
 public:
  explicit HashTokenizer(int vocab_size = 1000) : vocab_size_(vocab_size) {
    if (vocab_size_ <= SpecialTokens::kFirstWord)
      throw std::invalid_argument("vocab too small for special tokens");
  }

  int vocab_size() const { return vocab_size_; }

  int word_id(const std::string& word) const {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
    for (char ch : word) {
      unsigned char c = static_cast<unsigned char>(std::tolower(static_cast<unsigned char>(ch)));
      h ^= c;
      h *= 1099511628211ULL;
    }
    int span = vocab_size_ - SpecialTokens::kFirstWord;
    return SpecialTokens::kFirstWord + static_cast<int>(h % static_cast<std::uint64_t>(span));
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(word_id(w));
    return ids;
  }

 private:
  int vocab_size_;
};

}  // namespace facecap
