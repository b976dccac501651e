#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "autoadr/tensor.hpp"

namespace autoadr {

inline constexpr int kUnknownId = 0;
inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::size_t kMaxQueryWords = 16;
inline constexpr std::size_t kMaxAdWords = 60;

// Lowercases ASCII letters and replaces everything outside [a-z0-9] with a
// space, then collapses runs of spaces. Bytes >= 0x80 are treated as
// separators too, so the function is total on arbitrary UTF-8.
std::string normalize_text(std::string_view text);
std::vector<std::string> split_words(std::string_view normalized);

// All contiguous 3-grams of "#" + lowercase(word) + "#".
std::vector<std::string> tri_letters(std::string_view word);

// Ad text fed to the ad tower: title, description and URL joined by single
// spaces, with dots in the URL host replaced by spaces.
std::string ad_content(std::string_view title, std::string_view description,
                       std::string_view url);

class TriLetterVocab {
 public:
  // Id 0 is the unknown sentinel; the most frequent tri-letters fill ids
  // 1..max_size-1, ties broken lexicographically.
  static TriLetterVocab build(std::span<const std::string> corpus, std::size_t max_size);
  static TriLetterVocab load(const std::filesystem::path& path);

  // Tokens in id order; element 0 is "<unk>".
  explicit TriLetterVocab(std::vector<std::string> tokens);
  TriLetterVocab() : TriLetterVocab(std::vector<std::string>{std::string(kUnknownToken)}) {}

  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Per-word tri-letter id lists, at most max_words words.
struct EncodedText {
  std::vector<std::vector<int>> words;
  std::size_t size() const { return words.size(); }
  bool operator==(const EncodedText&) const = default;
};

EncodedText encode(std::string_view text, const TriLetterVocab& vocab, std::size_t max_words);

// Unweighted sum of table rows for one word's tri-letter ids.
std::vector<double> word_embedding(std::span<const int> ids, const Tensor& table);

}  // namespace autoadr
