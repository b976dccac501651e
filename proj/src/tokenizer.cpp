#include "autoadr/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "autoadr/errors.hpp"

namespace autoadr {

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char raw : text) {
    auto c = static_cast<unsigned char>(raw);
    if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
    const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
    if (!keep) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < normalized.size()) {
    std::size_t end = normalized.find(' ', start);
    if (end == std::string_view::npos) end = normalized.size();
    if (end > start) words.emplace_back(normalized.substr(start, end - start));
    start = end + 1;
  }
  return words;
}

std::vector<std::string> tri_letters(std::string_view word) {
  std::string padded = "#";
  for (char c : word) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
    padded.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
  }
  require(padded.size() > 1, "tri_letters: empty word");
  padded.push_back('#');
  std::vector<std::string> grams;
  grams.reserve(padded.size() - 2);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) grams.push_back(padded.substr(i, 3));
  return grams;
}

std::string ad_content(std::string_view title, std::string_view description,
                       std::string_view url) {
  std::string host_url(url);
  const std::size_t scheme = host_url.find("://");
  const std::size_t host_begin = scheme == std::string::npos ? 0 : scheme + 3;
  std::size_t host_end = host_url.find('/', host_begin);
  if (host_end == std::string::npos) host_end = host_url.size();
  std::replace(host_url.begin() + static_cast<long>(host_begin),
               host_url.begin() + static_cast<long>(host_end), '.', ' ');
  std::string out(title);
  for (std::string_view part : {description, std::string_view(host_url)}) {
    if (part.empty()) continue;
    if (!out.empty()) out.push_back(' ');
    out.append(part);
  }
  return out;
}

TriLetterVocab::TriLetterVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  require(!tokens_.empty() && tokens_[0] == kUnknownToken,
          "vocab: id 0 must be the <unk> sentinel");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const bool fresh = index_.emplace(tokens_[i], static_cast<int>(i)).second;
    require(fresh, "vocab: duplicate token '" + tokens_[i] + "'");
  }
}

TriLetterVocab TriLetterVocab::build(std::span<const std::string> corpus, std::size_t max_size) {
  require(max_size >= 1, "build_vocab: max_size must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const std::string& text : corpus)
    for (const std::string& word : split_words(normalize_text(text)))
      for (std::string& gram : tri_letters(word)) ++counts[std::move(gram)];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kUnknownToken)};
  for (auto& [gram, count] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(gram);
  }
  return TriLetterVocab(std::move(tokens));
}

TriLetterVocab TriLetterVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocab: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return TriLetterVocab(std::move(tokens));
}

void TriLetterVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("vocab: cannot write " + path.string());
  for (const std::string& t : tokens_) out << t << '\n';
}

int TriLetterVocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnknownId : it->second;
}

EncodedText encode(std::string_view text, const TriLetterVocab& vocab, std::size_t max_words) {
  require(max_words >= 1, "encode: max_words must be at least 1");
  EncodedText encoded;
  for (const std::string& word : split_words(normalize_text(text))) {
    if (encoded.words.size() >= max_words) break;
    std::vector<int> ids;
    for (const std::string& gram : tri_letters(word)) ids.push_back(vocab.id(gram));
    encoded.words.push_back(std::move(ids));
  }
  return encoded;
}

std::vector<double> word_embedding(std::span<const int> ids, const Tensor& table) {
  require(table.rank() == 2, "word_embedding: table must be [V, E]");
  const std::size_t vocab = table.dim(0), emb = table.dim(1);
  std::vector<double> out(emb, 0.0);
  for (int id : ids) {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab,
            "word_embedding: id " + std::to_string(id) + " out of range");
    for (std::size_t e = 0; e < emb; ++e) out[e] += table[static_cast<std::size_t>(id) * emb + e];
  }
  return out;
}

}  // namespace autoadr
