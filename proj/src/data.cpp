#include "autoadr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "autoadr/errors.hpp"
#include "autoadr/random.hpp"
#include "autoadr/tokenizer.hpp"

namespace autoadr {

std::string_view split_name(SplitRole role) {
  switch (role) {
    case SplitRole::kTrain: return "train";
    case SplitRole::kValidation: return "validation";
    case SplitRole::kTest: return "test";
  }
  return "unknown";
}

std::vector<std::string> make_lexicon(std::uint64_t seed, std::size_t size) {
  static constexpr std::string_view kOnsets[] = {"b", "c", "d", "f", "g", "h", "k", "l", "m",
                                                 "n", "p", "r", "s", "t", "v", "w", "z", "br",
                                                 "st", "tr", "pl", "gr", "ch", "sh"};
  static constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ee"};
  static constexpr std::string_view kCodas[] = {"", "", "", "n", "r", "s", "t", "l", "m", "x"};
  Rng rng(seed);
  auto pick = [&](auto& arr) {
    return arr[uniform_index(rng, std::size(arr))];
  };
  std::set<std::string> seen;
  std::vector<std::string> words;
  words.reserve(size);
  std::size_t attempts = 0;
  while (words.size() < size) {
    require(++attempts < size * 100 + 1000, "make_lexicon: cannot generate enough distinct words");
    const std::size_t syllables = 1 + uniform_index(rng, 3);
    std::string word;
    for (std::size_t s = 0; s < syllables; ++s) {
      word.append(pick(kOnsets));
      word.append(pick(kVowels));
      word.append(pick(kCodas));
    }
    if (word.size() < 3 || !seen.insert(word).second) continue;
    words.push_back(std::move(word));
  }
  return words;
}

namespace {

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out.append(w);
  }
  return out;
}

// Distinct lexicon indices not in `exclude`.
std::vector<std::size_t> draw_distinct(Rng& rng, std::size_t lexicon_size, std::size_t count,
                                       const std::vector<std::size_t>& exclude) {
  std::vector<std::size_t> out;
  while (out.size() < count) {
    const std::size_t w = uniform_index(rng, lexicon_size);
    if (std::find(exclude.begin(), exclude.end(), w) != exclude.end()) continue;
    if (std::find(out.begin(), out.end(), w) != out.end()) continue;
    out.push_back(w);
  }
  return out;
}

bool rule_positive(std::size_t matched, std::size_t query_words, double threshold) {
  return static_cast<double>(matched) / static_cast<double>(query_words) > threshold;
}

}  // namespace

Corpus make_synthetic_corpus(const CorpusConfig& config, std::uint64_t seed) {
  require(config.size >= 100, "make_synthetic_corpus: size must be at least 100");
  require(config.noise >= 0.0 && config.noise < 0.5, "make_synthetic_corpus: noise must be in [0, 0.5)");
  require(config.train_fraction > 0.0 && config.validation_fraction > 0.0 &&
              config.train_fraction + config.validation_fraction < 1.0,
          "make_synthetic_corpus: split fractions must leave room for a test split");
  require(config.lexicon_size >= 50, "make_synthetic_corpus: lexicon too small");
  const auto lexicon = make_lexicon(config.lexicon_seed, config.lexicon_size);
  Rng rng(seed);
  std::unordered_set<std::string> seen;
  std::vector<LabeledPair> pairs;
  pairs.reserve(config.size);
  while (pairs.size() < config.size) {
    const std::size_t nq = 2 + uniform_index(rng, 3);
    const auto query_idx = draw_distinct(rng, lexicon.size(), nq, {});
    const std::size_t matched = uniform_index(rng, nq + 1);
    const std::size_t other_words = 1 + uniform_index(rng, 4);
    std::vector<std::size_t> shared = query_idx;
    shuffle(shared, rng);
    shared.resize(matched);
    auto title_idx = draw_distinct(rng, lexicon.size(), other_words, query_idx);
    title_idx.insert(title_idx.end(), shared.begin(), shared.end());
    shuffle(title_idx, rng);
    auto exclude = query_idx;
    const auto desc_idx = draw_distinct(rng, lexicon.size(), 5, exclude);
    const auto host_idx = draw_distinct(rng, lexicon.size(), 1, exclude);

    auto words = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::string> out;
      for (std::size_t i : idx) out.push_back(lexicon[i]);
      return out;
    };
    LabeledPair pair;
    pair.query = join(words(query_idx));
    pair.ad = ad_content(join(words(title_idx)), join(words(desc_idx)),
                         "www." + lexicon[host_idx[0]] + ".com");
    pair.planted = rule_positive(matched, nq, config.overlap_threshold) ? 1 : 0;
    const bool flip = uniform01(rng) < config.noise;
    pair.label = flip ? 1 - pair.planted : pair.planted;
    if (!seen.insert(pair.query + '\t' + pair.ad).second) continue;
    pairs.push_back(std::move(pair));
  }
  Corpus corpus;
  const auto n_train = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(config.size)));
  const auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(config.size)));
  corpus.train.assign(pairs.begin(), pairs.begin() + static_cast<long>(n_train));
  corpus.validation.assign(pairs.begin() + static_cast<long>(n_train),
                           pairs.begin() + static_cast<long>(n_train + n_val));
  corpus.test.assign(pairs.begin() + static_cast<long>(n_train + n_val), pairs.end());
  return corpus;
}

double title_overlap(std::string_view query, std::string_view title) {
  const auto q = split_words(normalize_text(query));
  require(!q.empty(), "title_overlap: empty query");
  const auto t = split_words(normalize_text(title));
  std::size_t found = 0;
  for (const auto& w : q) found += std::find(t.begin(), t.end(), w) != t.end() ? 1 : 0;
  return static_cast<double>(found) / static_cast<double>(q.size());
}

double planted_positive_rate(const CorpusConfig& config) {
  double total = 0.0;
  for (std::size_t nq = 2; nq <= 4; ++nq) {
    std::size_t positive = 0;
    for (std::size_t m = 0; m <= nq; ++m) positive += rule_positive(m, nq, config.overlap_threshold);
    total += static_cast<double>(positive) / static_cast<double>(nq + 1);
  }
  return total / 3.0;
}

double noisy_positive_rate(const CorpusConfig& config) {
  const double p = planted_positive_rate(config);
  return (1.0 - config.noise) * p + config.noise * (1.0 - p);
}

std::string escape_field(std::string_view field) {
  std::string out;
  out.reserve(field.size());
  for (char c : field) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape_field(std::string_view field) {
  std::string out;
  out.reserve(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (field[i] != '\\') {
      out.push_back(field[i]);
      continue;
    }
    require(i + 1 < field.size(), "tsv: dangling escape");
    switch (field[++i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      default: throw ContractViolation("tsv: unknown escape \\" + std::string(1, field[i]));
    }
  }
  return out;
}

std::vector<std::string> split_tsv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(unescape_field(line.substr(start, tab == std::string_view::npos ? tab : tab - start)));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 17);
  require(ec == std::errc(), "format_double: conversion failed");
  return std::string(buf, end);
}

namespace {

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size(), "tsv: bad number '" + s + "'");
  return v;
}

int parse_bit(const std::string& s) {
  require(s == "0" || s == "1", "tsv: expected 0 or 1, got '" + s + "'");
  return s == "1" ? 1 : 0;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

template <typename Fn>
void for_each_row(const std::filesystem::path& path, std::size_t columns, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_tsv_line(line);
    if (fields.size() != columns) {
      throw ContractViolation(path.string() + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(columns) + " columns, got " +
                              std::to_string(fields.size()));
    }
    fn(fields);
  }
}

}  // namespace

void write_pairs(const std::filesystem::path& path, const std::vector<LabeledPair>& pairs) {
  auto out = open_out(path);
  for (const auto& p : pairs)
    out << escape_field(p.query) << '\t' << escape_field(p.ad) << '\t' << p.label << '\t'
        << p.planted << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<LabeledPair> read_pairs(const std::filesystem::path& path) {
  std::vector<LabeledPair> pairs;
  for_each_row(path, 4, [&](std::vector<std::string>& f) {
    pairs.push_back({std::move(f[0]), std::move(f[1]), parse_bit(f[2]), parse_bit(f[3])});
  });
  return pairs;
}

void write_teacher_records(const std::filesystem::path& path,
                           const std::vector<TeacherRecord>& records) {
  auto out = open_out(path);
  for (const auto& r : records)
    out << escape_field(r.query) << '\t' << escape_field(r.ad) << '\t' << format_double(r.z)
        << '\t' << format_double(r.y) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<TeacherRecord> read_teacher_records(const std::filesystem::path& path) {
  std::vector<TeacherRecord> records;
  for_each_row(path, 4, [&](std::vector<std::string>& f) {
    records.push_back({std::move(f[0]), std::move(f[1]), parse_double(f[2]), parse_double(f[3])});
  });
  return records;
}

void write_scored_pairs(const std::filesystem::path& path, const std::vector<std::string>& queries,
                        const std::vector<std::string>& ads, const std::vector<double>& scores) {
  require(queries.size() == ads.size() && ads.size() == scores.size(),
          "write_scored_pairs: column lengths differ");
  auto out = open_out(path);
  for (std::size_t i = 0; i < scores.size(); ++i)
    out << escape_field(queries[i]) << '\t' << escape_field(ads[i]) << '\t'
        << format_double(scores[i]) << '\n';
}

}  // namespace autoadr
