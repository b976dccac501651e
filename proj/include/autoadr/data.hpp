#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace autoadr {

// One query-ad pair. `label` is the training label (planted rule with label
// noise applied); `planted` is the noise-free rule outcome.
struct LabeledPair {
  std::string query;
  std::string ad;
  int label = 0;
  int planted = 0;
  bool operator==(const LabeledPair&) const = default;
};

// Distillation unit: teacher logit z and soft target y = sigmoid(z / T).
struct TeacherRecord {
  std::string query;
  std::string ad;
  double z = 0.0;
  double y = 0.5;
  bool operator==(const TeacherRecord&) const = default;
};

enum class SplitRole { kTrain, kValidation, kTest };
std::string_view split_name(SplitRole role);

struct CorpusConfig {
  std::size_t size = 50000;
  std::uint64_t lexicon_seed = 17;
  std::size_t lexicon_size = 1500;
  double noise = 0.05;
  // Positive iff (query words found in the ad title) / (query words) > threshold.
  double overlap_threshold = 0.5;
  double train_fraction = 0.8;
  double validation_fraction = 0.1;
};

struct Corpus {
  std::vector<LabeledPair> train;
  std::vector<LabeledPair> validation;
  std::vector<LabeledPair> test;
};

// Pronounceable synthetic words; many share tri-letters.
std::vector<std::string> make_lexicon(std::uint64_t seed, std::size_t size);

// Queries have 2 to 4 distinct words. Ad titles hold a uniformly drawn
// number m in [0, query words] of the query words plus 1 to 4 others; the
// description (5 words) and URL host never contain query words. Pairs are
// unique across the whole corpus.
Corpus make_synthetic_corpus(const CorpusConfig& config, std::uint64_t seed);

// Fraction of query words present in the title, after normalisation.
double title_overlap(std::string_view query, std::string_view title);

// Exact probability that a generated pair is planted-positive, and the
// expected rate of noisy training labels.
double planted_positive_rate(const CorpusConfig& config);
double noisy_positive_rate(const CorpusConfig& config);

// Tab-separated text, one record per line, UTF-8. Backslash, tab, newline
// and carriage return inside a field are written as \\, \t, \n and \r.
std::string escape_field(std::string_view field);
std::string unescape_field(std::string_view field);
std::vector<std::string> split_tsv_line(std::string_view line);

// Columns: query, ad, label, planted.
void write_pairs(const std::filesystem::path& path, const std::vector<LabeledPair>& pairs);
std::vector<LabeledPair> read_pairs(const std::filesystem::path& path);

// Columns: query, ad, z, y (doubles written with 17 significant digits).
void write_teacher_records(const std::filesystem::path& path,
                           const std::vector<TeacherRecord>& records);
std::vector<TeacherRecord> read_teacher_records(const std::filesystem::path& path);

// Columns: query, ad, score.
void write_scored_pairs(const std::filesystem::path& path, const std::vector<std::string>& queries,
                        const std::vector<std::string>& ads, const std::vector<double>& scores);

std::string format_double(double value);

}  // namespace autoadr
