#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "autoadr/data.hpp"
#include "autoadr/errors.hpp"
#include "autoadr/tokenizer.hpp"

namespace autoadr {
namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("autoadr_data_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<std::string> words_of(const std::string& text) { return split_words(normalize_text(text)); }

CorpusConfig small_config(std::size_t size) {
  CorpusConfig c;
  c.size = size;
  return c;
}

TEST(Lexicon, DeterministicDistinctAndLowercase) {
  const auto a = make_lexicon(17, 1500);
  EXPECT_EQ(a, make_lexicon(17, 1500));
  EXPECT_NE(a, make_lexicon(18, 1500));
  EXPECT_EQ(std::set<std::string>(a.begin(), a.end()).size(), a.size());
  for (const auto& w : a) {
    EXPECT_GE(w.size(), 3u);
    EXPECT_EQ(normalize_text(w), w);
  }
}

TEST(PlantedRate, MatchesClosedForm) {
  // Query length uniform on {2,3,4}, matched count uniform on [0, n]:
  // positive iff m > n/2, i.e. (1/3 + 2/4 + 2/5) / 3.
  const CorpusConfig c;
  EXPECT_NEAR(planted_positive_rate(c), 37.0 / 90.0, 1e-15);
  EXPECT_NEAR(noisy_positive_rate(c), 0.95 * 37.0 / 90.0 + 0.05 * 53.0 / 90.0, 1e-15);
}

TEST(Corpus, SplitSizesAndDeterminism) {
  const auto c = make_synthetic_corpus(small_config(2000), 3);
  EXPECT_EQ(c.train.size(), 1600u);
  EXPECT_EQ(c.validation.size(), 200u);
  EXPECT_EQ(c.test.size(), 200u);
  const auto again = make_synthetic_corpus(small_config(2000), 3);
  EXPECT_EQ(c.train, again.train);
  EXPECT_EQ(c.test, again.test);
  EXPECT_NE(c.train, make_synthetic_corpus(small_config(2000), 4).train);
}

TEST(Corpus, PairsAreUniqueAcrossSplits) {
  const auto c = make_synthetic_corpus(small_config(20000), 1);
  std::set<std::string> keys;
  for (const auto* split : {&c.train, &c.validation, &c.test})
    for (const auto& p : *split) EXPECT_TRUE(keys.insert(p.query + '\t' + p.ad).second);
}

TEST(Corpus, PlantedLabelFollowsOverlapRule) {
  // Description and host never contain query words, so the overlap with the
  // whole ad text equals the overlap with the title.
  const auto c = make_synthetic_corpus(small_config(5000), 2);
  for (const auto& p : c.train) {
    const auto q = words_of(p.query);
    ASSERT_GE(q.size(), 2u);
    ASSERT_LE(q.size(), 4u);
    EXPECT_EQ(std::set<std::string>(q.begin(), q.end()).size(), q.size());
    const auto ad = words_of(p.ad);
    const auto found = std::count_if(q.begin(), q.end(), [&](const std::string& w) {
      return std::find(ad.begin(), ad.end(), w) != ad.end();
    });
    EXPECT_EQ(p.planted, 2 * found > static_cast<long>(q.size()) ? 1 : 0) << p.query << " | " << p.ad;
    EXPECT_EQ(title_overlap(p.query, p.ad), static_cast<double>(found) / q.size());
    EXPECT_LE(ad.size(), kMaxAdWords);
    // title (1..8 words) + 5 description words + www host com
    EXPECT_GE(ad.size(), 9u);
    EXPECT_LE(ad.size(), 16u);
    EXPECT_EQ(ad.back(), "com");
  }
}

TEST(Corpus, RatesWithinThreeSigma) {
  const auto c = make_synthetic_corpus(small_config(50000), 1);
  std::size_t n = 0, planted = 0, flipped = 0;
  for (const auto* split : {&c.train, &c.validation, &c.test}) {
    for (const auto& p : *split) {
      ++n;
      planted += p.planted;
      flipped += p.label != p.planted;
    }
  }
  const double p = 37.0 / 90.0;
  EXPECT_NEAR(static_cast<double>(planted) / n, p, 3.0 * std::sqrt(p * (1 - p) / n));
  EXPECT_NEAR(static_cast<double>(flipped) / n, 0.05, 3.0 * std::sqrt(0.05 * 0.95 / n));
}

TEST(TitleOverlap, NormalizesCaseAndPunctuation) {
  EXPECT_DOUBLE_EQ(title_overlap("Red Shoes", "cheap red-shoes sale"), 1.0);
  EXPECT_DOUBLE_EQ(title_overlap("red boots", "red shoes"), 0.5);
  EXPECT_DOUBLE_EQ(title_overlap("a b c", "x y"), 0.0);
  EXPECT_THROW(title_overlap(" ,", "x"), ContractViolation);
}

TEST(Tsv, EscapeRoundTrip) {
  for (const std::string s : {"", "plain", "tab\there", "line\nbreak", "cr\r", "back\\slash",
                              "\\t literal", "mixed\t\\\n\r"}) {
    const auto e = escape_field(s);
    EXPECT_EQ(e.find('\t'), std::string::npos);
    EXPECT_EQ(e.find('\n'), std::string::npos);
    EXPECT_EQ(unescape_field(e), s);
  }
  EXPECT_EQ(escape_field("a\tb"), "a\\tb");
  EXPECT_THROW(unescape_field("bad\\"), ContractViolation);
  EXPECT_THROW(unescape_field("bad\\x"), ContractViolation);
}

TEST(Tsv, PairsRoundTrip) {
  const auto dir = temp_dir("pairs");
  std::vector<LabeledPair> pairs{{"q\tone", "ad\nwith newline", 1, 0}, {"q2", "ad \\ two", 0, 0}};
  write_pairs(dir / "p.tsv", pairs);
  EXPECT_EQ(read_pairs(dir / "p.tsv"), pairs);
}

TEST(Tsv, TeacherRecordsRoundTripBitExact) {
  const auto dir = temp_dir("records");
  std::vector<TeacherRecord> records{{"q", "a", 0.1 + 0.2, 1.0 / 3.0}, {"x", "y", -1e-300, 5e-324},
                                     {"z", "w", 123456.789012345678, 0.5}};
  write_teacher_records(dir / "r.tsv", records);
  const auto back = read_teacher_records(dir / "r.tsv");
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(back[i].z, records[i].z);
    EXPECT_EQ(back[i].y, records[i].y);
  }
}

TEST(Tsv, MalformedRowsNameTheLine) {
  const auto dir = temp_dir("bad");
  std::ofstream(dir / "bad.tsv") << "q\ta\t1\t0\nq\ta\t1\n";
  try {
    read_pairs(dir / "bad.tsv");
    FAIL() << "expected a contract violation";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "bit.tsv") << "q\ta\t2\t0\n";
  EXPECT_THROW(read_pairs(dir / "bit.tsv"), ContractViolation);
  std::ofstream(dir / "num.tsv") << "q\ta\t0.5x\t0.5\n";
  EXPECT_THROW(read_teacher_records(dir / "num.tsv"), ContractViolation);
}

TEST(FormatDouble, SeventeenSignificantDigitsRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-8, 1e300, 0.0}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(0.5), "0.5");
}

}  // namespace
}  // namespace autoadr
