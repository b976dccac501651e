#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "autoadr/errors.hpp"
#include "autoadr/hyperopt.hpp"

namespace autoadr {
namespace {

HpSpace mixed_space() {
  return {{HpDimension::uniform("x", 0.0, 1.0), HpDimension::log_uniform("lr", 1e-5, 1e-1),
           HpDimension::choice("batch", {16, 32, 64, 128})}};
}

double bowl(const HpPoint& p) {
  const double dx = p.at("x") - 0.3;
  const double dl = std::log10(p.at("lr")) + 3.0;
  return dx * dx + 0.05 * dl * dl + (p.at("batch") == 64 ? 0.0 : 0.1);
}

TEST(HpDimension, FactoriesValidateRanges) {
  EXPECT_THROW(HpDimension::uniform("a", 1.0, 1.0), ContractViolation);
  EXPECT_THROW(HpDimension::log_uniform("a", 0.0, 1.0), ContractViolation);
  EXPECT_THROW(HpDimension::choice("a", {}), ContractViolation);
  EXPECT_TRUE(HpDimension::choice("a", {1, 2}).contains(2));
  EXPECT_FALSE(HpDimension::choice("a", {1, 2}).contains(3));
  EXPECT_TRUE(HpDimension::log_uniform("a", 1e-3, 1.0).contains(1e-3));
}

TEST(Suggest, DeterministicAndWithinBounds) {
  const auto space = mixed_space();
  std::vector<TrialRecord> history;
  for (std::size_t i = 0; i < 30; ++i) {
    const auto p = suggest(history, space, 5);
    EXPECT_EQ(p, suggest(history, space, 5));
    for (const auto& d : space.dims) EXPECT_TRUE(d.contains(p.at(d.name))) << d.name << "=" << p.at(d.name);
    history.push_back({i, p, bowl(p), TrialStatus::kCompleted, ""});
  }
}

TEST(Suggest, StartupDrawsAreUniformInLogSpace) {
  const HpSpace space{{HpDimension::log_uniform("lr", 1e-6, 1e-2)}};
  double sum = 0.0;
  constexpr int kDraws = 4000;
  for (int s = 0; s < kDraws; ++s) sum += std::log10(suggest({}, space, s).at("lr"));
  // Uniform on [-6, -2]: mean -4, sd 4/sqrt(12).
  EXPECT_NEAR(sum / kDraws, -4.0, 3.0 * (4.0 / std::sqrt(12.0)) / std::sqrt(kDraws));
}

TEST(Suggest, IgnoresFailedTrialsAndFallsBackToPrior) {
  const auto space = mixed_space();
  std::vector<TrialRecord> failed;
  for (std::size_t i = 0; i < 12; ++i)
    failed.push_back({i, suggest(failed, space, 1), 0.0, TrialStatus::kFailed, "boom"});
  const auto p = suggest(failed, space, 1);
  for (const auto& d : space.dims) EXPECT_TRUE(d.contains(p.at(d.name)));
}

TEST(Suggest, EmptySpaceIsAContractViolation) {
  EXPECT_THROW(suggest({}, HpSpace{}, 1), ContractViolation);
}

TEST(Suggest, ConcentratesNearTheOptimum) {
  const auto space = mixed_space();
  std::vector<TrialRecord> history;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto p = suggest(history, space, 21);
    history.push_back({i, p, bowl(p), TrialStatus::kCompleted, ""});
  }
  auto mean_gap = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += std::abs(history[i].point.at("x") - 0.3);
    return s / static_cast<double>(to - from);
  };
  EXPECT_LT(mean_gap(40, 60), 0.5 * mean_gap(0, 10));
  std::size_t chose_64 = 0;
  for (std::size_t i = 40; i < 60; ++i) chose_64 += history[i].point.at("batch") == 64;
  EXPECT_GE(chose_64, 12u);
}

TEST(Suggest, BeatsRandomSearchAcrossSeeds) {
  const auto space = mixed_space();
  TpeOptions random_only;
  random_only.startup_trials = 1000;
  std::vector<double> tpe, rnd;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tpe.push_back(run_search(bowl, space, 40, seed).best.objective);
    rnd.push_back(run_search(bowl, space, 40, seed + 100, random_only).best.objective);
  }
  std::sort(tpe.begin(), tpe.end());
  std::sort(rnd.begin(), rnd.end());
  EXPECT_LT(tpe[10], 0.5 * rnd[10]);
}

TEST(Suggest, OneDimensionalQuadraticWithin50Trials) {
  const HpSpace space{{HpDimension::uniform("x", 0.0, 1.0)}};
  auto f = [](const HpPoint& p) { return (p.at("x") - 0.3) * (p.at("x") - 0.3); };
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    hits += std::abs(run_search(f, space, 50, seed).best.point.at("x") - 0.3) < 0.05;
  EXPECT_GE(hits, 4);
}

TEST(Suggest, MonotoneObjectiveFindsTheExtreme) {
  const HpSpace space{{HpDimension::log_uniform("lr", 1e-5, 1e-1), HpDimension::uniform("y", 0.0, 1.0)}};
  auto f = [](const HpPoint& p) { return -std::log(p.at("lr")); };
  const auto best = run_search(f, space, 40, 6).best;
  EXPECT_GT(std::log10(best.point.at("lr")), -1.5);
}

TEST(Suggest, GammaOneSamplesFromGoodDensityOnly) {
  const auto space = mixed_space();
  TpeOptions all_good;
  all_good.gamma = 1.0;
  const auto result = run_search(bowl, space, 30, 2, all_good);
  EXPECT_EQ(result.records.size(), 30u);
}

TEST(Suggest, TenThousandSuggestionsStayInBounds) {
  const auto space = mixed_space();
  std::vector<TrialRecord> history;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto p = suggest(history, space, 77);
    history.push_back({i, p, bowl(p), TrialStatus::kCompleted, ""});
  }
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto p = suggest(history, space, seed);
    for (const auto& d : space.dims) ASSERT_TRUE(d.contains(p.at(d.name))) << d.name << " " << p.at(d.name);
  }
}

TEST(RunSearch, BudgetOneReturnsTheSingleTrial) {
  const auto result = run_search(bowl, mixed_space(), 1, 4);
  ASSERT_EQ(result.records.size(), 1u);
  EXPECT_EQ(result.best, result.records[0]);
}

TEST(RunSearch, RecordsFailuresAndPicksBestCompleted) {
  const auto space = mixed_space();
  int calls = 0;
  auto objective = [&](const HpPoint& p) {
    if (++calls % 3 == 0) throw std::runtime_error("diverged");
    if (calls == 5) return std::nan("");
    return bowl(p);
  };
  const auto result = run_search(objective, space, 12, 3);
  ASSERT_EQ(result.records.size(), 12u);
  double best = 1e300;
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    const auto& r = result.records[i];
    EXPECT_EQ(r.index, i);
    const bool should_fail = (i + 1) % 3 == 0 || i + 1 == 5;
    EXPECT_EQ(r.status == TrialStatus::kFailed, should_fail) << i;
    if (r.status == TrialStatus::kFailed) EXPECT_FALSE(r.error.empty());
    else best = std::min(best, r.objective);
  }
  EXPECT_EQ(result.best.objective, best);
}

TEST(RunSearch, AllFailuresThrowWithRecords) {
  try {
    run_search([](const HpPoint&) -> double { throw std::runtime_error("no"); }, mixed_space(), 4, 1);
    FAIL() << "expected AllTrialsFailed";
  } catch (const AllTrialsFailed& e) {
    EXPECT_EQ(e.records.size(), 4u);
  }
}

TEST(RunSearch, ResumeReproducesUninterruptedRun) {
  const auto space = mixed_space();
  const auto full = run_search(bowl, space, 25, 8);
  std::vector<TrialRecord> prefix(full.records.begin(), full.records.begin() + 13);
  int calls = 0;
  const auto resumed = run_search(
      [&](const HpPoint& p) {
        ++calls;
        return bowl(p);
      },
      space, 25, 8, {}, prefix);
  EXPECT_EQ(calls, 12);
  EXPECT_EQ(resumed.records, full.records);
  EXPECT_EQ(resumed.best, full.best);
}

TEST(RunSearch, NeverExceedsBudget) {
  const auto space = mixed_space();
  const auto full = run_search(bowl, space, 6, 8);
  int calls = 0;
  const auto again = run_search(
      [&](const HpPoint& p) {
        ++calls;
        return bowl(p);
      },
      space, 4, 8, {}, full.records);
  EXPECT_EQ(calls, 0);
  EXPECT_EQ(again.records.size(), 4u);
  EXPECT_THROW(run_search(bowl, space, 0, 1), ContractViolation);
}

TEST(TrialLog, JsonRoundTripIsExact) {
  TrialRecord ok{3, {{"lr", 1.0 / 3.0}, {"batch", 64}}, 0.1 + 0.2, TrialStatus::kCompleted, ""};
  TrialRecord bad{4, {{"lr", 2e-5}}, 0.0, TrialStatus::kFailed, "diverged\tat step 3"};
  EXPECT_EQ(parse_trial_json(trial_json(ok)), ok);
  EXPECT_EQ(parse_trial_json(trial_json(bad)), bad);
  EXPECT_NE(trial_json(bad).find("\"objective\":null"), std::string::npos);
}

TEST(TrialLog, ReadsInOrderAndRejectsGaps) {
  const auto dir = std::filesystem::temp_directory_path() / "autoadr_hyperopt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "trials.jsonl";
  std::filesystem::remove(path);
  EXPECT_TRUE(read_trial_log(path).empty());
  const auto result = run_search(bowl, mixed_space(), 5, 2);
  {
    std::ofstream out(path);
    for (const auto& r : result.records) out << trial_json(r) << '\n';
  }
  EXPECT_EQ(read_trial_log(path), result.records);
  {
    std::ofstream out(path);
    out << trial_json(result.records[1]) << '\n';
  }
  EXPECT_THROW(read_trial_log(path), ContractViolation);
}

}  // namespace
}  // namespace autoadr
