#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace autoadr {

enum class HpKind { kUniform, kLogUniform, kChoice };

struct HpDimension {
  std::string name;
  HpKind kind = HpKind::kUniform;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> choices;  // kChoice only

  static HpDimension uniform(std::string name, double lo, double hi);
  static HpDimension log_uniform(std::string name, double lo, double hi);
  static HpDimension choice(std::string name, std::vector<double> values);
  bool contains(double value) const;
};

struct HpSpace {
  std::vector<HpDimension> dims;
};

// Values keyed by dimension name.
using HpPoint = std::map<std::string, double>;

enum class TrialStatus { kCompleted, kFailed };

struct TrialRecord {
  std::size_t index = 0;
  HpPoint point;
  double objective = 0.0;  // lower is better; meaningful when completed
  TrialStatus status = TrialStatus::kCompleted;
  std::string error;
  bool operator==(const TrialRecord&) const = default;
};

struct TpeOptions {
  std::size_t startup_trials = 10;
  double gamma = 0.25;
  std::size_t candidates = 24;
};

// Uniform over the space while the history holds fewer than startup_trials
// trials or no completed one. After that, TPE: completed trials are split at
// the gamma quantile of objectives, and each dimension gets a density for the
// good set l(x) and for the rest g(x). Continuous dimensions use truncated
// Gaussian kernels with Scott's-rule bandwidth, floored at
// range / min(100, n + 1), mixed with the uniform prior as one extra
// component (in log space when log-uniform); choices use smoothed
// frequencies. The best of `candidates`
// draws from l by sum of log l(x) - log g(x) is returned. With no bad trials
// g is the uniform prior. Failed trials are ignored. The result depends only
// on (history, space, seed, options).
HpPoint suggest(const std::vector<TrialRecord>& history, const HpSpace& space, std::uint64_t seed,
                const TpeOptions& options = {});

struct HpSearchResult {
  TrialRecord best;
  std::vector<TrialRecord> records;
};

class AllTrialsFailed : public std::runtime_error {
 public:
  AllTrialsFailed(const std::string& what, std::vector<TrialRecord> records)
      : std::runtime_error(what), records(std::move(records)) {}
  std::vector<TrialRecord> records;
};

// Objective exceptions mark the trial failed. `previous` holds trials from a
// resumed log; the loop continues at previous.size() and never runs more
// than `budget` trials in total.
HpSearchResult run_search(const std::function<double(const HpPoint&)>& objective,
                          const HpSpace& space, std::size_t budget, std::uint64_t seed,
                          const TpeOptions& options = {},
                          std::vector<TrialRecord> previous = {},
                          const std::function<void(const TrialRecord&)>& on_trial = {});

std::string trial_json(const TrialRecord& record);
TrialRecord parse_trial_json(const std::string& line);
// Reads a line-delimited trial log; a missing file yields no records.
std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path);

}  // namespace autoadr
