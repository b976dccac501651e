#include "autoadr/hyperopt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "autoadr/data.hpp"
#include "autoadr/errors.hpp"
#include "autoadr/random.hpp"

namespace autoadr {

HpDimension HpDimension::uniform(std::string name, double lo, double hi) {
  require(lo < hi, "hp: uniform dimension '" + name + "' needs lo < hi");
  return {std::move(name), HpKind::kUniform, lo, hi, {}};
}

HpDimension HpDimension::log_uniform(std::string name, double lo, double hi) {
  require(lo > 0.0 && lo < hi, "hp: log-uniform dimension '" + name + "' needs 0 < lo < hi");
  return {std::move(name), HpKind::kLogUniform, lo, hi, {}};
}

HpDimension HpDimension::choice(std::string name, std::vector<double> values) {
  require(!values.empty(), "hp: choice dimension '" + name + "' has no values");
  return {std::move(name), HpKind::kChoice, 0.0, 0.0, std::move(values)};
}

bool HpDimension::contains(double value) const {
  if (kind == HpKind::kChoice) return std::find(choices.begin(), choices.end(), value) != choices.end();
  return value >= lo && value <= hi;
}

namespace {

// Continuous dimensions are modelled in "internal" coordinates: identity for
// uniform, natural log for log-uniform.
struct Interval {
  double lo, hi;
};

Interval internal_bounds(const HpDimension& d) {
  if (d.kind == HpKind::kLogUniform) return {std::log(d.lo), std::log(d.hi)};
  return {d.lo, d.hi};
}

double to_internal(const HpDimension& d, double v) {
  return d.kind == HpKind::kLogUniform ? std::log(v) : v;
}

double from_internal(const HpDimension& d, double u) {
  const double v = d.kind == HpKind::kLogUniform ? std::exp(u) : u;
  return std::clamp(v, d.lo, d.hi);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Gaussian mixture with one kernel per observation, truncated to the bounds,
// plus the uniform prior as one extra equally weighted component.
struct Kde {
  std::vector<double> centers;
  double bandwidth = 1.0;
  Interval bounds{0.0, 1.0};

  static Kde fit(std::vector<double> points, Interval bounds) {
    Kde k;
    k.centers = std::move(points);
    k.bounds = bounds;
    const double n = static_cast<double>(k.centers.size());
    double mean = 0.0;
    for (double c : k.centers) mean += c;
    mean /= n;
    double var = 0.0;
    for (double c : k.centers) var += (c - mean) * (c - mean);
    const double sd = k.centers.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    const double width = bounds.hi - bounds.lo;
    // Scott's rule, floored so that tight clusters keep exploring.
    k.bandwidth = std::max(sd * std::pow(n, -0.2), width / std::min(100.0, n + 1.0));
    return k;
  }

  double density(double x) const {
    double total = 1.0 / (bounds.hi - bounds.lo);
    for (double c : centers) {
      const double mass = normal_cdf((bounds.hi - c) / bandwidth) - normal_cdf((bounds.lo - c) / bandwidth);
      const double z = (x - c) / bandwidth;
      total += std::exp(-0.5 * z * z) / (bandwidth * std::sqrt(2.0 * std::numbers::pi) * std::max(mass, 1e-300));
    }
    return total / static_cast<double>(centers.size() + 1);
  }

  double sample(Rng& rng) const {
    const std::size_t pick = uniform_index(rng, centers.size() + 1);
    if (pick == centers.size()) return uniform(rng, bounds.lo, bounds.hi);
    const double c = centers[pick];
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double x = normal(rng, c, bandwidth);
      if (x >= bounds.lo && x <= bounds.hi) return x;
    }
    return std::clamp(c, bounds.lo, bounds.hi);
  }
};

// Frequencies with one pseudo-count per choice.
std::vector<double> choice_weights(const HpDimension& d, const std::vector<double>& values) {
  std::vector<double> w(d.choices.size(), 1.0);
  for (double v : values)
    for (std::size_t i = 0; i < d.choices.size(); ++i)
      if (d.choices[i] == v) w[i] += 1.0;
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

std::size_t sample_weighted(Rng& rng, const std::vector<double>& w) {
  double u = uniform01(rng), acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return i;
  }
  return w.size() - 1;
}

HpPoint sample_prior(const HpSpace& space, Rng& rng) {
  HpPoint p;
  for (const auto& d : space.dims) {
    if (d.kind == HpKind::kChoice) {
      p[d.name] = d.choices[uniform_index(rng, d.choices.size())];
    } else {
      const Interval b = internal_bounds(d);
      p[d.name] = from_internal(d, uniform(rng, b.lo, b.hi));
    }
  }
  return p;
}

void validate_space(const HpSpace& space) {
  require(!space.dims.empty(), "hp: empty search space");
  for (const auto& d : space.dims) {
    if (d.kind == HpKind::kChoice) {
      require(!d.choices.empty(), "hp: choice dimension '" + d.name + "' has no values");
    } else {
      require(d.lo < d.hi, "hp: dimension '" + d.name + "' has empty range");
      require(d.kind != HpKind::kLogUniform || d.lo > 0.0, "hp: log-uniform dimension '" + d.name + "' needs lo > 0");
    }
  }
}

}  // namespace

HpPoint suggest(const std::vector<TrialRecord>& history, const HpSpace& space, std::uint64_t seed,
                const TpeOptions& options) {
  validate_space(space);
  require(options.gamma > 0.0 && options.gamma <= 1.0, "hp: gamma must be in (0, 1]");
  require(options.candidates > 0, "hp: candidate count must be positive");
  Rng rng(mix_seed(seed, history.size()));
  std::vector<const TrialRecord*> done;
  for (const auto& t : history)
    if (t.status == TrialStatus::kCompleted) done.push_back(&t);
  if (history.size() < options.startup_trials || done.empty()) return sample_prior(space, rng);

  std::stable_sort(done.begin(), done.end(), [](const TrialRecord* a, const TrialRecord* b) {
    return a->objective < b->objective;
  });
  const std::size_t n_good = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(options.gamma * static_cast<double>(done.size()))), 1,
      done.size());
  const std::vector<const TrialRecord*> good(done.begin(), done.begin() + static_cast<long>(n_good));
  const std::vector<const TrialRecord*> bad(done.begin() + static_cast<long>(n_good), done.end());

  auto values = [](const std::vector<const TrialRecord*>& set, const HpDimension& d) {
    std::vector<double> out;
    for (const auto* t : set) out.push_back(t->point.at(d.name));
    return out;
  };

  std::vector<HpPoint> candidates(options.candidates);
  std::vector<double> scores(options.candidates, 0.0);
  for (const auto& d : space.dims) {
    if (d.kind == HpKind::kChoice) {
      const auto l = choice_weights(d, values(good, d));
      const auto g = bad.empty() ? std::vector<double>(d.choices.size(), 1.0 / static_cast<double>(d.choices.size()))
                                 : choice_weights(d, values(bad, d));
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const std::size_t i = sample_weighted(rng, l);
        candidates[c][d.name] = d.choices[i];
        scores[c] += std::log(l[i]) - std::log(g[i]);
      }
    } else {
      const Interval b = internal_bounds(d);
      std::vector<double> good_u, bad_u;
      for (double v : values(good, d)) good_u.push_back(to_internal(d, v));
      for (double v : values(bad, d)) bad_u.push_back(to_internal(d, v));
      const Kde l = Kde::fit(good_u, b);
      const bool has_bad = !bad_u.empty();
      const Kde g = has_bad ? Kde::fit(bad_u, b) : l;
      const double prior = 1.0 / (b.hi - b.lo);
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const double u = l.sample(rng);
        candidates[c][d.name] = from_internal(d, u);
        scores[c] += std::log(std::max(l.density(u), 1e-300)) -
                     std::log(std::max(has_bad ? g.density(u) : prior, 1e-300));
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c)
    if (scores[c] > scores[best]) best = c;
  return candidates[best];
}

HpSearchResult run_search(const std::function<double(const HpPoint&)>& objective,
                          const HpSpace& space, std::size_t budget, std::uint64_t seed,
                          const TpeOptions& options, std::vector<TrialRecord> previous,
                          const std::function<void(const TrialRecord&)>& on_trial) {
  require(budget >= 1, "hp: trial budget must be at least 1");
  validate_space(space);
  HpSearchResult result;
  result.records = std::move(previous);
  if (result.records.size() > budget) result.records.resize(budget);
  while (result.records.size() < budget) {
    TrialRecord t;
    t.index = result.records.size();
    t.point = suggest(result.records, space, seed, options);
    try {
      t.objective = objective(t.point);
      if (!std::isfinite(t.objective)) throw NumericFailure("objective is not finite");
      t.status = TrialStatus::kCompleted;
    } catch (const std::exception& e) {
      t.status = TrialStatus::kFailed;
      t.objective = 0.0;
      t.error = e.what();
    }
    result.records.push_back(t);
    if (on_trial) on_trial(t);
  }
  const TrialRecord* best = nullptr;
  for (const auto& t : result.records)
    if (t.status == TrialStatus::kCompleted && (!best || t.objective < best->objective)) best = &t;
  if (!best) throw AllTrialsFailed("hp: all " + std::to_string(result.records.size()) + " trials failed", result.records);
  result.best = *best;
  return result;
}

std::string trial_json(const TrialRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "trial";
  j["index"] = r.index;
  nlohmann::ordered_json point = nlohmann::ordered_json::object();
  for (const auto& [name, value] : r.point) point[name] = nlohmann::ordered_json::parse(format_double(value));
  j["point"] = point;
  j["status"] = r.status == TrialStatus::kCompleted ? "completed" : "failed";
  j["objective"] = r.status == TrialStatus::kCompleted
                       ? nlohmann::ordered_json::parse(format_double(r.objective))
                       : nlohmann::ordered_json(nullptr);
  if (!r.error.empty()) j["error"] = r.error;
  return j.dump();
}

TrialRecord parse_trial_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  require(j.value("type", "") == "trial", "hp: not a trial record");
  TrialRecord r;
  r.index = j.at("index");
  for (const auto& [name, value] : j.at("point").items()) r.point[name] = value.get<double>();
  const std::string status = j.at("status");
  require(status == "completed" || status == "failed", "hp: bad trial status '" + status + "'");
  r.status = status == "completed" ? TrialStatus::kCompleted : TrialStatus::kFailed;
  if (r.status == TrialStatus::kCompleted) r.objective = j.at("objective");
  r.error = j.value("error", "");
  return r;
}

std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path) {
  std::vector<TrialRecord> records;
  std::ifstream in(path);
  if (!in) return records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TrialRecord r = parse_trial_json(line);
    require(r.index == records.size(), "hp: trial log out of order at index " + std::to_string(r.index));
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace autoadr
