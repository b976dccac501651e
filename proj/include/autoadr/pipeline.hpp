#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "autoadr/data.hpp"
#include "autoadr/distill.hpp"
#include "autoadr/hyperopt.hpp"
#include "autoadr/search_space.hpp"

namespace autoadr {

struct HpSearchSettings {
  std::size_t trials = 12;
  std::size_t trial_epochs = 1;
  // Training records per trial; 0 uses the full teacher-scored train split.
  std::size_t trial_records = 0;
  double lr_lo = 3e-4, lr_hi = 1e-2;
  std::vector<double> batch_sizes{64, 128, 256};
  double keep_lo = 0.6, keep_hi = 1.0;
  double wd_lo = 1e-7, wd_hi = 1e-4;
  std::vector<double> hidden{32, 48, 64};
  std::vector<double> rep_ratios{0.25, 0.5};
};

struct PipelineConfig {
  std::filesystem::path output_root = "runs";
  CorpusConfig corpus;
  std::size_t vocab_size = 8192;

  TeacherDims teacher_dims;
  TrainSchedule teacher_schedule;
  double temperature = 1.0;

  ModelDims student_dims;
  TrainSchedule supernet_schedule;
  double held_out_fraction = 0.1;

  std::size_t candidates = 300;
  double c_max = 1.0;  // +inf disables the budget
  std::size_t threads = 1;
  std::size_t eval_batch_size = 512;

  HpSearchSettings hp;
  TrainSchedule retrain_schedule;
};

// Defaults merged with the JSON object; unknown keys are rejected so typos
// cannot silently fall back to defaults. A null c_max means no budget.
PipelineConfig config_from_json(std::string_view text);
PipelineConfig load_config(const std::filesystem::path& path);
// Canonical form: every field, keys sorted, numbers in shortest round-trip
// form. Paths are kept verbatim.
std::string config_to_json(const PipelineConfig& config);
// 64-bit FNV-1a of the canonical JSON as 16 lowercase hex digits.
std::string config_hash(const PipelineConfig& config);
std::uint64_t fnv1a(std::string_view bytes);
std::string file_checksum(const std::filesystem::path& path);

// Retraining search space. Hidden widths whose largest downscale ratio would
// push the genome over c_max are dropped, so every point is within budget.
HpSpace retrain_space(const HpSearchSettings& settings, const ArchitectureGenome& genome,
                      const ModelDims& base_dims, const CostNorms& norms, double c_max);

enum class Stage {
  kTeacherTrain,
  kTeacherScore,
  kSupernetTrain,
  kSearch,
  kHpSearch,
  kRetrain,
  kEval,
};
inline constexpr Stage kAllStages[] = {Stage::kTeacherTrain, Stage::kTeacherScore,
                                       Stage::kSupernetTrain, Stage::kSearch,
                                       Stage::kHpSearch,      Stage::kRetrain,
                                       Stage::kEval};
std::string_view stage_name(Stage stage);

// A stage could not run or failed; artifacts of completed stages stay valid.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what)
      : std::runtime_error(std::string(stage_name(stage)) + ": " + what), stage(stage) {}
  Stage stage;
};

// Artifacts live in <output_root>/artifacts/<hash>-seed<seed>/ and are shared
// by every invocation with the same config and seed; reports go to a fresh
// <output_root>/runs/<hash>-<timestamp>/ directory per invocation.
class PipelineRun {
 public:
  PipelineRun(PipelineConfig config, std::uint64_t seed, std::string timestamp);

  const PipelineConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const std::string& hash() const { return hash_; }
  // "<hash>-seed<seed>"; embedded in every report.
  std::string run_id() const;
  const std::filesystem::path& artifact_dir() const { return artifact_dir_; }
  const std::filesystem::path& report_dir() const { return report_dir_; }

  bool completed(Stage stage) const;
  // Runs one stage, overwriting its artifacts. Throws StageError when a
  // prerequisite stage has not completed or the stage fails.
  void run(Stage stage);
  // Runs every stage in order, skipping completed ones whose recorded
  // artifact checksums still match.
  void run_all();

  // Observer for progress lines.
  std::function<void(const std::string&)> log;

 private:
  void teacher_train();
  void teacher_score();
  void supernet_train();
  void search();
  void hp_search();
  void retrain();
  void evaluate();

  void require_done(Stage current, Stage needed) const;
  // Outputs are verified on resume; sealed files are only checksummed here and
  // checked by the stage that consumes them.
  void mark_done(Stage stage, const std::vector<std::filesystem::path>& outputs,
                 const std::vector<std::filesystem::path>& sealed = {});
  bool verify_done(Stage stage) const;
  void write_report(Stage stage, const std::string& json) const;
  void audit(Stage stage, std::string_view op, const std::filesystem::path& path) const;
  void note(const std::string& line) const;

  PipelineConfig config_;
  std::uint64_t seed_;
  std::string hash_;
  std::filesystem::path artifact_dir_;
  std::filesystem::path report_dir_;
};

// Current UTC time as YYYYMMDDTHHMMSSZ.
std::string utc_timestamp();

}  // namespace autoadr
