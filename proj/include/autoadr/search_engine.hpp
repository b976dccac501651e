#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "autoadr/data.hpp"
#include "autoadr/distill.hpp"
#include "autoadr/model.hpp"
#include "autoadr/search_space.hpp"

namespace autoadr {

inline constexpr int kTraceFormatVersion = 1;

// Teacher records tokenized once for a given model vocabulary.
struct EncodedRecords {
  std::vector<EncodedText> queries;
  std::vector<EncodedText> ads;
  std::vector<double> targets;
  std::size_t size() const { return targets.size(); }
};
EncodedRecords encode_records(const RelevanceModel& model, const std::vector<TeacherRecord>& records);

// Deterministic split: every `stride`-th record (by position, starting at
// offset stride - 1) is held out.
struct RecordSplit {
  std::vector<TeacherRecord> train;
  std::vector<TeacherRecord> held_out;
};
RecordSplit split_records(const std::vector<TeacherRecord>& records, double held_out_fraction);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string genome;
  double lr = 0.0;
  double loss = 0.0;
};

struct CandidateRecord {
  std::string genome;
  CostReport cost;
  bool accepted = false;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // accepted only
};

// Line-delimited JSON, one object per step and per candidate, preceded by a
// header line carrying the format version.
std::string step_json(const StepRecord& r);
std::string candidate_json(const CandidateRecord& r);
std::string trace_header_json();

using GenomePicker = std::function<ArchitectureGenome(Rng&)>;

// Knowledge-distillation training: per step pick a genome, forward both
// towers, per-sample mean cross-entropy against soft targets, backprop,
// clip, Adam over the picked genome's slots plus the fixed layers. The
// learning rate follows cosine_lr with the epoch as T_cur and the epoch
// count as T.
std::vector<EpochStats> train_kd(RelevanceModel& model, const EncodedRecords& data,
                                 const TrainSchedule& schedule, std::uint64_t seed,
                                 const GenomePicker& pick,
                                 const std::function<void(const StepRecord&)>& on_step = {});

// Eval-mode mean KD loss over all records.
double evaluate_kd(RelevanceModel& model, const ArchitectureGenome& genome,
                   const EncodedRecords& data, std::size_t batch_size = 512);

struct SupernetResult {
  std::vector<StepRecord> steps;
  std::vector<EpochStats> epochs;
};

// Uniform single-path supernet training.
SupernetResult train_supernet(RelevanceModel& supernet, const EncodedRecords& train,
                              const TrainSchedule& schedule, std::uint64_t seed,
                              const std::function<void(const StepRecord&)>& on_step = {});

struct CandidateSearchConfig {
  std::size_t candidates = 300;
  double c_max = std::numeric_limits<double>::infinity();
  CostNorms norms;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 512;
  std::size_t threads = 1;
};

class EmptySearchResult : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CandidateSearchResult {
  // All sampled candidates in sampling order (duplicates included).
  std::vector<CandidateRecord> sampled;
  // Distinct accepted genomes: ascending loss, then smaller C, then text.
  std::vector<CandidateRecord> ranked;
};

// Samples candidates uniformly, rejects C > c_max, and ranks the survivors by
// validation KD loss with inherited supernet weights. Throws
// EmptySearchResult when every candidate is rejected.
CandidateSearchResult search_candidates(RelevanceModel& supernet, const EncodedRecords& validation,
                                        const CandidateSearchConfig& config);

// Ranks an explicit genome list the same way (used for exhaustive checks).
std::vector<CandidateRecord> rank_genomes(RelevanceModel& supernet,
                                          const std::vector<ArchitectureGenome>& genomes,
                                          const EncodedRecords& validation,
                                          const CandidateSearchConfig& config);

struct RetrainConfig {
  TrainSchedule schedule;
  std::size_t hidden = 64;
  std::size_t rep_dim = 32;
};

struct RetrainResult {
  std::unique_ptr<RelevanceModel> model;
  std::vector<EpochStats> epochs;
  double val_kd_loss = 0.0;
  double val_pr_auc = std::numeric_limits<double>::quiet_NaN();
};

// Fresh initialization with the genome's slots only, full KD training, then
// validation KD loss (and PR AUC when labeled pairs are given).
RetrainResult retrain_best(const ArchitectureGenome& genome, const TriLetterVocab& vocab,
                           const ModelDims& base_dims, const std::vector<TeacherRecord>& train,
                           const std::vector<TeacherRecord>& validation,
                           const std::vector<LabeledPair>& labeled_eval, const RetrainConfig& config,
                           std::uint64_t seed);

}  // namespace autoadr
