#include "autoadr/search_engine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "autoadr/errors.hpp"
#include "autoadr/metrics.hpp"
#include "autoadr/optim.hpp"

namespace autoadr {

EncodedRecords encode_records(const RelevanceModel& model, const std::vector<TeacherRecord>& records) {
  EncodedRecords out;
  out.queries.reserve(records.size());
  out.ads.reserve(records.size());
  out.targets.reserve(records.size());
  for (const auto& r : records) {
    out.queries.push_back(model.encode_text(r.query, Side::kQuery));
    out.ads.push_back(model.encode_text(r.ad, Side::kAd));
    out.targets.push_back(r.y);
  }
  return out;
}

RecordSplit split_records(const std::vector<TeacherRecord>& records, double held_out_fraction) {
  require(held_out_fraction > 0.0 && held_out_fraction < 1.0,
          "split_records: held-out fraction must be in (0, 1)");
  const auto stride = static_cast<std::size_t>(std::llround(1.0 / held_out_fraction));
  require(stride >= 2, "split_records: held-out fraction too large");
  RecordSplit split;
  for (std::size_t i = 0; i < records.size(); ++i)
    ((i % stride == stride - 1) ? split.held_out : split.train).push_back(records[i]);
  return split;
}

namespace {

// Doubles go through format_double so traces are byte-stable.
nlohmann::ordered_json number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return nlohmann::ordered_json::parse(format_double(v));
}

}  // namespace

std::string trace_header_json() {
  nlohmann::ordered_json j;
  j["type"] = "header";
  j["format_version"] = kTraceFormatVersion;
  return j.dump();
}

std::string step_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["genome"] = r.genome;
  j["lr"] = number(r.lr);
  j["loss"] = number(r.loss);
  return j.dump();
}

std::string candidate_json(const CandidateRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "candidate";
  j["genome"] = r.genome;
  j["C"] = number(r.cost.total);
  j["SIZE"] = number(r.cost.size);
  j["TIME"] = number(r.cost.time);
  j["raw_params"] = r.cost.raw_params;
  j["raw_time_units"] = number(r.cost.raw_time_units);
  j["accepted"] = r.accepted;
  j["val_loss"] = number(r.val_loss);
  return j.dump();
}

std::vector<EpochStats> train_kd(RelevanceModel& model, const EncodedRecords& data,
                                 const TrainSchedule& schedule, std::uint64_t seed,
                                 const GenomePicker& pick,
                                 const std::function<void(const StepRecord&)>& on_step) {
  require(data.size() > 0, "train_kd: no training records");
  require(schedule.epochs > 0 && schedule.batch_size > 0, "train_kd: epochs and batch size must be positive");
  Adam::Options options;
  options.weight_decay = schedule.weight_decay;
  options.base_lr = schedule.lr_max;
  Adam adam(options);
  Rng order_rng(mix_seed(seed, 11)), genome_rng(mix_seed(seed, 12)), dropout_rng(mix_seed(seed, 13));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> history;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = cosine_lr(schedule.lr_max, schedule.lr_min, static_cast<std::int64_t>(epoch),
                                static_cast<std::int64_t>(schedule.epochs));
    shuffle(order, order_rng);
    double loss_total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), begin + schedule.batch_size);
      std::vector<EncodedText> q, a;
      std::vector<double> y;
      q.reserve(end - begin);
      a.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        q.push_back(data.queries[order[i]]);
        a.push_back(data.ads[order[i]]);
        y.push_back(data.targets[order[i]]);
      }
      const ArchitectureGenome genome = pick(genome_rng);
      Graph g;
      ForwardContext ctx{true, schedule.keep_prob, &dropout_rng};
      Var loss = kd_loss(model.forward(g, genome, q, a, ctx), y, Reduction::kMean);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericFailure("train_kd: non-finite loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step) + ", genome " + genome.to_string());
      }
      g.backward(loss);
      const auto params = model.parameters_for(genome);
      clip_grad_norm(params, schedule.clip_norm);
      adam.step(params, lr);
      loss_total += value * static_cast<double>(end - begin);
      if (on_step) on_step({epoch, step, genome.to_string(), lr, value});
      ++step;
    }
    history.push_back({epoch, lr, loss_total / static_cast<double>(order.size())});
  }
  return history;
}

double evaluate_kd(RelevanceModel& model, const ArchitectureGenome& genome,
                   const EncodedRecords& data, std::size_t batch_size) {
  require(data.size() > 0, "evaluate_kd: no records");
  require(batch_size > 0, "evaluate_kd: batch size must be positive");
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    const std::span<const EncodedText> q(data.queries.data() + begin, end - begin);
    const std::span<const EncodedText> a(data.ads.data() + begin, end - begin);
    Graph g;
    const Tensor p = model.forward(g, genome, q, a, {}).value();
    total += kd_loss_value(std::span<const double>(data.targets.data() + begin, end - begin), p.data()).sum;
  }
  return total / static_cast<double>(data.size());
}

SupernetResult train_supernet(RelevanceModel& supernet, const EncodedRecords& train,
                              const TrainSchedule& schedule, std::uint64_t seed,
                              const std::function<void(const StepRecord&)>& on_step) {
  require(supernet.is_supernet(), "train_supernet: model must be a supernet");
  const std::size_t layers = supernet.dims().layers;
  SupernetResult result;
  result.epochs = train_kd(
      supernet, train, schedule, seed, [layers](Rng& rng) { return sample_uniform(rng, layers); },
      [&](const StepRecord& r) {
        result.steps.push_back(r);
        if (on_step) on_step(r);
      });
  return result;
}

namespace {

bool ranks_before(const CandidateRecord& a, const CandidateRecord& b) {
  if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
  if (a.cost.total != b.cost.total) return a.cost.total < b.cost.total;
  return a.genome < b.genome;
}

// Evaluates genomes (read-only, eval mode) across worker threads; results
// are stored by index so the output is independent of scheduling.
std::vector<double> evaluate_many(RelevanceModel& supernet,
                                  const std::vector<ArchitectureGenome>& genomes,
                                  const EncodedRecords& validation, std::size_t batch_size,
                                  std::size_t threads) {
  std::vector<double> losses(genomes.size());
  threads = std::max<std::size_t>(1, std::min(threads, genomes.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < genomes.size(); ++i)
      losses[i] = evaluate_kd(supernet, genomes[i], validation, batch_size);
    return losses;
  }
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < genomes.size(); i += threads)
          losses[i] = evaluate_kd(supernet, genomes[i], validation, batch_size);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return losses;
}

}  // namespace

std::vector<CandidateRecord> rank_genomes(RelevanceModel& supernet,
                                          const std::vector<ArchitectureGenome>& genomes,
                                          const EncodedRecords& validation,
                                          const CandidateSearchConfig& config) {
  require(supernet.is_supernet(), "rank_genomes: model must be a supernet");
  ModelDims dims = supernet.dims();
  std::map<std::string, std::size_t> seen;
  std::vector<ArchitectureGenome> accepted;
  std::vector<CandidateRecord> records;
  for (const auto& genome : genomes) {
    const std::string text = genome.to_string();
    if (seen.contains(text)) continue;
    seen.emplace(text, records.size());
    CandidateRecord r;
    r.genome = text;
    r.cost = genome_cost(genome, dims, config.norms);
    r.accepted = r.cost.total <= config.c_max;
    if (!r.accepted) continue;
    accepted.push_back(genome);
    records.push_back(std::move(r));
  }
  const auto losses =
      evaluate_many(supernet, accepted, validation, config.eval_batch_size, config.threads);
  for (std::size_t i = 0; i < records.size(); ++i) records[i].val_loss = losses[i];
  std::sort(records.begin(), records.end(), ranks_before);
  return records;
}

CandidateSearchResult search_candidates(RelevanceModel& supernet, const EncodedRecords& validation,
                                        const CandidateSearchConfig& config) {
  require(supernet.is_supernet(), "search_candidates: model must be a supernet");
  require(config.candidates > 0, "search_candidates: candidate count must be positive");
  Rng rng(config.seed);
  std::vector<ArchitectureGenome> sampled;
  sampled.reserve(config.candidates);
  for (std::size_t i = 0; i < config.candidates; ++i)
    sampled.push_back(sample_uniform(rng, supernet.dims().layers));

  CandidateSearchResult result;
  result.ranked = rank_genomes(supernet, sampled, validation, config);
  std::map<std::string, const CandidateRecord*> by_text;
  for (const auto& r : result.ranked) by_text.emplace(r.genome, &r);
  for (const auto& genome : sampled) {
    CandidateRecord r;
    r.genome = genome.to_string();
    r.cost = genome_cost(genome, supernet.dims(), config.norms);
    r.accepted = r.cost.total <= config.c_max;
    if (auto it = by_text.find(r.genome); it != by_text.end()) r.val_loss = it->second->val_loss;
    result.sampled.push_back(std::move(r));
  }
  if (result.ranked.empty()) {
    throw EmptySearchResult("search: all " + std::to_string(config.candidates) +
                            " candidates exceed the budget C_max = " + format_double(config.c_max) +
                            "; increase c_max");
  }
  return result;
}

RetrainResult retrain_best(const ArchitectureGenome& genome, const TriLetterVocab& vocab,
                           const ModelDims& base_dims, const std::vector<TeacherRecord>& train,
                           const std::vector<TeacherRecord>& validation,
                           const std::vector<LabeledPair>& labeled_eval, const RetrainConfig& config,
                           std::uint64_t seed) {
  ModelDims dims = base_dims;
  dims.hidden = config.hidden;
  dims.rep_dim = config.rep_dim;
  dims.mlp_hidden1 = 2 * config.rep_dim;
  dims.mlp_hidden2 = config.rep_dim;
  dims.layers = genome.size();
  RetrainResult result;
  result.model = std::make_unique<RelevanceModel>(vocab, dims, genome, mix_seed(seed, 21));
  const EncodedRecords train_data = encode_records(*result.model, train);
  result.epochs = train_kd(*result.model, train_data, config.schedule, mix_seed(seed, 22),
                           [&genome](Rng&) { return genome; });
  if (!validation.empty())
    result.val_kd_loss = evaluate_kd(*result.model, genome, encode_records(*result.model, validation));
  if (!labeled_eval.empty()) {
    std::vector<std::string> q, a;
    std::vector<int> labels;
    for (const auto& p : labeled_eval) {
      q.push_back(p.query);
      a.push_back(p.ad);
      labels.push_back(p.planted);
    }
    result.val_pr_auc = pr_auc(score_pairs(*result.model, genome, q, a), labels);
  }
  return result;
}

}  // namespace autoadr
