#include "autoadr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "autoadr/errors.hpp"
#include "autoadr/metrics.hpp"
#include "autoadr/model.hpp"
#include "autoadr/search_engine.hpp"

namespace autoadr {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Reads fields from one JSON object and rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j.is_object(), "config: " + where_ + " must be an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      require(seen_.contains(key), "config: unknown key '" + where_ + "." + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ContractViolation("config: bad value for '" + where_ + "." + key + "'");
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  const Json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_schedule(const Json& j, const std::string& where, TrainSchedule& s) {
  ObjectReader r(j, where);
  r.get("epochs", s.epochs);
  r.get("batch_size", s.batch_size);
  r.get("lr_max", s.lr_max);
  r.get("lr_min", s.lr_min);
  r.get("weight_decay", s.weight_decay);
  r.get("clip_norm", s.clip_norm);
  r.get("keep_prob", s.keep_prob);
}

Json schedule_json(const TrainSchedule& s) {
  return {{"epochs", s.epochs},           {"batch_size", s.batch_size},
          {"lr_max", s.lr_max},           {"lr_min", s.lr_min},
          {"weight_decay", s.weight_decay}, {"clip_norm", s.clip_norm},
          {"keep_prob", s.keep_prob}};
}

void validate_schedule(const TrainSchedule& s, const std::string& where) {
  require(s.epochs > 0 && s.batch_size > 0, "config: " + where + " needs positive epochs and batch_size");
  require(s.lr_max > 0 && s.lr_min >= 0 && s.lr_min <= s.lr_max, "config: " + where + " needs 0 <= lr_min <= lr_max, lr_max > 0");
  require(s.weight_decay >= 0 && s.clip_norm > 0, "config: " + where + " needs weight_decay >= 0 and clip_norm > 0");
  require(s.keep_prob > 0 && s.keep_prob <= 1, "config: " + where + " keep_prob must be in (0, 1]");
}

PipelineConfig default_config() {
  PipelineConfig c;
  c.teacher_dims.emb_dim = 192;
  c.teacher_schedule.epochs = 2;
  c.teacher_schedule.batch_size = 64;
  c.teacher_schedule.lr_max = 2e-3;
  c.supernet_schedule.epochs = 30;
  c.supernet_schedule.batch_size = 256;
  c.supernet_schedule.lr_max = 2e-3;
  c.supernet_schedule.keep_prob = 0.8;
  c.retrain_schedule.epochs = 8;
  c.retrain_schedule.batch_size = 64;
  c.retrain_schedule.keep_prob = 0.8;
  return c;
}

}  // namespace

PipelineConfig config_from_json(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ContractViolation(std::string("config: invalid JSON: ") + e.what());
  }
  PipelineConfig c = default_config();
  {
    ObjectReader r(j, "config");
    std::string root = c.output_root.string();
    r.get("output_root", root);
    c.output_root = root;
    r.get("vocab_size", c.vocab_size);
    if (r.has("corpus")) {
      ObjectReader cr(r.sub("corpus"), "corpus");
      cr.get("size", c.corpus.size);
      cr.get("lexicon_seed", c.corpus.lexicon_seed);
      cr.get("lexicon_size", c.corpus.lexicon_size);
      cr.get("noise", c.corpus.noise);
      cr.get("overlap_threshold", c.corpus.overlap_threshold);
      cr.get("train_fraction", c.corpus.train_fraction);
      cr.get("validation_fraction", c.corpus.validation_fraction);
    }
    if (r.has("teacher")) {
      ObjectReader tr(r.sub("teacher"), "teacher");
      tr.get("emb_dim", c.teacher_dims.emb_dim);
      tr.get("model_dim", c.teacher_dims.model_dim);
      tr.get("heads", c.teacher_dims.heads);
      tr.get("ffn_dim", c.teacher_dims.ffn_dim);
      tr.get("layers", c.teacher_dims.layers);
      tr.get("temperature", c.temperature);
      if (tr.has("schedule")) read_schedule(tr.sub("schedule"), "teacher.schedule", c.teacher_schedule);
    }
    if (r.has("student")) {
      ObjectReader sr(r.sub("student"), "student");
      sr.get("emb_dim", c.student_dims.emb_dim);
      sr.get("hidden", c.student_dims.hidden);
      sr.get("rep_dim", c.student_dims.rep_dim);
      sr.get("layers", c.student_dims.layers);
    }
    if (r.has("supernet")) {
      ObjectReader sr(r.sub("supernet"), "supernet");
      sr.get("held_out_fraction", c.held_out_fraction);
      if (sr.has("schedule")) read_schedule(sr.sub("schedule"), "supernet.schedule", c.supernet_schedule);
    }
    if (r.has("search")) {
      ObjectReader sr(r.sub("search"), "search");
      sr.get("candidates", c.candidates);
      sr.get("threads", c.threads);
      sr.get("eval_batch_size", c.eval_batch_size);
      if (sr.has("c_max")) {
        const Json& v = sr.sub("c_max");
        if (v.is_null()) c.c_max = std::numeric_limits<double>::infinity();
        else if (v.is_number()) c.c_max = v.get<double>();
        else throw ContractViolation("config: search.c_max must be a number or null");
      }
    }
    if (r.has("hp_search")) {
      ObjectReader hr(r.sub("hp_search"), "hp_search");
      HpSearchSettings& h = c.hp;
      hr.get("trials", h.trials);
      hr.get("trial_epochs", h.trial_epochs);
      hr.get("trial_records", h.trial_records);
      std::vector<double> range;
      auto read_range = [&](const char* key, double& lo, double& hi) {
        range = {lo, hi};
        hr.get(key, range);
        require(range.size() == 2, std::string("config: hp_search.") + key + " must be [lo, hi]");
        lo = range[0];
        hi = range[1];
      };
      read_range("lr", h.lr_lo, h.lr_hi);
      read_range("keep_prob", h.keep_lo, h.keep_hi);
      read_range("weight_decay", h.wd_lo, h.wd_hi);
      hr.get("batch_size", h.batch_sizes);
      hr.get("hidden", h.hidden);
      hr.get("rep_ratio", h.rep_ratios);
    }
    if (r.has("retrain")) {
      ObjectReader rr(r.sub("retrain"), "retrain");
      if (rr.has("schedule")) read_schedule(rr.sub("schedule"), "retrain.schedule", c.retrain_schedule);
    }
  }

  require(c.vocab_size >= 2, "config: vocab_size must be at least 2");
  require(c.temperature > 0, "config: teacher.temperature must be positive");
  require(c.held_out_fraction > 0 && c.held_out_fraction < 0.5, "config: supernet.held_out_fraction must be in (0, 0.5)");
  require(c.candidates > 0 && c.threads > 0 && c.eval_batch_size > 0, "config: search counts must be positive");
  require(c.c_max > 0, "config: search.c_max must be positive");
  require(c.student_dims.layers >= 1 && c.student_dims.layers <= 31, "config: student.layers must be in [1, 31]");
  require(c.student_dims.rep_dim <= c.student_dims.hidden, "config: student.rep_dim must not exceed hidden");
  c.student_dims.mlp_hidden1 = 2 * c.student_dims.rep_dim;
  c.student_dims.mlp_hidden2 = c.student_dims.rep_dim;
  validate_schedule(c.teacher_schedule, "teacher.schedule");
  validate_schedule(c.supernet_schedule, "supernet.schedule");
  validate_schedule(c.retrain_schedule, "retrain.schedule");
  require(c.hp.trials >= 1 && c.hp.trial_epochs >= 1, "config: hp_search needs trials and trial_epochs >= 1");
  require(!c.hp.batch_sizes.empty() && !c.hp.hidden.empty() && !c.hp.rep_ratios.empty(),
          "config: hp_search choice lists must be non-empty");
  for (double r : c.hp.rep_ratios) require(r > 0 && r <= 1, "config: hp_search.rep_ratio values must be in (0, 1]");
  for (double h : c.hp.hidden) require(h >= 1 && h == std::floor(h), "config: hp_search.hidden values must be positive integers");
  for (double b : c.hp.batch_sizes) require(b >= 1 && b == std::floor(b), "config: hp_search.batch_size values must be positive integers");
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractViolation("config: cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

std::string config_to_json(const PipelineConfig& c) {
  const TeacherDims& t = c.teacher_dims;
  const ModelDims& s = c.student_dims;
  const HpSearchSettings& h = c.hp;
  Json j = {
      {"output_root", c.output_root.string()},
      {"vocab_size", c.vocab_size},
      {"corpus",
       {{"size", c.corpus.size},
        {"lexicon_seed", c.corpus.lexicon_seed},
        {"lexicon_size", c.corpus.lexicon_size},
        {"noise", c.corpus.noise},
        {"overlap_threshold", c.corpus.overlap_threshold},
        {"train_fraction", c.corpus.train_fraction},
        {"validation_fraction", c.corpus.validation_fraction}}},
      {"teacher",
       {{"emb_dim", t.emb_dim},
        {"model_dim", t.model_dim},
        {"heads", t.heads},
        {"ffn_dim", t.ffn_dim},
        {"layers", t.layers},
        {"temperature", c.temperature},
        {"schedule", schedule_json(c.teacher_schedule)}}},
      {"student", {{"emb_dim", s.emb_dim}, {"hidden", s.hidden}, {"rep_dim", s.rep_dim}, {"layers", s.layers}}},
      {"supernet", {{"held_out_fraction", c.held_out_fraction}, {"schedule", schedule_json(c.supernet_schedule)}}},
      {"search",
       {{"candidates", c.candidates},
        {"c_max", std::isfinite(c.c_max) ? Json(c.c_max) : Json(nullptr)},
        {"threads", c.threads},
        {"eval_batch_size", c.eval_batch_size}}},
      {"hp_search",
       {{"trials", h.trials},
        {"trial_epochs", h.trial_epochs},
        {"trial_records", h.trial_records},
        {"lr", {h.lr_lo, h.lr_hi}},
        {"keep_prob", {h.keep_lo, h.keep_hi}},
        {"weight_decay", {h.wd_lo, h.wd_hi}},
        {"batch_size", h.batch_sizes},
        {"hidden", h.hidden},
        {"rep_ratio", h.rep_ratios}}},
      {"retrain", {{"schedule", schedule_json(c.retrain_schedule)}}},
  };
  return j.dump();
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string config_hash(const PipelineConfig& config) {
  // The output root only says where results go, so it is not hashed.
  PipelineConfig hashed = config;
  hashed.output_root.clear();
  return hex16(fnv1a(config_to_json(hashed)));
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return hex16(fnv1a(buf.str()));
}

HpSpace retrain_space(const HpSearchSettings& s, const ArchitectureGenome& genome,
                      const ModelDims& base_dims, const CostNorms& norms, double c_max) {
  const double max_ratio = *std::max_element(s.rep_ratios.begin(), s.rep_ratios.end());
  std::vector<double> hidden;
  for (double h : s.hidden) {
    ModelDims d = base_dims;
    d.hidden = static_cast<std::size_t>(h);
    d.rep_dim = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h * max_ratio)));
    d.mlp_hidden1 = 2 * d.rep_dim;
    d.mlp_hidden2 = d.rep_dim;
    d.layers = genome.size();
    if (genome_cost(genome, d, norms).total <= c_max) hidden.push_back(h);
  }
  if (hidden.empty()) {
    throw ContractViolation("hp_search: no hidden width in the configured list keeps " +
                            genome.to_string() + " within C_max = " + format_double(c_max));
  }
  HpSpace space;
  space.dims.push_back(HpDimension::log_uniform("lr", s.lr_lo, s.lr_hi));
  space.dims.push_back(HpDimension::choice("batch_size", s.batch_sizes));
  space.dims.push_back(HpDimension::uniform("keep_prob", s.keep_lo, s.keep_hi));
  space.dims.push_back(HpDimension::log_uniform("weight_decay", s.wd_lo, s.wd_hi));
  space.dims.push_back(HpDimension::choice("hidden", hidden));
  space.dims.push_back(HpDimension::choice("rep_ratio", s.rep_ratios));
  return space;
}

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::kTeacherTrain: return "teacher-train";
    case Stage::kTeacherScore: return "teacher-score";
    case Stage::kSupernetTrain: return "supernet-train";
    case Stage::kSearch: return "search";
    case Stage::kHpSearch: return "hp-search";
    case Stage::kRetrain: return "retrain";
    case Stage::kEval: return "eval";
  }
  return "unknown";
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

namespace {

// Artifact layout, relative to the artifact directory.
const fs::path kTrainPairs = "data/train.tsv";
const fs::path kValidationPairs = "data/validation.tsv";
const fs::path kTestPairs = "data/test.tsv";
const fs::path kTeacherDir = "teacher";
const fs::path kScoredTrain = "scores/train.tsv";
const fs::path kScoredValidation = "scores/validation.tsv";
const fs::path kSupernetDir = "supernet";
const fs::path kSupernetTrace = "supernet/trace.jsonl";
const fs::path kSearchTrace = "search/trace.jsonl";
const fs::path kRanking = "search/ranking.tsv";
const fs::path kBestGenome = "search/best_genome.txt";
const fs::path kTrialLog = "hp/trials.jsonl";
const fs::path kBestHp = "hp/best.json";
const fs::path kStudentDir = "student";
const fs::path kTestScores = "eval/test_scores.tsv";

OrderedJson num(double v) {
  if (!std::isfinite(v)) return nullptr;
  return OrderedJson::parse(format_double(v));
}

// Four decimals, for progress lines only.
std::string brief(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::size_t stage_index(Stage s) { return static_cast<std::size_t>(s); }

fs::path done_path(const fs::path& artifacts, Stage s) {
  return artifacts / "stages" / (std::string(stage_name(s)) + ".json");
}

std::string state_checksum(const std::map<std::string, Tensor>& state) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, t] : state) {
    h ^= fnv1a(name);
    h *= 1099511628211ull;
    const auto data = t.data();
    h ^= fnv1a(std::string_view(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double)));
    h *= 1099511628211ull;
  }
  return hex16(h);
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

OrderedJson metrics_json(double pr, double loss, std::size_t samples) {
  OrderedJson j;
  j["pr_auc"] = num(pr);
  j["loss"] = num(loss);
  j["samples"] = samples;
  return j;
}

std::vector<int> planted_labels(const std::vector<LabeledPair>& pairs) {
  std::vector<int> y;
  y.reserve(pairs.size());
  for (const auto& p : pairs) y.push_back(p.planted);
  return y;
}

void split_texts(const std::vector<LabeledPair>& pairs, std::vector<std::string>& q,
                 std::vector<std::string>& a) {
  for (const auto& p : pairs) {
    q.push_back(p.query);
    a.push_back(p.ad);
  }
}

// Cross-entropy of probabilities against hard planted labels.
double label_loss(const std::vector<double>& probabilities, const std::vector<int>& labels) {
  std::vector<double> targets(labels.begin(), labels.end());
  return kd_loss_value(targets, probabilities).mean;
}

std::vector<double> logits_to_probabilities(const std::vector<double>& z) {
  std::vector<double> p;
  p.reserve(z.size());
  for (double v : z) p.push_back(soft_target(v, 1.0));
  return p;
}

}  // namespace

PipelineRun::PipelineRun(PipelineConfig config, std::uint64_t seed, std::string timestamp)
    : config_(std::move(config)), seed_(seed), hash_(config_hash(config_)) {
  artifact_dir_ = config_.output_root / "artifacts" / (hash_ + "-seed" + std::to_string(seed_));
  report_dir_ = config_.output_root / "runs" / (hash_ + "-" + timestamp);
  fs::create_directories(artifact_dir_);
  fs::create_directories(report_dir_);
  write_text(report_dir_ / "config.json", Json::parse(config_to_json(config_)).dump(2) + "\n");
}

std::string PipelineRun::run_id() const { return hash_ + "-seed" + std::to_string(seed_); }

void PipelineRun::note(const std::string& line) const {
  if (log) log(line);
  std::ofstream(report_dir_ / "run.log", std::ios::app) << line << '\n';
}

void PipelineRun::audit(Stage stage, std::string_view op, const fs::path& path) const {
  OrderedJson j;
  j["stage"] = stage_name(stage);
  j["op"] = op;
  j["path"] = path.generic_string();
  std::ofstream(artifact_dir_ / "audit.jsonl", std::ios::app) << j.dump() << '\n';
}

bool PipelineRun::completed(Stage stage) const { return fs::exists(done_path(artifact_dir_, stage)); }

void PipelineRun::require_done(Stage current, Stage needed) const {
  if (!verify_done(needed)) {
    throw StageError(current, "stage '" + std::string(stage_name(needed)) +
                                  "' has not completed for run " + run_id() +
                                  " (or its artifacts changed); run it first");
  }
}

void PipelineRun::mark_done(Stage stage, const std::vector<fs::path>& outputs,
                            const std::vector<fs::path>& sealed) {
  auto checksums = [&](const std::vector<fs::path>& paths) {
    OrderedJson files = OrderedJson::object();
    for (const auto& rel : paths) files[rel.generic_string()] = file_checksum(artifact_dir_ / rel);
    return files;
  };
  OrderedJson j;
  j["stage"] = stage_name(stage);
  j["outputs"] = checksums(outputs);
  j["sealed"] = checksums(sealed);
  write_text(done_path(artifact_dir_, stage), j.dump(2) + "\n");
}

bool PipelineRun::verify_done(Stage stage) const {
  const fs::path marker = done_path(artifact_dir_, stage);
  if (!fs::exists(marker)) return false;
  const Json j = Json::parse(read_text(marker));
  for (const auto& [rel, sum] : j.at("outputs").items()) {
    const fs::path p = artifact_dir_ / rel;
    if (!fs::exists(p) || file_checksum(p) != sum.get<std::string>()) return false;
  }
  return true;
}

void PipelineRun::write_report(Stage stage, const std::string& json) const {
  write_text(report_dir_ / (std::string(stage_name(stage)) + ".json"), json + "\n");
}

void PipelineRun::run(Stage stage) {
  // Later stages depend on this one's outputs, so their markers go stale.
  for (Stage s : kAllStages)
    if (stage_index(s) >= stage_index(stage)) fs::remove(done_path(artifact_dir_, s));
  note("[" + std::string(stage_name(stage)) + "] start, run " + run_id());
  const auto t0 = std::chrono::steady_clock::now();
  try {
    switch (stage) {
      case Stage::kTeacherTrain: teacher_train(); break;
      case Stage::kTeacherScore: teacher_score(); break;
      case Stage::kSupernetTrain: supernet_train(); break;
      case Stage::kSearch: search(); break;
      case Stage::kHpSearch: hp_search(); break;
      case Stage::kRetrain: retrain(); break;
      case Stage::kEval: evaluate(); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", seconds);
  note("[" + std::string(stage_name(stage)) + "] done in " + buf + " s");
}

void PipelineRun::run_all() {
  bool rerun_rest = false;
  for (Stage s : kAllStages) {
    if (!rerun_rest && verify_done(s)) {
      note("[" + std::string(stage_name(s)) + "] reusing completed artifacts");
      continue;
    }
    rerun_rest = true;
    run(s);
  }
}

void PipelineRun::teacher_train() {
  const Stage st = Stage::kTeacherTrain;
  const Corpus corpus = make_synthetic_corpus(config_.corpus, mix_seed(seed_, 101));
  for (const auto& [rel, pairs] : {std::pair{kTrainPairs, &corpus.train},
                                   std::pair{kValidationPairs, &corpus.validation},
                                   std::pair{kTestPairs, &corpus.test}}) {
    audit(st, "write", rel);
    write_pairs(artifact_dir_ / rel, *pairs);
  }
  std::vector<std::string> texts;
  for (const auto& p : corpus.train) {
    texts.push_back(p.query);
    texts.push_back(p.ad);
  }
  TeacherModel teacher(TriLetterVocab::build(texts, config_.vocab_size), config_.teacher_dims,
                       mix_seed(seed_, 102));

  // Under the budget SIZE <= C <= C_max, so no admissible student has more
  // than C_max * norm parameters.
  ModelDims dims = config_.student_dims;
  dims.vocab = teacher.vocab().size();
  const CostNorms norms = default_norms(dims);
  const double student_bound = config_.c_max * norms.params;
  if (std::isfinite(student_bound) && static_cast<double>(teacher.parameter_count()) <= student_bound) {
    throw ContractViolation("teacher has " + std::to_string(teacher.parameter_count()) +
                            " parameters but students within C_max may have up to " +
                            format_double(std::floor(student_bound)) +
                            "; enlarge the teacher or lower C_max");
  }

  const auto history = train_teacher(teacher, corpus.train, config_.teacher_schedule,
                                     mix_seed(seed_, 103), [&](const EpochStats& e) {
                                       note("  teacher epoch " + std::to_string(e.epoch) +
                                            " loss " + brief(e.mean_loss));
                                     });
  teacher.freeze();
  audit(st, "write", kTeacherDir);
  save_teacher(teacher, artifact_dir_ / kTeacherDir);

  std::vector<std::string> q, a;
  split_texts(corpus.validation, q, a);
  const auto labels = planted_labels(corpus.validation);
  const auto probs = logits_to_probabilities(teacher.score(q, a));

  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["corpus"] = {{"train", corpus.train.size()},
                 {"validation", corpus.validation.size()},
                 {"test", corpus.test.size()},
                 {"planted_positive_rate", num(planted_positive_rate(config_.corpus))}};
  r["vocab_size"] = teacher.vocab().size();
  r["teacher_parameters"] = teacher.parameter_count();
  r["student_parameter_bound"] = num(student_bound);
  OrderedJson epochs = OrderedJson::array();
  for (const auto& e : history) epochs.push_back({{"epoch", e.epoch}, {"lr", num(e.lr)}, {"loss", num(e.mean_loss)}});
  r["epochs"] = epochs;
  r["validation"] = metrics_json(pr_auc(probs, labels), label_loss(probs, labels), labels.size());
  write_report(st, r.dump(2));
  mark_done(st, {kTrainPairs, kValidationPairs, kTeacherDir / "teacher.ckpt", kTeacherDir / "vocab.txt"},
            {kTestPairs});
}

void PipelineRun::teacher_score() {
  const Stage st = Stage::kTeacherScore;
  require_done(st, Stage::kTeacherTrain);
  audit(st, "read", kTeacherDir);
  TeacherModel teacher = load_teacher(artifact_dir_ / kTeacherDir);
  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["temperature"] = num(config_.temperature);
  for (const auto& [in, out] : {std::pair{kTrainPairs, kScoredTrain},
                                std::pair{kValidationPairs, kScoredValidation}}) {
    audit(st, "read", in);
    const auto pairs = read_pairs(artifact_dir_ / in);
    std::vector<std::string> q, a;
    split_texts(pairs, q, a);
    const auto records = generate_teacher_data(teacher, q, a, config_.temperature);
    audit(st, "write", out);
    write_teacher_records(artifact_dir_ / out, records);
    double mean_y = 0.0;
    for (const auto& rec : records) mean_y += rec.y;
    r[out.stem().string()] = {{"records", records.size()},
                              {"mean_soft_target", num(mean_y / static_cast<double>(records.size()))}};
  }
  write_report(st, r.dump(2));
  mark_done(st, {kScoredTrain, kScoredValidation});
}

void PipelineRun::supernet_train() {
  const Stage st = Stage::kSupernetTrain;
  require_done(st, Stage::kTeacherScore);
  audit(st, "read", kTeacherDir / "vocab.txt");
  TriLetterVocab vocab = TriLetterVocab::load(artifact_dir_ / kTeacherDir / "vocab.txt");
  audit(st, "read", kScoredTrain);
  const auto split = split_records(read_teacher_records(artifact_dir_ / kScoredTrain), config_.held_out_fraction);
  RelevanceModel supernet(std::move(vocab), config_.student_dims, std::nullopt, mix_seed(seed_, 201));
  const auto data = encode_records(supernet, split.train);

  fs::create_directories((artifact_dir_ / kSupernetTrace).parent_path());
  audit(st, "write", kSupernetTrace);
  std::ofstream trace(artifact_dir_ / kSupernetTrace, std::ios::binary | std::ios::trunc);
  trace << trace_header_json() << '\n';
  const auto result = train_supernet(supernet, data, config_.supernet_schedule, mix_seed(seed_, 202),
                                     [&](const StepRecord& s) { trace << step_json(s) << '\n'; });
  trace.close();
  if (!trace) throw std::runtime_error("write failed: " + kSupernetTrace.string());
  for (const auto& e : result.epochs)
    note("  supernet epoch " + std::to_string(e.epoch) + " loss " + brief(e.mean_loss));

  audit(st, "write", kSupernetDir);
  export_model(supernet, artifact_dir_ / kSupernetDir);
  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["train_records"] = split.train.size();
  r["held_out_records"] = split.held_out.size();
  r["steps"] = result.steps.size();
  OrderedJson epochs = OrderedJson::array();
  for (const auto& e : result.epochs) epochs.push_back({{"epoch", e.epoch}, {"lr", num(e.lr)}, {"loss", num(e.mean_loss)}});
  r["epochs"] = epochs;
  r["supernet_checksum"] = file_checksum(artifact_dir_ / kSupernetDir / "model.ckpt");
  write_report(st, r.dump(2));
  mark_done(st, {kSupernetTrace, kSupernetDir / "model.ckpt"});
}

void PipelineRun::search() {
  const Stage st = Stage::kSearch;
  require_done(st, Stage::kSupernetTrain);
  const std::string checksum = file_checksum(artifact_dir_ / kSupernetDir / "model.ckpt");
  audit(st, "read", kSupernetDir);
  RelevanceModel supernet = import_model(artifact_dir_ / kSupernetDir);
  audit(st, "read", kScoredTrain);
  const auto held_out =
      split_records(read_teacher_records(artifact_dir_ / kScoredTrain), config_.held_out_fraction).held_out;
  const auto validation = encode_records(supernet, held_out);

  ModelDims dims = supernet.dims();
  CandidateSearchConfig sc;
  sc.candidates = config_.candidates;
  sc.c_max = config_.c_max;
  sc.norms = default_norms(dims);
  sc.seed = mix_seed(seed_, 301);
  sc.eval_batch_size = config_.eval_batch_size;
  sc.threads = config_.threads;
  const std::string before = state_checksum(supernet.state());
  const auto result = search_candidates(supernet, validation, sc);
  const std::string after = state_checksum(supernet.state());
  if (before != after) throw NumericFailure("candidate evaluation modified supernet weights");

  std::string trace = trace_header_json() + "\n";
  for (const auto& c : result.sampled) trace += candidate_json(c) + "\n";
  audit(st, "write", kSearchTrace);
  write_text(artifact_dir_ / kSearchTrace, trace);
  std::string table = "# format_version " + std::to_string(kTraceFormatVersion) + "\ngenome\tC\tSIZE\tTIME\tval_loss\n";
  for (const auto& c : result.ranked) {
    table += c.genome + "\t" + format_double(c.cost.total) + "\t" + format_double(c.cost.size) + "\t" +
             format_double(c.cost.time) + "\t" + format_double(c.val_loss) + "\n";
  }
  audit(st, "write", kRanking);
  write_text(artifact_dir_ / kRanking, table);
  audit(st, "write", kBestGenome);
  write_text(artifact_dir_ / kBestGenome, result.ranked.front().genome + "\n");

  std::size_t rejected = 0;
  for (const auto& c : result.sampled) rejected += !c.accepted;
  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["supernet_checksum"] = checksum;
  r["candidates"] = result.sampled.size();
  r["distinct_accepted"] = result.ranked.size();
  r["rejected"] = rejected;
  r["c_max"] = num(config_.c_max);
  r["held_out_records"] = held_out.size();
  OrderedJson top = OrderedJson::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(10, result.ranked.size()); ++i) {
    const auto& c = result.ranked[i];
    top.push_back({{"genome", c.genome}, {"C", num(c.cost.total)}, {"val_loss", num(c.val_loss)}});
  }
  r["top"] = top;
  r["best_genome"] = result.ranked.front().genome;
  write_report(st, r.dump(2));
  mark_done(st, {kSearchTrace, kRanking, kBestGenome});
}

namespace {

std::vector<TeacherRecord> head_records(std::vector<TeacherRecord> records, std::size_t limit) {
  if (limit > 0 && records.size() > limit) records.resize(limit);
  return records;
}

RetrainConfig retrain_config_for(const HpPoint& p, TrainSchedule schedule) {
  RetrainConfig rc;
  schedule.lr_max = p.at("lr");
  schedule.lr_min = std::min(schedule.lr_min, schedule.lr_max);
  schedule.batch_size = static_cast<std::size_t>(p.at("batch_size"));
  schedule.keep_prob = p.at("keep_prob");
  schedule.weight_decay = p.at("weight_decay");
  rc.schedule = schedule;
  rc.hidden = static_cast<std::size_t>(p.at("hidden"));
  rc.rep_dim = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(p.at("hidden") * p.at("rep_ratio"))));
  return rc;
}

OrderedJson point_json(const HpPoint& p) {
  OrderedJson j = OrderedJson::object();
  for (const auto& [k, v] : p) j[k] = num(v);
  return j;
}

}  // namespace

void PipelineRun::hp_search() {
  const Stage st = Stage::kHpSearch;
  require_done(st, Stage::kSearch);
  audit(st, "read", kBestGenome);
  std::string text = read_text(artifact_dir_ / kBestGenome);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  const ArchitectureGenome genome = ArchitectureGenome::parse(text);
  audit(st, "read", kTeacherDir / "vocab.txt");
  const TriLetterVocab vocab = TriLetterVocab::load(artifact_dir_ / kTeacherDir / "vocab.txt");
  audit(st, "read", kScoredTrain);
  const auto train = head_records(read_teacher_records(artifact_dir_ / kScoredTrain), config_.hp.trial_records);
  audit(st, "read", kScoredValidation);
  const auto validation = read_teacher_records(artifact_dir_ / kScoredValidation);

  ModelDims dims = config_.student_dims;
  dims.vocab = vocab.size();
  const HpSpace space = retrain_space(config_.hp, genome, dims, default_norms(dims), config_.c_max);

  // A partial log from an interrupted run is resumed.
  audit(st, "read", kTrialLog);
  auto previous = read_trial_log(artifact_dir_ / kTrialLog);
  fs::create_directories((artifact_dir_ / kTrialLog).parent_path());
  {
    std::ofstream rewrite(artifact_dir_ / kTrialLog, std::ios::binary | std::ios::trunc);
    for (const auto& t : previous) rewrite << trial_json(t) << '\n';
  }
  if (!previous.empty()) note("  resuming hp search after " + std::to_string(previous.size()) + " trials");
  audit(st, "write", kTrialLog);

  TrainSchedule trial_schedule = config_.retrain_schedule;
  trial_schedule.epochs = config_.hp.trial_epochs;
  auto objective = [&](const HpPoint& p) {
    const RetrainConfig rc = retrain_config_for(p, trial_schedule);
    return retrain_best(genome, vocab, dims, train, validation, {}, rc, mix_seed(seed_, 401)).val_kd_loss;
  };
  const auto result = run_search(objective, space, config_.hp.trials, mix_seed(seed_, 402), {},
                                 std::move(previous), [&](const TrialRecord& t) {
                                   std::ofstream(artifact_dir_ / kTrialLog, std::ios::app) << trial_json(t) << '\n';
                                   note("  trial " + std::to_string(t.index) + " " +
                                        (t.status == TrialStatus::kCompleted ? "loss " + brief(t.objective)
                                                                             : "failed: " + t.error));
                                 });
  OrderedJson best;
  best["index"] = result.best.index;
  best["objective"] = num(result.best.objective);
  best["point"] = point_json(result.best.point);
  audit(st, "write", kBestHp);
  write_text(artifact_dir_ / kBestHp, best.dump(2) + "\n");

  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["genome"] = genome.to_string();
  OrderedJson hidden = OrderedJson::array();
  for (const auto& d : space.dims)
    if (d.name == "hidden")
      for (double h : d.choices) hidden.push_back(num(h));
  r["admissible_hidden"] = hidden;
  OrderedJson trials = OrderedJson::array();
  for (const auto& t : result.records) trials.push_back(OrderedJson::parse(trial_json(t)));
  r["trials"] = trials;
  r["best"] = best;
  write_report(st, r.dump(2));
  mark_done(st, {kTrialLog, kBestHp});
}

void PipelineRun::retrain() {
  const Stage st = Stage::kRetrain;
  require_done(st, Stage::kHpSearch);
  audit(st, "read", kBestGenome);
  std::string text = read_text(artifact_dir_ / kBestGenome);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  const ArchitectureGenome genome = ArchitectureGenome::parse(text);
  audit(st, "read", kBestHp);
  const Json best = Json::parse(read_text(artifact_dir_ / kBestHp));
  HpPoint point;
  for (const auto& [k, v] : best.at("point").items()) point[k] = v.get<double>();
  audit(st, "read", kTeacherDir / "vocab.txt");
  const TriLetterVocab vocab = TriLetterVocab::load(artifact_dir_ / kTeacherDir / "vocab.txt");
  audit(st, "read", kScoredTrain);
  const auto train = read_teacher_records(artifact_dir_ / kScoredTrain);
  audit(st, "read", kScoredValidation);
  const auto validation = read_teacher_records(artifact_dir_ / kScoredValidation);
  audit(st, "read", kValidationPairs);
  const auto labeled = read_pairs(artifact_dir_ / kValidationPairs);

  const RetrainConfig rc = retrain_config_for(point, config_.retrain_schedule);
  ModelDims dims = config_.student_dims;
  dims.vocab = vocab.size();
  const CostNorms norms = default_norms(dims);
  auto result = retrain_best(genome, vocab, dims, train, validation, labeled, rc, mix_seed(seed_, 501));
  const CostReport cost = genome_cost(genome, result.model->dims(), norms);
  if (cost.total > config_.c_max) {
    throw ContractViolation("retrained model costs C = " + format_double(cost.total) + " > C_max");
  }
  for (const auto& e : result.epochs)
    note("  retrain epoch " + std::to_string(e.epoch) + " loss " + brief(e.mean_loss));
  audit(st, "write", kStudentDir);
  export_model(*result.model, artifact_dir_ / kStudentDir);

  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["genome"] = genome.to_string();
  r["hyperparameters"] = point_json(point);
  r["parameters"] = result.model->parameter_count(genome);
  r["cost"] = {{"C", num(cost.total)}, {"SIZE", num(cost.size)}, {"TIME", num(cost.time)}};
  OrderedJson epochs = OrderedJson::array();
  for (const auto& e : result.epochs) epochs.push_back({{"epoch", e.epoch}, {"lr", num(e.lr)}, {"loss", num(e.mean_loss)}});
  r["epochs"] = epochs;
  r["validation"] = {{"kd_loss", num(result.val_kd_loss)}, {"pr_auc", num(result.val_pr_auc)},
                     {"samples", labeled.size()}};
  write_report(st, r.dump(2));
  mark_done(st, {kStudentDir / "model.ckpt", kStudentDir / "genome.txt"});
}

void PipelineRun::evaluate() {
  const Stage st = Stage::kEval;
  require_done(st, Stage::kRetrain);
  const fs::path test_path = artifact_dir_ / kTestPairs;
  if (!fs::exists(test_path)) throw std::runtime_error("test split " + test_path.string() + " is missing");
  const Json marker = Json::parse(read_text(done_path(artifact_dir_, Stage::kTeacherTrain)));
  if (file_checksum(test_path) != marker.at("sealed").at(kTestPairs.generic_string()).get<std::string>())
    throw std::runtime_error("test split " + test_path.string() + " changed since it was generated");
  audit(st, "read", kTestPairs);
  const auto test = read_pairs(artifact_dir_ / kTestPairs);
  audit(st, "read", kStudentDir);
  RelevanceModel student = import_model(artifact_dir_ / kStudentDir);
  audit(st, "read", kTeacherDir);
  TeacherModel teacher = load_teacher(artifact_dir_ / kTeacherDir);

  std::vector<std::string> q, a;
  split_texts(test, q, a);
  const auto labels = planted_labels(test);
  const auto z = teacher.score(q, a);
  const auto teacher_p = logits_to_probabilities(z);
  const auto student_p = score_pairs(student, student.genome(), q, a);
  std::vector<double> soft;
  soft.reserve(z.size());
  for (double v : z) soft.push_back(soft_target(v, config_.temperature));
  audit(st, "write", kTestScores);
  write_scored_pairs(artifact_dir_ / kTestScores, q, a, student_p);

  const double teacher_pr = pr_auc(teacher_p, labels);
  const double student_pr = pr_auc(student_p, labels);
  OrderedJson r;
  r["run_id"] = run_id();
  r["config_hash"] = hash_;
  r["stage"] = stage_name(st);
  r["genome"] = student.genome().to_string();
  r["student_parameters"] = student.parameter_count(student.genome());
  r["teacher_parameters"] = teacher.parameter_count();
  r["student"] = metrics_json(student_pr, kd_loss_value(soft, student_p).mean, test.size());
  r["teacher"] = metrics_json(teacher_pr, label_loss(teacher_p, labels), test.size());
  r["student_teacher_pr_auc_ratio"] = num(student_pr / teacher_pr);
  write_report(st, r.dump(2));
  mark_done(st, {kTestScores});
}

}  // namespace autoadr
