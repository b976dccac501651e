#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "autoadr/data.hpp"
#include "autoadr/model.hpp"
#include "autoadr/ops.hpp"

namespace autoadr {

// Binary temperature softmax over the logits (z, 0): sigmoid(z / T).
double soft_target(double z, double temperature);

struct KdLossValue {
  double sum = 0.0;
  double mean = 0.0;
  std::size_t clamped = 0;
};

// Cross-entropy of predictions p against soft targets y, with p clamped to
// [1e-7, 1 - 1e-7].
KdLossValue kd_loss_value(std::span<const double> targets, std::span<const double> predictions);

struct TeacherDims {
  std::size_t emb_dim = 128;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t layers = 2;
  std::size_t query_len = kMaxQueryWords;
  std::size_t ad_len = kMaxAdWords;
};

// Transformer cross-encoder over the query words followed by the ad words.
// Word vectors are tri-letter sums projected to model_dim, plus a position
// row from a table of query_len + ad_len rows (ad word t uses row
// query_len + t), plus an exact-match row: row 1 when the same word occurs
// in the other segment, row 0 otherwise. Post-norm layers; masked mean pooling; a ReLU layer and a
// linear read-out give one logit per pair.
class TeacherModel {
 public:
  TeacherModel(TriLetterVocab vocab, const TeacherDims& dims, std::uint64_t seed);

  const TeacherDims& dims() const { return dims_; }
  const TriLetterVocab& vocab() const { return vocab_; }

  Var logits(Graph& g, std::span<const EncodedText> queries, std::span<const EncodedText> ads,
             const ForwardContext& ctx);
  // Eval-mode logits in input order.
  std::vector<double> score(std::span<const std::string> queries, std::span<const std::string> ads,
                            std::size_t batch_size = 256);

  std::vector<Parameter*> parameters();
  std::int64_t parameter_count() const;

  // Training entry points refuse to run once frozen.
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& tensors);

 private:
  struct Block {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  TriLetterVocab vocab_;
  TeacherDims dims_;
  Parameter token_table_, positions_, match_, proj_w_, proj_b_, pool_w_, pool_b_, out_w_, out_b_;
  std::vector<Block> blocks_;
  bool frozen_ = false;
};

struct TrainSchedule {
  std::size_t epochs = 4;
  std::size_t batch_size = 64;
  double lr_max = 2e-3;
  double lr_min = 1e-5;
  double weight_decay = 2e-6;
  double clip_norm = 5.0;
  double keep_prob = 1.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

// Fits the teacher to the pairs' training labels with per-sample mean
// cross-entropy; the learning rate follows cosine_lr over epochs.
std::vector<EpochStats> train_teacher(TeacherModel& teacher, const std::vector<LabeledPair>& train,
                                      const TrainSchedule& schedule, std::uint64_t seed,
                                      const std::function<void(const EpochStats&)>& on_epoch = {});

// Scores pairs with the frozen teacher; records keep input order.
std::vector<TeacherRecord> generate_teacher_data(TeacherModel& teacher,
                                                 std::span<const std::string> queries,
                                                 std::span<const std::string> ads,
                                                 double temperature = 1.0);

void save_teacher(const TeacherModel& teacher, const std::filesystem::path& dir);
TeacherModel load_teacher(const std::filesystem::path& dir);

}  // namespace autoadr
