#include "autoadr/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "autoadr/checkpoint.hpp"
#include "autoadr/errors.hpp"
#include "autoadr/optim.hpp"

namespace autoadr {

double soft_target(double z, double temperature) {
  require(temperature > 0.0, "soft_target: temperature must be positive");
  const double s = z / temperature;
  // Two-logit softmax over (s, 0), evaluated without overflow.
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

KdLossValue kd_loss_value(std::span<const double> targets, std::span<const double> predictions) {
  require(targets.size() == predictions.size() && !targets.empty(),
          "kd_loss: targets and predictions must be non-empty and equally long");
  constexpr double kEps = 1e-7;
  KdLossValue out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double p = predictions[i];
    if (p < kEps || p > 1.0 - kEps) {
      p = std::clamp(p, kEps, 1.0 - kEps);
      ++out.clamped;
    }
    out.sum -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  out.mean = out.sum / static_cast<double>(targets.size());
  return out;
}

TeacherModel::TeacherModel(TriLetterVocab vocab, const TeacherDims& dims, std::uint64_t seed)
    : vocab_(std::move(vocab)), dims_(dims) {
  const std::size_t e = dims.emb_dim, d = dims.model_dim, f = dims.ffn_dim;
  require(e > 0 && d > 0 && f > 0 && dims.layers > 0 && dims.heads > 0,
          "teacher: dimensions must be positive");
  require(d % dims.heads == 0, "teacher: model_dim must be divisible by heads");
  Rng rng(seed);
  token_table_ = Parameter("teacher/tri_letters", uniform_tensor({vocab_.size(), e}, 0.1, rng));
  positions_ = Parameter("teacher/positions", uniform_tensor({dims.query_len + dims.ad_len, d}, 0.1, rng));
  match_ = Parameter("teacher/match", uniform_tensor({2, d}, 0.1, rng));
  proj_w_ = Parameter("teacher/proj_w", fan_in_uniform({e, d}, e, rng));
  proj_b_ = Parameter("teacher/proj_b", Tensor({d}));
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const std::string p = "teacher/block" + std::to_string(l) + "/";
    Block b;
    b.wq = Parameter(p + "wq", fan_in_uniform({d, d}, d, rng));
    b.bq = Parameter(p + "bq", Tensor({d}));
    b.wk = Parameter(p + "wk", fan_in_uniform({d, d}, d, rng));
    b.bk = Parameter(p + "bk", Tensor({d}));
    b.wv = Parameter(p + "wv", fan_in_uniform({d, d}, d, rng));
    b.bv = Parameter(p + "bv", Tensor({d}));
    b.wo = Parameter(p + "wo", fan_in_uniform({d, d}, d, rng));
    b.bo = Parameter(p + "bo", Tensor({d}));
    b.ln1_g = Parameter(p + "ln1_gamma", Tensor({d}, 1.0));
    b.ln1_b = Parameter(p + "ln1_beta", Tensor({d}));
    b.w1 = Parameter(p + "ffn_w1", fan_in_uniform({d, f}, d, rng));
    b.b1 = Parameter(p + "ffn_b1", Tensor({f}));
    b.w2 = Parameter(p + "ffn_w2", fan_in_uniform({f, d}, f, rng));
    b.b2 = Parameter(p + "ffn_b2", Tensor({d}));
    b.ln2_g = Parameter(p + "ln2_gamma", Tensor({d}, 1.0));
    b.ln2_b = Parameter(p + "ln2_beta", Tensor({d}));
    blocks_.push_back(std::move(b));
  }
  pool_w_ = Parameter("teacher/pool_w", fan_in_uniform({d, d}, d, rng));
  pool_b_ = Parameter("teacher/pool_b", Tensor({d}));
  out_w_ = Parameter("teacher/out_w", fan_in_uniform({d, 1}, d, rng));
  out_b_ = Parameter("teacher/out_b", Tensor({1}));
}

Var TeacherModel::logits(Graph& g, std::span<const EncodedText> queries,
                         std::span<const EncodedText> ads, const ForwardContext& ctx) {
  require(queries.size() == ads.size() && !queries.empty(),
          "teacher: query and ad batches must be non-empty and aligned");
  require(!ctx.training || !frozen_, "teacher: cannot train a frozen teacher");
  const std::size_t batch = queries.size();
  std::size_t len = 1;
  for (std::size_t b = 0; b < batch; ++b) {
    require(queries[b].size() <= dims_.query_len && ads[b].size() <= dims_.ad_len,
            "teacher: text longer than the configured maximum");
    len = std::max(len, queries[b].size() + ads[b].size());
  }
  TokenBatch tokens{batch, len, std::vector<std::vector<int>>(batch * len)};
  Tensor mask({batch, len});
  std::vector<int> rows(batch * len, 0), matched(batch * len, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t nq = queries[b].size(), na = ads[b].size();
    const auto& qw = queries[b].words;
    const auto& aw = ads[b].words;
    for (std::size_t t = 0; t < nq + na; ++t) {
      const std::size_t i = b * len + t;
      mask[i] = 1.0;
      if (t < nq) {
        tokens.ids[i] = qw[t];
        rows[i] = static_cast<int>(t);
        matched[i] = std::find(aw.begin(), aw.end(), qw[t]) != aw.end();
      } else {
        tokens.ids[i] = aw[t - nq];
        rows[i] = static_cast<int>(dims_.query_len + t - nq);
        matched[i] = std::find(qw.begin(), qw.end(), aw[t - nq]) != qw.end();
      }
    }
  }
  Var x = linear(embedding_bag(g.param(token_table_), tokens), g.param(proj_w_), g.param(proj_b_));
  x = add_rows(add_rows(x, g.param(positions_), rows), g.param(match_), matched);
  x = mask_rows(x, mask);
  for (Block& b : blocks_) {
    Var q = linear(x, g.param(b.wq), g.param(b.bq));
    Var k = linear(x, g.param(b.wk), g.param(b.bk));
    Var v = linear(x, g.param(b.wv), g.param(b.bv));
    Var attended = linear(multi_head_attention(q, k, v, mask, dims_.heads), g.param(b.wo),
                          g.param(b.bo));
    x = mask_rows(layer_norm(add(x, attended), g.param(b.ln1_g), g.param(b.ln1_b)), mask);
    Var hidden = relu(linear(x, g.param(b.w1), g.param(b.b1)));
    if (ctx.training && ctx.keep_prob < 1.0) {
      require(ctx.rng != nullptr, "teacher: dropout needs an rng");
      hidden = dropout(hidden, ctx.keep_prob, *ctx.rng, true);
    }
    Var ffn = linear(hidden, g.param(b.w2), g.param(b.b2));
    x = mask_rows(layer_norm(add(x, ffn), g.param(b.ln2_g), g.param(b.ln2_b)), mask);
  }
  Var pooled = relu(linear(masked_mean_time(x, mask), g.param(pool_w_), g.param(pool_b_)));
  return reshape(linear(pooled, g.param(out_w_), g.param(out_b_)), {batch});
}

std::vector<double> TeacherModel::score(std::span<const std::string> queries,
                                        std::span<const std::string> ads, std::size_t batch_size) {
  require(queries.size() == ads.size(), "teacher: query and ad lists differ in length");
  require(batch_size > 0, "teacher: batch size must be positive");
  std::vector<double> out;
  out.reserve(queries.size());
  for (std::size_t begin = 0; begin < queries.size(); begin += batch_size) {
    const std::size_t end = std::min(queries.size(), begin + batch_size);
    std::vector<EncodedText> q, a;
    for (std::size_t i = begin; i < end; ++i) {
      q.push_back(encode(queries[i], vocab_, dims_.query_len));
      a.push_back(encode(ads[i], vocab_, dims_.ad_len));
    }
    Graph g;
    const Tensor z = logits(g, q, a, {}).value();
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return out;
}

std::vector<Parameter*> TeacherModel::parameters() {
  std::vector<Parameter*> out{&token_table_, &positions_, &match_, &proj_w_, &proj_b_};
  for (Block& b : blocks_) {
    for (Parameter* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_g,
                         &b.ln1_b, &b.w1, &b.b1, &b.w2, &b.b2, &b.ln2_g, &b.ln2_b})
      out.push_back(p);
  }
  for (Parameter* p : {&pool_w_, &pool_b_, &out_w_, &out_b_}) out.push_back(p);
  return out;
}

std::int64_t TeacherModel::parameter_count() const {
  std::int64_t n = 0;
  for (Parameter* p : const_cast<TeacherModel*>(this)->parameters())
    n += static_cast<std::int64_t>(p->value.size());
  return n;
}

std::map<std::string, Tensor> TeacherModel::state() const {
  std::map<std::string, Tensor> out;
  for (Parameter* p : const_cast<TeacherModel*>(this)->parameters()) out.emplace(p->name, p->value);
  return out;
}

void TeacherModel::load_state(const std::map<std::string, Tensor>& tensors) {
  const auto params = parameters();
  require(tensors.size() == params.size(), "teacher: checkpoint tensor count mismatch");
  for (Parameter* p : params) {
    auto it = tensors.find(p->name);
    require(it != tensors.end(), "teacher: missing tensor '" + p->name + "'");
    require(it->second.shape() == p->value.shape(), "teacher: shape mismatch for '" + p->name + "'");
    p->value = it->second;
  }
}

std::vector<EpochStats> train_teacher(TeacherModel& teacher, const std::vector<LabeledPair>& train,
                                      const TrainSchedule& schedule, std::uint64_t seed,
                                      const std::function<void(const EpochStats&)>& on_epoch) {
  require(!train.empty(), "train_teacher: no training pairs");
  require(!teacher.frozen(), "train_teacher: teacher is frozen");
  require(schedule.epochs > 0 && schedule.batch_size > 0, "train_teacher: bad schedule");
  std::vector<EncodedText> queries, ads;
  for (const auto& p : train) {
    queries.push_back(encode(p.query, teacher.vocab(), teacher.dims().query_len));
    ads.push_back(encode(p.ad, teacher.vocab(), teacher.dims().ad_len));
  }
  Adam::Options options;
  options.weight_decay = schedule.weight_decay;
  options.base_lr = schedule.lr_max;
  Adam adam(options);
  Rng rng(seed);
  const auto params = teacher.parameters();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = cosine_lr(schedule.lr_max, schedule.lr_min, static_cast<std::int64_t>(epoch),
                                static_cast<std::int64_t>(schedule.epochs));
    shuffle(order, rng);
    double loss_total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), begin + schedule.batch_size);
      std::vector<EncodedText> q, a;
      std::vector<double> y;
      for (std::size_t i = begin; i < end; ++i) {
        q.push_back(queries[order[i]]);
        a.push_back(ads[order[i]]);
        y.push_back(static_cast<double>(train[order[i]].label));
      }
      Graph g;
      ForwardContext ctx{true, schedule.keep_prob, &rng};
      Var loss = kd_loss(sigmoid(teacher.logits(g, q, a, ctx)), y, Reduction::kMean);
      loss_total += loss.value().item() * static_cast<double>(end - begin);
      g.backward(loss);
      clip_grad_norm(params, schedule.clip_norm);
      adam.step(params, lr);
    }
    history.push_back({epoch, lr, loss_total / static_cast<double>(order.size())});
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

std::vector<TeacherRecord> generate_teacher_data(TeacherModel& teacher,
                                                 std::span<const std::string> queries,
                                                 std::span<const std::string> ads,
                                                 double temperature) {
  require(teacher.frozen(), "generate_teacher_data: teacher must be frozen first");
  require(temperature > 0.0, "generate_teacher_data: temperature must be positive");
  const auto z = teacher.score(queries, ads);
  std::vector<TeacherRecord> records;
  records.reserve(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    records.push_back({queries[i], ads[i], z[i], soft_target(z[i], temperature)});
  return records;
}

void save_teacher(const TeacherModel& teacher, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "teacher.ckpt", Checkpoint{teacher.state(), std::nullopt});
  teacher.vocab().save(dir / "vocab.txt");
  const TeacherDims& d = teacher.dims();
  const nlohmann::json j = {{"emb_dim", d.emb_dim}, {"model_dim", d.model_dim},
                            {"heads", d.heads},     {"ffn_dim", d.ffn_dim},
                            {"layers", d.layers},   {"query_len", d.query_len},
                            {"ad_len", d.ad_len}};
  std::ofstream(dir / "teacher_dims.json") << j.dump(2) << '\n';
}

TeacherModel load_teacher(const std::filesystem::path& dir) {
  std::ifstream in(dir / "teacher_dims.json");
  if (!in) throw std::runtime_error("load_teacher: cannot read " + (dir / "teacher_dims.json").string());
  const auto j = nlohmann::json::parse(in);
  TeacherDims d;
  d.emb_dim = j.at("emb_dim");
  d.model_dim = j.at("model_dim");
  d.heads = j.at("heads");
  d.ffn_dim = j.at("ffn_dim");
  d.layers = j.at("layers");
  d.query_len = j.at("query_len");
  d.ad_len = j.at("ad_len");
  TeacherModel teacher(TriLetterVocab::load(dir / "vocab.txt"), d, 0);
  teacher.load_state(load_checkpoint(dir / "teacher.ckpt").tensors);
  teacher.freeze();
  return teacher;
}

}  // namespace autoadr
