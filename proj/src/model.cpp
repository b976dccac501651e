#include "autoadr/model.hpp"

#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "autoadr/checkpoint.hpp"
#include "autoadr/errors.hpp"

namespace autoadr {

std::size_t max_words(const ModelDims& dims, Side side) {
  return side == Side::kQuery ? dims.query_len : dims.ad_len;
}

Var crossing_features(Var q, Var a) {
  require(q.shape() == a.shape(), "crossing: query " + shape_string(q.shape()) +
                                      " and ad " + shape_string(a.shape()) +
                                      " representations differ in shape");
  const std::array<Var, 4> parts{q, a, abs(sub(q, a)), mul(q, a)};
  return concat_last(parts);
}

namespace {

constexpr double kTableInitBound = 0.1;

Parameter make_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  return Parameter(name, fan_in_uniform({in, out}, in, rng));
}

}  // namespace

RelevanceModel::RelevanceModel(TriLetterVocab vocab, const ModelDims& dims,
                               std::optional<ArchitectureGenome> genome, std::uint64_t seed)
    : vocab_(std::move(vocab)),
      dims_(dims),
      genome_(std::move(genome)),
      query_tower_("query", dims.layers, dims.hidden),
      ad_tower_("ad", dims.layers, dims.hidden) {
  dims_.vocab = vocab_.size();
  require(dims_.rep_dim <= dims_.hidden, "model: rep_dim must not exceed hidden");
  require(dims_.emb_dim > 0 && dims_.hidden > 0 && dims_.rep_dim > 0 && dims_.mlp_hidden1 > 0 &&
              dims_.mlp_hidden2 > 0 && dims_.query_len > 0 && dims_.ad_len > 0,
          "model: all dimensions must be positive");
  if (genome_) {
    require(genome_->size() == dims_.layers, "model: genome depth " +
                                                 std::to_string(genome_->size()) +
                                                 " differs from configured layers");
  }
  Rng rng(seed);
  const std::size_t e = dims_.emb_dim, h = dims_.hidden, d = dims_.rep_dim;
  const std::size_t m1 = dims_.mlp_hidden1, m2 = dims_.mlp_hidden2;
  Fixed& f = fixed_;
  f.token_table = Parameter("embed/tri_letters", uniform_tensor({dims_.vocab, e}, kTableInitBound, rng));
  f.query_positions = Parameter("embed/query_positions", uniform_tensor({dims_.query_len, e}, kTableInitBound, rng));
  f.ad_positions = Parameter("embed/ad_positions", uniform_tensor({dims_.ad_len, e}, kTableInitBound, rng));
  f.init_w = make_linear("initial_conv/w", e, h, rng);
  f.init_b = Parameter("initial_conv/b", Tensor({h}));
  f.down_query_w = make_linear("downscale/query_w", h, d, rng);
  f.down_query_b = Parameter("downscale/query_b", Tensor({d}));
  f.down_ad_w = make_linear("downscale/ad_w", h, d, rng);
  f.down_ad_b = Parameter("downscale/ad_b", Tensor({d}));
  f.mlp_w1 = make_linear("head/w1", 4 * d, m1, rng);
  f.mlp_b1 = Parameter("head/b1", Tensor({m1}));
  f.mlp_w2 = make_linear("head/w2", m1, m2, rng);
  f.mlp_b2 = Parameter("head/b2", Tensor({m2}));
  f.shortcut_w = make_linear("head/shortcut_w", 4 * d, m2, rng);
  f.out_w = make_linear("head/out_w", m2, 1, rng);
  f.out_b = Parameter("head/out_b", Tensor({1}));

  // Separate streams keep tower initialisation independent of each other.
  Rng query_rng(mix_seed(seed, 1)), ad_rng(mix_seed(seed, 2));
  if (genome_) {
    query_tower_.allocate_for(*genome_, query_rng);
    ad_tower_.allocate_for(*genome_, ad_rng);
  } else {
    query_tower_.allocate_all(query_rng);
    ad_tower_.allocate_all(ad_rng);
  }
}

const ArchitectureGenome& RelevanceModel::genome() const {
  require(genome_.has_value(), "model: a supernet has no fixed genome");
  return *genome_;
}

EncodedText RelevanceModel::encode_text(std::string_view text, Side side) const {
  return encode(text, vocab_, max_words(dims_, side));
}

SequenceBatch RelevanceModel::embed(Graph& g, std::span<const EncodedText> texts, Side side) {
  require(!texts.empty(), "embed: empty batch");
  const std::size_t limit = max_words(dims_, side);
  std::size_t len = 1;
  for (const auto& t : texts) {
    require(t.size() <= limit, "embed: text has " + std::to_string(t.size()) +
                                   " words, limit is " + std::to_string(limit));
    len = std::max(len, t.size());
  }
  const std::size_t batch = texts.size();
  TokenBatch tokens{batch, len, std::vector<std::vector<int>>(batch * len)};
  Tensor mask({batch, len});
  std::vector<int> rows(batch * len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t) {
      rows[b * len + t] = static_cast<int>(t);
      if (t < texts[b].size()) {
        tokens.ids[b * len + t] = texts[b].words[t];
        mask[b * len + t] = 1.0;
      }
    }
  Parameter& positions = side == Side::kQuery ? fixed_.query_positions : fixed_.ad_positions;
  Var x = add_rows(embedding_bag(g.param(fixed_.token_table), tokens), g.param(positions), rows);
  return {mask_rows(x, mask), mask};
}

SequenceBatch RelevanceModel::initial_conv(Graph& g, const SequenceBatch& x) {
  require(x.width() == dims_.emb_dim, "initial_conv: input width must equal emb_dim");
  Var y = linear(x.values, g.param(fixed_.init_w), g.param(fixed_.init_b));
  return {mask_rows(y, x.mask), x.mask};
}

Var RelevanceModel::represent(Graph& g, const ArchitectureGenome& genome,
                              std::span<const EncodedText> texts, Side side,
                              const ForwardContext& ctx) {
  SequenceBatch x = initial_conv(g, embed(g, texts, side));
  if (ctx.training && ctx.keep_prob < 1.0) {
    require(ctx.rng != nullptr, "represent: dropout needs an rng");
    x.values = mask_rows(dropout(x.values, ctx.keep_prob, *ctx.rng, true), x.mask);
  }
  LayerContext layer_ctx;
  layer_ctx.training = ctx.training;
  Var pooled = decode(g, genome, tower(side), x, layer_ctx);
  const bool query = side == Side::kQuery;
  return linear(pooled, g.param(query ? fixed_.down_query_w : fixed_.down_ad_w),
                g.param(query ? fixed_.down_query_b : fixed_.down_ad_b));
}

Var RelevanceModel::head(Graph& g, Var q, Var a, const ForwardContext& ctx) {
  require(q.shape().size() == 2 && q.shape()[1] == dims_.rep_dim,
          "head: representations must be [B, rep_dim]");
  Var x = crossing_features(q, a);
  Var h1 = relu(linear(x, g.param(fixed_.mlp_w1), g.param(fixed_.mlp_b1)));
  if (ctx.training && ctx.keep_prob < 1.0) {
    require(ctx.rng != nullptr, "head: dropout needs an rng");
    h1 = dropout(h1, ctx.keep_prob, *ctx.rng, true);
  }
  Var h2 = relu(linear(h1, g.param(fixed_.mlp_w2), g.param(fixed_.mlp_b2)));
  Var joined = add(h2, linear(x, g.param(fixed_.shortcut_w)));
  Var logit = linear(joined, g.param(fixed_.out_w), g.param(fixed_.out_b));
  return reshape(logit, {q.shape()[0]});
}

Var RelevanceModel::forward(Graph& g, const ArchitectureGenome& genome,
                            std::span<const EncodedText> queries, std::span<const EncodedText> ads,
                            const ForwardContext& ctx) {
  require(queries.size() == ads.size(), "forward: query and ad batches differ in size");
  Var q = represent(g, genome, queries, Side::kQuery, ctx);
  Var a = represent(g, genome, ads, Side::kAd, ctx);
  return sigmoid(head(g, q, a, ctx));
}

std::vector<Parameter*> RelevanceModel::fixed_list() {
  Fixed& f = fixed_;
  return {&f.token_table, &f.query_positions, &f.ad_positions, &f.init_w,     &f.init_b,
          &f.down_query_w, &f.down_query_b,   &f.down_ad_w,    &f.down_ad_b,  &f.mlp_w1,
          &f.mlp_b1,       &f.mlp_w2,         &f.mlp_b2,       &f.shortcut_w, &f.out_w,
          &f.out_b};
}

std::vector<Parameter*> RelevanceModel::fixed_parameters() { return fixed_list(); }

std::vector<Parameter*> RelevanceModel::parameters_for(const ArchitectureGenome& genome) {
  auto out = fixed_list();
  for (Parameter* p : query_tower_.parameters_for(genome)) out.push_back(p);
  for (Parameter* p : ad_tower_.parameters_for(genome)) out.push_back(p);
  return out;
}

std::vector<Parameter*> RelevanceModel::all_parameters() {
  auto out = fixed_list();
  for (Parameter* p : query_tower_.parameters()) out.push_back(p);
  for (Parameter* p : ad_tower_.parameters()) out.push_back(p);
  return out;
}

std::int64_t RelevanceModel::parameter_count(const ArchitectureGenome& genome) {
  std::int64_t n = 0;
  for (Parameter* p : parameters_for(genome)) n += static_cast<std::int64_t>(p->value.size());
  return n;
}

namespace {

template <typename Fn>
void for_each_conv_slot(TowerStore& tower, Fn&& fn) {
  for (std::size_t i = 0; i < tower.layers(); ++i)
    for (OpKind op : kAllOps)
      if (is_conv(op) && tower.has_slot(i, op))
        fn(tower.role() + "/L" + std::to_string(i) + "/" + std::string(op_name(op)) + "/",
           tower.slot(i, op));
}

}  // namespace

std::map<std::string, Tensor> RelevanceModel::state() const {
  auto& self = const_cast<RelevanceModel&>(*this);
  std::map<std::string, Tensor> out;
  for (Parameter* p : self.all_parameters()) out.emplace(p->name, p->value);
  for (TowerStore* tower : {&self.query_tower_, &self.ad_tower_}) {
    for_each_conv_slot(*tower, [&](const std::string& base, OpSlot& slot) {
      out.emplace(base + "bn_mean", slot.bn.running_mean);
      out.emplace(base + "bn_var", slot.bn.running_var);
    });
  }
  return out;
}

void RelevanceModel::load_state(const std::map<std::string, Tensor>& tensors) {
  std::size_t used = 0;
  auto take = [&](const std::string& name, Tensor& dest) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "load_state: missing tensor '" + name + "'");
    require(it->second.shape() == dest.shape(),
            "load_state: tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                ", expected " + shape_string(dest.shape()));
    dest = it->second;
    ++used;
  };
  for (Parameter* p : all_parameters()) take(p->name, p->value);
  for (TowerStore* tower : {&query_tower_, &ad_tower_}) {
    for_each_conv_slot(*tower, [&](const std::string& base, OpSlot& slot) {
      take(base + "bn_mean", slot.bn.running_mean);
      take(base + "bn_var", slot.bn.running_var);
    });
  }
  require(used == tensors.size(), "load_state: checkpoint holds " +
                                      std::to_string(tensors.size() - used) +
                                      " tensors this model does not have");
}

namespace {

std::vector<EncodedText> encode_range(const RelevanceModel& model,
                                      std::span<const std::string> texts, std::size_t begin,
                                      std::size_t end, Side side) {
  std::vector<EncodedText> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(model.encode_text(texts[i], side));
  return out;
}

}  // namespace

std::vector<double> score_pairs(RelevanceModel& model, const ArchitectureGenome& genome,
                                std::span<const std::string> queries,
                                std::span<const std::string> ads, std::size_t batch_size) {
  require(queries.size() == ads.size(), "score_pairs: query and ad lists differ in length");
  require(batch_size > 0, "score_pairs: batch size must be positive");
  std::vector<double> out;
  out.reserve(queries.size());
  for (std::size_t begin = 0; begin < queries.size(); begin += batch_size) {
    const std::size_t end = std::min(queries.size(), begin + batch_size);
    const auto q = encode_range(model, queries, begin, end, Side::kQuery);
    const auto a = encode_range(model, ads, begin, end, Side::kAd);
    Graph g;
    const Tensor p = model.forward(g, genome, q, a, {}).value();
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

std::vector<std::vector<double>> precompute_side(RelevanceModel& model,
                                                 const ArchitectureGenome& genome,
                                                 std::span<const std::string> texts, Side side,
                                                 std::size_t batch_size) {
  require(batch_size > 0, "precompute_side: batch size must be positive");
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  const std::size_t d = model.dims().rep_dim;
  for (std::size_t begin = 0; begin < texts.size(); begin += batch_size) {
    const std::size_t end = std::min(texts.size(), begin + batch_size);
    const auto encoded = encode_range(model, texts, begin, end, side);
    Graph g;
    const Tensor rep = model.represent(g, genome, encoded, side, {}).value();
    for (std::size_t b = 0; b < end - begin; ++b)
      out.emplace_back(rep.data().begin() + static_cast<long>(b * d),
                       rep.data().begin() + static_cast<long>((b + 1) * d));
  }
  return out;
}

std::vector<double> score_representations(RelevanceModel& model,
                                          std::span<const std::vector<double>> queries,
                                          std::span<const std::vector<double>> ads) {
  require(queries.size() == ads.size(), "score_representations: list lengths differ");
  if (queries.empty()) return {};
  const std::size_t n = queries.size(), d = model.dims().rep_dim;
  Tensor q({n, d}), a({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    require(queries[i].size() == d && ads[i].size() == d,
            "score_representations: vectors must have rep_dim entries");
    std::copy(queries[i].begin(), queries[i].end(), q.data().begin() + static_cast<long>(i * d));
    std::copy(ads[i].begin(), ads[i].end(), a.data().begin() + static_cast<long>(i * d));
  }
  Graph g;
  const Tensor p = sigmoid(model.head(g, g.constant(q), g.constant(a), {})).value();
  return {p.data().begin(), p.data().end()};
}

void export_model(const RelevanceModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", Checkpoint{model.state(), std::nullopt});
  model.vocab().save(dir / "vocab.txt");
  const ModelDims& d = model.dims();
  const nlohmann::json dims = {{"emb_dim", d.emb_dim},         {"hidden", d.hidden},
                               {"rep_dim", d.rep_dim},         {"mlp_hidden1", d.mlp_hidden1},
                               {"mlp_hidden2", d.mlp_hidden2}, {"query_len", d.query_len},
                               {"ad_len", d.ad_len},           {"layers", d.layers}};
  std::ofstream(dir / "dims.json") << dims.dump(2) << '\n';
  const auto genome_path = dir / "genome.txt";
  if (model.is_supernet()) {
    std::filesystem::remove(genome_path);
  } else {
    std::ofstream(genome_path) << model.genome().to_string() << '\n';
  }
}

RelevanceModel import_model(const std::filesystem::path& dir) {
  std::ifstream dims_in(dir / "dims.json");
  if (!dims_in) throw std::runtime_error("import_model: cannot read " + (dir / "dims.json").string());
  const nlohmann::json j = nlohmann::json::parse(dims_in);
  ModelDims dims;
  dims.emb_dim = j.at("emb_dim");
  dims.hidden = j.at("hidden");
  dims.rep_dim = j.at("rep_dim");
  dims.mlp_hidden1 = j.at("mlp_hidden1");
  dims.mlp_hidden2 = j.at("mlp_hidden2");
  dims.query_len = j.at("query_len");
  dims.ad_len = j.at("ad_len");
  dims.layers = j.at("layers");
  std::optional<ArchitectureGenome> genome;
  if (std::ifstream genome_in(dir / "genome.txt"); genome_in) {
    std::string line;
    std::getline(genome_in, line);
    genome = ArchitectureGenome::parse(line);
  }
  RelevanceModel model(TriLetterVocab::load(dir / "vocab.txt"), dims, std::move(genome), 0);
  model.load_state(load_checkpoint(dir / "model.ckpt").tensors);
  return model;
}

}  // namespace autoadr
