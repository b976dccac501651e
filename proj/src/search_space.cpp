#include "autoadr/search_space.hpp"

#include <charconv>

#include "autoadr/errors.hpp"

namespace autoadr {
namespace {

std::uint32_t parse_uint(std::string_view field, std::string_view what) {
  require(!field.empty(), "genome: empty " + std::string(what));
  require(field.size() == 1 || field[0] != '0',
          "genome: leading zero in " + std::string(what) + " '" + std::string(field) + "'");
  std::uint32_t value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  require(ec == std::errc() && ptr == field.data() + field.size(),
          "genome: bad " + std::string(what) + " '" + std::string(field) + "'");
  return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(sep, start);
    parts.push_back(text.substr(start, end == std::string_view::npos ? end : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return parts;
}

}  // namespace

ArchitectureGenome::ArchitectureGenome(std::vector<LayerGene> layers) : layers_(std::move(layers)) {
  validate(*this);
}

ArchitectureGenome ArchitectureGenome::parse(std::string_view text) {
  require(!text.empty(), "genome: empty text");
  std::vector<LayerGene> layers;
  for (std::string_view triple : split(text, ';')) {
    const auto fields = split(triple, ',');
    require(fields.size() == 3, "genome: expected op,input,skipmask but got '" +
                                    std::string(triple) + "'");
    const auto op = op_from_name(fields[0]);
    require(op.has_value(), "genome: unknown op '" + std::string(fields[0]) + "'");
    layers.push_back({*op, parse_uint(fields[1], "input"), parse_uint(fields[2], "skip mask")});
  }
  return ArchitectureGenome(std::move(layers));
}

std::string ArchitectureGenome::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) out.push_back(';');
    out.append(op_name(layers_[i].op));
    out.push_back(',');
    out.append(std::to_string(layers_[i].input));
    out.push_back(',');
    out.append(std::to_string(layers_[i].skips));
  }
  return out;
}

std::vector<std::size_t> ArchitectureGenome::leaves() const {
  std::vector<bool> consumed(layers_.size(), false);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].input > 0) consumed[layers_[i].input - 1] = true;
    for (std::size_t j = 0; j < i; ++j)
      if (layers_[i].skips & (1u << j)) consumed[j] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (!consumed[i]) out.push_back(i);
  return out;
}

void validate(const ArchitectureGenome& genome) {
  require(genome.size() >= 1, "genome: needs at least one layer");
  require(genome.size() <= 31, "genome: at most 31 layers are supported");
  for (std::size_t i = 0; i < genome.size(); ++i) {
    const LayerGene& gene = genome[i];
    require(static_cast<int>(gene.op) >= 0 && static_cast<int>(gene.op) < kNumOps,
            "genome: layer " + std::to_string(i) + " has an invalid op");
    require(gene.input <= i, "genome: layer " + std::to_string(i) + " input " +
                                 std::to_string(gene.input) + " does not precede the layer");
    require(gene.skips < (1u << i), "genome: layer " + std::to_string(i) + " skip mask " +
                                        std::to_string(gene.skips) +
                                        " references a non-earlier layer");
  }
}

ArchitectureGenome sample_uniform(Rng& rng, std::size_t layers) {
  require(layers >= 1 && layers <= 31, "sample_uniform: layer count out of range");
  std::vector<LayerGene> genes(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    genes[i].op = static_cast<OpKind>(uniform_index(rng, kNumOps));
    genes[i].input = static_cast<std::uint32_t>(uniform_index(rng, i + 1));
    std::uint32_t skips = 0;
    for (std::size_t j = 0; j < i; ++j)
      if (coin(rng)) skips |= 1u << j;
    genes[i].skips = skips;
  }
  return ArchitectureGenome(std::move(genes));
}

ArchitectureGenome sample_uniform(std::uint64_t seed, std::size_t layers) {
  Rng rng(seed);
  return sample_uniform(rng, layers);
}

std::uint64_t genome_space_size(std::size_t layers) {
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < layers; ++i) total *= kNumOps * (i + 1) * (std::uint64_t{1} << i);
  return total;
}

std::vector<ArchitectureGenome> enumerate_small(std::size_t layers) {
  require(layers >= 1 && layers <= 3, "enumerate_small: only 1 to 3 layers are enumerable");
  std::vector<std::vector<LayerGene>> partial{{}};
  for (std::size_t i = 0; i < layers; ++i) {
    std::vector<std::vector<LayerGene>> next;
    next.reserve(partial.size() * kNumOps * (i + 1) * (1u << i));
    for (const auto& prefix : partial)
      for (OpKind op : kAllOps)
        for (std::uint32_t input = 0; input <= i; ++input)
          for (std::uint32_t skips = 0; skips < (1u << i); ++skips) {
            auto genes = prefix;
            genes.push_back({op, input, skips});
            next.push_back(std::move(genes));
          }
    partial = std::move(next);
  }
  std::vector<ArchitectureGenome> out;
  out.reserve(partial.size());
  for (auto& genes : partial) out.emplace_back(std::move(genes));
  return out;
}

ArchitectureGenome reference_genome() { return ArchitectureGenome::parse(kReferenceGenomeText); }

TowerStore::TowerStore(std::string role, std::size_t layers, std::size_t hidden)
    : role_(std::move(role)), layers_(layers), hidden_(hidden), slots_(layers * kNumOps) {
  require(layers >= 1 && hidden >= 1, "TowerStore: layers and hidden size must be positive");
}

void TowerStore::allocate_all(Rng& rng) {
  for (std::size_t i = 0; i < layers_; ++i)
    for (OpKind op : kAllOps) {
      auto& s = slots_[i * kNumOps + static_cast<std::size_t>(op)];
      if (!s) {
        s = std::make_unique<OpSlot>(
            OpSlot::create(op, hidden_, rng, role_ + "/L" + std::to_string(i) + "/"));
      }
    }
}

void TowerStore::allocate_for(const ArchitectureGenome& genome, Rng& rng) {
  require(genome.size() == layers_, "TowerStore: genome has " + std::to_string(genome.size()) +
                                        " layers, store has " + std::to_string(layers_));
  for (std::size_t i = 0; i < layers_; ++i) {
    auto& s = slots_[i * kNumOps + static_cast<std::size_t>(genome[i].op)];
    if (!s) {
      s = std::make_unique<OpSlot>(
          OpSlot::create(genome[i].op, hidden_, rng, role_ + "/L" + std::to_string(i) + "/"));
    }
  }
}

bool TowerStore::has_slot(std::size_t layer, OpKind op) const {
  return layer < layers_ && slots_[layer * kNumOps + static_cast<std::size_t>(op)] != nullptr;
}

OpSlot& TowerStore::slot(std::size_t layer, OpKind op) {
  require(has_slot(layer, op), "TowerStore: slot (" + std::to_string(layer) + ", " +
                                   std::string(op_name(op)) + ") is not allocated");
  return *slots_[layer * kNumOps + static_cast<std::size_t>(op)];
}

const OpSlot& TowerStore::slot(std::size_t layer, OpKind op) const {
  return const_cast<TowerStore*>(this)->slot(layer, op);
}

std::size_t TowerStore::slot_count() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s ? 1 : 0;
  return n;
}

std::vector<Parameter*> TowerStore::parameters() {
  std::vector<Parameter*> out;
  for (auto& s : slots_)
    if (s)
      for (auto& p : s->params) out.push_back(&p);
  return out;
}

std::vector<Parameter*> TowerStore::parameters_for(const ArchitectureGenome& genome) {
  std::vector<Parameter*> out;
  for (std::size_t i = 0; i < genome.size(); ++i)
    for (auto& p : slot(i, genome[i].op).params) out.push_back(&p);
  return out;
}

Var decode(Graph& g, const ArchitectureGenome& genome, TowerStore& tower, const SequenceBatch& x,
           const LayerContext& ctx) {
  validate(genome);
  require(genome.size() == tower.layers(), "decode: genome depth does not match the tower");
  require(x.width() == tower.hidden(), "decode: input width does not match the tower");
  std::vector<Var> outputs;
  outputs.reserve(genome.size());
  for (std::size_t i = 0; i < genome.size(); ++i) {
    const LayerGene& gene = genome[i];
    Var in = gene.input == 0 ? x.values : outputs[gene.input - 1];
    for (std::size_t j = 0; j < i; ++j)
      if (gene.skips & (1u << j)) in = add(in, outputs[j]);
    outputs.push_back(apply_op(g, tower.slot(i, gene.op), {in, x.mask}, ctx).values);
  }
  std::vector<Var> leaf_outputs;
  for (std::size_t leaf : genome.leaves()) leaf_outputs.push_back(outputs[leaf]);
  return masked_mean_time(average(leaf_outputs), x.mask);
}

LayerCost fixed_layers_cost(const ModelDims& d) {
  const auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
  const auto f64 = [](std::size_t v) { return static_cast<double>(v); };
  LayerCost cost;
  const std::int64_t mlp_in = 4 * i64(d.rep_dim);
  cost.param_count = i64(d.vocab) * i64(d.emb_dim)                          // tri-letter table
                     + (i64(d.query_len) + i64(d.ad_len)) * i64(d.emb_dim)  // positions
                     + i64(d.emb_dim) * i64(d.hidden) + i64(d.hidden)       // initial conv
                     + 2 * (i64(d.hidden) * i64(d.rep_dim) + i64(d.rep_dim))  // downscale
                     + mlp_in * i64(d.mlp_hidden1) + i64(d.mlp_hidden1) +
                     i64(d.mlp_hidden1) * i64(d.mlp_hidden2) + i64(d.mlp_hidden2) +
                     mlp_in * i64(d.mlp_hidden2)  // shortcut projection
                     + i64(d.mlp_hidden2) + 1;
  const double positions = f64(d.query_len) + f64(d.ad_len);
  cost.time_units = positions * f64(d.emb_dim)                  // embedding sums
                    + positions * f64(d.emb_dim) * f64(d.hidden)  // initial conv
                    + positions * f64(d.hidden)                   // mean pooling
                    + 2.0 * f64(d.hidden) * f64(d.rep_dim)        // downscale
                    + f64(4 * d.rep_dim) * f64(d.mlp_hidden1) +
                    f64(d.mlp_hidden1) * f64(d.mlp_hidden2) +
                    f64(4 * d.rep_dim) * f64(d.mlp_hidden2) + f64(d.mlp_hidden2);
  return cost;
}

CostReport genome_cost(const ArchitectureGenome& genome, const ModelDims& dims,
                       const CostNorms& norms) {
  validate(genome);
  require(norms.params > 0.0 && norms.time_units > 0.0, "genome_cost: norms must be positive");
  const LayerCost fixed = fixed_layers_cost(dims);
  CostReport report;
  report.raw_params = fixed.param_count;
  report.raw_time_units = fixed.time_units;
  for (const LayerGene& gene : genome.layers()) {
    for (std::size_t len : {dims.query_len, dims.ad_len}) {
      const LayerCost c = layer_cost({gene.op, dims.hidden, len});
      report.raw_params += c.param_count;
      report.raw_time_units += c.time_units;
    }
  }
  report.size = static_cast<double>(report.raw_params) / norms.params;
  report.time = report.raw_time_units / norms.time_units;
  report.total = report.size + report.time;
  return report;
}

CostNorms default_norms(const ModelDims& dims) {
  std::vector<LayerGene> genes(dims.layers);
  for (std::size_t i = 0; i < genes.size(); ++i) {
    genes[i].op = OpKind::kConv7;
    genes[i].input = static_cast<std::uint32_t>(i);
  }
  const CostReport raw = genome_cost(ArchitectureGenome(std::move(genes)), dims, CostNorms{});
  return {static_cast<double>(raw.raw_params), raw.raw_time_units};
}

}  // namespace autoadr
