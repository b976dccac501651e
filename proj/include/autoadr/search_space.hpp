#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "autoadr/layers.hpp"
#include "autoadr/tokenizer.hpp"

namespace autoadr {

inline constexpr std::size_t kDefaultLayers = 6;

// One encoder layer: which op runs, which earlier node feeds it, and which
// earlier layer outputs are added to that input.
//   input 0      -> initial-convolution output
//   input j > 0  -> output of layer j - 1
//   skips bit j  -> add output of layer j (j < this layer's index)
struct LayerGene {
  OpKind op = OpKind::kConv1;
  std::uint32_t input = 0;
  std::uint32_t skips = 0;
  bool operator==(const LayerGene&) const = default;
};

class ArchitectureGenome {
 public:
  ArchitectureGenome() = default;
  explicit ArchitectureGenome(std::vector<LayerGene> layers);

  // Text form: "op,input,skipmask" triples joined by ';' with decimal
  // integers and no whitespace, e.g. "conv1,0,0;avgpool3,1,1".
  static ArchitectureGenome parse(std::string_view text);
  std::string to_string() const;

  std::size_t size() const { return layers_.size(); }
  const LayerGene& operator[](std::size_t i) const { return layers_[i]; }
  const std::vector<LayerGene>& layers() const { return layers_; }

  // Layers whose output feeds no later layer, ascending.
  std::vector<std::size_t> leaves() const;
  bool operator==(const ArchitectureGenome&) const = default;
  auto operator<=>(const ArchitectureGenome& other) const {
    return to_string() <=> other.to_string();
  }

 private:
  std::vector<LayerGene> layers_;
};

// Throws ContractViolation describing the first broken invariant.
void validate(const ArchitectureGenome& genome);

ArchitectureGenome sample_uniform(Rng& rng, std::size_t layers = kDefaultLayers);
ArchitectureGenome sample_uniform(std::uint64_t seed, std::size_t layers = kDefaultLayers);

// Product over layers i of 8 * (i + 1) * 2^i.
std::uint64_t genome_space_size(std::size_t layers);
// Every genome with `layers` <= 3 layers, in lexicographic gene order.
std::vector<ArchitectureGenome> enumerate_small(std::size_t layers);

// Six-layer multi-path reference architecture: small-kernel convolution and
// average pooling in parallel at the bottom, a wider convolution and a second
// pooling path in the middle, self-attention and a kernel-7 convolution as
// the two aggregated outputs (3 conv, 2 avg-pool, 1 self-attention).
ArchitectureGenome reference_genome();
inline constexpr std::string_view kReferenceGenomeText =
    "conv1,0,0;avgpool3,0,0;conv3,1,2;avgpool3,2,0;self_attention,3,1;conv7,4,4";

// Parameter slots for every (layer, op) pair of one tower. Slots are created
// eagerly for a supernet or on demand for a single fixed genome.
class TowerStore {
 public:
  TowerStore(std::string role, std::size_t layers, std::size_t hidden);

  // Creates all layers * 8 slots.
  void allocate_all(Rng& rng);
  // Creates the slots a genome needs that do not exist yet.
  void allocate_for(const ArchitectureGenome& genome, Rng& rng);

  bool has_slot(std::size_t layer, OpKind op) const;
  OpSlot& slot(std::size_t layer, OpKind op);
  const OpSlot& slot(std::size_t layer, OpKind op) const;
  std::size_t slot_count() const;

  const std::string& role() const { return role_; }
  std::size_t layers() const { return layers_; }
  std::size_t hidden() const { return hidden_; }

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> parameters_for(const ArchitectureGenome& genome);

 private:
  std::string role_;
  std::size_t layers_;
  std::size_t hidden_;
  std::vector<std::unique_ptr<OpSlot>> slots_;  // layer * 8 + op
};

// Runs the genome over x and returns the masked mean over positions of the
// averaged leaf outputs: [B, h].
Var decode(Graph& g, const ArchitectureGenome& genome, TowerStore& tower, const SequenceBatch& x,
           const LayerContext& ctx);

// Sizes of the fixed (genome-independent) parts of the relevance model.
struct ModelDims {
  std::size_t vocab = 8192;
  std::size_t emb_dim = 32;
  std::size_t hidden = 64;
  std::size_t rep_dim = 32;
  std::size_t mlp_hidden1 = 64;
  std::size_t mlp_hidden2 = 32;
  std::size_t query_len = kMaxQueryWords;
  std::size_t ad_len = kMaxAdWords;
  std::size_t layers = kDefaultLayers;
};

struct CostNorms {
  double params = 1.0;
  double time_units = 1.0;
};

struct CostReport {
  std::int64_t raw_params = 0;
  double raw_time_units = 0.0;
  double size = 0.0;
  double time = 0.0;
  double total = 0.0;  // C = SIZE + TIME
};

// Parameter count and MAC count of everything outside the two towers.
LayerCost fixed_layers_cost(const ModelDims& dims);

CostReport genome_cost(const ArchitectureGenome& genome, const ModelDims& dims,
                       const CostNorms& norms);

// Normalisation constants: the raw cost of the all-conv7 genome.
CostNorms default_norms(const ModelDims& dims);

}  // namespace autoadr
