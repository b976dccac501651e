#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "autoadr/errors.hpp"
#include "autoadr/optim.hpp"
#include "autoadr/search_space.hpp"
#include "test_util.hpp"

namespace autoadr {
namespace {

using testing::random_mask;
using testing::random_tensor;

TEST(Genome, TextRoundTrip) {
  const auto g = reference_genome();
  EXPECT_EQ(g.to_string(), kReferenceGenomeText);
  EXPECT_EQ(ArchitectureGenome::parse(g.to_string()), g);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_uniform(rng);
    EXPECT_EQ(ArchitectureGenome::parse(s.to_string()), s);
  }
}

TEST(Genome, ParseRejectsMalformedText) {
  for (const char* bad : {"", "conv1,0", "conv2,0,0", "conv1,1,0", "conv1,0,1", "conv1,0,0;",
                          "conv1, 0,0", "conv1,00,0", "conv1,0,0;conv3,0,2", "conv1,-1,0",
                          "conv1,0,0;bigru,2,0"}) {
    EXPECT_THROW(ArchitectureGenome::parse(bad), ContractViolation) << bad;
  }
}

TEST(Genome, ReferenceHasThreeConvTwoAvgPoolOneAttention) {
  const auto g = reference_genome();
  ASSERT_EQ(g.size(), 6u);
  int conv = 0, avg = 0, attention = 0;
  for (const auto& gene : g.layers()) {
    conv += is_conv(gene.op);
    avg += gene.op == OpKind::kAvgPool3;
    attention += gene.op == OpKind::kSelfAttention;
  }
  EXPECT_EQ(conv, 3);
  EXPECT_EQ(avg, 2);
  EXPECT_EQ(attention, 1);
  EXPECT_EQ(g.leaves(), (std::vector<std::size_t>{4, 5}));
}

TEST(SampleUniform, DeterministicUnderSeed) {
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    EXPECT_EQ(sample_uniform(seed), sample_uniform(seed));
  EXPECT_NE(sample_uniform(std::uint64_t{1}), sample_uniform(std::uint64_t{2}));
}

TEST(SampleUniform, OpFrequenciesAreUniformPerLayer) {
  constexpr int kSamples = 10000;
  Rng rng(7);
  std::array<std::array<int, kNumOps>, kDefaultLayers> counts{};
  for (int s = 0; s < kSamples; ++s) {
    const auto g = sample_uniform(rng);
    EXPECT_EQ(g[0].input, 0u);
    for (std::size_t i = 0; i < g.size(); ++i) ++counts[i][static_cast<int>(g[i].op)];
  }
  const double expected = kSamples / 8.0;
  const double sigma = std::sqrt(kSamples * (1.0 / 8.0) * (7.0 / 8.0));
  for (const auto& layer : counts) {
    double chi2 = 0.0;
    for (int c : layer) {
      EXPECT_LT(std::abs(c - expected), 3.0 * sigma);
      chi2 += (c - expected) * (c - expected) / expected;
    }
    EXPECT_LT(chi2, 24.32);  // chi-square, 7 degrees of freedom, p = 0.001
  }
}

TEST(SampleUniform, EverySampleIsValid) {
  Rng rng(11);
  for (int i = 0; i < 100000; ++i) {
    const auto g = sample_uniform(rng);
    ASSERT_NO_THROW(validate(g));
    ASSERT_FALSE(g.leaves().empty());
  }
}

TEST(EnumerateSmall, CountsMatchClosedForm) {
  EXPECT_EQ(enumerate_small(1).size(), 8u);
  EXPECT_EQ(enumerate_small(2).size(), 256u);
  EXPECT_EQ(genome_space_size(2), 8u * 8u * 2u * 2u);
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto all = enumerate_small(k);
    EXPECT_EQ(all.size(), genome_space_size(k));
    std::set<std::string> unique;
    for (const auto& g : all) {
      EXPECT_NO_THROW(validate(g));
      unique.insert(g.to_string());
    }
    EXPECT_EQ(unique.size(), all.size());
  }
  EXPECT_THROW(enumerate_small(4), ContractViolation);
}

SequenceBatch random_input(Graph& g, Rng& rng, std::size_t batch, std::size_t len, std::size_t h) {
  return {g.constant(random_tensor({batch, len, h}, rng)), random_mask(batch, len, rng)};
}

TEST(Decode, AllAvgPoolChainEqualsStackedPools) {
  Rng rng(3);
  const std::size_t h = 8;
  TowerStore tower("query", 6, h);
  const auto genome =
      ArchitectureGenome::parse("avgpool3,0,0;avgpool3,1,0;avgpool3,2,0;avgpool3,3,0;avgpool3,4,0;avgpool3,5,0");
  tower.allocate_for(genome, rng);
  Graph g;
  SequenceBatch x = random_input(g, rng, 3, 9, h);
  const Tensor decoded = decode(g, genome, tower, x, {}).value();
  SequenceBatch y = x;
  for (int i = 0; i < 6; ++i) y = pool(y, PoolMode::kAverage);
  const Tensor expected = masked_mean_time(y.values, x.mask).value();
  ASSERT_EQ(decoded.shape(), (Shape{3, h}));
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(decoded[i], expected[i]);
}

TEST(Decode, SkipsAndLeavesFollowTheAggregationRule) {
  Rng rng(4);
  const std::size_t h = 8;
  TowerStore tower("ad", 3, h);
  // Layer 2 reads the embedding plus layer 0's output; leaves are layers 1 and 2.
  const auto genome = ArchitectureGenome::parse("maxpool3,0,0;avgpool3,0,0;conv1,0,1");
  tower.allocate_for(genome, rng);
  Graph g;
  SequenceBatch x = random_input(g, rng, 2, 5, h);
  LayerContext ctx;
  ctx.training = false;
  const Tensor decoded = decode(g, genome, tower, x, ctx).value();
  SequenceBatch l0 = pool(x, PoolMode::kMax);
  SequenceBatch l1 = pool(x, PoolMode::kAverage);
  SequenceBatch l2 = apply_op(g, tower.slot(2, OpKind::kConv1), {add(x.values, l0.values), x.mask}, ctx);
  const std::array<Var, 2> leaves{l1.values, l2.values};
  const Tensor expected = masked_mean_time(average(leaves), x.mask).value();
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(decoded[i], expected[i]);
}

TEST(Decode, OutputShapeIndependentOfGenome) {
  Rng rng(5);
  const std::size_t h = 8;
  TowerStore tower("query", 6, h);
  tower.allocate_all(rng);
  EXPECT_EQ(tower.slot_count(), 48u);
  for (int i = 0; i < 30; ++i) {
    Graph g;
    const auto genome = sample_uniform(rng);
    EXPECT_EQ(decode(g, genome, tower, random_input(g, rng, 2, 7, h), {}).shape(), (Shape{2, h}));
  }
}

TEST(Decode, ReferenceGenomeRuns) {
  Rng rng(6);
  TowerStore tower("ad", 6, 64);
  tower.allocate_for(reference_genome(), rng);
  EXPECT_EQ(tower.slot_count(), 6u);
  Graph g;
  const Tensor out = decode(g, reference_genome(), tower, random_input(g, rng, 2, 60, 64), {}).value();
  EXPECT_TRUE(out.all_finite());
}

TEST(Decode, SharedSlotGivesIdenticalLayerZeroOutput) {
  Rng rng(8);
  const std::size_t h = 8;
  TowerStore tower("query", 2, h);
  tower.allocate_all(rng);
  const auto a = ArchitectureGenome::parse("conv3,0,0;bigru,1,1");
  const auto b = ArchitectureGenome::parse("conv3,0,0;maxpool3,0,0");
  Graph g;
  SequenceBatch x = random_input(g, rng, 2, 6, h);
  LayerContext ctx;
  ctx.training = false;
  const Tensor out_a = apply_op(g, tower.slot(0, a[0].op), x, ctx).values.value();
  const Tensor out_b = apply_op(g, tower.slot(0, b[0].op), x, ctx).values.value();
  EXPECT_EQ(out_a.raw(), out_b.raw());
}

TEST(TowerStore, TrainingThroughOneGenomeIsVisibleToAnother) {
  Rng rng(9);
  const std::size_t h = 8;
  TowerStore tower("query", 2, h);
  tower.allocate_all(rng);
  const auto a = ArchitectureGenome::parse("conv3,0,0;avgpool3,1,0");
  const auto b = ArchitectureGenome::parse("conv3,0,0;conv5,0,1");
  std::vector<Tensor> before;
  for (Parameter* p : tower.parameters()) before.push_back(p->value);

  Tensor input = random_tensor({2, 5, h}, rng);
  Tensor mask({2, 5}, 1.0);
  LayerContext eval;
  eval.training = false;
  auto layer0 = [&] {
    Graph g;
    return apply_op(g, tower.slot(0, b[0].op), {g.constant(input), mask}, eval).values.value();
  };
  const Tensor b_before = layer0();
  {
    Graph g;
    Var out = decode(g, a, tower, {g.constant(input), mask}, {});
    g.backward(sum(mul(out, out)));
    Adam adam;
    auto params = tower.parameters_for(a);
    adam.step(params, 0.01);
  }
  EXPECT_NE(layer0().raw(), b_before.raw());
  const auto all = tower.parameters();
  const auto touched = tower.parameters_for(a);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const bool in_a = std::find(touched.begin(), touched.end(), all[i]) != touched.end();
    if (in_a) continue;
    EXPECT_EQ(all[i]->value.raw(), before[i].raw()) << all[i]->name;
  }
}

TEST(TowerStore, RejectsMissingSlotAndDepthMismatch) {
  Rng rng(10);
  TowerStore tower("query", 2, 8);
  EXPECT_THROW(tower.slot(0, OpKind::kConv1), ContractViolation);
  EXPECT_THROW(tower.allocate_for(reference_genome(), rng), ContractViolation);
}

TEST(GenomeCost, ReferenceGenomeMatchesHandSummation) {
  const ModelDims dims;  // h = 64, query 16 words, ad 60 words
  const auto report = genome_cost(reference_genome(), dims, CostNorms{});
  // Hand-summed closed forms for both towers (16 + 60 = 76 positions):
  //   conv1 2*4160 params, 76*4096 MACs; avgpool3 x2 0 params, 2*3*76*64 MACs;
  //   conv3 2*12352, 3*76*4096; attention 2*16640, 4*76*4096 + 2*(16^2 + 60^2)*64;
  //   conv7 2*28736, 7*76*4096.
  // Fixed layers: 285313 params and 181408 MACs at the default dimensions.
  EXPECT_EQ(report.raw_params, 285313 + 8320 + 24704 + 33280 + 57472);
  EXPECT_DOUBLE_EQ(report.raw_time_units,
                   181408.0 + 311296.0 + 29184.0 + 933888.0 + 1738752.0 + 2179072.0);
  EXPECT_EQ(fixed_layers_cost(dims).param_count, 285313);
  EXPECT_DOUBLE_EQ(fixed_layers_cost(dims).time_units, 181408.0);
}

TEST(GenomeCost, IndependentPerLayerSummation) {
  ModelDims dims;
  dims.hidden = 32;
  const CostNorms norms = default_norms(dims);
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    const auto genome = sample_uniform(rng);
    std::int64_t params = fixed_layers_cost(dims).param_count;
    double time = fixed_layers_cost(dims).time_units;
    for (const auto& gene : genome.layers()) {
      const auto q = layer_cost({gene.op, dims.hidden, dims.query_len});
      const auto a = layer_cost({gene.op, dims.hidden, dims.ad_len});
      params += q.param_count + a.param_count;
      time += q.time_units + a.time_units;
    }
    const auto report = genome_cost(genome, dims, norms);
    EXPECT_EQ(report.raw_params, params);
    EXPECT_DOUBLE_EQ(report.raw_time_units, time);
    EXPECT_DOUBLE_EQ(report.total, params / norms.params + time / norms.time_units);
  }
}

TEST(GenomeCost, AllPoolingCostsOnlyFixedParams) {
  const ModelDims dims;
  const auto g = ArchitectureGenome::parse(
      "maxpool3,0,0;avgpool3,1,0;maxpool3,0,3;avgpool3,3,1;avgpool3,4,0;maxpool3,5,31");
  EXPECT_EQ(genome_cost(g, dims, default_norms(dims)).raw_params,
            fixed_layers_cost(dims).param_count);
}

TEST(GenomeCost, ReplacingPoolByConv7IncreasesCost) {
  const ModelDims dims;
  const CostNorms norms = default_norms(dims);
  const auto base = reference_genome();
  const double c = genome_cost(base, dims, norms).total;
  for (std::size_t i : {1u, 3u}) {
    auto genes = base.layers();
    genes[i].op = OpKind::kConv7;
    EXPECT_GT(genome_cost(ArchitectureGenome(genes), dims, norms).total, c);
  }
}

TEST(GenomeCost, AllConv7ChainIsTheNormalisationReference) {
  const ModelDims dims;
  const auto chain = ArchitectureGenome::parse(
      "conv7,0,0;conv7,1,0;conv7,2,0;conv7,3,0;conv7,4,0;conv7,5,0");
  const auto report = genome_cost(chain, dims, default_norms(dims));
  EXPECT_DOUBLE_EQ(report.size, 1.0);
  EXPECT_DOUBLE_EQ(report.time, 1.0);
  EXPECT_DOUBLE_EQ(report.total, 2.0);
  EXPECT_THROW(genome_cost(chain, dims, CostNorms{0.0, 1.0}), ContractViolation);
}

}  // namespace
}  // namespace autoadr
