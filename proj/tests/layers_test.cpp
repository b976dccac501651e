#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "autoadr/errors.hpp"
#include "autoadr/gradcheck.hpp"
#include "autoadr/layers.hpp"
#include "test_util.hpp"

namespace autoadr {
namespace {

using testing::random_mask;
using testing::random_tensor;

SequenceBatch constant_batch(Graph& g, Tensor values, Tensor mask) {
  return {g.constant(std::move(values)), std::move(mask)};
}

TEST(ConvBlock, IdentityKernelWithoutBatchNormIsIdentityOnNonNegativeInput) {
  Rng rng(1);
  const std::size_t h = 4, len = 5;
  Tensor kernel({1, h, h});
  for (std::size_t i = 0; i < h; ++i) kernel[i * h + i] = 1.0;
  Tensor input = random_tensor({2, len, h}, rng, 0.0, 2.0);
  Graph g;
  BatchNormStats stats(h);
  LayerContext ctx;
  ctx.batch_norm = false;
  SequenceBatch out = conv_block(g, constant_batch(g, input, Tensor({2, len}, 1.0)),
                                 g.constant(kernel), g.constant(Tensor({h})), stats, ctx);
  for (std::size_t i = 0; i < input.size(); ++i) EXPECT_DOUBLE_EQ(out.values.value()[i], input[i]);
}

TEST(ConvBlock, ZeroKernelGivesBatchNormShift) {
  Rng rng(2);
  const std::size_t h = 3, len = 6;
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    Graph g;
    BatchNormStats stats(h);
    Tensor shift({h}, {0.5, -1.25, 2.0});
    Tensor mask = random_mask(2, len, rng);
    SequenceBatch out = conv_block(g, constant_batch(g, random_tensor({2, len, h}, rng), mask),
                                   g.constant(Tensor({k, h, h})), g.constant(shift), stats, {});
    for (std::size_t p = 0; p < 2 * len; ++p)
      for (std::size_t c = 0; c < h; ++c)
        EXPECT_DOUBLE_EQ(out.values.value()[p * h + c], mask[p] ? shift[c] : 0.0) << "k=" << k;
  }
}

TEST(ConvBlock, RejectsKernelOfWrongWidth) {
  Graph g;
  BatchNormStats stats(4);
  auto x = constant_batch(g, Tensor({1, 2, 4}), Tensor({1, 2}, 1.0));
  EXPECT_THROW(conv_block(g, x, g.constant(Tensor({3, 5, 5})), g.constant(Tensor({5})), stats, {}),
               ContractViolation);
}

TEST(LayerCost, ConvParamCountAtWidth256) {
  EXPECT_EQ(layer_cost({OpKind::kConv3, 256, 10}).param_count, 196864);
  Rng rng(0);
  EXPECT_EQ(OpSlot::create(OpKind::kConv3, 256, rng, "").param_count(), 196864);
}

TEST(LayerCost, ClosedFormsMatchAllocatedParameters) {
  Rng rng(3);
  for (std::size_t h : {8u, 16u, 64u}) {
    for (OpKind kind : kAllOps) {
      const OpSlot slot = OpSlot::create(kind, h, rng, "x/");
      EXPECT_EQ(layer_cost({kind, h, 7}).param_count, slot.param_count()) << op_name(kind);
    }
    const auto hh = static_cast<std::int64_t>(h);
    EXPECT_EQ(layer_cost({OpKind::kBiGru, h, 3}).param_count, 2 * 3 * (hh * hh + hh * hh + hh));
  }
}

TEST(LayerCost, PoolingIsParameterFree) {
  EXPECT_EQ(layer_cost({OpKind::kMaxPool3, 64, 16}).param_count, 0);
  EXPECT_EQ(layer_cost({OpKind::kAvgPool3, 64, 16}).param_count, 0);
}

TEST(LayerCost, ConvTimeMonotoneInKernel) {
  double previous = 0.0;
  for (OpKind kind : {OpKind::kConv1, OpKind::kConv3, OpKind::kConv5, OpKind::kConv7}) {
    const double t = layer_cost({kind, 64, 60}).time_units;
    EXPECT_GT(t, previous);
    previous = t;
  }
}

TEST(LayerCost, AttentionTimeQuadraticInLength) {
  // Second differences of a quadratic in L are constant: 4 * h per unit step.
  const std::size_t h = 32;
  auto t = [&](std::size_t len) { return layer_cost({OpKind::kSelfAttention, h, len}).time_units; };
  for (std::size_t len = 1; len < 50; ++len) {
    EXPECT_DOUBLE_EQ(t(len + 2) - 2 * t(len + 1) + t(len), 4.0 * h);
  }
}

TEST(LayerCost, RejectsAttentionWidthNotDivisibleByHeads) {
  EXPECT_THROW(layer_cost({OpKind::kSelfAttention, 12, 4}), ContractViolation);
  Rng rng(0);
  EXPECT_THROW(OpSlot::create(OpKind::kSelfAttention, 12, rng, ""), ContractViolation);
}

TEST(Pool, ConstantSequenceIsFixedPoint) {
  for (PoolMode mode : {PoolMode::kMax, PoolMode::kAverage}) {
    Graph g;
    auto out = pool(constant_batch(g, Tensor({2, 5, 3}, 1.75), Tensor({2, 5}, 1.0)), mode);
    for (double v : out.values.value().data()) EXPECT_DOUBLE_EQ(v, 1.75);
  }
}

TEST(Pool, MaxAtCenter) {
  Graph g;
  auto out = pool(constant_batch(g, Tensor({1, 3, 1}, {1.0, 5.0, 2.0}), Tensor({1, 3}, 1.0)),
                  PoolMode::kMax);
  EXPECT_DOUBLE_EQ(out.values.value()[1], 5.0);
}

TEST(Pool, AverageAtBoundaryUsesValidNeighboursOnly) {
  Graph g;
  Tensor mask({1, 4}, {1.0, 1.0, 1.0, 0.0});
  auto out = pool(constant_batch(g, Tensor({1, 4, 1}, {2.0, 4.0, 9.0, 100.0}), mask),
                  PoolMode::kAverage);
  EXPECT_DOUBLE_EQ(out.values.value()[0], 3.0);   // sequence start: (2 + 4) / 2
  EXPECT_DOUBLE_EQ(out.values.value()[2], 6.5);   // next to padding: (4 + 9) / 2
  EXPECT_DOUBLE_EQ(out.values.value()[3], 0.0);   // padded position stays zero
}

GruDirection zero_direction(Graph& g, std::size_t h) {
  return {g.constant(Tensor({h, 3 * h})), g.constant(Tensor({h, 3 * h})),
          g.constant(Tensor({3 * h}))};
}

TEST(BiGru, ZeroWeightsGiveZeroOutput) {
  Rng rng(4);
  Graph g;
  const std::size_t h = 4;
  auto out = bigru(g, constant_batch(g, random_tensor({2, 6, h}, rng), Tensor({2, 6}, 1.0)),
                   zero_direction(g, h), zero_direction(g, h));
  for (double v : out.values.value().data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(BiGru, ReversedInputReversesOutputWithTiedDirections) {
  Rng rng(5);
  const std::size_t h = 3, len = 5;
  Tensor w_in = random_tensor({h, 3 * h}, rng), w_rec = random_tensor({h, 3 * h}, rng);
  Tensor bias = random_tensor({3 * h}, rng);
  Tensor input = random_tensor({1, len, h}, rng);
  Tensor reversed({1, len, h});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < h; ++c) reversed[t * h + c] = input[(len - 1 - t) * h + c];
  auto run = [&](const Tensor& x) {
    Graph g;
    GruDirection dir{g.constant(w_in), g.constant(w_rec), g.constant(bias)};
    return bigru(g, constant_batch(g, x, Tensor({1, len}, 1.0)), dir, dir).values.value();
  };
  const Tensor a = run(input), b = run(reversed);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < h; ++c)
      EXPECT_NEAR(b[t * h + c], a[(len - 1 - t) * h + c], 1e-14);
}

AttentionWeights slot_attention(Graph& g, OpSlot& slot) {
  auto p = [&](std::size_t i) { return g.param(slot.params[i]); };
  return {p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7)};
}

TEST(SelfAttention, SingleValidPositionAttendsToItself) {
  Rng rng(6);
  const std::size_t h = 8, len = 4;
  OpSlot slot = OpSlot::create(OpKind::kSelfAttention, h, rng, "");
  for (std::size_t i = 1; i < slot.params.size(); i += 2) slot.params[i].value = random_tensor({h}, rng);
  Tensor mask({1, len}, {1.0, 0.0, 0.0, 0.0});
  Tensor input = random_tensor({1, len, h}, rng);
  Graph g;
  auto out = self_attention(constant_batch(g, input, mask), slot_attention(g, slot));
  // Expected: output projection of the value projection of position 0.
  const Tensor& wv = slot.params[4].value; const Tensor& bv = slot.params[5].value;
  const Tensor& wo = slot.params[6].value; const Tensor& bo = slot.params[7].value;
  std::vector<double> v(h);
  for (std::size_t j = 0; j < h; ++j) {
    v[j] = bv[j];
    for (std::size_t i = 0; i < h; ++i) v[j] += input[i] * wv[i * h + j];
  }
  for (std::size_t j = 0; j < h; ++j) {
    double o = bo[j];
    for (std::size_t i = 0; i < h; ++i) o += v[i] * wo[i * h + j];
    EXPECT_NEAR(out.values.value()[j], o, 1e-12);
  }
  for (std::size_t i = h; i < len * h; ++i) EXPECT_EQ(out.values.value()[i], 0.0);

  const Tensor q = random_tensor({1, len, h}, rng), k = random_tensor({1, len, h}, rng);
  const auto probs = attention_probabilities(q, k, mask, kAttentionHeads);
  for (std::size_t head = 0; head < kAttentionHeads; ++head)
    EXPECT_DOUBLE_EQ(probs[head * len * len], 1.0);
}

TEST(SelfAttention, IdenticalTokensGiveUniformWeights) {
  Rng rng(7);
  const std::size_t h = 16, len = 6, valid = 4;
  Tensor row = random_tensor({h}, rng);
  Tensor q({1, len, h}), k({1, len, h});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t c = 0; c < h; ++c) q[t * h + c] = k[t * h + c] = row[c];
  Tensor mask({1, len}, 1.0);
  for (std::size_t t = valid; t < len; ++t) mask[t] = 0.0;
  const auto probs = attention_probabilities(q, k, mask, kAttentionHeads);
  for (std::size_t head = 0; head < kAttentionHeads; ++head)
    for (std::size_t i = 0; i < valid; ++i)
      for (std::size_t j = 0; j < len; ++j)
        EXPECT_NEAR(probs[(head * len + i) * len + j], j < valid ? 0.25 : 0.0, 1e-15);
}

TEST(SelfAttention, RowsSumToOne) {
  Rng rng(8);
  const std::size_t batch = 3, len = 7, h = 16;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor mask = random_mask(batch, len, rng);
    const auto probs = attention_probabilities(random_tensor({batch, len, h}, rng, -3, 3),
                                               random_tensor({batch, len, h}, rng, -3, 3), mask,
                                               kAttentionHeads);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t head = 0; head < kAttentionHeads; ++head)
        for (std::size_t i = 0; i < len; ++i) {
          if (!mask[b * len + i]) continue;
          double total = 0.0;
          for (std::size_t j = 0; j < len; ++j)
            total += probs[((b * kAttentionHeads + head) * len + i) * len + j];
          EXPECT_NEAR(total, 1.0, 1e-6);
        }
  }
}

TEST(SelfAttention, RejectsWidthNotDivisibleByHeads) {
  Graph g;
  const std::size_t h = 6;
  Var w = g.constant(Tensor({h, h})), b = g.constant(Tensor({h}));
  EXPECT_THROW(self_attention(constant_batch(g, Tensor({1, 2, h}), Tensor({1, 2}, 1.0)),
                              {w, b, w, b, w, b, w, b}),
               ContractViolation);
}

class EveryOp : public ::testing::TestWithParam<OpKind> {};

TEST_P(EveryOp, PreservesShapeAndIgnoresMaskedValues) {
  const OpKind kind = GetParam();
  Rng rng(9);
  for (std::size_t len : {1u, 4u, 9u}) {
    const std::size_t batch = 3, h = 8;
    OpSlot slot = OpSlot::create(kind, h, rng, "");
    const Tensor mask = random_mask(batch, len, rng);
    Tensor a = random_tensor({batch, len, h}, rng);
    Tensor b = a;
    for (std::size_t p = 0; p < batch * len; ++p)
      if (!mask[p])
        for (std::size_t c = 0; c < h; ++c) b[p * h + c] = 1e3 * uniform(rng, -1, 1);
    auto run = [&](const Tensor& x) {
      Graph g;
      return apply_op(g, slot, constant_batch(g, x, mask), {}).values.value();
    };
    const Tensor out_a = run(a), out_b = run(b);
    ASSERT_EQ(out_a.shape(), a.shape());
    for (std::size_t p = 0; p < batch * len; ++p)
      for (std::size_t c = 0; c < h; ++c) {
        EXPECT_EQ(out_a[p * h + c], out_b[p * h + c]);
        if (!mask[p]) EXPECT_EQ(out_a[p * h + c], 0.0);
      }
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, EveryOp, ::testing::ValuesIn(kAllOps),
                         [](const auto& info) { return std::string(op_name(info.param)); });

class LayerGradients : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradients, MatchCentralDifferences) {
  const int seed = GetParam();
  Rng rng(static_cast<std::uint64_t>(seed) + 100);
  const std::size_t batch = 2, len = 4, h = 8;
  const Tensor mask = random_mask(batch, len, rng);
  const Tensor weights = random_tensor({batch, len, h}, rng);
  for (OpKind kind : kAllOps) {
    for (bool training : {true, false}) {
      OpSlot slot = OpSlot::create(kind, h, rng, "s/");
      for (auto& p : slot.params)
        if (p.name.ends_with("bias") || p.name.ends_with("shift")) p.value = random_tensor(p.value.shape(), rng);
      slot.bn.running_mean = random_tensor({h}, rng);
      slot.bn.running_var = random_tensor({h}, rng, 0.5, 2.0);
      Parameter input("input", random_tensor({batch, len, h}, rng));
      // Keep inputs away from the relu kink.
      for (double& v : input.value.data()) v = v < 0 ? v - 0.05 : v + 0.05;
      std::vector<Parameter*> params{&input};
      for (auto& p : slot.params) params.push_back(&p);
      LayerContext ctx;
      ctx.training = training;
      auto loss = [&](Graph& g) {
        auto out = apply_op(g, slot, {g.param(input), mask}, ctx);
        return sum(mul_const(out.values, weights));
      };
      const auto report = finite_diff_check(loss, params, 1e-6, 1e-4, 24);
      EXPECT_TRUE(report.passed) << op_name(kind) << " training=" << training << " seed " << seed
                                 << " err " << report.max_rel_error << " at "
                                 << report.worst_parameter << "[" << report.worst_index << "]";
      if (kind != OpKind::kConv1 && is_conv(kind)) break;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGradients, ::testing::Range(0, 20));

TEST(Dropout, KeepProbabilityOneAndEvalAreIdentity) {
  Rng rng(10);
  Graph g;
  Tensor x = random_tensor({4, 5}, rng);
  Var v = g.constant(x);
  EXPECT_EQ(dropout(v, 1.0, rng, true).id, v.id);
  EXPECT_EQ(dropout(v, 0.5, rng, false).id, v.id);
  EXPECT_THROW(dropout(v, 0.0, rng, true), ContractViolation);
}

TEST(Dropout, InvertedScalingKeepsExpectation) {
  Rng rng(11);
  Graph g;
  Var ones = g.constant(Tensor({20000}, 1.0));
  const Tensor out = dropout(ones, 0.8, rng, true).value();
  double total = 0.0;
  for (double v : out.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-15);
    total += v;
  }
  EXPECT_NEAR(total / 20000.0, 1.0, 0.02);
}

}  // namespace
}  // namespace autoadr
