#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "autoadr/distill.hpp"
#include "autoadr/errors.hpp"
#include "autoadr/gradcheck.hpp"
#include "autoadr/ops.hpp"
#include "autoadr/random.hpp"

namespace autoadr {
namespace {

TeacherDims tiny_teacher() {
  TeacherDims d;
  d.emb_dim = 8;
  d.model_dim = 8;
  d.heads = 2;
  d.ffn_dim = 12;
  d.layers = 2;
  return d;
}

struct Fixture {
  Corpus corpus;
  TriLetterVocab vocab;
  std::vector<std::string> queries, ads;
};

Fixture small_fixture(std::size_t size = 400) {
  CorpusConfig c;
  c.size = size;
  Fixture f;
  f.corpus = make_synthetic_corpus(c, 9);
  std::vector<std::string> texts;
  for (const auto& p : f.corpus.train) {
    texts.push_back(p.query);
    texts.push_back(p.ad);
  }
  f.vocab = TriLetterVocab::build(texts, 4096);
  for (const auto& p : f.corpus.validation) {
    f.queries.push_back(p.query);
    f.ads.push_back(p.ad);
  }
  return f;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TEST(SoftTarget, IsTemperatureScaledSigmoid) {
  EXPECT_DOUBLE_EQ(soft_target(0.0, 1.0), 0.5);
  EXPECT_NEAR(soft_target(2.0, 1.0), logistic(2.0), 1e-15);
  EXPECT_NEAR(soft_target(2.0, 2.0), logistic(1.0), 1e-15);
  EXPECT_NEAR(soft_target(-3.0, 0.5), logistic(-6.0), 1e-15);
  // Two-class softmax over (z, 0) equals the logistic function.
  const double z = 1.7, t = 1.3;
  EXPECT_NEAR(soft_target(z, t), std::exp(z / t) / (std::exp(z / t) + 1.0), 1e-15);
}

TEST(SoftTarget, StableForExtremeLogitsAndRejectsBadTemperature) {
  EXPECT_EQ(soft_target(1000.0, 1.0), 1.0);
  EXPECT_EQ(soft_target(-1000.0, 1.0), 0.0);
  EXPECT_FALSE(std::isnan(soft_target(-1e308, 1e-3)));
  EXPECT_THROW(soft_target(1.0, 0.0), ContractViolation);
  EXPECT_THROW(soft_target(1.0, -1.0), ContractViolation);
}

TEST(SoftTarget, HigherTemperatureSoftens) {
  for (double z : {-4.0, -0.5, 0.3, 5.0})
    EXPECT_LT(std::abs(soft_target(z, 4.0) - 0.5), std::abs(soft_target(z, 1.0) - 0.5));
}

TEST(KdLossValue, HandComputed) {
  const std::vector<double> y{1.0, 0.0, 0.25};
  const std::vector<double> p{0.8, 0.3, 0.5};
  const double want = -(std::log(0.8) + std::log(0.7) + std::log(0.5));
  const auto v = kd_loss_value(y, p);
  EXPECT_NEAR(v.sum, want, 1e-14);
  EXPECT_NEAR(v.mean, want / 3.0, 1e-14);
  EXPECT_EQ(v.clamped, 0u);
}

TEST(KdLossValue, ClampsSaturatedPredictions) {
  const auto v = kd_loss_value(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0});
  EXPECT_EQ(v.clamped, 2u);
  EXPECT_NEAR(v.sum, -2.0 * std::log(1e-7), 1e-9);
}

TEST(KdLossValue, MinimisedWhenPredictionEqualsTarget) {
  for (double y : {0.1, 0.37, 0.5, 0.92}) {
    const double at = kd_loss_value(std::vector<double>{y}, std::vector<double>{y}).sum;
    for (double d : {-0.05, -0.01, 0.01, 0.05})
      EXPECT_LT(at, kd_loss_value(std::vector<double>{y}, std::vector<double>{y + d}).sum);
  }
}

TEST(SoftTarget, StrictlyMonotoneInLogit) {
  for (double t : {0.5, 1.0, 3.0}) {
    double prev = soft_target(-10.0, t);
    for (double z = -9.9; z <= 10.0; z += 0.1) {
      const double y = soft_target(z, t);
      EXPECT_GT(y, prev);
      prev = y;
    }
  }
  EXPECT_NEAR(soft_target(2.0, 1.0), 0.8807970779778823, 1e-15);
  EXPECT_NEAR(soft_target(3.0, 1e9), 0.5, 1e-8);
}

TEST(KdLossValue, EqualityAndHardTargetCases) {
  EXPECT_NEAR(kd_loss_value(std::vector<double>{0.5}, std::vector<double>{0.5}).mean, std::log(2.0), 1e-12);
  EXPECT_NEAR(kd_loss_value(std::vector<double>{1.0}, std::vector<double>{0.5}).mean, std::log(2.0), 1e-12);
}

TEST(KdLossValue, GibbsInequalityAndPermutationInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 20);
    std::vector<double> y(n), p(n);
    double entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = uniform(rng, 0.01, 0.99);
      p[i] = uniform(rng, 0.01, 0.99);
      entropy -= y[i] * std::log(y[i]) + (1.0 - y[i]) * std::log(1.0 - y[i]);
    }
    const double loss = kd_loss_value(y, p).sum;
    EXPECT_GE(loss, entropy - 1e-12);
    EXPECT_NEAR(kd_loss_value(y, y).sum, entropy, 1e-12);
    std::vector<double> yr(y.rbegin(), y.rend()), pr(p.rbegin(), p.rend());
    EXPECT_NEAR(kd_loss_value(yr, pr).sum, loss, 1e-12);
  }
}

TEST(KdLossOp, GradientWrtLogitIsPredictionMinusTarget) {
  const std::vector<double> y{0.9, 0.2, 0.5};
  Graph g;
  Parameter logits("logits", Tensor({3}, {0.3, -1.2, 2.0}));
  Var loss = kd_loss(sigmoid(g.param(logits)), y, Reduction::kSum);
  g.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits.value[i]));
    EXPECT_NEAR(logits.grad[i], p - y[i], 1e-12);
  }
}

TEST(KdLossOp, AgreesWithScalarFormAndGradient) {
  const std::vector<double> y{0.9, 0.1, 0.6, 0.4};
  const Tensor p({4}, {0.7, 0.2, 0.6, 0.9});
  Graph g;
  Var pv = g.constant(p);
  Var sum = kd_loss(pv, y, Reduction::kSum);
  EXPECT_NEAR(sum.value().item(), kd_loss_value(y, p.data()).sum, 1e-14);
  auto f = [&](Graph& gg, Var x) { return kd_loss(x, y, Reduction::kMean); };
  const auto report = finite_diff_check(f, p, 1e-7, 1e-6);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Teacher, GradientsMatchFiniteDifferences) {
  const auto f = small_fixture();
  TeacherModel teacher(f.vocab, tiny_teacher(), 3);
  std::vector<EncodedText> q, a;
  std::vector<double> y;
  for (std::size_t i = 0; i < 4; ++i) {
    q.push_back(encode(f.corpus.train[i].query, f.vocab, kMaxQueryWords));
    a.push_back(encode(f.corpus.train[i].ad, f.vocab, kMaxAdWords));
    y.push_back(f.corpus.train[i].label);
  }
  auto loss = [&](Graph& g) {
    return kd_loss(sigmoid(teacher.logits(g, q, a, {})), y, Reduction::kMean);
  };
  const auto params = teacher.parameters();
  const auto report = finite_diff_check(loss, params, 1e-6, 1e-3, 12);
  EXPECT_TRUE(report.passed) << report.worst_parameter << " " << report.max_rel_error;
}

TEST(Teacher, ExactMatchRowsDependOnSharedWords) {
  const auto f = small_fixture();
  TeacherModel teacher(f.vocab, tiny_teacher(), 5);
  // Zeroing the match table must change scores only through shared words.
  auto state = teacher.state();
  ASSERT_TRUE(state.count("teacher/match"));
  const std::vector<std::string> q{"zzqx wvvk"};
  const std::vector<std::string> a{"unrelated ad text"};
  const double before = teacher.score(q, a)[0];
  auto shifted = state;
  for (std::size_t c = 0; c < tiny_teacher().model_dim; ++c) shifted["teacher/match"][tiny_teacher().model_dim + c] += 1.0;
  teacher.load_state(shifted);
  EXPECT_EQ(teacher.score(q, a)[0], before);
  const std::vector<std::string> shared{"unrelated words"};
  teacher.load_state(state);
  const double base = teacher.score(shared, a)[0];
  teacher.load_state(shifted);
  EXPECT_NE(teacher.score(shared, a)[0], base);
}

TEST(Teacher, ScoringIsDeterministicAndBatchInvariant) {
  const auto f = small_fixture();
  TeacherModel teacher(f.vocab, tiny_teacher(), 7);
  const auto a = teacher.score(f.queries, f.ads, 256);
  EXPECT_EQ(a, teacher.score(f.queries, f.ads, 256));
  const auto b = teacher.score(f.queries, f.ads, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << i;
}

TEST(Teacher, TrainingReducesLossAndFreezeBlocksIt) {
  const auto f = small_fixture(1000);
  TeacherModel teacher(f.vocab, tiny_teacher(), 11);
  TrainSchedule s;
  s.epochs = 4;
  s.batch_size = 32;
  s.lr_max = 5e-3;
  const auto history = train_teacher(teacher, f.corpus.train, s, 1);
  ASSERT_EQ(history.size(), 4u);
  EXPECT_LT(history.back().mean_loss, history.front().mean_loss);
  EXPECT_DOUBLE_EQ(history.front().lr, s.lr_max);
  teacher.freeze();
  EXPECT_THROW(train_teacher(teacher, f.corpus.train, s, 1), ContractViolation);
}

TEST(TeacherData, RequiresFrozenTeacherAndIsReproducible) {
  const auto f = small_fixture();
  TeacherModel teacher(f.vocab, tiny_teacher(), 13);
  EXPECT_THROW(generate_teacher_data(teacher, f.queries, f.ads), ContractViolation);
  teacher.freeze();
  const auto r1 = generate_teacher_data(teacher, f.queries, f.ads, 2.0);
  const auto r2 = generate_teacher_data(teacher, f.queries, f.ads, 2.0);
  EXPECT_EQ(r1, r2);
  ASSERT_EQ(r1.size(), f.queries.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    EXPECT_EQ(r1[i].query, f.queries[i]);
    EXPECT_EQ(r1[i].ad, f.ads[i]);
    EXPECT_EQ(r1[i].y, soft_target(r1[i].z, 2.0));
  }
  EXPECT_THROW(generate_teacher_data(teacher, f.queries, f.ads, 0.0), ContractViolation);
}

TEST(TeacherData, SaveLoadRoundTrip) {
  const auto f = small_fixture();
  TeacherModel teacher(f.vocab, tiny_teacher(), 17);
  const auto dir = std::filesystem::temp_directory_path() / "autoadr_distill_test_teacher";
  std::filesystem::remove_all(dir);
  save_teacher(teacher, dir);
  TeacherModel back = load_teacher(dir);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.parameter_count(), teacher.parameter_count());
  EXPECT_EQ(back.score(f.queries, f.ads), teacher.score(f.queries, f.ads));
}

}  // namespace
}  // namespace autoadr
