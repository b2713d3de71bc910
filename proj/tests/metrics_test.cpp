#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mima/metrics.hpp"

namespace mima {
namespace {

const MetricKind kKinds[] = {MetricKind::FrozenEncoderCosine, MetricKind::NegMse,
                             MetricKind::MmdGaussian};

Matrix gaussian_batch(Rng& rng, std::size_t n, double mx, double my, double sd = 0.3) {
  Matrix m = rng.normal_matrix(n, 2, sd);
  for (std::size_t r = 0; r < n; ++r) {
    m(r, 0) += mx;
    m(r, 1) += my;
  }
  return m;
}

TEST(Cosine, Basics) {
  const std::vector<double> a{1, 0, 0}, b{0, 2, 0}, c{3, 0, 0};
  EXPECT_NEAR(cosine(a, b), 0.0, 1e-12);
  EXPECT_NEAR(cosine(a, c), 1.0, 1e-12);
  EXPECT_THROW(cosine(a, std::vector<double>{0, 0, 0}), Error);
  EXPECT_THROW(cosine(a, std::vector<double>{1, 0}), Error);
}

TEST(FrozenEncoder, SeededAndBounded) {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(10, 2);
  EXPECT_EQ(FrozenEncoder(2, 7).features(x), FrozenEncoder(2, 7).features(x));
  EXPECT_NE(FrozenEncoder(2, 7).features(x), FrozenEncoder(2, 8).features(x));
  const Matrix f = FrozenEncoder(2, 7).features(x);
  EXPECT_EQ(f.cols(), FrozenEncoder::kFeatures);
  for (double v : f.data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Similarity, SelfSimilarity) {
  Rng rng(2);
  const Matrix a = gaussian_batch(rng, 50, 1.0, -0.5);
  EXPECT_NEAR(similarity({MetricKind::FrozenEncoderCosine, 3}, a, a), 1.0, 1e-12);
  EXPECT_EQ(similarity({MetricKind::NegMse, 3}, a, a), 0.0);
  EXPECT_NEAR(similarity({MetricKind::MmdGaussian, 3, 1.0}, a, a), 1.0, 1e-12);
}

TEST(Similarity, SymmetricForEveryKind) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = gaussian_batch(rng, 20, rng.normal(), rng.normal());
    const Matrix b = gaussian_batch(rng, 30, rng.normal(), rng.normal());
    for (MetricKind k : kKinds) {
      for (Aggregation agg : {Aggregation::MeanFeature, Aggregation::MeanPairwise}) {
        const SimilarityMetric m{k, 5, 0.7, agg};
        EXPECT_NEAR(similarity(m, a, b), similarity(m, b, a), 1e-12) << to_string(k);
      }
    }
  }
}

TEST(Similarity, DecreasesAsMeansDriftApart) {
  for (MetricKind k : kKinds) {
    for (std::uint64_t seed : {4, 5, 6}) {
      Rng rng(seed);
      const Matrix ref = gaussian_batch(rng, 400, 1.0, 0.5);
      const Matrix noise = rng.normal_matrix(400, 2, 0.3);
      double prev = std::numeric_limits<double>::infinity();
      for (int step = 0; step < 5; ++step) {
        const double shift = 0.4 * step;
        Matrix b = noise;
        for (std::size_t r = 0; r < b.rows(); ++r) {
          b(r, 0) += 1.0 + shift;
          b(r, 1) += 0.5 - shift;
        }
        const double s = similarity({k, seed, 1.0}, ref, b);
        EXPECT_LT(s, prev) << to_string(k) << " seed " << seed << " step " << step;
        prev = s;
      }
    }
  }
}

TEST(Similarity, Errors) {
  const SimilarityMetric m;
  EXPECT_THROW(similarity(m, Matrix(0, 2), Matrix(3, 2, 1.0)), Error);
  try {
    similarity(m, Matrix(2, 2, 1.0), Matrix(2, 3, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
  try {
    similarity(m, Matrix(2, 2, 1.0), Matrix(0, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyBatch);
  }
}

TEST(Msgr, Arithmetic) {
  EXPECT_DOUBLE_EQ(msgr(std::vector<double>{0.8}, std::vector<double>{0.6}), 0.25);
  EXPECT_DOUBLE_EQ(msgr(std::vector<double>{0.8, 0.5}, std::vector<double>{0.6, 0.5}), 0.125);
  EXPECT_EQ(msgr(std::vector<double>{0.7, 0.3}, std::vector<double>{0.7, 0.3}), 0.0);
}

TEST(Msgr, DegenerateDenominator) {
  try {
    msgr(std::vector<double>{0.8, 1e-10}, std::vector<double>{0.6, 0.5});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateDenominator);
  }
  EXPECT_THROW(msgr(std::vector<double>{}, std::vector<double>{}), Error);
  EXPECT_THROW(msgr(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), Error);
  EXPECT_EQ(negative_denominators(std::vector<double>{0.5, -0.2, 0.1, -1.0}),
            (std::vector<std::size_t>{1, 3}));
}

// Bitwise whenever lambda * M is exactly representable: always for powers of
// two, and for lambda = 10 on values with short mantissas.
TEST(Msgr, ScaleInvariantBitwise) {
  Rng rng(7);
  auto dyadic = [&] { return static_cast<double>(rng.uniform_int(1, 1 << 20)) / (1 << 20); };
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(3), i(3), da(3), di(3);
    for (std::size_t n = 0; n < 3; ++n) {
      a[n] = 0.1 + rng.uniform();
      i[n] = rng.uniform();
      da[n] = dyadic();
      di[n] = dyadic();
    }
    for (double lambda : {0.5, 2.0, 10.0}) {
      auto scaled = [&](std::vector<double> v) {
        for (double& x : v) x *= lambda;
        return v;
      };
      EXPECT_EQ(msgr(scaled(da), scaled(di)), msgr(da, di)) << "lambda " << lambda;
      if (lambda != 10.0) EXPECT_EQ(msgr(scaled(a), scaled(i)), msgr(a, i)) << "lambda " << lambda;
    }
  }
}

// Arbitrary doubles: 10 * M rounds, so only ulp-level agreement is possible.
TEST(Msgr, ScaleInvariantToRoundingForArbitraryValues) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(3), i(3);
    for (std::size_t n = 0; n < 3; ++n) {
      a[n] = 0.1 + rng.uniform();
      i[n] = rng.uniform();
    }
    std::vector<double> la(a), li(i);
    for (double& v : la) v *= 10.0;
    for (double& v : li) v *= 10.0;
    EXPECT_NEAR(msgr(la, li), msgr(a, i), 1e-14);
  }
}

TEST(Msgr, SignSemantics) {
  EXPECT_GT(msgr(std::vector<double>{0.9, 0.8}, std::vector<double>{0.5, 0.8}), 0.0);
  EXPECT_LT(msgr(std::vector<double>{0.5, 0.8}, std::vector<double>{0.9, 0.8}), 0.0);
}

TEST(Mrsgr, ArithmeticAndScale) {
  EXPECT_DOUBLE_EQ(mrsgr(0.45, 0.9), 0.5);
  EXPECT_THROW(mrsgr(0.5, 0.0), Error);
  Rng rng(8);
  for (int trial = 0; trial < 500; ++trial) {
    const double t = rng.uniform(), o = 0.1 + rng.uniform();
    const double dt = static_cast<double>(rng.uniform_int(0, 1 << 20)) / (1 << 20);
    const double dout = static_cast<double>(rng.uniform_int(1, 1 << 20)) / (1 << 20);
    for (double lambda : {0.5, 2.0, 10.0}) {
      EXPECT_EQ(mrsgr(lambda * dt, lambda * dout), mrsgr(dt, dout)) << "lambda " << lambda;
      if (lambda != 10.0) EXPECT_EQ(mrsgr(lambda * t, lambda * o), mrsgr(t, o));
      else EXPECT_NEAR(mrsgr(lambda * t, lambda * o), mrsgr(t, o), 1e-14);
    }
  }
}

TEST(Mrsgr, IdenticalBatchesGiveZero) {
  Rng rng(9);
  std::vector<GenerationPair> targets, others;
  for (int n = 0; n < 2; ++n) {
    const Matrix g = gaussian_batch(rng, 30, n, 1.0 - n);
    targets.push_back({g, g});
    const Matrix h = gaussian_batch(rng, 30, -1.0, n);
    others.push_back({h, h});
  }
  const SimilarityMetric m;
  EXPECT_NEAR(mean_pair_similarity(m, targets), 1.0, 1e-12);
  EXPECT_NEAR(mrsgr(m, targets, others), 0.0, 1e-12);
}

Arch small_arch() {
  Arch a;
  a.data_dim = 2;
  a.tokens = 2;
  a.embed_dim = 4;
  a.key_dim = 4;
  a.value_dim = 4;
  a.hidden = 16;
  a.time_features = 2;
  a.num_steps = 20;
  return a;
}

ConceptSpec concept_at(double x, double y, Rng& rng, const Arch& a) {
  ConceptSpec c;
  c.embedding = rng.normal_matrix(a.tokens, a.embed_dim);
  c.components.push_back({{x, y}, 0.2, 1.0});
  return c;
}

TEST(Trajectory, CheckpointZeroOnlyAndDeterminism) {
  const Arch arch = small_arch();
  Rng rng(10);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 1, rng, arch);
  const Matrix data = sample_concept(c, 64, rng);
  const Matrix refs = sample_concept(c, 64, rng);
  const NoiseSchedule sched = NoiseSchedule::linear(arch.num_steps, 1e-4, 0.2);
  AdaptMethod attack;
  attack.steps = 20;
  const std::vector<std::size_t> zero{0};
  Rng a(11);
  const Trajectory t0 = trajectory(m, attack, c, data, sched, zero, {}, refs, 50, a);
  ASSERT_EQ(t0.similarity.size(), 1u);
  EXPECT_TRUE(t0.loss_trajectory.empty());
  Rng s(11);
  Rng sampler = s.split(1);
  EXPECT_EQ(t0.generations[0], sample(m, c.embedding, sched, 50, sampler));

  const std::vector<std::size_t> cps{0, 5, 20};
  Rng b(12), d(12);
  const Trajectory t1 = trajectory(m, attack, c, data, sched, cps, {}, refs, 50, b);
  const Trajectory t2 = trajectory(m, attack, c, data, sched, cps, {}, refs, 50, d);
  EXPECT_EQ(t1.similarity, t2.similarity);
  EXPECT_EQ(t1.similarity.size(), 3u);
  EXPECT_EQ(t1.loss_trajectory.size(), 20u);

  const std::vector<std::size_t> bad{0, 5, 5};
  EXPECT_THROW(trajectory(m, attack, c, data, sched, bad, {}, refs, 50, b), Error);
  const std::vector<std::size_t> too_long{0, 21};
  EXPECT_THROW(trajectory(m, attack, c, data, sched, too_long, {}, refs, 50, b), Error);
}

// The attack works when unopposed: a model pretrained elsewhere moves its
// generations toward the new concept.
TEST(Trajectory, UnopposedAttackRaisesSimilarity) {
  const Arch arch = small_arch();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(200 + seed);
    Denoiser m = Denoiser::init(arch, rng);
    const NoiseSchedule sched = NoiseSchedule::linear(arch.num_steps, 1e-4, 0.2);
    const ConceptSpec other = concept_at(-1.5, -1.5, rng, arch);
    for (int s = 0; s < 600; ++s) {
      std::vector<double> theta = m.params().flatten();
      const LossGrad g = loss(m, sample_concept(other, 32, rng), other.embedding, sched, rng);
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= 0.05 * g.grad[i];
      m.set_params(ParamSet::unflatten(arch.signature(), theta));
    }
    const ConceptSpec target = concept_at(1.5, 1.5, rng, arch);
    const Matrix data = sample_concept(target, 128, rng);
    const Matrix refs = sample_concept(target, 200, rng);
    AdaptMethod attack;
    attack.steps = 300;
    attack.lr = 0.05;
    attack.batch_size = 32;
    const std::vector<std::size_t> cps{0, 300};
    const Trajectory t = trajectory(m, attack, target, data, sched, cps, {}, refs, 200, rng);
    wins += t.similarity[1] - t.similarity[0] >= 0.1;
  }
  EXPECT_EQ(wins, 3);
}

}  // namespace
}  // namespace mima
