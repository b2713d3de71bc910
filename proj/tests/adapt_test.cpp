#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mima/adapt.hpp"
#include "mima/oracles.hpp"

namespace mima {
namespace {

using oracles::fd_gradient;

Arch small_arch() {
  Arch a;
  a.data_dim = 2;
  a.tokens = 2;
  a.embed_dim = 4;
  a.key_dim = 4;
  a.value_dim = 4;
  a.hidden = 8;
  a.time_features = 2;
  a.num_steps = 20;
  return a;
}

NoiseSchedule schedule_for(const Arch& a) { return NoiseSchedule::linear(a.num_steps, 1e-4, 0.2); }

ConceptSpec concept_at(double x, double y, Rng& rng, const Arch& a) {
  ConceptSpec c;
  c.embedding = rng.normal_matrix(a.tokens, a.embed_dim);
  c.components.push_back({{x, y}, 0.2, 1.0});
  return c;
}

AdaptMethod method(AdaptKind kind, std::size_t steps, double lr) {
  AdaptMethod m;
  m.kind = kind;
  m.steps = steps;
  m.lr = lr;
  m.rank = 2;
  m.batch_size = 32;
  return m;
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// A model that already conditions on its embedding: trained on two concepts.
Denoiser pretrained(const Arch& arch, Rng& rng) {
  Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec a = concept_at(-1.5, 0.0, rng, arch), b = concept_at(0.0, -1.5, rng, arch);
  const NoiseSchedule sched = schedule_for(arch);
  for (int s = 0; s < 400; ++s) {
    std::vector<double> theta = m.params().flatten();
    for (const ConceptSpec* c : {&a, &b}) {
      const LossGrad g = loss(m, sample_concept(*c, 32, rng), c->embedding, sched, rng);
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= 0.05 * g.grad[i];
    }
    m.set_params(ParamSet::unflatten(arch.signature(), theta));
  }
  return m;
}

const AdaptKind kAllKinds[] = {AdaptKind::FullFineTune, AdaptKind::LowRank,
                               AdaptKind::KeyValueOnly, AdaptKind::EmbeddingOnly};

TEST(AdaptMethod, Validation) {
  const Arch arch = small_arch();
  AdaptMethod m = method(AdaptKind::FullFineTune, 0, 0.1);
  EXPECT_THROW(m.validate(arch), Error);
  m.steps = 1;
  m.lr = -1;
  EXPECT_THROW(m.validate(arch), Error);
  m.lr = 0.1;
  m.kind = AdaptKind::LowRank;
  m.rank = 5;
  EXPECT_THROW(m.validate(arch), Error);
  m.rank = 4;
  EXPECT_NO_THROW(m.validate(arch));
  m.lowrank_mlp = true;
  m.rank = 3;  // W2 is 2 x 8
  EXPECT_THROW(m.validate(arch), Error);
  m.rank = 2;
  EXPECT_NO_THROW(m.validate(arch));
  EXPECT_EQ(adapt_kind_from_string("lowrank"), AdaptKind::LowRank);
  EXPECT_THROW(adapt_kind_from_string("dreambooth!"), Error);
}

TEST(Adapt, ZeroLearningRateLeavesModelBitExact) {
  const Arch arch = small_arch();
  Rng rng(1);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 1, rng, arch);
  const Matrix data = sample_concept(c, 64, rng);
  for (AdaptKind k : kAllKinds) {
    Rng r(5);
    const AdaptResult res = adapt(m, method(k, 10, 0.0), c, data, schedule_for(arch), r);
    EXPECT_EQ(res.adapted_params, m.params()) << to_string(k);
    EXPECT_EQ(res.loss_trajectory.size(), 10u);
    if (k != AdaptKind::EmbeddingOnly) EXPECT_EQ(res.embedding, c.embedding);
  }
}

TEST(Adapt, GradientClipping) {
  const Arch arch = small_arch();
  Rng rng(3);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, -1, rng, arch);
  const Matrix data = sample_concept(c, 64, rng);
  for (AdaptKind k : {AdaptKind::FullFineTune, AdaptKind::KeyValueOnly}) {
    AdaptMethod loose = method(k, 5, 0.1);
    loose.max_grad_norm = 1e300;
    Rng a(4), b(4);
    const AdaptResult plain = adapt(m, method(k, 5, 0.1), c, data, schedule_for(arch), a);
    const AdaptResult big = adapt(m, loose, c, data, schedule_for(arch), b);
    EXPECT_EQ(plain.adapted_params, big.adapted_params) << to_string(k);

    AdaptMethod tight = method(k, 1, 0.1);
    tight.max_grad_norm = 1e-3;
    Rng r(4);
    const AdaptResult clipped = adapt(m, tight, c, data, schedule_for(arch), r);
    const std::vector<double> before = m.params().flatten();
    const std::vector<double> after = clipped.adapted_params.flatten();
    double sq = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) sq += (after[i] - before[i]) * (after[i] - before[i]);
    EXPECT_GT(std::sqrt(sq), 0.0);
    EXPECT_LE(std::sqrt(sq), 0.1 * 1e-3 * (1 + 1e-9)) << to_string(k);
  }
}

TEST(Adapt, DeadAttentionPathLeavesEmbeddingUnchanged) {
  const Arch arch = small_arch();
  Rng rng(2);
  Denoiser m = Denoiser::init(arch, rng);
  ParamSet p = m.params();
  for (Matrix& w : p.kv_weights) w = Matrix(w.rows(), w.cols());
  m.set_params(p);
  ConceptSpec c = concept_at(0.5, -0.5, rng, arch);
  c.embedding = Matrix(arch.tokens, arch.embed_dim, 0.3);
  const Matrix data = sample_concept(c, 64, rng);
  AdaptMethod am = method(AdaptKind::EmbeddingOnly, 20, 0.5);
  am.embedding_noise = 0.0;
  Rng r(3);
  const AdaptResult res = adapt(m, am, c, data, schedule_for(arch), r);
  EXPECT_EQ(res.embedding, c.embedding);
  EXPECT_EQ(res.adapted_params, m.params());
}

TEST(Adapt, FullFineTuneHalvesLoss) {
  const Arch arch = small_arch();
  Rng rng(4);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1.5, -1.0, rng, arch);
  const Matrix data = sample_concept(c, 256, rng);
  Rng r(6);
  const AdaptResult res =
      adapt(m, method(AdaptKind::FullFineTune, 500, 1e-2), c, data, schedule_for(arch), r);
  const std::span<const double> tr = res.loss_trajectory;
  const double early = mean_of(tr.first(20)), late = mean_of(tr.last(50));
  EXPECT_LT(late, 0.5 * early) << early << " -> " << late;
}

TEST(Adapt, OnlyTheMethodsParametersMove) {
  const Arch arch = small_arch();
  Rng rng(7);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(-1, 1, rng, arch);
  const Matrix data = sample_concept(c, 64, rng);
  const std::size_t kv = arch.signature().kv_size();
  const std::vector<double> before = m.params().flatten();
  const auto mlp = mlp_weight_blocks(arch);
  auto in_mlp = [&](std::size_t i) {
    if (i < kv) return false;
    for (const RestBlock& b : mlp)
      if (i - kv >= b.offset && i - kv < b.offset + b.rows * b.cols) return true;
    return false;
  };

  for (bool mlp_flag : {false, true}) {
    for (AdaptKind k : kAllKinds) {
      if (mlp_flag && k != AdaptKind::LowRank) continue;
      AdaptMethod am = method(k, 5, 0.1);
      am.lowrank_mlp = mlp_flag;
      Rng r(8);
      const AdaptResult res = adapt(m, am, c, data, schedule_for(arch), r);
      const std::vector<double> after = res.adapted_params.flatten();
      std::size_t moved_kv = 0, moved_rest = 0;
      for (std::size_t i = 0; i < after.size(); ++i) {
        if (after[i] == before[i]) continue;
        (i < kv ? moved_kv : moved_rest)++;
        switch (k) {
          case AdaptKind::FullFineTune: break;
          case AdaptKind::KeyValueOnly: EXPECT_LT(i, kv); break;
          case AdaptKind::EmbeddingOnly: ADD_FAILURE() << "param " << i << " moved"; break;
          case AdaptKind::LowRank:
            EXPECT_TRUE(i < kv || (mlp_flag && in_mlp(i))) << "param " << i;
            break;
        }
      }
      if (k != AdaptKind::EmbeddingOnly) EXPECT_GT(moved_kv, 0u) << to_string(k);
      if (k == AdaptKind::FullFineTune || mlp_flag) EXPECT_GT(moved_rest, 0u);
      if (k == AdaptKind::EmbeddingOnly) EXPECT_NE(res.embedding, c.embedding);
      else EXPECT_EQ(res.embedding, c.embedding);
    }
  }
}

TEST(Adapt, SameSeedSameResult) {
  const Arch arch = small_arch();
  Rng rng(9);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 0, rng, arch);
  const Matrix data = sample_concept(c, 64, rng);
  for (AdaptKind k : kAllKinds) {
    Rng a(10), b(10);
    const AdaptResult ra = adapt(m, method(k, 20, 0.05), c, data, schedule_for(arch), a);
    const AdaptResult rb = adapt(m, method(k, 20, 0.05), c, data, schedule_for(arch), b);
    EXPECT_EQ(ra.adapted_params, rb.adapted_params);
    EXPECT_EQ(ra.embedding, rb.embedding);
    EXPECT_EQ(ra.loss_trajectory, rb.loss_trajectory);
  }
}

void expect_progress(bool fresh, double max_ratio) {
  const Arch arch = small_arch();
  for (AdaptKind k : kAllKinds) {
    std::vector<double> ratios;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(100 + seed);
      const Denoiser m = fresh ? Denoiser::init(arch, rng) : pretrained(arch, rng);
      const ConceptSpec c = concept_at(1.2, 0.8, rng, arch);
      const Matrix data = sample_concept(c, 128, rng);
      AdaptMethod am = method(k, 300, k == AdaptKind::EmbeddingOnly ? 1.0 : 0.05);
      const AdaptResult res = adapt(m, am, c, data, schedule_for(arch), rng);
      const std::span<const double> tr = res.loss_trajectory;
      ratios.push_back(mean_of(tr.last(50)) / mean_of(tr.first(50)));
    }
    std::sort(ratios.begin(), ratios.end());
    EXPECT_LT(ratios[2], max_ratio) << to_string(k) << " " << ratios[0] << " " << ratios[4];
  }
}

TEST(Adapt, EveryMethodMakesProgressFromFreshInit) { expect_progress(true, 1.0); }
TEST(Adapt, EveryMethodMakesProgressOnPretrained) { expect_progress(false, 0.95); }

TEST(Adapt, ObserverSeesEveryStep) {
  const Arch arch = small_arch();
  Rng rng(11);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 1, rng, arch);
  const Matrix data = sample_concept(c, 16, rng);
  std::vector<std::size_t> seen;
  ParamSet last;
  const AdaptResult res =
      adapt(m, method(AdaptKind::FullFineTune, 4, 0.1), c, data, schedule_for(arch), rng,
            [&](std::size_t step, const Denoiser& cur, const Matrix&) {
              seen.push_back(step);
              last = cur.params();
            });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(last, res.adapted_params);
}

TEST(Adapt, DivergenceKeepsTrajectory) {
  const Arch arch = small_arch();
  Rng rng(12);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 1, rng, arch);
  const Matrix data = sample_concept(c, 16, rng);
  try {
    adapt(m, method(AdaptKind::FullFineTune, 200, 1e6), c, data, schedule_for(arch), rng);
    FAIL();
  } catch (const AdaptDiverged& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteLoss);
    EXPECT_FALSE(e.trajectory().empty());
  }
}

TEST(Adapt, RejectsBadInputs) {
  const Arch arch = small_arch();
  Rng rng(13);
  const Denoiser m = Denoiser::init(arch, rng);
  const ConceptSpec c = concept_at(1, 1, rng, arch);
  EXPECT_THROW(adapt(m, method(AdaptKind::FullFineTune, 1, 0.1), c, Matrix(0, 2),
                     schedule_for(arch), rng),
               Error);
  EXPECT_THROW(adapt(m, method(AdaptKind::FullFineTune, 1, 0.1), c, Matrix(4, 3),
                     schedule_for(arch), rng),
               Error);
}

TEST(EffectiveParams, ZeroFactorsAndKnownUpdate) {
  const Arch arch = small_arch();
  Rng rng(14);
  const ParamSet base = Denoiser::init(arch, rng).params();
  std::vector<LowRankFactor> f;
  for (const Matrix& w : base.kv_weights) f.push_back({rng.normal_matrix(w.rows(), 2), Matrix(2, w.cols())});
  EXPECT_EQ(effective_params(base, f), base);
  EXPECT_EQ(effective_params(base, {}), base);

  f[0].a = Matrix(f[0].a.rows(), 2);
  f[0].a(1, 0) = 2.0;
  f[0].b(0, 3) = 0.5;
  const ParamSet eff = effective_params(base, f);
  for (std::size_t i = 0; i < base.kv_weights[0].rows(); ++i)
    for (std::size_t j = 0; j < base.kv_weights[0].cols(); ++j)
      EXPECT_EQ(eff.kv_weights[0](i, j), base.kv_weights[0](i, j) + (i == 1 && j == 3 ? 1.0 : 0.0));

  std::vector<LowRankFactor> full;
  ParamSet direct = base;
  for (std::size_t i = 0; i < base.kv_weights.size(); ++i) {
    const Matrix& w = base.kv_weights[i];
    const Matrix delta = rng.normal_matrix(w.rows(), w.cols());
    full.push_back({Matrix::identity(w.rows()), delta});
    direct.kv_weights[i] += delta;
  }
  EXPECT_EQ(effective_params(base, full), direct);

  std::vector<LowRankFactor> bad = f;
  bad.pop_back();
  EXPECT_THROW(effective_params(base, bad), Error);

  const auto blocks = mlp_weight_blocks(arch);
  std::vector<LowRankFactor> rf;
  for (const RestBlock& b : blocks) rf.push_back({Matrix(b.rows, 1, 1.0), Matrix(1, b.cols, 1.0)});
  const ParamSet er = effective_params(base, {}, blocks, rf);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < base.rest.size(); ++i) {
    if (er.rest[i] != base.rest[i]) {
      EXPECT_DOUBLE_EQ(er.rest[i], base.rest[i] + 1.0);
      ++changed;
    }
  }
  EXPECT_EQ(changed, blocks[0].rows * blocks[0].cols + blocks[1].rows * blocks[1].cols);
}

// dL/dA = G B^T and dL/dB = A^T G, with G the loss gradient wrt the effective weight.
TEST(EffectiveParams, FactorGradientsMatchFiniteDifferences) {
  const Arch arch = small_arch();
  Rng rng(15);
  Denoiser m = Denoiser::init(arch, rng);
  const ParamSet base = m.params();
  const NoiseSchedule sched = schedule_for(arch);
  const Matrix emb = rng.normal_matrix(arch.tokens, arch.embed_dim);
  const Matrix x0 = rng.normal_matrix(8, 2);
  const NoiseDraws draws = draw_noise(8, 2, sched, rng);

  std::vector<LowRankFactor> f;
  for (const Matrix& w : base.kv_weights)
    f.push_back({rng.normal_matrix(w.rows(), 2), rng.normal_matrix(2, w.cols(), 0.5)});

  auto loss_at = [&](const std::vector<LowRankFactor>& ff) {
    Denoiser d(arch, effective_params(base, ff));
    return loss_and_grad(d, x0, emb, sched, draws);
  };
  const LossGrad g = loss_at(f);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const Matrix& w = base.kv_weights[i];
    const Matrix gw(w.rows(), w.cols(),
                    std::vector<double>(g.grad.begin() + static_cast<std::ptrdiff_t>(offset),
                                        g.grad.begin() + static_cast<std::ptrdiff_t>(offset + w.size())));
    offset += w.size();
    const Matrix ga = gw * f[i].b.transposed();
    const Matrix gb = transpose_times(f[i].a, gw);

    auto fd_for = [&](Matrix LowRankFactor::*member) {
      const Matrix& x = f[i].*member;
      return fd_gradient(
          [&](const std::vector<double>& v) {
            std::vector<LowRankFactor> ff = f;
            ff[i].*member = Matrix(x.rows(), x.cols(), v);
            return loss_at(ff).loss;
          },
          std::vector<double>(x.data().begin(), x.data().end()), 1e-6);
    };
    const std::vector<double> fa = fd_for(&LowRankFactor::a), fb = fd_for(&LowRankFactor::b);
    for (std::size_t k = 0; k < fa.size(); ++k) EXPECT_NEAR(ga.data()[k], fa[k], 1e-6);
    for (std::size_t k = 0; k < fb.size(); ++k) EXPECT_NEAR(gb.data()[k], fb[k], 1e-6);
  }
}

}  // namespace
}  // namespace mima
