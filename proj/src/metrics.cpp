#include "mima/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mima {

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::FrozenEncoderCosine: return "frozen_encoder_cosine";
    case MetricKind::NegMse: return "neg_mse";
    case MetricKind::MmdGaussian: return "mmd_gaussian";
  }
  return "unknown";
}

MetricKind metric_kind_from_string(std::string_view name) {
  for (MetricKind k : {MetricKind::FrozenEncoderCosine, MetricKind::NegMse, MetricKind::MmdGaussian})
    if (to_string(k) == name) return k;
  throw Error(Errc::ConfigError, "unknown metric kind '" + std::string(name) + "'");
}

FrozenEncoder::FrozenEncoder(std::size_t data_dim, std::uint64_t seed) {
  if (data_dim == 0) throw Error(Errc::InvalidArgument, "encoder input dimension is zero");
  Rng rng(seed);
  w1_ = rng.normal_matrix(kHidden, data_dim, 1.0 / std::sqrt(static_cast<double>(data_dim)));
  w2_ = rng.normal_matrix(kFeatures, kHidden, 1.0 / std::sqrt(static_cast<double>(kHidden)));
}

Matrix FrozenEncoder::features(const Matrix& x) const {
  if (x.cols() != w1_.cols()) throw Error(Errc::DimensionMismatch, "encoder input dimension");
  Matrix h = x * w1_.transposed();
  for (double& v : h.data()) v = std::tanh(v);
  Matrix f = h * w2_.transposed();
  for (double& v : f.data()) v = std::tanh(v);
  return f;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::DimensionMismatch, "cosine of unequal lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double den = std::sqrt(aa) * std::sqrt(bb);
  if (den == 0.0) throw Error(Errc::DegenerateDenominator, "cosine of a zero vector");
  return ab / den;
}

namespace {

std::vector<double> column_mean(const Matrix& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] += x(r, c);
  for (double& v : m) v /= static_cast<double>(x.rows());
  return m;
}

double mean_kernel(const Matrix& a, const Matrix& b, double bandwidth) {
  const double scale = 1.0 / (2.0 * bandwidth * bandwidth);
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double d = a(i, c) - b(j, c);
        d2 += d * d;
      }
      s += std::exp(-d2 * scale);
    }
  }
  return s / static_cast<double>(a.rows() * b.rows());
}

}  // namespace

double similarity(const SimilarityMetric& metric, const Matrix& a, const Matrix& b) {
  if (a.rows() == 0 || b.rows() == 0) throw Error(Errc::EmptyBatch, "similarity of an empty batch");
  if (a.cols() != b.cols()) throw Error(Errc::DimensionMismatch, "similarity batch dimensions differ");
  switch (metric.kind) {
    case MetricKind::FrozenEncoderCosine: {
      const FrozenEncoder enc(a.cols(), metric.encoder_seed);
      const Matrix fa = enc.features(a), fb = enc.features(b);
      if (metric.aggregation == Aggregation::MeanFeature) {
        return cosine(column_mean(fa), column_mean(fb));
      }
      double s = 0.0;
      for (std::size_t i = 0; i < fa.rows(); ++i)
        for (std::size_t j = 0; j < fb.rows(); ++j) s += cosine(fa.row(i), fb.row(j));
      return s / static_cast<double>(fa.rows() * fb.rows());
    }
    case MetricKind::NegMse: {
      const std::vector<double> ma = column_mean(a), mb = column_mean(b);
      double d2 = 0.0;
      for (std::size_t c = 0; c < ma.size(); ++c) d2 += (ma[c] - mb[c]) * (ma[c] - mb[c]);
      return -d2;
    }
    case MetricKind::MmdGaussian: {
      if (!(metric.bandwidth > 0)) throw Error(Errc::InvalidArgument, "mmd bandwidth must be > 0");
      const double kab = mean_kernel(a, b, metric.bandwidth);
      const double kba = mean_kernel(b, a, metric.bandwidth);
      const double mmd2 = mean_kernel(a, a, metric.bandwidth) +
                          mean_kernel(b, b, metric.bandwidth) - kab - kba;
      return 1.0 - 0.5 * mmd2;
    }
  }
  throw Error(Errc::InvalidArgument, "unknown metric kind");
}

double msgr(std::span<const double> sim_attacked, std::span<const double> sim_immunized) {
  if (sim_attacked.empty()) throw Error(Errc::EmptyBatch, "no concepts for the gap ratio");
  if (sim_attacked.size() != sim_immunized.size())
    throw Error(Errc::DimensionMismatch, "similarity lists differ in length");
  double s = 0.0;
  for (std::size_t n = 0; n < sim_attacked.size(); ++n) {
    if (std::abs(sim_attacked[n]) < 1e-9)
      throw Error(Errc::DegenerateDenominator, "concept " + std::to_string(n) + " has a near-zero similarity");
    s += (sim_attacked[n] - sim_immunized[n]) / sim_attacked[n];
  }
  return s / static_cast<double>(sim_attacked.size());
}

std::vector<std::size_t> negative_denominators(std::span<const double> sim_attacked) {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < sim_attacked.size(); ++n)
    if (sim_attacked[n] < 0) out.push_back(n);
  return out;
}

double mrsgr(double mean_target, double mean_other) {
  if (std::abs(mean_other) < 1e-9)
    throw Error(Errc::DegenerateDenominator, "other-concept mean similarity is near zero");
  return (mean_other - mean_target) / mean_other;
}

double mean_pair_similarity(const SimilarityMetric& metric, std::span<const GenerationPair> pairs) {
  if (pairs.empty()) throw Error(Errc::EmptyBatch, "no generation pairs");
  double s = 0.0;
  for (const GenerationPair& p : pairs) s += similarity(metric, p.immunized, p.attacked);
  return s / static_cast<double>(pairs.size());
}

double mrsgr(const SimilarityMetric& metric, std::span<const GenerationPair> targets,
             std::span<const GenerationPair> others) {
  return mrsgr(mean_pair_similarity(metric, targets), mean_pair_similarity(metric, others));
}

Trajectory trajectory(const Denoiser& model, const AdaptMethod& attack, const ConceptSpec& concept_spec,
                      const Matrix& data, const NoiseSchedule& schedule,
                      std::span<const std::size_t> checkpoints, const SimilarityMetric& metric,
                      const Matrix& references, std::size_t num_samples, Rng& rng) {
  if (checkpoints.empty()) throw Error(Errc::InvalidArgument, "no checkpoints");
  for (std::size_t i = 1; i < checkpoints.size(); ++i)
    if (checkpoints[i] <= checkpoints[i - 1])
      throw Error(Errc::InvalidArgument, "checkpoints must be strictly increasing");
  if (checkpoints.back() > attack.steps)
    throw Error(Errc::InvalidArgument, "checkpoint beyond the attack length");
  if (num_samples == 0) throw Error(Errc::EmptyBatch, "num_samples is zero");

  Trajectory out;
  out.checkpoints.assign(checkpoints.begin(), checkpoints.end());
  std::size_t next = 0;
  auto observe = [&](std::size_t step, const Denoiser& m, const Matrix& emb) {
    if (next >= checkpoints.size() || checkpoints[next] != step) return;
    Rng sampler = rng.split(1 + next);
    Matrix gen = sample(m, emb, schedule, num_samples, sampler);
    out.similarity.push_back(similarity(metric, references, gen));
    out.generations.push_back(std::move(gen));
    ++next;
  };

  if (checkpoints.back() == 0) {
    observe(0, model, concept_spec.embedding);
    return out;
  }
  AdaptMethod run = attack;
  run.steps = checkpoints.back();
  Rng attack_rng = rng.split(0);
  out.loss_trajectory = adapt(model, run, concept_spec, data, schedule, attack_rng, observe).loss_trajectory;
  return out;
}

}  // namespace mima
