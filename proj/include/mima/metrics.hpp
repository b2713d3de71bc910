#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "mima/adapt.hpp"
#include "mima/diffusion.hpp"

namespace mima {

enum class MetricKind { FrozenEncoderCosine, NegMse, MmdGaussian };
enum class Aggregation { MeanFeature, MeanPairwise };  // frozen encoder only

std::string_view to_string(MetricKind kind);
MetricKind metric_kind_from_string(std::string_view name);

// Seeded random 2-layer tanh feature map R^D -> R^16, never trained.
class FrozenEncoder {
 public:
  static constexpr std::size_t kHidden = 32;
  static constexpr std::size_t kFeatures = 16;

  FrozenEncoder(std::size_t data_dim, std::uint64_t seed);
  Matrix features(const Matrix& x) const;  // rows x 16
  std::size_t data_dim() const noexcept { return w1_.cols(); }

 private:
  Matrix w1_;  // hidden x D
  Matrix w2_;  // 16 x hidden
};

struct SimilarityMetric {
  MetricKind kind = MetricKind::FrozenEncoderCosine;
  std::uint64_t encoder_seed = 0;
  double bandwidth = 1.0;  // mmd only
  Aggregation aggregation = Aggregation::MeanFeature;

  bool operator==(const SimilarityMetric&) const = default;
};

double cosine(std::span<const double> a, std::span<const double> b);

double similarity(const SimilarityMetric& metric, const Matrix& a, const Matrix& b);

// Mean over concepts of (sim_attacked - sim_immunized) / sim_attacked, where
// both are similarities to the references after the attack.
double msgr(std::span<const double> sim_attacked, std::span<const double> sim_immunized);
// Concepts whose denominator is negative; the ratio's sign flips there.
std::vector<std::size_t> negative_denominators(std::span<const double> sim_attacked);

// (mean_other - mean_target) / mean_other.
double mrsgr(double mean_target, double mean_other);

struct GenerationPair {
  Matrix immunized;  // generations of the attacked immunized model
  Matrix attacked;   // generations of the attacked non-immunized model
};

double mean_pair_similarity(const SimilarityMetric& metric, std::span<const GenerationPair> pairs);
double mrsgr(const SimilarityMetric& metric, std::span<const GenerationPair> targets,
             std::span<const GenerationPair> others);

struct Trajectory {
  std::vector<std::size_t> checkpoints;
  std::vector<double> similarity;    // to the references, per checkpoint
  std::vector<Matrix> generations;   // per checkpoint
  std::vector<double> loss_trajectory;
};

// Runs the attack, sampling `num_samples` generations at each checkpoint (0 is
// the unadapted model). Sampling noise at checkpoint k depends only on the
// rng's seed and k, so two arms with the same seed share it.
Trajectory trajectory(const Denoiser& model, const AdaptMethod& attack, const ConceptSpec& concept_spec,
                      const Matrix& data, const NoiseSchedule& schedule,
                      std::span<const std::size_t> checkpoints, const SimilarityMetric& metric,
                      const Matrix& references, std::size_t num_samples, Rng& rng);

struct ConceptSeries {
  std::string concept_id;
  std::vector<double> immunized;
  std::vector<double> none;
};

struct MetricReport {
  SimilarityMetric metric;
  std::vector<std::size_t> checkpoints;
  std::vector<ConceptSeries> targets;
  std::vector<ConceptSeries> others;
  double msgr = 0.0;
  double mrsgr = 0.0;
  double mean_target_pair = 0.0;  // mean over targets of M(x^I, x^A)
  double mean_other_pair = 0.0;
  std::vector<std::size_t> negative_denominator_concepts;
};

}  // namespace mima
