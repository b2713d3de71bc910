#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "mima/adapt.hpp"
#include "mima/diffusion.hpp"
#include "mima/merge.hpp"

namespace mima {

enum class SubsetKind { All, KvOnly, RestOnly, Custom };
enum class GradMode { FullUnrolled, FirstOrder };

std::string_view to_string(SubsetKind kind);
std::string_view to_string(GradMode mode);
SubsetKind subset_kind_from_string(std::string_view name);
GradMode grad_mode_from_string(std::string_view name);

struct ParamSubset {
  SubsetKind kind = SubsetKind::All;
  std::vector<bool> custom;  // flat layout, Custom only

  // 1.0 inside the subset, 0.0 outside.
  std::vector<double> mask(const ParamSignature& sig) const;
  bool operator==(const ParamSubset&) const = default;
};

struct ImmunizeConfig {
  double alpha = 1e-2;
  double beta = 1e-3;
  std::size_t epochs = 300;
  ParamSubset lower_subset;
  ParamSubset upper_subset;
  GradMode grad_mode = GradMode::FullUnrolled;
  std::optional<double> ridge_lambda;  // unset: default_ridge
  std::size_t lower_batch = 32;
  std::size_t upper_batch = 32;
  bool single_sample_n = false;  // upper objective on one random concept per step

  void validate(const ParamSignature& sig) const;
  bool operator==(const ImmunizeConfig&) const = default;
};

// Everything fixed across an immunization run.
struct ImmunizeSetup {
  NoiseSchedule schedule;
  std::vector<ConceptSpec> concepts;  // targets to immunize against
  std::vector<Matrix> data;           // sample pool per concept
  Matrix regularization;              // C_reg for the merge
  ParamSet pretrained;                // W_pre for the merge

  void validate(const Arch& arch) const;
};

struct ConceptBatch {
  Matrix lower;
  Matrix upper;
};

// Noise draws for one step, per concept.
struct StepDraws {
  std::vector<NoiseDraws> lower;
  std::vector<NoiseDraws> upper;
  std::optional<std::size_t> sampled_concept;  // single_sample_n only
};

StepDraws draw_step(std::span<const ConceptBatch> batches, const ImmunizeConfig& cfg,
                    const NoiseSchedule& schedule, Rng& rng);

struct StepRecord {
  std::vector<double> upper_loss;  // L(x^u_n; theta') per concept
  std::vector<double> lower_loss;  // L(x^l_n; theta'_n) per concept
  double grad_norm = 0.0;
  double wall_seconds = 0.0;
};

struct StepResult {
  ParamSet theta;
  StepRecord record;
  std::vector<double> upper_grad;  // flat g before masking by S^u
};

StepResult mima_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                     std::span<const ConceptBatch> batches, const StepDraws& draws,
                     const ImmunizeConfig& cfg);
StepResult mima_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                     std::span<const ConceptBatch> batches, const ImmunizeConfig& cfg, Rng& rng);

// Pooled single lower-level task, no merge. Each sample keeps its own
// concept's embedding.
StepResult jt_step(const Arch& arch, const ParamSet& theta, const ImmunizeSetup& setup,
                   std::span<const ConceptBatch> batches, const StepDraws& draws,
                   const ImmunizeConfig& cfg);

struct ImmunizeTrace {
  std::vector<std::vector<double>> upper_loss;  // [epoch][concept]
  std::vector<std::vector<double>> lower_loss;
  std::vector<double> grad_norm;
  std::vector<double> wall_seconds;

  std::size_t epochs() const { return grad_norm.size(); }
  void append(const StepRecord& r);
  void append(const ImmunizeTrace& other);
  // Timings excluded.
  bool same_values(const ImmunizeTrace& other) const;
};

struct ImmunizeResult {
  ParamSet theta;
  ImmunizeTrace trace;
};

std::vector<ConceptBatch> draw_batches(const ImmunizeSetup& setup, const ImmunizeConfig& cfg,
                                       Rng& rng);

ImmunizeResult run_mima(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                        const ImmunizeConfig& cfg, Rng& rng);
ImmunizeResult run_jt(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                      const ImmunizeConfig& cfg, Rng& rng);
// MIMA with both subsets forced to kv weights; the rest stays at theta_pre.
ImmunizeResult run_cp(const Arch& arch, const ParamSet& theta_pre, const ImmunizeSetup& setup,
                      const ImmunizeConfig& cfg, Rng& rng);
// Single-concept immunization on each concept in order, K epochs each.
ImmunizeResult run_sequential(const Arch& arch, const ParamSet& theta_pre,
                              const ImmunizeSetup& setup, const ImmunizeConfig& cfg, Rng& rng);

}  // namespace mima
