#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mima/diffusion.hpp"

namespace mima {

// Full fine-tuning (DreamBooth-like), low-rank adapters (LoRA-like),
// key/value-only (Custom Diffusion-like), embedding-only (Textual
// Inversion-like).
enum class AdaptKind { FullFineTune, LowRank, KeyValueOnly, EmbeddingOnly };

std::string_view to_string(AdaptKind kind);
AdaptKind adapt_kind_from_string(std::string_view name);

struct AdaptMethod {
  AdaptKind kind = AdaptKind::FullFineTune;
  std::size_t rank = 1;             // LowRank only
  bool lowrank_mlp = false;         // LowRank: also adapt the MLP head weights
  double lr = 1e-2;
  std::size_t steps = 1;
  std::size_t batch_size = 16;
  double embedding_noise = 0.1;     // EmbeddingOnly: init std around the true embedding
  double max_grad_norm = 0.0;       // clip the step's gradient norm; 0 disables

  void validate(const Arch& arch) const;
  bool operator==(const AdaptMethod&) const = default;
};

struct AdaptResult {
  ParamSet adapted_params;
  Matrix embedding;  // the embedding to condition on after adaptation
  std::vector<double> loss_trajectory;
  double final_loss = 0.0;
};

// Raised when the loss or its gradient stops being finite. Holds the
// trajectory up to the failing step.
class AdaptDiverged : public Error {
 public:
  AdaptDiverged(std::vector<double> trajectory, std::size_t step)
      : Error(Errc::NonFiniteLoss, "adaptation diverged at step " + std::to_string(step)),
        trajectory_(std::move(trajectory)) {}
  const std::vector<double>& trajectory() const noexcept { return trajectory_; }

 private:
  std::vector<double> trajectory_;
};

struct LowRankFactor {
  Matrix a;  // rows x r
  Matrix b;  // r x cols
};

// kv_weights[i] + kv_factors[i].a * kv_factors[i].b for every kv weight, and
// the same on each listed rest block. An empty kv_factors leaves kv as is.
ParamSet effective_params(const ParamSet& base, std::span<const LowRankFactor> kv_factors,
                          std::span<const RestBlock> rest_blocks = {},
                          std::span<const LowRankFactor> rest_factors = {});

// Called at step 0 (before any update) and after each step with the current
// model and conditioning embedding.
using AdaptObserver =
    std::function<void(std::size_t step, const Denoiser& model, const Matrix& embedding)>;

// Plain gradient descent on the diffusion loss over the method's parameter
// subset. Each step draws a minibatch (with replacement) from `data`.
AdaptResult adapt(const Denoiser& model, const AdaptMethod& method, const ConceptSpec& concept_spec,
                  const Matrix& data, const NoiseSchedule& schedule, Rng& rng,
                  const AdaptObserver& observer = {});

Matrix draw_minibatch(const Matrix& data, std::size_t batch, Rng& rng);

}  // namespace mima
