#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "mima/linalg.hpp"
#include "mima/merge.hpp"

namespace mima {

struct NoiseSchedule {
  std::vector<double> betas;         // index t-1 for t in [1, T]
  std::vector<double> alpha_bars;
  std::vector<double> loss_weights;  // w_t

  std::size_t num_steps() const { return betas.size(); }
  double beta(int t) const { return betas[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar(int t) const { return alpha_bars[static_cast<std::size_t>(t - 1)]; }
  double weight(int t) const { return loss_weights[static_cast<std::size_t>(t - 1)]; }

  static NoiseSchedule linear(std::size_t steps, double beta_start, double beta_end,
                              double weight = 1.0);
  void validate() const;
};

// Denoiser architecture. Per sample, with h0 = [x_t, time features]:
//   per attention site s:  q = Wq_s h0 + bq_s,  K = E W^k_s,  V = E W^v_s,
//                          a = softmax(K q / sqrt(d)),  o_s = V^T a
//   z = [h0, o_1..o_S],  out = W2 tanh(W1 z + b1) + b2
// W^k_s and W^v_s are the ParamSet's kv_weights (k, v alternating per site).
struct Arch {
  std::size_t data_dim = 2;
  std::size_t tokens = 2;  // l
  std::size_t embed_dim = 8;  // c
  std::size_t key_dim = 8;  // d
  std::size_t value_dim = 8;  // d'
  std::size_t hidden = 32;
  std::size_t sites = 1;
  std::size_t time_features = 4;
  std::size_t num_steps = 50;  // T, used to normalise the timestep

  ParamSignature signature() const;
  void validate() const;
  bool operator==(const Arch&) const = default;
};

// A dense weight matrix stored inside ParamSet::rest (row-major).
struct RestBlock {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// The two MLP head weight matrices W1 and W2.
std::vector<RestBlock> mlp_weight_blocks(const Arch& arch);

class Denoiser {
 public:
  Denoiser(Arch arch, ParamSet params);

  // Seeded initialisation; output-layer weights start small.
  static Denoiser init(const Arch& arch, Rng& rng);

  const Arch& arch() const noexcept { return arch_; }
  const ParamSet& params() const noexcept { return params_; }
  void set_params(ParamSet params);

  // x_t is batch x data_dim; t holds one timestep per row (or a single one
  // shared by the batch). Returns predicted noise, batch x data_dim.
  Matrix forward(const Matrix& x_t, const Matrix& embedding, std::span<const int> t) const;
  Matrix forward(const Matrix& x_t, const Matrix& embedding, int t) const;

 private:
  Arch arch_;
  ParamSet params_;
};

// The (t, eps) draws of one Monte-Carlo evaluation of the diffusion loss.
struct NoiseDraws {
  std::vector<int> timesteps;
  Matrix noise;
};

NoiseDraws draw_noise(std::size_t batch, std::size_t data_dim, const NoiseSchedule& schedule,
                      Rng& rng);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, row by row.
Matrix noisy_inputs(const Matrix& x0, const NoiseDraws& draws, const NoiseSchedule& schedule);

// (1/B) sum_b w_t ||pred_b - eps_b||^2
double weighted_noise_mse(const Matrix& predicted, const NoiseDraws& draws,
                          const NoiseSchedule& schedule);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;  // flat, ParamSet layout
  Matrix grad_embedding;     // l x c
  Matrix grad_input;         // batch x data_dim, gradient wrt x_t
};

LossGrad loss_and_grad(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
                       const NoiseSchedule& schedule, const NoiseDraws& draws);

// Samples (t, eps) from rng, then evaluates loss_and_grad.
LossGrad loss(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
              const NoiseSchedule& schedule, Rng& rng);

struct HessianVector {
  std::vector<double> grad;  // same as loss_and_grad(...).grad
  std::vector<double> hvp;   // (d^2 L / d theta^2) v
};

// Exact Hessian-vector product of the loss with respect to the flat parameters
// at fixed draws, by forward-over-reverse differentiation.
HessianVector hessian_vector(const Denoiser& model, const Matrix& x0, const Matrix& embedding,
                             const NoiseSchedule& schedule, const NoiseDraws& draws,
                             std::span<const double> direction);

using NoisePredictor = std::function<Matrix(const Matrix& x_t, int t)>;

// Ancestral reverse process from pure noise through all T steps.
Matrix sample(const NoisePredictor& predict, const NoiseSchedule& schedule, std::size_t n,
              std::size_t data_dim, Rng& rng);
Matrix sample(const Denoiser& model, const Matrix& embedding, const NoiseSchedule& schedule,
              std::size_t n, Rng& rng);

struct GaussianComponent {
  std::vector<double> mean;
  double stddev = 1.0;
  double weight = 1.0;
};

struct ConceptSpec {
  int token_id = 0;
  Matrix embedding;  // l x c
  std::vector<GaussianComponent> components;

  std::size_t data_dim() const { return components.front().mean.size(); }
};

Matrix sample_concept(const ConceptSpec& spec, std::size_t n, Rng& rng);

// One batch per concept, in concept order.
std::vector<Matrix> make_toy_dataset(std::span<const ConceptSpec> concepts,
                                     std::size_t per_concept, Rng& rng);

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model);
Denoiser load_checkpoint(const std::filesystem::path& path);

}  // namespace mima
