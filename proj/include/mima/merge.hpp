#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mima/linalg.hpp"

namespace mima {

// Shape of a ParamSet: the key/value projection matrices in order, plus the
// length of the flat vector holding every other parameter.
struct ParamSignature {
  std::vector<std::pair<std::size_t, std::size_t>> kv_shapes;
  std::size_t rest_size = 0;

  std::size_t kv_size() const;
  std::size_t flat_size() const { return kv_size() + rest_size; }
  bool operator==(const ParamSignature&) const = default;
};

// Denoiser parameters partitioned into cross-attention key/value projections
// and the rest. The flat layout is every kv matrix row-major, in order,
// followed by `rest`.
struct ParamSet {
  std::vector<Matrix> kv_weights;
  std::vector<double> rest;

  ParamSignature signature() const;
  std::vector<double> flatten() const;
  static ParamSet unflatten(const ParamSignature& sig, std::span<const double> flat);
  static ParamSet zeros_like(const ParamSignature& sig);

  bool operator==(const ParamSet&) const = default;
};

void require_signature(const ParamSet& a, const ParamSignature& sig, const char* what);

// One equality-constrained least-squares merge:
//   min_phi ||C_reg phi - C_reg W_pre||_F^2  s.t.  C phi = O_star
struct MergeProblem {
  Matrix concepts;        // C, (N*l) x c
  Matrix regularization;  // C_reg, (N'*l) x c
  Matrix w_pre;           // c x d
  Matrix o_star;          // (N*l) x d
  std::size_t concept_rows = 1;  // l, rows contributed by each concept

  std::size_t num_concepts() const { return concepts.rows() / concept_rows; }
  void validate() const;
};

struct MergeSolution {
  Matrix phi_star;     // c x d
  Matrix multipliers;  // M, (N*l) x d
  Cholesky q_factor;   // Q + lambda I, Q = C_reg^T C_reg
  Cholesky s_factor;   // C (Q + lambda I)^{-1} C^T
  double ridge_lambda = 0.0;
  std::uint64_t fingerprint = 0;
};

struct MergeGradients {
  Matrix grad_o_star;                // (N*l) x d
  std::vector<Matrix> grad_w_blocks;  // per concept, c x d
};

// lambda = 1e-8 * trace(C_reg^T C_reg) / c.
double default_ridge(const Matrix& regularization);

MergeSolution solve(const MergeProblem& problem, double ridge_lambda);

// Vector-Jacobian product of phi_star with respect to O_star (and through it
// each adapted W_[n]). `upstream` is dLoss/dphi_star.
MergeGradients backward(const MergeSolution& solution, const MergeProblem& problem,
                        const Matrix& upstream);

// Vector-Jacobian products for one Merge of N parameter sets.
class MergeContext {
 public:
  MergeContext() = default;
  MergeContext(std::vector<MergeProblem> problems, std::vector<MergeSolution> solutions,
               std::size_t num_inputs, ParamSignature signature);

  std::size_t num_inputs() const noexcept { return num_inputs_; }
  const std::vector<MergeSolution>& solutions() const noexcept { return solutions_; }

  // Returns dLoss/d(adapted[n]) for every n given dLoss/d(merged).
  std::vector<ParamSet> vjp(const ParamSet& upstream) const;

 private:
  std::vector<MergeProblem> problems_;
  std::vector<MergeSolution> solutions_;
  std::size_t num_inputs_ = 0;
  ParamSignature signature_;
};

struct MergeResult {
  ParamSet merged;
  MergeContext context;
};

// Constrained merge on every kv weight, arithmetic mean on the rest.
// `concepts[n]` is the l x c embedding adapted[n] was tuned on.
// An unset ridge selects default_ridge() per site.
MergeResult merge_params(std::span<const ParamSet> adapted, std::span<const Matrix> concepts,
                         const Matrix& regularization, const ParamSet& pretrained,
                         std::optional<double> ridge_lambda = std::nullopt);

}  // namespace mima
