#include "mima/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace mima {

std::size_t ParamSignature::kv_size() const {
  std::size_t n = 0;
  for (auto [r, c] : kv_shapes) n += r * c;
  return n;
}

ParamSignature ParamSet::signature() const {
  ParamSignature sig;
  sig.kv_shapes.reserve(kv_weights.size());
  for (const Matrix& w : kv_weights) sig.kv_shapes.emplace_back(w.rows(), w.cols());
  sig.rest_size = rest.size();
  return sig;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(signature().flat_size());
  for (const Matrix& w : kv_weights) flat.insert(flat.end(), w.data().begin(), w.data().end());
  flat.insert(flat.end(), rest.begin(), rest.end());
  return flat;
}

ParamSet ParamSet::unflatten(const ParamSignature& sig, std::span<const double> flat) {
  if (flat.size() != sig.flat_size()) {
    throw Error(Errc::SignatureMismatch, "flat vector of length " + std::to_string(flat.size()) +
                                             ", expected " + std::to_string(sig.flat_size()));
  }
  ParamSet out;
  std::size_t offset = 0;
  for (auto [r, c] : sig.kv_shapes) {
    out.kv_weights.emplace_back(
        r, c, std::vector<double>(flat.begin() + offset, flat.begin() + offset + r * c));
    offset += r * c;
  }
  out.rest.assign(flat.begin() + offset, flat.end());
  return out;
}

ParamSet ParamSet::zeros_like(const ParamSignature& sig) {
  ParamSet out;
  for (auto [r, c] : sig.kv_shapes) out.kv_weights.emplace_back(r, c);
  out.rest.assign(sig.rest_size, 0.0);
  return out;
}

void require_signature(const ParamSet& a, const ParamSignature& sig, const char* what) {
  if (!(a.signature() == sig)) throw Error(Errc::SignatureMismatch, what);
}

void MergeProblem::validate() const {
  if (concept_rows == 0) throw Error(Errc::DimensionMismatch, "concept_rows must be positive");
  if (concepts.rows() == 0 || concepts.rows() % concept_rows != 0) {
    throw Error(Errc::DimensionMismatch, "C rows not a multiple of concept_rows");
  }
  if (concepts.cols() != w_pre.rows() || regularization.cols() != w_pre.rows()) {
    throw Error(Errc::DimensionMismatch, "embedding width does not match W_pre rows");
  }
  if (o_star.rows() != concepts.rows() || o_star.cols() != w_pre.cols()) {
    throw Error(Errc::DimensionMismatch, "O_star shape");
  }
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t fingerprint_of(const MergeProblem& p, double lambda) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const double dims[] = {static_cast<double>(p.concepts.rows()),
                         static_cast<double>(p.concepts.cols()),
                         static_cast<double>(p.regularization.rows()),
                         static_cast<double>(p.w_pre.cols()), lambda};
  h = fnv1a(h, dims);
  h = fnv1a(h, p.concepts.data());
  h = fnv1a(h, p.regularization.data());
  return fnv1a(h, p.w_pre.data());
}

// Cholesky with a relative pivot floor, so numerically singular matrices are
// reported instead of producing an enormous inverse.
Cholesky factor_or_throw(const Matrix& a, Errc code, const char* what) {
  double max_diag = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) max_diag = std::max(max_diag, a(i, i));
  Cholesky f;
  try {
    f = Cholesky(a);
  } catch (const Error&) {
    throw Error(code, std::string(what) + " is not positive definite");
  }
  for (std::size_t i = 0; i < f.dim(); ++i) {
    const double pivot = f.lower()(i, i);
    if (pivot * pivot <= 1e-13 * max_diag) {
      throw Error(code, std::string(what) + " is numerically singular");
    }
  }
  return f;
}

}  // namespace

double default_ridge(const Matrix& regularization) {
  const double tr = inner(regularization, regularization);  // trace(C_reg^T C_reg)
  return 1e-8 * tr / static_cast<double>(regularization.cols());
}

MergeSolution solve(const MergeProblem& problem, double ridge_lambda) {
  problem.validate();
  if (!(ridge_lambda >= 0.0)) throw Error(Errc::InvalidArgument, "ridge_lambda must be >= 0");

  MergeSolution sol;
  sol.ridge_lambda = ridge_lambda;
  sol.fingerprint = fingerprint_of(problem, ridge_lambda);

  const Matrix q = ridge_of(transpose_times(problem.regularization, problem.regularization),
                            ridge_lambda);
  sol.q_factor = factor_or_throw(q, Errc::SingularQ, "C_reg^T C_reg");

  // Schur complement S = C Q^{-1} C^T.
  const Matrix q_inv_ct = sol.q_factor.solve(problem.concepts.transposed());
  Matrix schur = problem.concepts * q_inv_ct;
  for (std::size_t i = 0; i < schur.rows(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double avg = 0.5 * (schur(i, j) + schur(j, i));
      schur(i, j) = avg;
      schur(j, i) = avg;
    }
  }
  sol.s_factor = factor_or_throw(schur, Errc::SingularSchur, "C Q^{-1} C^T");

  // M = 2 S^{-1} (O* - C W_pre);  phi* = W_pre + 1/2 Q^{-1} C^T M
  const Matrix half_m = sol.s_factor.solve(problem.o_star - problem.concepts * problem.w_pre);
  sol.multipliers = 2.0 * half_m;
  sol.phi_star = problem.w_pre + q_inv_ct * half_m;
  if (!all_finite(sol.phi_star)) throw Error(Errc::SingularSchur, "non-finite merged weight");
  return sol;
}

MergeGradients backward(const MergeSolution& solution, const MergeProblem& problem,
                        const Matrix& upstream) {
  if (solution.fingerprint != fingerprint_of(problem, solution.ridge_lambda) ||
      solution.q_factor.dim() != problem.concepts.cols() ||
      solution.s_factor.dim() != problem.concepts.rows()) {
    throw Error(Errc::StaleFactorization, "solution was not produced for this problem");
  }
  require_same_shape(upstream, solution.phi_star, "merge backward upstream");

  MergeGradients g;
  // dL/dO* = S^{-1} C Q^{-1} U
  g.grad_o_star = solution.s_factor.solve(problem.concepts * solution.q_factor.solve(upstream));

  const std::size_t l = problem.concept_rows;
  for (std::size_t n = 0; n < problem.num_concepts(); ++n) {
    const Matrix c_n = row_block(problem.concepts, n * l, l);
    g.grad_w_blocks.push_back(transpose_times(c_n, row_block(g.grad_o_star, n * l, l)));
  }
  return g;
}

MergeContext::MergeContext(std::vector<MergeProblem> problems,
                           std::vector<MergeSolution> solutions, std::size_t num_inputs,
                           ParamSignature signature)
    : problems_(std::move(problems)),
      solutions_(std::move(solutions)),
      num_inputs_(num_inputs),
      signature_(std::move(signature)) {}

std::vector<ParamSet> MergeContext::vjp(const ParamSet& upstream) const {
  require_signature(upstream, signature_, "merge vjp upstream");
  std::vector<ParamSet> out(num_inputs_);
  const double inv_n = 1.0 / static_cast<double>(num_inputs_);
  for (ParamSet& g : out) {
    g.kv_weights.reserve(problems_.size());
    g.rest.resize(upstream.rest.size());
    for (std::size_t i = 0; i < upstream.rest.size(); ++i) g.rest[i] = inv_n * upstream.rest[i];
  }
  for (std::size_t site = 0; site < problems_.size(); ++site) {
    MergeGradients mg = backward(solutions_[site], problems_[site], upstream.kv_weights[site]);
    for (std::size_t n = 0; n < num_inputs_; ++n) {
      out[n].kv_weights.push_back(std::move(mg.grad_w_blocks[n]));
    }
  }
  return out;
}

MergeResult merge_params(std::span<const ParamSet> adapted, std::span<const Matrix> concepts,
                         const Matrix& regularization, const ParamSet& pretrained,
                         std::optional<double> ridge_lambda) {
  if (adapted.empty()) throw Error(Errc::InvalidArgument, "merge_params needs N >= 1");
  if (concepts.size() != adapted.size()) {
    throw Error(Errc::DimensionMismatch, "one concept embedding per adapted set required");
  }
  const ParamSignature sig = pretrained.signature();
  for (const ParamSet& p : adapted) require_signature(p, sig, "adapted parameter set");
  const std::size_t l = concepts.front().rows();
  for (const Matrix& c : concepts) {
    if (c.rows() != l) throw Error(Errc::DimensionMismatch, "concept embeddings differ in l");
  }

  const std::size_t n_in = adapted.size();
  const Matrix stacked = vstack(concepts);
  const double lambda = ridge_lambda.value_or(default_ridge(regularization));

  MergeResult result;
  result.merged.rest.assign(sig.rest_size, 0.0);
  for (const ParamSet& p : adapted) {
    for (std::size_t i = 0; i < sig.rest_size; ++i) result.merged.rest[i] += p.rest[i];
  }
  const double inv_n = 1.0 / static_cast<double>(n_in);
  for (double& v : result.merged.rest) v *= inv_n;

  std::vector<MergeProblem> problems;
  std::vector<MergeSolution> solutions;
  for (std::size_t site = 0; site < sig.kv_shapes.size(); ++site) {
    MergeProblem prob;
    prob.concepts = stacked;
    prob.regularization = regularization;
    prob.w_pre = pretrained.kv_weights[site];
    prob.concept_rows = l;
    std::vector<Matrix> targets;
    targets.reserve(n_in);
    for (std::size_t n = 0; n < n_in; ++n) {
      targets.push_back(concepts[n] * adapted[n].kv_weights[site]);
    }
    prob.o_star = vstack(targets);
    MergeSolution sol = solve(prob, lambda);
    result.merged.kv_weights.push_back(sol.phi_star);
    problems.push_back(std::move(prob));
    solutions.push_back(std::move(sol));
  }
  result.context = MergeContext(std::move(problems), std::move(solutions), n_in, sig);
  return result;
}

}  // namespace mima
