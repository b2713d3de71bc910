#include "mima/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mima {

std::string_view to_string(AdaptKind kind) {
  switch (kind) {
    case AdaptKind::FullFineTune: return "full";
    case AdaptKind::LowRank: return "lowrank";
    case AdaptKind::KeyValueOnly: return "kv";
    case AdaptKind::EmbeddingOnly: return "embedding";
  }
  return "unknown";
}

AdaptKind adapt_kind_from_string(std::string_view name) {
  for (AdaptKind k : {AdaptKind::FullFineTune, AdaptKind::LowRank, AdaptKind::KeyValueOnly,
                      AdaptKind::EmbeddingOnly}) {
    if (to_string(k) == name) return k;
  }
  throw Error(Errc::ConfigError, "unknown attack kind '" + std::string(name) + "'");
}

void AdaptMethod::validate(const Arch& arch) const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(Errc::InvalidArgument, "lr must be >= 0");
  if (steps < 1) throw Error(Errc::InvalidArgument, "steps must be >= 1");
  if (batch_size < 1) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
  if (!(max_grad_norm >= 0.0) || !std::isfinite(max_grad_norm)) {
    throw Error(Errc::InvalidArgument, "max_grad_norm must be >= 0");
  }
  if (kind == AdaptKind::LowRank) {
    std::size_t max_rank = std::min({arch.embed_dim, arch.key_dim, arch.value_dim});
    if (lowrank_mlp) {
      for (const RestBlock& b : mlp_weight_blocks(arch)) {
        max_rank = std::min({max_rank, b.rows, b.cols});
      }
    }
    if (rank < 1 || rank > max_rank) {
      throw Error(Errc::InvalidArgument, "rank must be in [1, " + std::to_string(max_rank) + "]");
    }
  }
}

ParamSet effective_params(const ParamSet& base, std::span<const LowRankFactor> kv_factors,
                          std::span<const RestBlock> rest_blocks,
                          std::span<const LowRankFactor> rest_factors) {
  if (!kv_factors.empty() && kv_factors.size() != base.kv_weights.size()) {
    throw Error(Errc::ShapeMismatch, "one low-rank factor pair per kv weight required");
  }
  if (rest_blocks.size() != rest_factors.size()) {
    throw Error(Errc::ShapeMismatch, "rest blocks and factors differ in count");
  }
  ParamSet out = base;
  for (std::size_t i = 0; i < kv_factors.size(); ++i) {
    const LowRankFactor& f = kv_factors[i];
    const Matrix& w = base.kv_weights[i];
    if (f.a.rows() != w.rows() || f.b.cols() != w.cols() || f.a.cols() != f.b.rows()) {
      throw Error(Errc::ShapeMismatch, "low-rank factor shape for kv weight " + std::to_string(i));
    }
    out.kv_weights[i] += f.a * f.b;
  }
  for (std::size_t i = 0; i < rest_blocks.size(); ++i) {
    const RestBlock& blk = rest_blocks[i];
    const LowRankFactor& f = rest_factors[i];
    if (f.a.rows() != blk.rows || f.b.cols() != blk.cols || f.a.cols() != f.b.rows() ||
        blk.offset + blk.rows * blk.cols > base.rest.size()) {
      throw Error(Errc::ShapeMismatch, "low-rank factor shape for rest block " + std::to_string(i));
    }
    const Matrix delta = f.a * f.b;
    for (std::size_t k = 0; k < delta.size(); ++k) out.rest[blk.offset + k] += delta.data()[k];
  }
  return out;
}

Matrix draw_minibatch(const Matrix& data, std::size_t batch, Rng& rng) {
  if (data.rows() == 0) throw Error(Errc::EmptyBatch, "no adaptation data");
  Matrix out(batch, data.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.rows()) - 1));
    std::copy(data.row(r).begin(), data.row(r).end(), out.row(b).begin());
  }
  return out;
}

namespace {

bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Matrix block_of(std::span<const double> flat, std::size_t offset, std::size_t rows,
                std::size_t cols) {
  return Matrix(rows, cols,
                std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                    flat.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols)));
}

}  // namespace

AdaptResult adapt(const Denoiser& model, const AdaptMethod& method, const ConceptSpec& concept_spec,
                  const Matrix& data, const NoiseSchedule& schedule, Rng& rng,
                  const AdaptObserver& observer) {
  const Arch& arch = model.arch();
  method.validate(arch);
  if (data.rows() == 0) throw Error(Errc::EmptyBatch, "no adaptation data");
  if (data.cols() != arch.data_dim) throw Error(Errc::IncompatibleSignature, "data dimension");
  if (concept_spec.embedding.rows() != arch.tokens ||
      concept_spec.embedding.cols() != arch.embed_dim) {
    throw Error(Errc::IncompatibleSignature, "concept embedding shape");
  }

  const ParamSignature sig = arch.signature();
  const ParamSet base = model.params();
  std::vector<double> theta = base.flatten();
  const std::size_t kv_size = sig.kv_size();

  Matrix embedding = concept_spec.embedding;
  if (method.kind == AdaptKind::EmbeddingOnly) {
    embedding += rng.normal_matrix(embedding.rows(), embedding.cols(), method.embedding_noise);
  }

  // Low-rank state: A seeded Gaussian / r, B zero, so the initial effective model is the base.
  std::vector<LowRankFactor> kv_factors, rest_factors;
  std::vector<RestBlock> rest_blocks;
  if (method.kind == AdaptKind::LowRank) {
    const double scale = 1.0 / static_cast<double>(method.rank);
    for (auto [rows, cols] : sig.kv_shapes) {
      kv_factors.push_back({rng.normal_matrix(rows, method.rank, scale), Matrix(method.rank, cols)});
    }
    if (method.lowrank_mlp) {
      rest_blocks = mlp_weight_blocks(arch);
      for (const RestBlock& b : rest_blocks) {
        rest_factors.push_back(
            {rng.normal_matrix(b.rows, method.rank, scale), Matrix(method.rank, b.cols)});
      }
    }
  }

  Denoiser current = model;
  auto refresh = [&] {
    if (method.kind == AdaptKind::LowRank) {
      current.set_params(effective_params(base, kv_factors, rest_blocks, rest_factors));
    } else if (method.kind != AdaptKind::EmbeddingOnly) {
      current.set_params(ParamSet::unflatten(sig, theta));
    }
  };

  AdaptResult result;
  result.loss_trajectory.reserve(method.steps);
  if (observer) observer(0, current, embedding);

  for (std::size_t step = 0; step < method.steps; ++step) {
    const Matrix batch = draw_minibatch(data, method.batch_size, rng);
    const LossGrad g = loss(current, batch, embedding, schedule, rng);
    if (!std::isfinite(g.loss) || !finite(g.grad) || !finite(g.grad_embedding.data())) {
      throw AdaptDiverged(result.loss_trajectory, step);
    }
    result.loss_trajectory.push_back(g.loss);

    // Gradients of the trained variables, then one clipped step on all of them.
    std::vector<Matrix> factor_grads;
    double sq = 0.0;
    switch (method.kind) {
      case AdaptKind::FullFineTune:
        for (double v : g.grad) sq += v * v;
        break;
      case AdaptKind::KeyValueOnly:
        for (std::size_t i = 0; i < kv_size; ++i) sq += g.grad[i] * g.grad[i];
        break;
      case AdaptKind::EmbeddingOnly:
        sq = inner(g.grad_embedding, g.grad_embedding);
        break;
      case AdaptKind::LowRank: {
        std::size_t offset = 0;
        auto push = [&](const Matrix& gw, const LowRankFactor& f) {
          factor_grads.push_back(gw * f.b.transposed());
          factor_grads.push_back(transpose_times(f.a, gw));
          sq += inner(factor_grads[factor_grads.size() - 2], factor_grads[factor_grads.size() - 2]);
          sq += inner(factor_grads.back(), factor_grads.back());
        };
        for (std::size_t i = 0; i < kv_factors.size(); ++i) {
          const auto [rows, cols] = sig.kv_shapes[i];
          push(block_of(g.grad, offset, rows, cols), kv_factors[i]);
          offset += rows * cols;
        }
        for (std::size_t i = 0; i < rest_blocks.size(); ++i) {
          const RestBlock& b = rest_blocks[i];
          push(block_of(g.grad, kv_size + b.offset, b.rows, b.cols), rest_factors[i]);
        }
        break;
      }
    }
    const double norm = std::sqrt(sq);
    const double lr = method.max_grad_norm > 0.0 && norm > method.max_grad_norm
                          ? method.lr * method.max_grad_norm / norm
                          : method.lr;

    switch (method.kind) {
      case AdaptKind::FullFineTune:
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * g.grad[i];
        break;
      case AdaptKind::KeyValueOnly:
        for (std::size_t i = 0; i < kv_size; ++i) theta[i] -= lr * g.grad[i];
        break;
      case AdaptKind::EmbeddingOnly:
        embedding -= lr * g.grad_embedding;
        break;
      case AdaptKind::LowRank: {
        std::size_t k = 0;
        for (LowRankFactor& f : kv_factors) {
          f.a -= lr * factor_grads[k++];
          f.b -= lr * factor_grads[k++];
        }
        for (LowRankFactor& f : rest_factors) {
          f.a -= lr * factor_grads[k++];
          f.b -= lr * factor_grads[k++];
        }
        break;
      }
    }
    refresh();
    if (!finite(current.params().flatten()) || !all_finite(embedding)) {
      throw AdaptDiverged(result.loss_trajectory, step);
    }
    if (observer) observer(step + 1, current, embedding);
  }

  result.adapted_params = current.params();
  result.embedding = std::move(embedding);
  result.final_loss = result.loss_trajectory.back();
  return result;
}

}  // namespace mima
